"""Command-line experiments.

Every data-producing command writes a CSV (``#`` metadata lines, then a
header row) and a JSON document with the same rows.  Metadata carries the
tool version, the file schema and a SHA-256 of the resolved configuration;
there are no timestamps, so reruns are byte-identical.

Options can also come from an INI file (``--config``, section
``[experiment]``, keys named like the long options).  Flags win over the
file, the file wins over built-in defaults.  The output directory falls back
to ``$ECALLOC_OUT`` and then ``./ecalloc_out``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import math
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import TOOL_NAME, __version__
from .allocator import (COMPARISON_COLUMNS, COMPARISON_SCHEMA, CURVE_SCHEMA, FOPDA_SCHEMA,
                        MAX_SEQ_DRR, AllocationCurve, Corpus, FopdaFit, InfeasibleError,
                        baseline_points, enumerate_surface, evaluate_allocations, fit_fopda,
                        opda_curve, percent_targets, seq_drr, strategy_table)
from .analytic_model import (FIG1A_COLUMNS, FIG2_COLUMNS, PSNR_INF_SENTINEL,
                             emit_allocation_comparison, emit_model_curves, psnr_from_mse,
                             rows_to_csv)
from .ec_codec import MAX_DRR, compress_frame
from .gop_sim import (REPORT_SCHEMA, CodecConfig, EcPolicy, StreamError, TruncationPolicy,
                      simulate)
from .pixel_io import (PixelIOError, SynthSpec, read_raw_yuv, read_y4m, synth_sequence,
                       synthetic_corpus, write_y4m)

log = logging.getLogger(TOOL_NAME)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
OUT_ENV = "ECALLOC_OUT"
DEFAULT_OUT = "ecalloc_out"
CONFIG_SECTION = "experiment"

MODEL_SCHEMA_1A = "ecalloc.model.fig1a/1"
MODEL_SCHEMA_2 = "ecalloc.model.fig2/1"
COMPRESS_SCHEMA = "ecalloc.compress/1"
SURFACE_CSV_SCHEMA = "ecalloc.surface-table/1"
FOPDA_TABLE_SCHEMA = "ecalloc.fopda-table/1"

# test sequences use seeds this far from the training ones
TEST_SEED_OFFSET = 10
TRAIN_FRAMES = 9
TEST_FRAMES = 100

COMPRESS_COLUMNS = ("target", "achieved_drr", "psnr", "shortfall_blocks", "block_count",
                    *(f"m{m}" for m in range(8)))
SIMULATE_COLUMNS = ("label", "poc", "level", "psnr_wo", "psnr_w", "delta_psnr", "mse_wo",
                    "mse_w", "achieved_drr")
SURFACE_COLUMNS = ("drr1", "drr2", "drr3", "seq_drr", "mean_delta_psnr", "sd_psnr")
CURVE_COLUMNS = ("target", "drr1", "drr2", "drr3", "seq_drr", "mean_delta_psnr", "sd_psnr")
FOPDA_COLUMNS = ("target", "raw1", "raw2", "raw3", "drr1", "drr2", "drr3", "seq_drr")


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# option parsing

def _fraction(text: str) -> Fraction:
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")


def _fraction_list(text: str) -> list[Fraction]:
    return [_fraction(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}")


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 352x288, got {text!r}")
    return w, h


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with an [experiment] section")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _add_input(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("input (default: built-in synthetic corpus)")
    g.add_argument("--y4m", action="append", help="Y4M file; repeat for several sequences")
    g.add_argument("--raw", action="append", help="raw I420 file; needs --size")
    g.add_argument("--size", type=_size, help="WxH of --raw input")
    g.add_argument("--seed", type=int, help="first seed of the synthetic corpus (default 1)")
    g.add_argument("--frames", type=int, help="frames per sequence")


def _add_codec(p: argparse.ArgumentParser, multi_qp: bool = False) -> None:
    if multi_qp:
        p.add_argument("--qp", type=_int_list, help="comma-separated Qp list (default 32)")
    else:
        p.add_argument("--qp", type=int, help="quantisation parameter (default 32)")
    p.add_argument("--search-range", type=int, help="motion search radius, 0 = co-located")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL_NAME, description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model", help="analytic loss curves")
    _add_common(p)
    p.add_argument("--psnr", type=_float_list, help="PSNR_w/o values in dB (default 30,35,40)")
    p.add_argument("--ref-gap", type=float, help="reference minus current PSNR in dB (default 1)")

    p = sub.add_parser("compress", help="fixed-DRR compression sweep over frames")
    _add_common(p)
    _add_input(p)
    p.add_argument("--targets", type=_fraction_list, help="DRR targets (default 0,0.1,...,0.7)")

    p = sub.add_parser("simulate", help="decode one policy through the toy codec")
    _add_common(p)
    _add_input(p)
    _add_codec(p)
    pol = p.add_mutually_exclusive_group()
    pol.add_argument("--drr", type=_fraction_list, help="DRR of levels 1,2,3")
    pol.add_argument("--truncate", type=_int_list, help="truncated LSBs of levels 1,2,3")

    p = sub.add_parser("train", help="surface sweep, opDA curve and fopDA fit")
    _add_common(p)
    _add_input(p)
    _add_codec(p, multi_qp=True)
    p.add_argument("--grid-step", type=_fraction, help="level DRR grid step, 0.10 or 0.02")
    p.add_argument("--targets", type=_fraction_list, help="SeqDRR targets (default 0..0.61)")
    p.add_argument("--segments", type=int, help="fopDA segment count (default 3)")
    p.add_argument("--workers", type=int, help="parallel simulation processes (default 1)")

    p = sub.add_parser("test", help="compare opDA, fopDA, evDA and l3DA on unseen frames")
    _add_common(p)
    _add_input(p)
    _add_codec(p, multi_qp=True)
    p.add_argument("--trained", help="directory holding train outputs (default: --out)")
    p.add_argument("--targets", type=_fraction_list, help="SeqDRR targets (default: trained)")
    p.add_argument("--start-frame", type=int,
                   help=f"first frame read from files (default {TRAIN_FRAMES})")

    p = sub.add_parser("synth", help="write a synthetic sequence as Y4M")
    _add_common(p)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--motion", type=int)
    p.add_argument("--noise", type=int)
    p.add_argument("--output", help="target file (default OUT/synth_seed<seed>.y4m)")
    return parser


DEFAULTS = {
    "model": {"psnr": [30.0, 35.0, 40.0], "ref_gap": 1.0},
    "compress": {"frames": 1, "targets": [Fraction(k, 10) for k in range(8)]},
    "simulate": {"frames": 33, "qp": 32, "search_range": 0},
    "train": {"frames": TRAIN_FRAMES, "qp": [32], "search_range": 0,
              "grid_step": Fraction(1, 10), "segments": 3, "workers": 1},
    "test": {"frames": TEST_FRAMES, "qp": [32], "search_range": 0,
             "start_frame": TRAIN_FRAMES},
    "synth": {"width": 64, "height": 64, "frames": TRAIN_FRAMES, "seed": 1, "motion": 1,
              "noise": 2},
}
SHARED_DEFAULTS = {"seed": 1, "verbose": False}
NOT_HASHED = {"config", "out", "workers", "verbose", "command", "trained", "output"}


def _subparser_actions(parser: argparse.ArgumentParser, command: str) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return {a.dest: a for a in action.choices[command]._actions}
    raise KeyError(command)


def _convert(action: argparse.Action, text: str):
    if isinstance(action, argparse._StoreTrueAction):
        states = configparser.ConfigParser.BOOLEAN_STATES
        if text.lower() not in states:
            raise ValueError(f"not a boolean: {text!r}")
        return states[text.lower()]
    if isinstance(action, argparse._AppendAction):
        items = [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]
        return [action.type(t) if action.type else t for t in items]
    return action.type(text) if action.type else text


def resolve(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Merge flags, the config file and defaults, flags first."""
    actions = _subparser_actions(parser, args.command)
    file_values = {}
    if args.config:
        cp = configparser.ConfigParser()
        try:
            with open(args.config) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}")
        if cp.has_section(CONFIG_SECTION):
            file_values = dict(cp.items(CONFIG_SECTION))
        elif cp.sections():
            raise ConfigError(f"{args.config}: missing [{CONFIG_SECTION}] section")
    for key, text in file_values.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r} for '{args.command}'")
        if getattr(args, dest) is None:
            try:
                setattr(args, dest, _convert(actions[dest], text))
            except (argparse.ArgumentTypeError, ValueError, TypeError) as e:
                raise ConfigError(f"config key {key!r}: {e}")
    for key, value in {**SHARED_DEFAULTS, **DEFAULTS[args.command]}.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    if args.out is None:
        args.out = os.environ.get(OUT_ENV) or DEFAULT_OUT
    _validate(args)
    return args


def _validate(args) -> None:
    for name in ("frames", "width", "height"):
        v = getattr(args, name, None)
        if v is not None and v <= 0:
            raise ConfigError(f"--{name} must be positive")
    if getattr(args, "search_range", None) is not None and args.search_range < 0:
        raise ConfigError("--search-range must be non-negative")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    if getattr(args, "start_frame", None) is not None and args.start_frame < 0:
        raise ConfigError("--start-frame must be non-negative")
    if hasattr(args, "y4m"):
        if args.y4m and args.raw:
            raise ConfigError("give either --y4m or --raw, not both")
        if args.raw and args.size is None:
            raise ConfigError("--raw needs --size WxH")
        for path in (args.y4m or []) + (args.raw or []):
            if not Path(path).is_file():
                raise ConfigError(f"input file not found: {path}")
    if args.command == "train" and args.grid_step not in (Fraction(1, 10), Fraction(1, 50)):
        raise ConfigError("--grid-step must be 0.10 or 0.02")
    for t in getattr(args, "targets", None) or []:
        limit = MAX_DRR if args.command == "compress" else MAX_SEQ_DRR
        if not 0 <= t <= limit:
            raise ConfigError(f"target {float(t)} outside [0, {float(limit)}]")


def config_digest(args) -> tuple[dict, str]:
    """Resolved configuration (minus outputs and worker count) and its SHA-256."""
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k in NOT_HASHED:
            continue
        if isinstance(v, list):
            v = [str(x) if isinstance(x, Fraction) else x for x in v]
        elif isinstance(v, Fraction):
            v = str(v)
        elif isinstance(v, tuple):
            v = list(v)
        cfg[k] = v
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return cfg, hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------------------
# inputs and outputs

def load_inputs(args, test_split: bool = False):
    """Sequences named by the input options.

    Files are read from ``--start-frame`` on for the test split (0
    otherwise); the synthetic corpus moves to different seeds instead.
    """
    start = args.start_frame if test_split else 0
    n = args.frames
    if args.y4m:
        seqs = []
        for path in args.y4m:
            with open(path, "rb") as fh:
                seq = read_y4m(fh, label=Path(path).name)
            if len(seq) <= start:
                raise PixelIOError(f"{path}: only {len(seq)} frames, need more than {start}")
            seqs.append(seq[start:start + n])
        return seqs
    if args.raw:
        w, h = args.size
        return [read_raw_yuv(p, w, h, n, start_frame=start) for p in args.raw]
    base = args.seed + (TEST_SEED_OFFSET if test_split else 0)
    return synthetic_corpus(base, n)


def _meta_lines(schema: str, digest: str, extra=()) -> list[str]:
    return [f"tool: {TOOL_NAME} {__version__}", f"schema: {schema}",
            f"config_sha256: {digest}", *extra]


def _json_clean(v):
    if isinstance(v, float) and math.isinf(v):
        return PSNR_INF_SENTINEL if v > 0 else None
    if isinstance(v, dict):
        return {k: _json_clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_clean(x) for x in v]
    return v


def write_table(out: Path, stem: str, schema: str, rows, columns, args, extra_meta=(),
                extra_json=None) -> list[Path]:
    """CSV and JSON renderings of the same rows."""
    cfg, digest = config_digest(args)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    csv_path.write_text(rows_to_csv(rows, columns, _meta_lines(schema, digest, extra_meta)))
    doc = {"tool": TOOL_NAME, "version": __version__, "schema": schema,
           "config_sha256": digest, "config": cfg, "columns": list(columns),
           "rows": [{c: r[c] for c in columns} for r in rows]}
    if extra_json:
        doc.update(extra_json)
    json_path.write_text(json.dumps(_json_clean(doc), indent=1, sort_keys=False) + "\n")
    return [csv_path, json_path]


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands

def cmd_model(args) -> list[Path]:
    out = _outdir(args)
    psnr = list(args.psnr)
    fig1 = emit_model_curves(psnr, ref_gap_db=args.ref_gap)
    fig2 = emit_allocation_comparison(psnr, ref_gap_db=args.ref_gap)
    files = write_table(out, "fig1a", MODEL_SCHEMA_1A, fig1, FIG1A_COLUMNS, args,
                        ["delta_psnr vs M per psnr_wo; drr = M/8",
                         f"delta2_lower_bound uses current = psnr_wo - {args.ref_gap:g} dB"])
    files += write_table(out, "fig2", MODEL_SCHEMA_2, fig2, FIG2_COLUMNS, args,
                         ["average loss of the two-frame example, even vs non-reference-only"])
    return files


def cmd_compress(args) -> list[Path]:
    out = _outdir(args)
    seqs = load_inputs(args)
    rows = []
    for t in args.targets:
        err = 0.0
        samples = 0
        blocks = short = 0
        drr_sum = 0.0
        hist = np.zeros(8, dtype=np.int64)
        for seq in seqs:
            w, h = seq.source_size or (seq.width, seq.height)
            for frame in seq:
                plane, st = compress_frame(frame, t)
                d = plane.samples[:h, :w].astype(np.float64) - frame.samples[:h, :w]
                err += float(np.sum(d * d))
                samples += w * h
                blocks += st.block_count
                short += st.shortfall_count
                drr_sum += st.mean_achieved_drr * st.block_count
                hist += np.asarray(st.m_histogram)
        row = {"target": float(t), "achieved_drr": drr_sum / blocks,
               "psnr": psnr_from_mse(err / samples), "shortfall_blocks": short,
               "block_count": blocks}
        row.update({f"m{m}": int(c) for m, c in enumerate(hist)})
        rows.append(row)
    labels = [s.label for s in seqs]
    return write_table(out, "compress", COMPRESS_SCHEMA, rows, COMPRESS_COLUMNS, args,
                       [f"psnr {PSNR_INF_SENTINEL} marks a lossless result",
                        *(f"input: {lb}" for lb in labels)])


def _policy(args):
    if args.truncate is not None:
        if len(args.truncate) != 3 or not all(0 <= m <= 7 for m in args.truncate):
            raise ConfigError("--truncate needs three values in 0..7")
        return TruncationPolicy(tuple(args.truncate))
    drr = args.drr if args.drr is not None else [Fraction(0)] * 3
    if len(drr) != 3:
        raise ConfigError("--drr needs three values")
    try:
        return EcPolicy(tuple(drr))
    except ValueError as e:
        raise ConfigError(str(e))


def cmd_simulate(args) -> list[Path]:
    out = _outdir(args)
    policy = _policy(args)
    cfg = CodecConfig(qp=args.qp, search_range=args.search_range)
    rows, reports = [], []
    for seq in load_inputs(args):
        rep = simulate(seq, cfg, policy)
        reports.append(rep.to_dict())
        for r in rep.frame_rows():
            rows.append({"label": rep.label, **r})
    summary = {"mean_delta_psnr": float(np.mean([r["delta_psnr"] for r in rows])),
               "reports": reports}
    return write_table(out, "simulate", REPORT_SCHEMA, rows, SIMULATE_COLUMNS, args,
                       [f"policy: {json.dumps(policy.describe())}"], summary)


def _targets(args) -> list[Fraction]:
    return list(args.targets) if args.targets else percent_targets()


def cmd_train(args) -> list[Path]:
    out = _outdir(args)
    seqs = load_inputs(args)
    targets = _targets(args)
    step_pct = int(args.grid_step * 100)
    files, curves = [], []
    for qp in args.qp:
        corpus = Corpus(seqs, CodecConfig(qp=qp, search_range=args.search_range))
        store = out / f"surface_qp{qp}.jsonl"

        def progress(i, n, qp=qp):
            if i == n or i % 256 == 0:
                log.info("qp %d: %d/%d surface points", qp, i, n)
        surface = enumerate_surface(corpus, step_pct, extra=baseline_points(targets),
                                    store_path=store, workers=args.workers, progress=progress)
        files.append(store)
        srows = [{"drr1": a.drr1 / 100, "drr2": a.drr2 / 100, "drr3": a.drr3 / 100,
                  "seq_drr": float(seq_drr(a)), "mean_delta_psnr": e.mean_delta_psnr,
                  "sd_psnr": e.sd_psnr} for a, e in sorted(surface.entries.items())]
        files += write_table(out, f"surface_qp{qp}", SURFACE_CSV_SCHEMA, srows, SURFACE_COLUMNS,
                             args, [f"qp: {qp}"])
        curve = opda_curve(surface, targets)
        curves.append(curve)
        files += write_table(out, f"opda_qp{qp}", CURVE_SCHEMA, curve.rows(), CURVE_COLUMNS,
                             args, [f"qp: {qp}"], {"curve": curve.to_dict()})
    fit = fit_fopda(curves, args.segments)
    frows = []
    for t in targets:
        raw = fit.raw(t)
        a = fit.allocation(t)
        frows.append({"target": float(t), "raw1": raw[0] / 100, "raw2": raw[1] / 100,
                      "raw3": raw[2] / 100, "drr1": a.drr1 / 100, "drr2": a.drr2 / 100,
                      "drr3": a.drr3 / 100, "seq_drr": float(seq_drr(a))})
    files += write_table(out, "fopda", FOPDA_TABLE_SCHEMA, frows, FOPDA_COLUMNS, args,
                         [f"fitted on qp {','.join(map(str, args.qp))}"],
                         {"fit": fit.to_dict()})
    return files


def _load_doc(path: Path, key: str, schema: str) -> dict:
    if not path.is_file():
        raise ConfigError(f"trained artifact missing: {path} (run 'train' first)")
    doc = json.loads(path.read_text())
    if key not in doc or doc[key].get("schema") != schema:
        raise ConfigError(f"{path} is not a trained {schema} file")
    return doc[key]


def cmd_test(args) -> list[Path]:
    out = _outdir(args)
    trained = Path(args.trained) if args.trained else out
    fit = FopdaFit.from_dict(_load_doc(trained / "fopda.json", "fit", FOPDA_SCHEMA))
    curves = {qp: AllocationCurve.from_dict(_load_doc(trained / f"opda_qp{qp}.json", "curve",
                                                      CURVE_SCHEMA)) for qp in args.qp}
    seqs = load_inputs(args, test_split=True)
    rows = []
    for qp, curve in curves.items():
        targets = list(args.targets) if args.targets else [e.target for e in curve.entries]
        corpus = Corpus(seqs, CodecConfig(qp=qp, search_range=args.search_range))
        for r in evaluate_allocations(corpus, strategy_table(curve, fit), targets):
            rows.append({"qp": qp, **r})
    return write_table(out, "comparison", COMPARISON_SCHEMA, rows, ("qp", *COMPARISON_COLUMNS),
                       args, ["infeasible (target, strategy) pairs are omitted",
                              *(f"input: {s.label}" for s in seqs)])


def cmd_synth(args) -> list[Path]:
    spec = SynthSpec(width=args.width, height=args.height, frame_count=args.frames,
                     seed=args.seed, motion_px_per_frame=args.motion, noise_amplitude=args.noise)
    if spec.noise_amplitude < 0:
        raise ConfigError("--noise must be non-negative")
    path = Path(args.output) if args.output else _outdir(args) / f"synth_seed{args.seed}.y4m"
    path.parent.mkdir(parents=True, exist_ok=True)
    seq = synth_sequence(spec)
    with open(path, "wb") as fh:
        write_y4m(seq, fh)
    return [path]


COMMANDS = {"model": cmd_model, "compress": cmd_compress, "simulate": cmd_simulate,
            "train": cmd_train, "test": cmd_test, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = resolve(parser, args)
    except ConfigError as e:
        print(f"{TOOL_NAME}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        files = COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"{TOOL_NAME}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (PixelIOError, StreamError, InfeasibleError, OSError, ValueError) as e:
        print(f"{TOOL_NAME}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
