"""Frame-level DRR allocation over the three B levels of a GOP of 8.

Allocations live on a 2% grid per level and are stored as integer
percents, so the sequence-level DRR

    seq_drr = drr1/8 + drr2/4 + drr3/2

is an exact rational with denominator 800.  A target's isoDRR band holds
every allocation whose seq_drr is within 0.5% of the target.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .ec_codec import drr_fraction
from .gop_sim import CodecConfig, EcPolicy, EncodedStream, encode, simulate
from .piecewise import PiecewiseFit, Segment, fit_piecewise
from .pixel_io import VideoSequence

GRID_PCT = 2
MAX_LEVEL_PCT = 70
LEVEL_WEIGHTS = (1, 2, 4)  # seq_drr numerators over 800 per percent point
SEQ_DENOM = 800
BAND_HALF_WIDTH = Fraction(1, 200)
MAX_SEQ_DRR = Fraction(sum(w * MAX_LEVEL_PCT for w in LEVEL_WEIGHTS), SEQ_DENOM)
L3DA_MAX = Fraction(MAX_LEVEL_PCT, 200)

SURFACE_SCHEMA = "ecalloc.surface/1"
CURVE_SCHEMA = "ecalloc.curve/1"
FOPDA_SCHEMA = "ecalloc.fopda/1"
COMPARISON_SCHEMA = "ecalloc.comparison/1"


class InfeasibleError(ValueError):
    """No allocation reaches the requested SeqDRR."""


@dataclass(frozen=True, order=True)
class DrrAllocation:
    drr1: int
    drr2: int
    drr3: int

    def __post_init__(self):
        for v in self.pcts:
            if not isinstance(v, (int, np.integer)) or v % GRID_PCT or not 0 <= v <= MAX_LEVEL_PCT:
                raise ValueError(f"level DRR {v}% is not on the {GRID_PCT}% grid "
                                 f"in [0, {MAX_LEVEL_PCT}]")
        object.__setattr__(self, "drr1", int(self.drr1))
        object.__setattr__(self, "drr2", int(self.drr2))
        object.__setattr__(self, "drr3", int(self.drr3))

    @classmethod
    def from_fractions(cls, d1, d2, d3) -> "DrrAllocation":
        pcts = [drr_fraction(d) * 100 for d in (d1, d2, d3)]
        if any(p.denominator != 1 for p in pcts):
            raise ValueError(f"{(d1, d2, d3)} is not on the integer-percent grid")
        return cls(*(int(p) for p in pcts))

    @property
    def pcts(self) -> tuple[int, int, int]:
        return (self.drr1, self.drr2, self.drr3)

    @property
    def fractions(self) -> tuple[Fraction, Fraction, Fraction]:
        return tuple(Fraction(p, 100) for p in self.pcts)

    def policy(self) -> EcPolicy:
        return EcPolicy(self.fractions)

    def __str__(self):
        return f"({self.drr1}%, {self.drr2}%, {self.drr3}%)"


def seq_drr(alloc: DrrAllocation) -> Fraction:
    return Fraction(sum(w * p for w, p in zip(LEVEL_WEIGHTS, alloc.pcts)), SEQ_DENOM)


def in_band(alloc: DrrAllocation, target) -> bool:
    return abs(seq_drr(alloc) - drr_fraction(target)) <= BAND_HALF_WIDTH


def grid_values(step_pct: int) -> list[int]:
    if step_pct <= 0 or step_pct % GRID_PCT or MAX_LEVEL_PCT % step_pct:
        raise ValueError(f"grid step {step_pct}% must be a multiple of {GRID_PCT}% "
                         f"dividing {MAX_LEVEL_PCT}%")
    return list(range(0, MAX_LEVEL_PCT + 1, step_pct))


def grid_allocations(step_pct: int) -> list[DrrAllocation]:
    vals = grid_values(step_pct)
    return [DrrAllocation(a, b, c) for a, b, c in itertools.product(vals, repeat=3)]


def percent_targets(lo: int = 0, hi: int | None = None) -> list[Fraction]:
    """Targets on the 1% grid from lo% up to the feasible maximum."""
    top = math.floor(MAX_SEQ_DRR * 100) if hi is None else hi
    return [Fraction(t, 100) for t in range(lo, top + 1)]


def _snap_pct(x: Fraction) -> int:
    """Nearest grid percent, halves rounded up, clamped to the level range."""
    v = GRID_PCT * math.floor(Fraction(x) / GRID_PCT + Fraction(1, 2))
    return min(max(v, 0), MAX_LEVEL_PCT)


def snap_to_band(raw_pct: Sequence, target, reach: int = 2) -> DrrAllocation:
    """Grid allocation closest to ``raw_pct`` whose seq_drr lies in the target band.

    Plain rounding is tried first.  Otherwise every level may move up to
    ``reach`` grid steps; when the raw values are weakly increasing with
    level, candidates that keep that order are preferred.
    """
    raw = [Fraction(r) if not isinstance(r, float) else Fraction(repr(r)) for r in raw_pct]
    raw = [min(max(r, Fraction(0)), Fraction(MAX_LEVEL_PCT)) for r in raw]
    base = DrrAllocation(*(_snap_pct(r) for r in raw))
    if in_band(base, target):
        return base
    choices = [sorted({min(max(b + GRID_PCT * k, 0), MAX_LEVEL_PCT)
                       for k in range(-reach, reach + 1)}) for b in base.pcts]
    cands = [DrrAllocation(*c) for c in itertools.product(*choices)]
    cands = [c for c in cands if in_band(c, target)]
    if not cands:
        raise InfeasibleError(f"no grid allocation near {[float(r) for r in raw]}% "
                              f"reaches SeqDRR {float(drr_fraction(target)):.4f}")
    if raw[0] <= raw[1] <= raw[2]:
        ordered = [c for c in cands if c.drr1 <= c.drr2 <= c.drr3]
        cands = ordered or cands

    def dev(c):
        return sum((p - r) ** 2 for p, r in zip(c.pcts, raw))
    return min(cands, key=lambda c: (dev(c), c.pcts))


def baseline_evda(target) -> DrrAllocation:
    """Even allocation: the same DRR on every B level."""
    t = drr_fraction(target)
    if not 0 <= t <= MAX_SEQ_DRR:
        raise InfeasibleError(f"evDA cannot reach SeqDRR {float(t)}")
    d = t * 100 * 8 / 7
    if d > MAX_LEVEL_PCT:
        raise InfeasibleError(f"evDA needs {float(d)}% per level")
    return snap_to_band((d, d, d), t)


def baseline_l3da(target) -> DrrAllocation:
    """Non-reference-only allocation: all loss on level 3."""
    t = drr_fraction(target)
    if not 0 <= t <= L3DA_MAX:
        raise InfeasibleError(f"l3DA cannot reach SeqDRR {float(t)} (max {float(L3DA_MAX)})")
    return DrrAllocation(0, 0, _snap_pct(2 * t * 100))


# --------------------------------------------------------------------------
# evaluation on a corpus

@dataclass(frozen=True)
class SurfaceEntry:
    mean_delta_psnr: float
    sd_psnr: float


class Corpus:
    """Sequences encoded once at one codec configuration."""

    def __init__(self, sequences: Sequence[VideoSequence], cfg: CodecConfig):
        self.sequences = list(sequences)
        self.cfg = cfg
        self.streams: list[EncodedStream] = [encode(s, cfg) for s in self.sequences]

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.sequences]

    def evaluate(self, alloc: DrrAllocation) -> SurfaceEntry:
        """Pooled per-frame mean dPSNR and the mean over sequences of SD(PSNR_w)."""
        policy = alloc.policy()
        deltas, sds = [], []
        for seq, stream in zip(self.sequences, self.streams):
            rep = simulate(seq, self.cfg, policy, stream)
            deltas.extend(rep.delta_psnr)
            sds.append(rep.sd_psnr_w)
        return SurfaceEntry(float(np.mean(deltas)), float(np.mean(sds)))


_WORKER_CORPUS: Corpus | None = None


def _init_worker(sequences, cfg):
    global _WORKER_CORPUS
    _WORKER_CORPUS = Corpus(sequences, cfg)


def _worker_eval(alloc):
    return _WORKER_CORPUS.evaluate(alloc)


@dataclass
class AllocationSurface:
    entries: dict[DrrAllocation, SurfaceEntry] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def band(self, target) -> list[DrrAllocation]:
        return [a for a in self.entries if in_band(a, target)]

    # persistence: first line is a header record, then one entry per line
    def header(self) -> dict:
        return {"schema": SURFACE_SCHEMA, "provenance": self.provenance}

    @staticmethod
    def entry_line(alloc: DrrAllocation, e: SurfaceEntry) -> str:
        return json.dumps({"drr_pct": list(alloc.pcts), "seq_drr": float(seq_drr(alloc)),
                           "mean_delta_psnr": e.mean_delta_psnr, "sd_psnr": e.sd_psnr})

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header()) + "\n")
            for a in sorted(self.entries):
                fh.write(self.entry_line(a, self.entries[a]) + "\n")

    @classmethod
    def load(cls, path) -> "AllocationSurface":
        surface = cls()
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise ValueError(f"{path}: empty surface file")
        head = json.loads(lines[0])
        if head.get("schema") != SURFACE_SCHEMA:
            raise ValueError(f"{path}: not a {SURFACE_SCHEMA} file")
        surface.provenance = head.get("provenance", {})
        for line in lines[1:]:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                # a write cut short by an interruption; the point is redone on resume
                continue
            surface.entries[DrrAllocation(*rec["drr_pct"])] = SurfaceEntry(
                rec["mean_delta_psnr"], rec["sd_psnr"])
        return surface


def _drop_partial_tail(path) -> None:
    """Cut an unterminated last line left behind by an interrupted write."""
    with open(path, "rb+") as fh:
        data = fh.read()
        if data and not data.endswith(b"\n"):
            fh.truncate(data.rfind(b"\n") + 1)


def enumerate_surface(corpus: Corpus, grid_step_pct: int = 10,
                      extra: Iterable[DrrAllocation] = (),
                      store_path: str | os.PathLike | None = None,
                      workers: int = 1,
                      progress: Callable[[int, int], None] | None = None) -> AllocationSurface:
    """Simulate every grid allocation (plus ``extra`` points) on the corpus.

    With ``store_path`` each finished point is appended to a line-delimited
    file; points already present there are not simulated again.
    """
    provenance = {"sequences": corpus.labels, "qp": corpus.cfg.qp,
                  "search_range": corpus.cfg.search_range,
                  "intra_period": corpus.cfg.intra_period, "grid_step_pct": grid_step_pct}
    surface = AllocationSurface(provenance=provenance)
    if store_path is not None and os.path.exists(store_path) and os.path.getsize(store_path):
        prior = AllocationSurface.load(store_path)
        if prior.provenance != provenance:
            raise ValueError(f"{store_path} was produced with a different configuration")
        surface.entries.update(prior.entries)

    wanted = list(dict.fromkeys([*grid_allocations(grid_step_pct), *extra]))
    todo = [a for a in wanted if a not in surface.entries]

    fh = None
    if store_path is not None:
        fresh = not os.path.exists(store_path) or not os.path.getsize(store_path)
        if not fresh:
            _drop_partial_tail(store_path)
        fh = open(store_path, "a")
        if fresh:
            fh.write(json.dumps(surface.header()) + "\n")
            fh.flush()
    try:
        if workers > 1 and len(todo) > 1:
            pool = ProcessPoolExecutor(workers, initializer=_init_worker,
                                       initargs=(corpus.sequences, corpus.cfg))
            results = pool.map(_worker_eval, todo, chunksize=max(1, len(todo) // (8 * workers)))
        else:
            pool = None
            results = map(corpus.evaluate, todo)
        for i, (alloc, entry) in enumerate(zip(todo, results), 1):
            surface.entries[alloc] = entry
            if fh is not None:
                fh.write(AllocationSurface.entry_line(alloc, entry) + "\n")
                fh.flush()
            if progress is not None:
                progress(i, len(todo))
        if pool is not None:
            pool.shutdown()
    finally:
        if fh is not None:
            fh.close()
    return surface


# --------------------------------------------------------------------------
# search

@dataclass(frozen=True)
class CurveEntry:
    target: Fraction
    alloc: DrrAllocation
    mean_delta_psnr: float
    sd_psnr: float


def _rank(surface: AllocationSurface, a: DrrAllocation):
    return (surface.entries[a].mean_delta_psnr, a.pcts)


def min_delta_psnr_23(surface: AllocationSurface, drr1_pct: int, target) -> tuple[DrrAllocation, float]:
    """Best (drr2, drr3) for a fixed drr1 inside the target's isoDRR band."""
    t = drr_fraction(target)
    members = [a for a in surface.entries if a.drr1 == drr1_pct and in_band(a, t)]
    if not members:
        raise InfeasibleError(f"no surface point with drr1={drr1_pct}% in the "
                              f"{float(t):.4f} band")
    best = min(members, key=lambda a: _rank(surface, a))
    return best, surface.entries[best].mean_delta_psnr


def opda_search(surface: AllocationSurface, target) -> CurveEntry:
    """Minimum-loss allocation in the band, found level 1 first.

    Ties go to the lower drr1, then the lower drr2.
    """
    t = drr_fraction(target)
    if not 0 <= t <= MAX_SEQ_DRR:
        raise InfeasibleError(f"SeqDRR {float(t)} is above the maximum {float(MAX_SEQ_DRR)}")
    per_drr1 = []
    for d1 in sorted({a.drr1 for a in surface.entries}):
        try:
            per_drr1.append(min_delta_psnr_23(surface, d1, t))
        except InfeasibleError:
            continue
    if not per_drr1:
        raise InfeasibleError(f"surface has no point in the {float(t):.4f} band")
    alloc, _ = min(per_drr1, key=lambda r: (r[1], r[0].pcts))
    e = surface.entries[alloc]
    return CurveEntry(t, alloc, e.mean_delta_psnr, e.sd_psnr)


@dataclass
class AllocationCurve:
    entries: list[CurveEntry] = field(default_factory=list)
    qp: int | None = None

    def lookup(self, target) -> DrrAllocation:
        t = drr_fraction(target)
        for e in self.entries:
            if e.target == t:
                return e.alloc
        raise InfeasibleError(f"no trained allocation for SeqDRR {float(t):.4f}")

    def rows(self) -> list[dict]:
        return [{"target": float(e.target), "drr1": e.alloc.drr1 / 100, "drr2": e.alloc.drr2 / 100,
                 "drr3": e.alloc.drr3 / 100, "seq_drr": float(seq_drr(e.alloc)),
                 "mean_delta_psnr": e.mean_delta_psnr, "sd_psnr": e.sd_psnr}
                for e in self.entries]

    def to_dict(self) -> dict:
        return {"schema": CURVE_SCHEMA, "qp": self.qp,
                "entries": [{"target_pct": float(e.target * 100), "drr_pct": list(e.alloc.pcts),
                             "mean_delta_psnr": e.mean_delta_psnr, "sd_psnr": e.sd_psnr}
                            for e in self.entries]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AllocationCurve":
        if d.get("schema") != CURVE_SCHEMA:
            raise ValueError(f"not a {CURVE_SCHEMA} document")
        entries = [CurveEntry(Fraction(repr(e["target_pct"])) / 100, DrrAllocation(*e["drr_pct"]),
                              e["mean_delta_psnr"], e["sd_psnr"]) for e in d["entries"]]
        return cls(entries, d.get("qp"))


def opda_curve(surface: AllocationSurface, targets: Iterable = None) -> AllocationCurve:
    targets = percent_targets() if targets is None else targets
    entries = []
    for t in targets:
        try:
            entries.append(opda_search(surface, t))
        except InfeasibleError:
            continue
    return AllocationCurve(entries, surface.provenance.get("qp"))


# --------------------------------------------------------------------------
# piecewise-linear simplification

@dataclass(frozen=True)
class FopdaFit:
    fit: PiecewiseFit

    def raw(self, target) -> np.ndarray:
        """Fitted level DRRs in percent, before clamping and snapping."""
        return self.fit(float(drr_fraction(target)) * 100)

    def allocation(self, target) -> DrrAllocation:
        t = drr_fraction(target)
        if not 0 <= t <= MAX_SEQ_DRR:
            raise InfeasibleError(f"SeqDRR {float(t)} outside the fitted range")
        if t == 0:
            # a zero target asks for no loss, whatever the fitted intercepts
            return DrrAllocation(0, 0, 0)
        return snap_to_band(self.raw(t).tolist(), t)

    def to_dict(self) -> dict:
        return {"schema": FOPDA_SCHEMA, "x_unit": "seq_drr_pct", "y_unit": "level_drr_pct",
                "segments": [{"x_start": s.x_start, "x_end": s.x_end,
                              "level_lines": [{"slope": a, "intercept": b} for a, b in s.coef]}
                             for s in self.fit.segments]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FopdaFit":
        if d.get("schema") != FOPDA_SCHEMA:
            raise ValueError(f"not a {FOPDA_SCHEMA} document")
        segs = tuple(Segment(s["x_start"], s["x_end"],
                             tuple((ln["slope"], ln["intercept"]) for ln in s["level_lines"]))
                     for s in d["segments"])
        return cls(PiecewiseFit(segs))


def fit_fopda(curves: AllocationCurve | Sequence[AllocationCurve], segment_count: int = 3) -> FopdaFit:
    """Piecewise-linear fit of the opDA level DRRs against SeqDRR.

    Several curves (one per Qp) are averaged pointwise over their common
    targets before fitting.
    """
    if isinstance(curves, AllocationCurve):
        curves = [curves]
    if not curves or not all(c.entries for c in curves):
        raise ValueError("cannot fit an empty allocation curve")
    common = set.intersection(*({e.target for e in c.entries} for c in curves))
    targets = sorted(common)
    if len(targets) < 2 * segment_count:
        raise ValueError(f"{len(targets)} targets cannot support {segment_count} segments")
    ys = []
    for t in targets:
        pts = [c.lookup(t).pcts for c in curves]
        ys.append(np.mean(np.array(pts, dtype=np.float64), axis=0))
    x = np.array([float(t) * 100 for t in targets])
    return FopdaFit(fit_piecewise(x, np.array(ys), segment_count))


# --------------------------------------------------------------------------
# comparison

STRATEGIES = ("opDA", "fopDA", "evDA", "l3DA")
COMPARISON_COLUMNS = ("target", "strategy", "drr1", "drr2", "drr3", "seq_drr",
                      "mean_delta_psnr", "sd_psnr")


def strategy_table(curve: AllocationCurve | None = None,
                   fopda: FopdaFit | None = None) -> dict[str, Callable]:
    table: dict[str, Callable] = {}
    if curve is not None:
        table["opDA"] = curve.lookup
    if fopda is not None:
        table["fopDA"] = fopda.allocation
    table["evDA"] = baseline_evda
    table["l3DA"] = baseline_l3da
    return table


def evaluate_allocations(corpus: Corpus, strategies: Mapping[str, Callable],
                         targets: Iterable, cache: dict | None = None) -> list[dict]:
    """One row per feasible (target, strategy); infeasible pairs are left out."""
    cache = {} if cache is None else cache
    rows = []
    for t in targets:
        t = drr_fraction(t)
        for name, pick in strategies.items():
            try:
                alloc = pick(t)
            except InfeasibleError:
                continue
            if alloc not in cache:
                cache[alloc] = corpus.evaluate(alloc)
            e = cache[alloc]
            rows.append({"target": float(t), "strategy": name,
                         "drr1": alloc.drr1 / 100, "drr2": alloc.drr2 / 100,
                         "drr3": alloc.drr3 / 100, "seq_drr": float(seq_drr(alloc)),
                         "mean_delta_psnr": e.mean_delta_psnr, "sd_psnr": e.sd_psnr})
    return rows


def baseline_points(targets: Iterable) -> list[DrrAllocation]:
    """evDA and l3DA allocations for every feasible target."""
    pts = []
    for t in targets:
        for pick in (baseline_evda, baseline_l3da):
            try:
                pts.append(pick(t))
            except InfeasibleError:
                pass
    return list(dict.fromkeys(pts))
