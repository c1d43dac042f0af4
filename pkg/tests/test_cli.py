import csv
import json

import numpy as np
import pytest

from ecalloc.cli import main
from ecalloc.pixel_io import FramePlane, VideoSequence, read_y4m, write_y4m


def read_csv(path):
    lines = path.read_text().splitlines()
    meta = [ln for ln in lines if ln.startswith("#")]
    rows = list(csv.DictReader(ln for ln in lines if not ln.startswith("#")))
    return meta, rows


def test_model_default(tmp_path):
    assert main(["model", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("*.csv")) == ["fig1a.csv", "fig2.csv"]
    meta, rows = read_csv(tmp_path / "fig1a.csv")
    assert {r["psnr_wo"] for r in rows} == {"30", "35", "40"}
    assert any(m.startswith("# config_sha256: ") for m in meta)
    assert any("ecalloc 0.1.0" in m for m in meta)
    doc = json.loads((tmp_path / "fig1a.json").read_text())
    assert len(doc["rows"]) == 24


def test_model_rerun_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["model", "--out", str(a)])
    main(["model", "--out", str(b)])
    for name in ("fig1a.csv", "fig2.csv", "fig1a.json", "fig2.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_model_psnr_groups(tmp_path):
    main(["model", "--out", str(tmp_path), "--psnr", "32,38"])
    _, rows = read_csv(tmp_path / "fig1a.csv")
    assert len(rows) == 16


def test_env_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("ECALLOC_OUT", str(tmp_path / "env"))
    assert main(["model"]) == 0
    assert (tmp_path / "env" / "fig2.csv").exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"[experiment]\npsnr = 33\nout = {tmp_path / 'fromcfg'}\n")
    assert main(["model", "--config", str(cfg)]) == 0
    _, rows = read_csv(tmp_path / "fromcfg" / "fig1a.csv")
    assert {r["psnr_wo"] for r in rows} == {"33"}
    assert main(["model", "--config", str(cfg), "--psnr", "31"]) == 0
    _, rows = read_csv(tmp_path / "fromcfg" / "fig1a.csv")
    assert {r["psnr_wo"] for r in rows} == {"31"}


def test_config_hash_tracks_settings(tmp_path):
    main(["model", "--out", str(tmp_path / "a")])
    main(["model", "--out", str(tmp_path / "b"), "--ref-gap", "2"])
    ha = read_csv(tmp_path / "a" / "fig1a.csv")[0][2]
    hb = read_csv(tmp_path / "b" / "fig1a.csv")[0][2]
    assert ha != hb


@pytest.mark.parametrize("argv", [
    ["compress", "--y4m", "/nonexistent.y4m"],
    ["compress", "--targets", "0.8"],
    ["train", "--grid-step", "0.05"],
    ["simulate", "--drr", "0.1,0.2"],
    ["test", "--frames", "0"],
])
def test_config_errors_exit_2(tmp_path, argv):
    assert main(argv + ["--out", str(tmp_path)]) == 2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\nbogus = 1\n")
    assert main(["model", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_argparse_error_exit_2():
    with pytest.raises(SystemExit) as e:
        main(["compress", "--targets", "abc"])
    assert e.value.code == 2


def test_runtime_error_exit_3(tmp_path):
    bad = tmp_path / "bad.y4m"
    bad.write_bytes(b"YUV4MPEG2 W16 H16 C420\nFRAME\n" + bytes(10))
    assert main(["compress", "--y4m", str(bad), "--out", str(tmp_path)]) == 3


def test_compress_sweep(tmp_path):
    assert main(["compress", "--out", str(tmp_path), "--targets", "0,0.2,0.4,0.6"]) == 0
    meta, rows = read_csv(tmp_path / "compress.csv")
    psnr = [float(r["psnr"]) for r in rows]
    assert psnr[0] == 99.99
    assert all(b <= a for a, b in zip(psnr, psnr[1:]))
    for r in rows:
        assert float(r["achieved_drr"]) >= 0
        assert sum(int(r[f"m{m}"]) for m in range(8)) == int(r["block_count"])


def test_compress_noise_reports_shortfall(tmp_path):
    rng = np.random.default_rng(0)
    seq = VideoSequence((FramePlane(rng.integers(0, 256, (32, 32), dtype=np.uint8)),))
    path = tmp_path / "noise.y4m"
    with open(path, "wb") as fh:
        write_y4m(seq, fh)
    main(["compress", "--y4m", str(path), "--out", str(tmp_path), "--targets", "0.7"])
    _, rows = read_csv(tmp_path / "compress.csv")
    assert int(rows[0]["shortfall_blocks"]) > 0


def test_simulate(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--frames", "9", "--drr", "0,0,0.5"]) == 0
    _, rows = read_csv(tmp_path / "simulate.csv")
    assert len(rows) == 27
    for r in rows:
        if int(r["level"]) < 3:
            assert float(r["delta_psnr"]) == 0
    doc = json.loads((tmp_path / "simulate.json").read_text())
    assert doc["schema"] == "ecalloc.simulation/1" and len(doc["reports"]) == 3


def test_synth_roundtrip(tmp_path):
    out = tmp_path / "s.y4m"
    assert main(["synth", "--output", str(out), "--frames", "3", "--width", "20",
                 "--height", "12", "--seed", "4"]) == 0
    seq = read_y4m(out.read_bytes())
    assert len(seq) == 3 and seq.source_size == (20, 12)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    args = ["train", "--out", str(out), "--targets", ",".join(f"0.{k:02d}" for k in range(0, 46, 3))]
    assert main(args) == 0
    return out, args


def test_train_artifacts(trained):
    out, _ = trained
    for name in ("surface_qp32.jsonl", "opda_qp32.csv", "opda_qp32.json", "fopda.json",
                 "fopda.csv", "surface_qp32.csv"):
        assert (out / name).exists()
    lines = (out / "surface_qp32.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["schema"] == "ecalloc.surface/1"
    assert len(lines) - 1 >= 512


def test_train_resume_skips_done(trained, capsys):
    out, args = trained
    before = (out / "surface_qp32.jsonl").read_bytes()
    opda = (out / "opda_qp32.csv").read_bytes()
    assert main(args) == 0
    assert (out / "surface_qp32.jsonl").read_bytes() == before
    assert (out / "opda_qp32.csv").read_bytes() == opda


def test_test_command(trained, tmp_path):
    out, _ = trained
    assert main(["test", "--trained", str(out), "--out", str(tmp_path), "--frames", "17",
                 "--targets", "0,0.12,0.36,0.45"]) == 0
    _, rows = read_csv(tmp_path / "comparison.csv")
    keys = [(r["target"], r["strategy"]) for r in rows]
    # l3DA stops at 35%
    assert len(keys) == len(set(keys)) == 4 * 4 - 2
    assert ("0.36", "l3DA") not in keys and ("0.45", "l3DA") not in keys
    for r in rows:
        if float(r["target"]) == 0:
            assert float(r["mean_delta_psnr"]) == 0
            assert r["drr1"] == r["drr2"] == r["drr3"] == "0"


def test_test_needs_training(tmp_path):
    assert main(["test", "--out", str(tmp_path), "--frames", "9"]) == 2


def test_test_uses_disjoint_frames_from_files(tmp_path):
    frames = tuple(FramePlane(np.full((16, 16), i * 10, np.uint8)) for i in range(20))
    path = tmp_path / "ramp.y4m"
    with open(path, "wb") as fh:
        write_y4m(VideoSequence(frames), fh)
    from ecalloc.cli import build_parser, load_inputs, resolve
    parser = build_parser()
    args = resolve(parser, parser.parse_args(["test", "--y4m", str(path), "--out", str(tmp_path)]))
    seq = load_inputs(args, test_split=True)[0]
    assert len(seq) == 11 and seq[0].samples[0, 0] == 90
