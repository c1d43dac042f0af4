"""The twelve acceptance criteria, each at its stated tolerance and runtime.

Every test records a one-line verdict; the conftest hook prints them as a
block at the end of the run.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from ecalloc.allocator import (Corpus, InfeasibleError, baseline_evda, baseline_l3da,
                               baseline_points, enumerate_surface, evaluate_allocations,
                               fit_fopda, opda_curve, opda_search, percent_targets)
from ecalloc.analytic_model import (PropagationScenario, QualityPoint, delta2_psnr_lower_bound,
                                    delta_psnr_current, ec_error_second_moment)
from ecalloc.bitio import BitReader, BitWriter
from ecalloc.ec_codec import CompressedBlock, compress_block, compress_plane, encode_block, truncate_lsb
from ecalloc.gop_sim import GOP, NO_EC, CodecConfig, EcPolicy, TruncationPolicy, decode, encode, simulate
from ecalloc.pixel_io import synthetic_corpus

QPS = (22, 27, 32, 37)
BLOCK_COUNT = 10_000
BLOCK_TARGETS = (0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


def verdict(record_property, ok, detail):
    record_property("detail", detail)
    print(f"{'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# --------------------------------------------------------------------------
# shared data

@pytest.fixture(scope="session")
def block_corpus():
    """Random 8x8 blocks over a spread of local amplitudes, smooth to pure noise."""
    rng = np.random.default_rng(2024)
    amps = rng.choice([0, 1, 2, 4, 8, 16, 48, 255], size=BLOCK_COUNT)
    base = rng.integers(0, 256, size=BLOCK_COUNT)
    blocks = []
    for a, b in zip(amps, base):
        blk = b + rng.integers(-a, a, size=(8, 8), endpoint=True)
        blocks.append(np.clip(blk, 0, 255))
    return blocks


def serialized_bits(cb):
    w = BitWriter()
    cb.write(w)
    return w.bit_length, w.getvalue()


class Training:
    """The training-side sweep shared by criteria 8 to 11."""

    def __init__(self):
        t0 = time.perf_counter()
        self.targets = percent_targets()
        self.corpus = Corpus(synthetic_corpus(1, 9), CodecConfig(qp=32))
        self.grid = enumerate_surface(self.corpus, 10)
        self.surface = enumerate_surface(self.corpus, 10, extra=baseline_points(self.targets))
        self.curve = opda_curve(self.surface, self.targets)
        self.seconds = time.perf_counter() - t0


@pytest.fixture(scope="session")
def training():
    return Training()


# --------------------------------------------------------------------------
# 1-3: model

def test_c01_moment_oracle(record_property):
    def run():
        bad = []
        v = np.arange(256)
        for m in range(1, 8):
            err = [int(e) for e in truncate_lsb(v, m) - v]
            moment = Fraction(sum(e * e for e in err), len(err))
            want = Fraction(4 ** m, 12) + Fraction(1, 6)
            if moment != want or ec_error_second_moment(m) != float(want):
                bad.append(m)
        return bad
    bad, secs = timed(run)
    verdict(record_property, not bad and secs < 1,
            f"exact E[e^2] for M=1..7, mismatches {bad}, {secs:.3f}s (<1s)")


def test_c02_convexity(record_property):
    def run():
        worst = np.inf
        for mse in np.geomspace(1.0, 1000.0, 100):
            d = [delta_psnr_current(mse, m) for m in range(8)]
            worst = min(worst, min(d[i + 1] - 2 * d[i] + d[i - 1] for i in range(1, 7)))
        return worst
    worst, secs = timed(run)
    verdict(record_property, worst >= -1e-12 and secs < 1,
            f"min second difference {worst:.3e} (>= -1e-12) over 100 mse_wo in [1, 1000], "
            f"{secs:.3f}s (<1s)")


def test_c03_delta2_positive(record_property):
    def run():
        worst = np.inf
        for m in range(2, 8):
            for pr in np.round(np.arange(30, 40.0001, 0.1), 1):
                for gap in np.round(np.arange(0, 2.0001, 0.1), 1):
                    s = PropagationScenario(QualityPoint.from_psnr(pr),
                                            QualityPoint.from_psnr(pr - gap), m)
                    worst = min(worst, delta2_psnr_lower_bound(s))
        return worst
    worst, secs = timed(run)
    verdict(record_property, worst > 0 and secs < 5,
            f"min bound {worst:.4f} dB over M=2..7, PSNR_r 30..40, gap 0..2, {secs:.2f}s (<5s)")


# --------------------------------------------------------------------------
# 4-5: codec

def test_c04_codec_roundtrip(record_property, block_corpus):
    rng = np.random.default_rng(4)
    ms = rng.integers(1, 8, size=len(block_corpus))

    def run():
        bad = 0
        for blk, m in zip(block_corpus, ms):
            for mm in (0, int(m)):
                cb = encode_block(blk, mm)
                _, data = serialized_bits(cb)
                back = CompressedBlock.read(BitReader(data)).decode()
                want = blk if mm == 0 else truncate_lsb(blk, mm)
                bad += not np.array_equal(back, want)
        return bad
    bad, secs = timed(run)
    verdict(record_property, bad == 0 and secs < 10,
            f"{bad} mismatches over {len(block_corpus)} blocks at M=0 and one M in 1..7, "
            f"{secs:.2f}s (<10s)")


def test_c05_fixed_drr_contract(record_property, block_corpus):
    rng = np.random.default_rng(5)
    targets = rng.choice(len(BLOCK_TARGETS), size=len(block_corpus))

    def run():
        oracle_bad = contract_bad = 0
        for blk, ti in zip(block_corpus, targets):
            t = BLOCK_TARGETS[ti]
            r = compress_block(blk, t)
            if t == 0:
                # lossless mode: M=0 always, flagged only if SBT expands the block
                want = (0, serialized_bits(encode_block(blk, 0))[0] > 512)
            else:
                limit = 512 * (1 - Fraction(str(t)))
                fits = [m for m in range(8) if serialized_bits(encode_block(blk, m))[0] <= limit]
                want = (fits[0], False) if fits else (7, True)
            oracle_bad += (r.compressed.m, r.shortfall) != want
            if not r.shortfall and r.achieved_drr < Fraction(str(t)):
                contract_bad += 1
        return oracle_bad, contract_bad
    (oracle_bad, contract_bad), secs = timed(run)
    verdict(record_property, oracle_bad == 0 and contract_bad == 0 and secs < 30,
            f"oracle mismatches {oracle_bad}, DRR shortfalls without flag {contract_bad}, "
            f"{secs:.1f}s (<30s)")


# --------------------------------------------------------------------------
# 6-7: simulator

@pytest.fixture(scope="session")
def seq33():
    return synthetic_corpus(1, 33)[1]


class ForcedZero:
    """Runs the compressor at target 0 on every level, bypassing the DRR-0 shortcut."""

    def apply(self, plane, level):
        return compress_plane(plane, 0)

    def describe(self):
        return {"kind": "forced-zero"}


def test_c06_simulator_bit_exact(record_property, seq33):
    def run():
        bad = []
        for qp in QPS:
            stream = encode(seq33, CodecConfig(qp=qp))
            plain = decode(stream, NO_EC)
            for policy in (EcPolicy((0, 0, 0)), ForcedZero()):
                out = decode(stream, policy)
                if not all(np.array_equal(a, b) for a, b in zip(out.planes, plain.planes)):
                    bad.append((qp, type(policy).__name__))
            if not all(np.array_equal(a, b) for a, b in zip(plain.planes, stream.reconstruction)):
                bad.append((qp, "encoder"))
        return bad
    bad, secs = timed(run)
    verdict(record_property, not bad and secs < 60,
            f"33 frames x Qp {QPS}: mismatches {bad}, {secs:.2f}s (<60s)")


def test_c07_propagation_structure(record_property, seq33):
    def run():
        stream = encode(seq33, CodecConfig(qp=32))
        plain = decode(stream, NO_EC)
        l3 = decode(stream, EcPolicy((0, 0, Fraction(1, 2))))
        l1 = decode(stream, EcPolicy((Fraction(1, 2), 0, 0)))
        leaked = [p for p in range(stream.frame_count)
                  if GOP.level(p) <= 2 and not np.array_equal(l3.planes[p], plain.planes[p])]
        unreached = [p for p in range(stream.frame_count)
                     if GOP.level(p) in (2, 3) and np.array_equal(l1.planes[p], plain.planes[p])]
        return leaked, unreached
    (leaked, unreached), secs = timed(run)
    verdict(record_property, not leaked and not unreached and secs < 60,
            f"level<=2 frames changed by level3 EC {leaked}, level2/3 frames untouched by "
            f"level1 EC {unreached}, {secs:.2f}s (<60s)")


# --------------------------------------------------------------------------
# 8-11: allocation on the synthetic training corpus at Qp 32

def _level_means(corpus, alloc):
    per = {lv: [] for lv in range(4)}
    for seq, stream in zip(corpus.sequences, corpus.streams):
        rep = simulate(seq, corpus.cfg, alloc.policy(), stream)
        for lv, d in zip(rep.levels, rep.delta_psnr):
            per[lv].append(d)
    return [float(np.mean(per[lv])) for lv in range(4)]


def test_c08_level_trend(record_property, training):
    t0 = time.perf_counter()
    notes, ok = [], True
    for t in (Fraction(2625, 10000), Fraction(35, 100)):
        ev, l3 = baseline_evda(t), baseline_l3da(t)
        d_ev = training.corpus.evaluate(ev).mean_delta_psnr
        d_l3 = training.corpus.evaluate(l3).mean_delta_psnr
        lv = _level_means(training.corpus, ev)
        inc12, inc23 = lv[2] - lv[1], lv[3] - lv[2]
        better = d_ev < d_l3
        shrink = inc23 < inc12
        ok &= better and shrink
        notes.append(f"{float(t):.2%}: evDA {d_ev:.3f} vs l3DA {d_l3:.3f} dB "
                     f"[{'ok' if better else 'X'}], increments L1->2 {inc12:.3f} "
                     f"L2->3 {inc23:.3f} [{'ok' if shrink else 'X'}]")
    secs = training.seconds + time.perf_counter() - t0
    verdict(record_property, ok and secs < 600, "; ".join(notes) + f"; {secs:.1f}s (<600s)")


def test_c09_search_optimality(record_property, training):
    def run():
        bad = []
        for surf in (training.grid, training.surface):
            for t in training.targets:
                band = surf.band(t)
                best = min(band, key=lambda a: (surf.entries[a].mean_delta_psnr, a.pcts))
                got = opda_search(surf, t)
                if got.alloc != best:
                    bad.append(float(t))
        return bad
    bad, secs = timed(run)
    verdict(record_property, not bad and secs < 60,
            f"opDA vs 3-D band scan at {len(training.targets)} targets on the 10% surface "
            f"(with and without baseline points): mismatches {bad}, {secs:.2f}s (<60s)")


def test_c10_opda_monotone_and_dominant(record_property, training):
    nonmono, beaten = [], []
    for e in training.curve.entries:
        a = e.alloc
        if e.target >= Fraction(1, 10) and not a.drr3 >= a.drr2 >= a.drr1:
            nonmono.append(f"{float(e.target):.2f}->{a}")
        for pick in (baseline_evda, baseline_l3da):
            try:
                b = pick(e.target)
            except InfeasibleError:
                continue
            if e.mean_delta_psnr > training.surface.entries[b].mean_delta_psnr + 1e-9:
                beaten.append((float(e.target), pick.__name__))
    verdict(record_property, not nonmono and not beaten,
            f"non-monotone targets >=10%: {nonmono or 'none'}; baseline wins: {beaten or 'none'}")


def test_c11_fopda_fidelity(record_property, training):
    def run():
        fit = fit_fopda(training.curve)
        rows = evaluate_allocations(training.corpus, {"opDA": training.curve.lookup,
                                                      "fopDA": fit.allocation}, training.targets)
        by = {}
        for r in rows:
            by.setdefault(r["target"], {})[r["strategy"]] = r["mean_delta_psnr"]
        return {t: abs(v["fopDA"] - v["opDA"]) for t, v in by.items() if len(v) == 2}
    diffs, secs = timed(run)
    over = {f"{t:.2f}": round(d, 3) for t, d in diffs.items() if d > 0.1}
    worst = max(diffs.values())
    verdict(record_property, not over and len(diffs) == len(training.targets) and secs < 60,
            f"|fopDA - opDA| per training target: max {worst:.3f} dB, mean "
            f"{np.mean(list(diffs.values())):.3f} dB, over 0.1 dB at {over or 'none'}, "
            f"{secs:.2f}s (<60s)")


# --------------------------------------------------------------------------
# 12: empirical propagation bound

def test_c12_propagation_bound(record_property):
    def run():
        seqs = synthetic_corpus(1, 33)
        worst = 0.0
        count = 0
        for qp in QPS:
            cfg = CodecConfig(qp=qp)
            streams = [encode(s, cfg) for s in seqs]
            for m in range(1, 5):
                allow = (4 ** m / 3 + 2 / 3) * 1.05
                for seq, stream in zip(seqs, streams):
                    rep = simulate(seq, cfg, TruncationPolicy((m, m, m)), stream)
                    for lv, a, b in zip(rep.levels, rep.mse_wo, rep.mse_w):
                        if lv == 2:
                            worst = max(worst, (b - a) / allow)
                            count += 1
        return worst, count
    (worst, count), secs = timed(run)
    verdict(record_property, worst <= 1 and secs < 120,
            f"{count} level2 frames, Qp {QPS}, M=1..4: worst excess {worst:.3f} of the "
            f"allowance (<=1), {secs:.1f}s (<120s)")
