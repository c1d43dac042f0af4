"""Closed-form PSNR degradation under LSB truncation.

The truncation error of M dropped bits is modelled as uniform over 2^M
consecutive integers, whose second moment is 4^M/12 + 1/6.  A frame
predicted from an equally truncated reference picks up at most four times
that (Cauchy-Schwarz on the sum of the two errors).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .pixel_io import BIT_DEPTH, MAX_VALUE

PSNR_INF = math.inf
# how an infinite PSNR is written to tables
PSNR_INF_SENTINEL = 99.99


def psnr_from_mse(mse: float, peak: int = MAX_VALUE) -> float:
    if mse < 0:
        raise ValueError("MSE must be non-negative")
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def mse_from_psnr(psnr: float, peak: int = MAX_VALUE) -> float:
    return peak * peak / 10.0 ** (psnr / 10.0)


def ec_error_second_moment(m: int) -> float:
    """E[e^2] for the error of truncating m LSBs; 0 when nothing is dropped."""
    if m < 0:
        raise ValueError("truncation level must be non-negative")
    if m == 0:
        return 0.0
    return (2.0 ** (2 * m - 1) + 1.0) / 6.0


def propagated_error_bound(m: int) -> float:
    """Upper bound on E[(e_ec + e_ep)^2] when current and reference both drop m bits."""
    if m == 0:
        return 0.0
    return 4.0 ** m / 3.0 + 2.0 / 3.0


def _check_mse(mse_wo: float) -> None:
    if not mse_wo > 0:
        raise ValueError("MSE without EC must be positive")


def delta_psnr_current(mse_wo: float, m: int) -> float:
    """PSNR loss of a frame whose only extra error is its own truncation."""
    _check_mse(mse_wo)
    return 10.0 * math.log10((mse_wo + ec_error_second_moment(m)) / mse_wo)


def delta_psnr_propagated_bound(mse_wo: float, m: int) -> float:
    _check_mse(mse_wo)
    return 10.0 * math.log10((mse_wo + propagated_error_bound(m)) / mse_wo)


@dataclass(frozen=True)
class QualityPoint:
    mse_wo: float

    def __post_init__(self):
        _check_mse(self.mse_wo)

    @classmethod
    def from_psnr(cls, psnr_wo: float) -> "QualityPoint":
        return cls(mse_from_psnr(psnr_wo))

    @property
    def psnr_wo(self) -> float:
        return psnr_from_mse(self.mse_wo)


@dataclass(frozen=True)
class PropagationScenario:
    ref: QualityPoint
    cur: QualityPoint
    m: int


def delta2_psnr_lower_bound(s: PropagationScenario) -> float:
    """Lower bound on (loss of non-reference-only allocation) - (loss of even allocation).

    The even allocation drops m bits from both the reference and the current
    frame; the non-reference-only allocation drops 2m bits from the current
    frame alone.  Positive values favour the even allocation.
    """
    mr, mc, m = s.ref.mse_wo, s.cur.mse_wo, s.m
    num = mr * (mc + ec_error_second_moment(2 * m))
    den = (mr + ec_error_second_moment(m)) * (mc + propagated_error_bound(m))
    return 10.0 * math.log10(num / den)


# --------------------------------------------------------------------------
# curve tables

FIG1A_COLUMNS = ("psnr_wo", "M", "drr", "delta_psnr", "propagated_bound", "delta2_lower_bound")
FIG2_COLUMNS = ("psnr_wo_ref", "psnr_wo_cur", "M", "drr",
                "avg_delta_psnr_even_bound", "avg_delta_psnr_nonref", "delta2_lower_bound")


def model_drr(m: int) -> float:
    """Model DRR axis: dropped bits over bit depth."""
    return m / BIT_DEPTH


def emit_model_curves(psnr_values: Sequence[float] = (30.0, 35.0, 40.0),
                      m_values: Iterable[int] = range(BIT_DEPTH),
                      ref_gap_db: float = 1.0) -> list[dict]:
    """One row per (psnr_wo, M).

    ``delta2_lower_bound`` treats ``psnr_wo`` as the reference quality and
    ``psnr_wo - ref_gap_db`` as the current-frame quality.
    """
    rows = []
    m_values = list(m_values)
    for p in psnr_values:
        ref = QualityPoint.from_psnr(p)
        cur = QualityPoint.from_psnr(p - ref_gap_db)
        for m in m_values:
            rows.append({
                "psnr_wo": p,
                "M": m,
                "drr": model_drr(m),
                "delta_psnr": delta_psnr_current(ref.mse_wo, m),
                "propagated_bound": delta_psnr_propagated_bound(ref.mse_wo, m),
                "delta2_lower_bound": delta2_psnr_lower_bound(PropagationScenario(ref, cur, m)),
            })
    return rows


def emit_allocation_comparison(psnr_ref_values: Sequence[float] = (30.0, 35.0, 40.0),
                               m_values: Iterable[int] = range(1, BIT_DEPTH // 2 + 1),
                               ref_gap_db: float = 1.0) -> list[dict]:
    """Average loss of the two-frame example under even vs non-reference-only EC.

    Even: reference and current each drop M bits (reference via the in-frame
    term, current via the propagation bound).  Non-reference-only: the
    current frame drops 2M bits and the reference is untouched.  The DRR
    column is the pair's average, M/8.
    """
    rows = []
    m_values = list(m_values)
    for p in psnr_ref_values:
        ref = QualityPoint.from_psnr(p)
        cur = QualityPoint.from_psnr(p - ref_gap_db)
        for m in m_values:
            even = 0.5 * (delta_psnr_current(ref.mse_wo, m)
                          + delta_psnr_propagated_bound(cur.mse_wo, m))
            nonref = 0.5 * delta_psnr_current(cur.mse_wo, 2 * m)
            rows.append({
                "psnr_wo_ref": p,
                "psnr_wo_cur": p - ref_gap_db,
                "M": m,
                "drr": model_drr(m),
                "avg_delta_psnr_even_bound": even,
                "avg_delta_psnr_nonref": nonref,
                "delta2_lower_bound": delta2_psnr_lower_bound(PropagationScenario(ref, cur, m)),
            })
    return rows


def format_float(v: float) -> str:
    if math.isinf(v) and v > 0:
        v = PSNR_INF_SENTINEL
    return f"{v:.6g}"


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str], header_lines: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([format_float(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()
