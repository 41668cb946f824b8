"""Dynamic range of the decay products, and single- vs double-precision drift.

Entry statistics of the plain mask ``L`` and the grouped mask (tap 0 only)
are computed from log10 prefix sums, so regimes where the products underflow
or overflow in floating point can still be described.  Magnitudes are used
throughout (``|a|``), which only matters for the raw-decay explosion runs.

Divergence is measured on the outputs ``y`` of the forward scans, as a proxy
for the precision sensitivity of the recurrence during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError
from .gfssm_kernel import FirCoefficients, GfssmInstance, GroupConfig, grouped_scan
from .rng import Xoshiro256
from .ssd_core import SsdInstance, ssd_scan_recurrent

EXPLOSION_MAX_T = 4096

SWEEP_COLUMNS = (
    "T", "Q", "n", "a_spec", "variant", "precision",
    "min_nonzero", "max_entry", "log10_range", "max_abs_div", "max_rel_div",
)


@dataclass
class ProductStats:
    variant: str
    log10_min_nonzero: float
    log10_max_entry: float
    max_product_length: int
    zero_entries: int

    @property
    def min_nonzero(self) -> float:
        return 10.0 ** self.log10_min_nonzero

    @property
    def max_entry(self) -> float:
        return 10.0 ** self.log10_max_entry

    @property
    def log10_dynamic_range(self) -> float:
        return self.log10_max_entry - self.log10_min_nonzero


@dataclass
class Divergence:
    variant: str
    max_abs: float
    max_rel: float
    trace: np.ndarray  # per-step max |y32 - y64|
    nonfinite_step: int | None = None


@dataclass
class StabilityReport:
    T: int
    Q: int
    plain: ProductStats
    grouped: ProductStats
    divergence: dict[str, Divergence] = field(default_factory=dict)


def _log_profile(log_a: np.ndarray, is_zero: np.ndarray, Q: int, variant: str) -> ProductStats:
    T = log_a.shape[0]
    # prefix sums within each residue class mod Q (Q = 1 is the plain mask)
    cs = np.zeros(T)
    cz = np.zeros(T, dtype=np.int64)
    for t in range(T):
        p = t - Q
        cs[t] = (cs[p] if p >= 0 else 0.0) + log_a[t]
        cz[t] = (cz[p] if p >= 0 else 0) + int(is_zero[t])
    lo, hi = np.inf, -np.inf
    longest = 0
    zeros = 0
    for t in range(T):
        s = np.arange(t + 1)
        last = s + Q * ((t - s) // Q)
        logs = cs[last] - cs[s]
        nz = (cz[last] - cz[s]) == 0
        zeros += int(np.count_nonzero(~nz))
        longest = max(longest, int(t // Q))
        if nz.any():
            vals = logs[nz]
            lo = min(lo, float(vals.min()))
            hi = max(hi, float(vals.max()))
    return ProductStats(variant, lo, hi, longest, zeros)


def product_profile(a, Q: int, allow_explosion: bool = False) -> StabilityReport:
    """Entry statistics of ``build_L_plain(a)`` and of the grouped mask with
    ``k = [1, 0, ...]``, without materializing either matrix.

    Zero products are counted in ``zero_entries`` and left out of the
    min-nonzero statistic.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or a.shape[0] < 2:
        raise ShapeError("a", f"need a 1-d sequence with T >= 2, got shape {a.shape}")
    if Q < 1:
        raise ShapeError("Q", f"must be >= 1, got {Q}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("a")
    if np.any(np.abs(a) > 1.0):
        if not allow_explosion:
            raise ValueError("|a| > 1 requires allow_explosion=True")
        if a.shape[0] > EXPLOSION_MAX_T:
            raise ValueError(f"explosion profiling is capped at T={EXPLOSION_MAX_T}")
    is_zero = a == 0.0
    with np.errstate(divide="ignore"):
        log_a = np.where(is_zero, 0.0, np.log10(np.abs(np.where(is_zero, 1.0, a))))
    plain = _log_profile(log_a, is_zero, 1, "plain")
    grouped = _log_profile(log_a, is_zero, Q, "grouped")
    return StabilityReport(a.shape[0], Q, plain, grouped)


def _divergence(variant: str, y32: np.ndarray | None, y64: np.ndarray, nonfinite_step) -> Divergence:
    T = y64.shape[0]
    if y32 is None:
        trace = np.full(T, np.nan)
        return Divergence(variant, float("inf"), float("inf"), trace, nonfinite_step)
    diff = np.abs(y32.astype(np.float64) - y64)
    trace = diff.max(axis=1)
    scale = np.abs(y64).max(axis=1)
    rel = np.where(scale > 0, trace / np.where(scale > 0, scale, 1.0), np.where(trace > 0, np.inf, 0.0))
    return Divergence(variant, float(trace.max()), float(rel.max()), trace, nonfinite_step)


def _first_nonfinite(y: np.ndarray) -> int | None:
    bad = ~np.isfinite(y).all(axis=1)
    return int(np.argmax(bad)) if bad.any() else None


def precision_divergence(inst: GfssmInstance) -> dict[str, Divergence]:
    """Run the plain and the grouped scan in single and in double precision.

    Relative divergence is normalized per step by ``max |y64_t|``.  A NaN/Inf
    in the single-precision run is recorded as ``nonfinite_step`` with
    infinite divergence rather than raised.
    """
    inst64 = inst.astype("double")
    inst32 = inst.astype("single")
    out = {}

    y64, _ = ssd_scan_recurrent(inst64.base)
    with np.errstate(over="ignore", invalid="ignore"):
        y32, _ = ssd_scan_recurrent(inst32.base)
    bad = _first_nonfinite(y32)
    out["plain"] = _divergence("plain", None if bad is not None else y32, y64, bad)

    y64, _ = grouped_scan(inst64)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            y32, _ = grouped_scan(inst32)
        out["grouped"] = _divergence("grouped", y32, y64, None)
    except NonFiniteError as exc:
        out["grouped"] = _divergence("grouped", None, y64, exc.step)
    return out


def stability_report(inst: GfssmInstance, allow_explosion: bool = False) -> StabilityReport:
    report = product_profile(inst.base.a, inst.Q, allow_explosion=allow_explosion)
    report.divergence = precision_divergence(inst)
    return report


def uniform_instance(a_value: float, T: int, Q: int, n: int, seed: int, N: int = 1, P: int = 1) -> GfssmInstance:
    """Constant decay with random B, C, x in [-1, 1) drawn in that order."""
    rng = Xoshiro256(seed)
    B = rng.uniform(-1.0, 1.0, (T, N))
    C = rng.uniform(-1.0, 1.0, (T, N))
    x = rng.uniform(-1.0, 1.0, (T, P))
    base = SsdInstance(np.full(T, a_value), B, C, x)
    return GfssmInstance(base, GroupConfig(Q, n), FirCoefficients.identity(n))


def sweep_point(a_value: float, T: int, Q: int, n: int, seed: int, allow_explosion: bool = False) -> dict:
    """One CSV row: grouped-mask statistics and grouped-scan divergence.

    At ``Q = 1`` the grouped mask and scan coincide with the plain ones.
    """
    inst = uniform_instance(a_value, T, Q, n, seed)
    rep = stability_report(inst, allow_explosion=allow_explosion)
    stats, div = rep.grouped, rep.divergence["grouped"]
    return {
        "T": T,
        "Q": Q,
        "n": n,
        "a_spec": f"uniform:{a_value!r}",
        "variant": "grouped",
        "precision": "single_vs_double",
        "min_nonzero": stats.min_nonzero,
        "max_entry": stats.max_entry,
        "log10_range": stats.log10_dynamic_range,
        "max_abs_div": div.max_abs,
        "max_rel_div": div.max_rel,
    }
