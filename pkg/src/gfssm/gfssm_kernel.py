"""Grouped FIR-enhanced scan.

The input products ``u_t = B_t x_t^T`` are passed through a causal FIR filter
``s_t = sum_j k_j u_{t-j}``, and the filtered sequence is written into ``Q``
interleaved states: at global step ``t`` only group ``t mod Q`` is updated as
``h^g <- a_t h^g + s_t``.  The output reads the sum of all group states,
``y_t = C_t^T sum_i h^i``.

Unrolling the recurrence gives a masked-matrix form ``y = (L o C B^T) x`` with
``L = sum_j k_j L_j``.  The closed form of ``L_j`` in :func:`build_L_group` is a
reconstruction from the recurrence; :func:`grouped_scan` is the ground truth
it is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonFiniteError, ShapeError, SizeLimitError
from .ssd_core import DEFAULT_MAX_T, SsdInstance, apply_masked, contract, resolve_dtype


@dataclass(frozen=True)
class GroupConfig:
    Q: int = 4
    n: int = 4

    def __post_init__(self) -> None:
        if int(self.Q) < 1:
            raise ShapeError("Q", f"group count must be >= 1, got {self.Q}")
        if int(self.n) < 1:
            raise ShapeError("n", f"FIR order must be >= 1, got {self.n}")


@dataclass(frozen=True)
class FirCoefficients:
    k: np.ndarray

    def __post_init__(self) -> None:
        k = np.asarray(self.k)
        if k.dtype not in (np.float32, np.float64):
            k = k.astype(np.float64)
        if k.ndim != 1 or k.shape[0] < 1:
            raise ShapeError("k", f"expected a non-empty 1-d tap vector, got shape {k.shape}")
        if not np.all(np.isfinite(k)):
            raise NonFiniteError("k")
        object.__setattr__(self, "k", k)

    @property
    def n(self) -> int:
        return self.k.shape[0]

    @classmethod
    def identity(cls, n: int = 4) -> "FirCoefficients":
        """``[1, 0, ..., 0]``: the filter that leaves ``B_t x_t`` untouched."""
        k = np.zeros(n)
        k[0] = 1.0
        return cls(k)

    @classmethod
    def uniform(cls, n: int = 4) -> "FirCoefficients":
        return cls(np.full(n, 1.0 / n))


@dataclass(frozen=True)
class GfssmInstance:
    base: SsdInstance
    cfg: GroupConfig = field(default_factory=GroupConfig)
    fir: FirCoefficients | None = None
    prompt_taps: np.ndarray | None = None  # (n-1, N, P); index -m lives at [m-1]

    def __post_init__(self) -> None:
        base = self.base
        fir = self.fir if self.fir is not None else FirCoefficients.identity(self.cfg.n)
        if fir.n != self.cfg.n:
            raise ShapeError("fir", f"{fir.n} taps but cfg.n = {self.cfg.n}")
        object.__setattr__(self, "fir", FirCoefficients(fir.k.astype(base.dtype)))
        shape = (self.cfg.n - 1, base.N, base.P)
        if self.prompt_taps is None:
            taps = np.zeros(shape, dtype=base.dtype)
        else:
            taps = np.asarray(self.prompt_taps, dtype=base.dtype)
            if taps.shape != shape:
                raise ShapeError("prompt_taps", f"expected {shape}, got {taps.shape}")
            if not np.all(np.isfinite(taps)):
                raise NonFiniteError("prompt_taps")
        object.__setattr__(self, "prompt_taps", taps)

    @property
    def Q(self) -> int:
        return self.cfg.Q

    @property
    def n(self) -> int:
        return self.cfg.n

    def astype(self, precision) -> "GfssmInstance":
        dt = resolve_dtype(precision)
        return GfssmInstance(
            self.base.astype(dt), self.cfg, FirCoefficients(self.fir.k.astype(dt)), self.prompt_taps.astype(dt)
        )


def input_products(B: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Stack of ``B_t x_t^T`` outer products, shape (T, N, P)."""
    return B[:, :, None] * x[:, None, :]


def _filter(u: np.ndarray, k: np.ndarray, taps: np.ndarray) -> np.ndarray:
    T = u.shape[0]
    s = np.empty_like(u)
    for t in range(T):
        acc = np.zeros_like(u[0])
        for j in range(k.shape[0]):
            idx = t - j
            acc = acc + k[j] * (u[idx] if idx >= 0 else taps[-idx - 1])
        s[t] = acc
    return s


def fir_filter(inst: GfssmInstance) -> np.ndarray:
    """Filtered products ``s_t = sum_j k_j B_{t-j} x_{t-j}^T``, shape (T, N, P).

    Indices below zero are read from ``inst.prompt_taps``.
    """
    return _filter(input_products(inst.base.B, inst.base.x), inst.fir.k, inst.prompt_taps)


def _scan(
    a: np.ndarray,
    C: np.ndarray,
    s: np.ndarray,
    H: np.ndarray,
    Q: int,
    t_offset: int,
    hook: Callable[[int, int], None] | None = None,
):
    """Grouped recurrence over precomputed ``s``; ``H`` (Q, N, P) is updated in place."""
    T = a.shape[0]
    y = np.empty((T, s.shape[2]), dtype=s.dtype)
    for t in range(T):
        g = (t + t_offset) % Q
        if hook is not None:
            hook(t + t_offset, g)
        with np.errstate(over="ignore", invalid="ignore"):
            H[g] = a[t] * H[g] + s[t]
            total = H[0]
            for i in range(1, Q):
                total = total + H[i]
            y[t] = contract(C[t], total)
        if not (np.isfinite(H[g]).all() and np.isfinite(y[t]).all()):
            raise NonFiniteError("grouped_scan state", step=t + t_offset)
    return y


def _init_state(h_init, Q: int, N: int, P: int, dtype) -> np.ndarray:
    if h_init is None:
        return np.zeros((Q, N, P), dtype=dtype)
    H = np.array(h_init, dtype=dtype)
    if H.shape != (Q, N, P):
        raise ShapeError("h_init", f"expected ({Q}, {N}, {P}), got {H.shape}")
    if not np.all(np.isfinite(H)):
        raise NonFiniteError("h_init")
    return H


def grouped_scan(
    inst: GfssmInstance,
    h_init: np.ndarray | None = None,
    t_offset: int = 0,
    hook: Callable[[int, int], None] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the grouped recurrence; returns ``(y, h_final)``.

    ``h_init``/``h_final`` have shape (Q, N, P).  ``t_offset`` is the global
    index of the first step, so the updated group is ``(t + t_offset) mod Q``.
    ``hook(global_t, group)`` is called before each update if given.
    """
    base = inst.base
    H = _init_state(h_init, inst.Q, base.N, base.P, base.dtype)
    s = fir_filter(inst)
    y = _scan(base.a, base.C, s, H, inst.Q, t_offset, hook=hook)
    return y, H


def build_L_group(a, Q: int, j: int) -> np.ndarray:
    """Mask for inputs that enter through tap ``j``.

    Input ``s`` reaches the state at step ``r = s + j`` in group ``r mod Q`` and
    is then scaled by every ``a_tau`` with ``tau`` in ``(r, t]`` and
    ``tau = r (mod Q)``.  Entries with ``t < s + j`` are zero.
    """
    a = np.asarray(a)
    if a.ndim != 1 or a.shape[0] < 1:
        raise ShapeError("a", f"expected a non-empty 1-d sequence, got shape {a.shape}")
    if Q < 1:
        raise ShapeError("Q", f"must be >= 1, got {Q}")
    if j < 0:
        raise ShapeError("j", f"tap index must be >= 0, got {j}")
    dt = a.dtype if a.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    a = a.astype(dt, copy=False)
    T = a.shape[0]
    L = np.zeros((T, T), dtype=dt)
    for s in range(T - j):
        r = s + j
        prod = dt.type(1.0)
        L[r : r + Q, s] = prod
        for tau in range(r + Q, T, Q):
            prod = prod * a[tau]
            L[tau : tau + Q, s] = prod
    return L


def build_L_gfssm(a, cfg: GroupConfig, fir: FirCoefficients) -> np.ndarray:
    """``L = sum_j k_j L_j`` (ascending in j)."""
    if fir.n != cfg.n:
        raise ShapeError("fir", f"{fir.n} taps but cfg.n = {cfg.n}")
    L = None
    for j in range(cfg.n):
        term = fir.k[j] * build_L_group(a, cfg.Q, j)
        L = term if L is None else L + term
    return L


def gfssm_matrix_form(inst: GfssmInstance, max_T: int = DEFAULT_MAX_T) -> np.ndarray:
    """Materialized ``y = (L o C^T B) x`` for a kernel with zero prompt taps."""
    if np.any(inst.prompt_taps != 0):
        raise ShapeError("prompt_taps", "matrix form needs zero prompt taps; use sink_streaming for boundaries")
    if inst.base.T > max_T:
        raise SizeLimitError(f"T={inst.base.T} exceeds the materialization cap of {max_T}")
    L = build_L_gfssm(inst.base.a, inst.cfg, inst.fir)
    return apply_masked(L, inst.base)
