"""Scalar-decay state space duality (SSD) layer, recurrent and matrix forms.

One head is described by a decay scalar ``a[t]``, input/output projections
``B[t], C[t]`` (length ``N``) and inputs ``x[t]`` (length ``P``).  The state is
the ``N x P`` matrix ``H_t = a[t] H_{t-1} + B[t] x[t]^T`` and the output is
``y[t] = C[t]^T H_t``.

All reductions run in ascending index order with plain elementwise numpy ops
(no BLAS, no pairwise sums) so that results are bit-reproducible and the
single/double precision experiments compare like with like.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError, SizeLimitError
from .rng import Xoshiro256

DEFAULT_MAX_T = 8192

_DTYPES = {"single": np.float32, "double": np.float64}


def resolve_dtype(precision) -> np.dtype:
    """Map ``"single"``/``"double"`` (or a numpy float dtype) to a dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(_DTYPES[precision])
        except KeyError:
            raise ValueError(f"precision must be 'single' or 'double', got {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name)


@dataclass(frozen=True)
class SsdInstance:
    a: np.ndarray  # (T,)
    B: np.ndarray  # (T, N)
    C: np.ndarray  # (T, N)
    x: np.ndarray  # (T, P)

    def __post_init__(self) -> None:
        a = np.asarray(self.a)
        dtype = a.dtype if a.dtype in (np.float32, np.float64) else np.dtype(np.float64)
        arrays = {}
        for name in ("a", "B", "C", "x"):
            arr = np.asarray(getattr(self, name), dtype=dtype)
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        if arrays["a"].ndim != 1 or arrays["a"].shape[0] < 1:
            raise ShapeError("a", f"expected a non-empty 1-d sequence, got shape {arrays['a'].shape}")
        T = arrays["a"].shape[0]
        for name in ("B", "C", "x"):
            arr = arrays[name]
            if arr.ndim != 2 or arr.shape[0] != T or arr.shape[1] < 1:
                raise ShapeError(name, f"expected shape ({T}, k>=1), got {arr.shape}")
        if arrays["C"].shape[1] != arrays["B"].shape[1]:
            raise ShapeError("C", f"state width {arrays['C'].shape[1]} != B width {arrays['B'].shape[1]}")
        for name, arr in arrays.items():
            _check_finite(name, arr)

    @property
    def T(self) -> int:
        return self.a.shape[0]

    @property
    def N(self) -> int:
        return self.B.shape[1]

    @property
    def P(self) -> int:
        return self.x.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.a.dtype

    def astype(self, precision) -> "SsdInstance":
        dt = resolve_dtype(precision)
        return SsdInstance(self.a.astype(dt), self.B.astype(dt), self.C.astype(dt), self.x.astype(dt))

    def slice(self, start: int, stop: int) -> "SsdInstance":
        return SsdInstance(self.a[start:stop], self.B[start:stop], self.C[start:stop], self.x[start:stop])


def random_instance(
    rng: Xoshiro256, T: int, N: int, P: int, a_range: tuple[float, float] = (0.0, 1.0)
) -> SsdInstance:
    """Draw a double-precision instance.

    ``a`` is drawn as ``high - u*(high - low)`` so the default range is (0, 1];
    B, C, x are uniform in [-1, 1).  Draw order: a, B, C, x.
    """
    lo, hi = a_range
    a = hi - rng.uniform(0.0, 1.0, T) * (hi - lo)
    B = rng.uniform(-1.0, 1.0, (T, N))
    C = rng.uniform(-1.0, 1.0, (T, N))
    x = rng.uniform(-1.0, 1.0, (T, P))
    return SsdInstance(a, B, C, x)


def contract(c: np.ndarray, H: np.ndarray) -> np.ndarray:
    """``c^T H`` for ``c`` of shape (N,) and ``H`` of shape (N, P), ascending in N."""
    out = c[0] * H[0]
    for k in range(1, c.shape[0]):
        out = out + c[k] * H[k]
    return out


def dot(u: np.ndarray, v: np.ndarray):
    """Ascending-order inner product of two 1-d arrays."""
    acc = u[0] * v[0]
    for k in range(1, u.shape[0]):
        acc = acc + u[k] * v[k]
    return acc


def ssd_scan_recurrent(inst: SsdInstance, h0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Run ``h_t = a_t h_{t-1} + B_t x_t^T``, ``y_t = C_t^T h_t`` left to right.

    Returns ``(y, h_T)`` with ``y`` of shape (T, P).  ``h0`` defaults to zeros.
    """
    dt = inst.dtype
    if h0 is None:
        h = np.zeros((inst.N, inst.P), dtype=dt)
    else:
        h = np.asarray(h0, dtype=dt)
        if h.shape != (inst.N, inst.P):
            raise ShapeError("h0", f"expected ({inst.N}, {inst.P}), got {h.shape}")
        _check_finite("h0", h)
    y = np.empty((inst.T, inst.P), dtype=dt)
    for t in range(inst.T):
        h = inst.a[t] * h + np.outer(inst.B[t], inst.x[t])
        y[t] = contract(inst.C[t], h)
    return y, h


def build_L_plain(a) -> np.ndarray:
    """1-semiseparable mask: ``L[t, s] = a[s+1] * ... * a[t]`` for t > s, 1 on the diagonal."""
    a = np.asarray(a)
    if a.ndim != 1 or a.shape[0] < 1:
        raise ShapeError("a", f"expected a non-empty 1-d sequence, got shape {a.shape}")
    dt = a.dtype if a.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    a = a.astype(dt, copy=False)
    T = a.shape[0]
    L = np.zeros((T, T), dtype=dt)
    for s in range(T):
        prod = dt.type(1.0)
        L[s, s] = prod
        for t in range(s + 1, T):
            prod = prod * a[t]
            L[t, s] = prod
    return L


def apply_masked(L: np.ndarray, inst: SsdInstance) -> np.ndarray:
    """``y = (L o C B^T) x`` with explicit (t, s) loops; O(T^2 (N + P))."""
    T = inst.T
    y = np.zeros((T, inst.P), dtype=inst.dtype)
    for t in range(T):
        acc = np.zeros(inst.P, dtype=inst.dtype)
        for s in range(t + 1):
            lts = L[t, s]
            if lts == 0:
                continue
            acc = acc + (lts * dot(inst.C[t], inst.B[s])) * inst.x[s]
        y[t] = acc
    return y


def ssd_matrix_form(inst: SsdInstance, max_T: int = DEFAULT_MAX_T) -> np.ndarray:
    """Materialized ``y = (L o C^T B) x``; the quadratic oracle for the scan."""
    if inst.T > max_T:
        raise SizeLimitError(f"T={inst.T} exceeds the materialization cap of {max_T}")
    return apply_masked(build_L_plain(inst.a), inst)


def ssd_backward(inst: SsdInstance, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``sum_t <upstream_t, y_t>`` for the plain scan (h0 = 0).

    Returns raw-``a`` gradients under keys ``a, B, C, x``.
    """
    g = np.asarray(upstream, dtype=inst.dtype)
    if g.shape != (inst.T, inst.P):
        raise ShapeError("upstream", f"expected ({inst.T}, {inst.P}), got {g.shape}")
    T = inst.T
    hs = np.empty((T, inst.N, inst.P), dtype=inst.dtype)
    h = np.zeros((inst.N, inst.P), dtype=inst.dtype)
    for t in range(T):
        h = inst.a[t] * h + np.outer(inst.B[t], inst.x[t])
        hs[t] = h
    grad_a = np.zeros_like(inst.a)
    grad_B = np.zeros_like(inst.B)
    grad_C = np.zeros_like(inst.C)
    grad_x = np.zeros_like(inst.x)
    lam = np.zeros((inst.N, inst.P), dtype=inst.dtype)
    for t in range(T - 1, -1, -1):
        grad_C[t] = hs[t] @ g[t]
        lam = lam + np.outer(inst.C[t], g[t])
        grad_B[t] = lam @ inst.x[t]
        grad_x[t] = lam.T @ inst.B[t]
        if t > 0:
            grad_a[t] = np.sum(lam * hs[t - 1])
        lam = inst.a[t] * lam
    return {"a": grad_a, "B": grad_B, "C": grad_C, "x": grad_x}
