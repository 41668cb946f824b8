"""Prompt-initialized ("attention sink") streaming over chunks.

A fresh sequence is prefixed with ``Q`` learnable prompt tokens, so every group
state has been written once before the first real token arrives.  Between
chunks a :class:`ChunkCache` carries the ``Q`` group states plus the last
``n - 1`` input products that the FIR filter still needs; continuing from the
cache is exact, so streamed output matches processing the whole
prompt-extended sequence at once.

Prompt positions use ``a = 1`` and ``C = 0``.  Neither matters: each group is
updated exactly once during the prompt phase, starting from zero, and prompt
outputs are discarded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, ScheduleError, ShapeError
from .gfssm_kernel import (
    GfssmInstance,
    _init_state,
    _scan,
    _filter,
    build_L_gfssm,
    build_L_group,
    input_products,
)
from .ssd_core import SsdInstance, apply_masked, contract

CACHE_HEADER = struct.Struct("<5q")  # Q, N, P, n, t_offset


@dataclass(frozen=True)
class PromptBank:
    prompts: np.ndarray  # (Q, P)
    prompt_B: np.ndarray  # (Q, N)

    def __post_init__(self) -> None:
        prompts = np.asarray(self.prompts)
        prompt_B = np.asarray(self.prompt_B)
        dt = prompts.dtype if prompts.dtype in (np.float32, np.float64) else np.dtype(np.float64)
        prompts = prompts.astype(dt, copy=False)
        prompt_B = prompt_B.astype(dt, copy=False)
        if prompts.ndim != 2 or prompts.shape[0] < 1:
            raise ShapeError("prompts", f"expected (Q, P), got {prompts.shape}")
        if prompt_B.ndim != 2 or prompt_B.shape[0] != prompts.shape[0]:
            raise ShapeError("prompt_B", f"expected ({prompts.shape[0]}, N), got {prompt_B.shape}")
        for name, arr in (("prompts", prompts), ("prompt_B", prompt_B)):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(name)
        object.__setattr__(self, "prompts", prompts)
        object.__setattr__(self, "prompt_B", prompt_B)

    @property
    def Q(self) -> int:
        return self.prompts.shape[0]

    @classmethod
    def zeros(cls, Q: int, N: int, P: int, dtype=np.float64) -> "PromptBank":
        return cls(np.zeros((Q, P), dtype=dtype), np.zeros((Q, N), dtype=dtype))

    def astype(self, dtype) -> "PromptBank":
        return PromptBank(self.prompts.astype(dtype), self.prompt_B.astype(dtype))


@dataclass(frozen=True)
class ChunkCache:
    h_cached: np.ndarray  # (Q, N, P)
    tap_cache: np.ndarray  # (n-1, N, P), most recent product first
    t_offset: int

    def __post_init__(self) -> None:
        if self.h_cached.ndim != 3 or self.h_cached.shape[0] < 1:
            raise ShapeError("h_cached", f"expected (Q, N, P), got {self.h_cached.shape}")
        if self.tap_cache.ndim != 3 or self.tap_cache.shape[1:] != self.h_cached.shape[1:]:
            raise ShapeError("tap_cache", f"expected (n-1, N, P), got {self.tap_cache.shape}")
        if self.t_offset < 0:
            raise ScheduleError(f"t_offset must be >= 0, got {self.t_offset}")

    @property
    def Q(self) -> int:
        return self.h_cached.shape[0]

    @property
    def n(self) -> int:
        return self.tap_cache.shape[0] + 1


def build_P(a, Q: int, t_offset: int = 0) -> np.ndarray:
    """Propagation of cached group states into a chunk, shape (T, Q).

    ``P[t, i]`` is the product of ``a_tau`` over ``tau <= t`` whose global step
    ``tau + t_offset`` updates group ``i``; the empty product is 1.
    """
    a = np.asarray(a)
    if a.ndim != 1 or a.shape[0] < 1:
        raise ShapeError("a", f"expected a non-empty 1-d sequence, got shape {a.shape}")
    if Q < 1:
        raise ShapeError("Q", f"must be >= 1, got {Q}")
    if t_offset < 0:
        raise ScheduleError(f"t_offset must be >= 0, got {t_offset}")
    dt = a.dtype if a.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    T = a.shape[0]
    P = np.empty((T, Q), dtype=dt)
    running = np.ones(Q, dtype=dt)
    for t in range(T):
        g = (t + t_offset) % Q
        running[g] = running[g] * a[t]
        P[t] = running
    return P


def extend_with_prompts(bank: PromptBank, inst: GfssmInstance) -> GfssmInstance:
    """The length ``Q + T`` instance with prompts in front of the real tokens."""
    base = inst.base
    if bank.Q != inst.Q:
        raise ScheduleError(f"prompt bank has {bank.Q} prompts but cfg.Q = {inst.Q}")
    if bank.prompts.shape[1] != base.P or bank.prompt_B.shape[1] != base.N:
        raise ShapeError("bank", "prompt dimensions do not match the instance")
    if np.any(inst.prompt_taps != 0):
        raise ShapeError("prompt_taps", "prompts supply the boundary taps; pass zero taps")
    dt = base.dtype
    Q = bank.Q
    ext = SsdInstance(
        np.concatenate([np.ones(Q, dtype=dt), base.a]),
        np.concatenate([bank.prompt_B.astype(dt), base.B]),
        np.concatenate([np.zeros((Q, base.N), dtype=dt), base.C]),
        np.concatenate([bank.prompts.astype(dt), base.x]),
    )
    return GfssmInstance(ext, inst.cfg, inst.fir)


def _roll_taps(tap_cache: np.ndarray, u: np.ndarray) -> np.ndarray:
    """New tap cache after consuming products ``u`` (oldest first)."""
    m = tap_cache.shape[0]
    if m == 0:
        return tap_cache.copy()
    history = np.concatenate([tap_cache[::-1], u])
    return history[::-1][:m].copy()


def _check_chunk(cache: ChunkCache, chunk: GfssmInstance) -> None:
    base = chunk.base
    if cache.Q != chunk.Q:
        raise ScheduleError(f"cache has {cache.Q} groups but chunk cfg.Q = {chunk.Q}")
    if cache.n != chunk.n:
        raise ScheduleError(f"cache holds {cache.n - 1} taps but chunk cfg.n = {chunk.n}")
    if cache.h_cached.shape[1:] != (base.N, base.P):
        raise ScheduleError("cache state dimensions do not match the chunk")
    if cache.h_cached.dtype != base.dtype:
        raise ScheduleError(f"cache dtype {cache.h_cached.dtype} != chunk dtype {base.dtype}")
    if np.any(chunk.prompt_taps != 0):
        raise ShapeError("prompt_taps", "taps come from the cache; pass zero taps")


def prompt_cache(bank: PromptBank, inst: GfssmInstance) -> ChunkCache:
    """Cache after consuming only the prompts (an empty real prefix).

    ``inst`` supplies the config, filter and dimensions; its tokens are unused.
    """
    ext = extend_with_prompts(bank, inst).base.slice(0, bank.Q)
    dt = ext.dtype
    u = input_products(ext.B, ext.x)
    H = np.zeros((bank.Q, ext.N, ext.P), dtype=dt)
    s = _filter(u, inst.fir.k, np.zeros((inst.n - 1, ext.N, ext.P), dtype=dt))
    _scan(ext.a, ext.C, s, H, bank.Q, 0)
    return ChunkCache(H, _roll_taps(np.zeros((inst.n - 1, ext.N, ext.P), dtype=dt), u), 0)


def init_fresh(bank: PromptBank, inst: GfssmInstance) -> tuple[np.ndarray, ChunkCache]:
    """Process a sequence from scratch behind its prompts.

    Runs the grouped scan over ``[prompts; x]`` from zero states and returns the
    outputs of the real positions together with the cache for continuation.
    """
    ext = extend_with_prompts(bank, inst)
    Q, T = bank.Q, inst.base.T
    dt = ext.base.dtype
    u = input_products(ext.base.B, ext.base.x)
    zero_taps = np.zeros((inst.n - 1, ext.base.N, ext.base.P), dtype=dt)
    s = _filter(u, inst.fir.k, zero_taps)
    H = np.zeros((Q, ext.base.N, ext.base.P), dtype=dt)
    y = _scan(ext.base.a, ext.base.C, s, H, Q, 0)
    return y[Q:], ChunkCache(H, _roll_taps(zero_taps, u), T)


def _continue_matrix(cache: ChunkCache, chunk: GfssmInstance) -> np.ndarray:
    base = chunk.base
    T, n = base.T, chunk.n
    k = chunk.fir.k
    y = apply_masked(build_L_gfssm(base.a, chunk.cfg, chunk.fir), base)
    P = build_P(base.a, chunk.Q, cache.t_offset)
    L0 = build_L_group(base.a, chunk.Q, 0)
    # boundary part of s_u: taps that reach back past the chunk start
    boundary = []
    for u in range(min(n - 1, T)):
        acc = np.zeros_like(cache.tap_cache[0])
        for j in range(u + 1, n):
            acc = acc + k[j] * cache.tap_cache[j - u - 1]
        boundary.append(acc)
    for t in range(T):
        carried = P[t, 0] * cache.h_cached[0]
        for i in range(1, chunk.Q):
            carried = carried + P[t, i] * cache.h_cached[i]
        for u in range(min(len(boundary), t + 1)):
            carried = carried + L0[t, u] * boundary[u]
        y[t] = y[t] + contract(base.C[t], carried)
    return y


def continue_chunk(
    cache: ChunkCache, chunk: GfssmInstance, method: str = "scan"
) -> tuple[np.ndarray, ChunkCache]:
    """Continue a stream with the next chunk.

    ``method="scan"`` seeds :func:`grouped_scan` with the cached states and
    taps; ``method="matrix"`` evaluates the propagation-matrix form
    ``C_t^T (sum_i P[t, i] h^i + boundary taps) + (L o C B^T) x``.  Both give
    the same outputs; the returned cache is always computed by the scan.
    """
    _check_chunk(cache, chunk)
    base = chunk.base
    u = input_products(base.B, base.x)
    s = _filter(u, chunk.fir.k, cache.tap_cache)
    H = _init_state(cache.h_cached, chunk.Q, base.N, base.P, base.dtype)
    y = _scan(base.a, base.C, s, H, chunk.Q, cache.t_offset)
    new_cache = ChunkCache(H, _roll_taps(cache.tap_cache, u), cache.t_offset + base.T)
    if method == "matrix":
        y = _continue_matrix(cache, chunk)
    elif method != "scan":
        raise ValueError(f"method must be 'scan' or 'matrix', got {method!r}")
    return y, new_cache


def _chunk_of(full: GfssmInstance, start: int, stop: int) -> GfssmInstance:
    return GfssmInstance(full.base.slice(start, stop), full.cfg, full.fir)


def stream(full: GfssmInstance, bank: PromptBank, chunk_size: int, method: str = "scan") -> np.ndarray:
    """Process ``full`` in chunks of ``chunk_size``; output matches :func:`monolithic`."""
    if chunk_size < 1:
        raise ShapeError("chunk_size", f"must be >= 1, got {chunk_size}")
    bank = bank.astype(full.base.dtype)
    T = full.base.T
    first = min(chunk_size, T)
    y0, cache = init_fresh(bank, _chunk_of(full, 0, first))
    outs = [y0]
    for start in range(first, T, chunk_size):
        y, cache = continue_chunk(cache, _chunk_of(full, start, min(start + chunk_size, T)), method=method)
        outs.append(y)
    return np.concatenate(outs)


def monolithic(full: GfssmInstance, bank: PromptBank) -> np.ndarray:
    return init_fresh(bank.astype(full.base.dtype), full)[0]


def cache_to_bytes(cache: ChunkCache) -> bytes:
    """Header ``Q, N, P, n, t_offset`` (int64 LE), then float64 LE row-major
    ``h_cached`` followed by ``tap_cache``."""
    Q, N, P = cache.h_cached.shape
    header = CACHE_HEADER.pack(Q, N, P, cache.n, cache.t_offset)
    body = cache.h_cached.astype("<f8").tobytes(order="C") + cache.tap_cache.astype("<f8").tobytes(order="C")
    return header + body


def cache_from_bytes(data: bytes, dtype=np.float64) -> ChunkCache:
    if len(data) < CACHE_HEADER.size:
        raise ShapeError("cache", "truncated header")
    Q, N, P, n, t_offset = CACHE_HEADER.unpack_from(data)
    if min(Q, N, P, n) < 1 or t_offset < 0:
        raise ShapeError("cache", f"invalid header {(Q, N, P, n, t_offset)}")
    n_h, n_tap = Q * N * P, (n - 1) * N * P
    expected = CACHE_HEADER.size + 8 * (n_h + n_tap)
    if len(data) != expected:
        raise ShapeError("cache", f"expected {expected} bytes, got {len(data)}")
    payload = np.frombuffer(data, dtype="<f8", offset=CACHE_HEADER.size)
    h = payload[:n_h].reshape(Q, N, P).astype(dtype)
    taps = payload[n_h:].reshape(n - 1, N, P).astype(dtype)
    return ChunkCache(h, taps, t_offset)


def save_cache(cache: ChunkCache, path) -> None:
    Path(path).write_bytes(cache_to_bytes(cache))


def load_cache(path, dtype=np.float64) -> ChunkCache:
    return cache_from_bytes(Path(path).read_bytes(), dtype=dtype)
