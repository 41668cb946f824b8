"""Backward pass for the prompt-initialized GFSSM layer, a finite-difference
checker, and a small SGD trainer on synthetic copy tasks.

Decays are trained through a logistic parameterization ``a = sigmoid(alpha)``;
``decay="raw"`` switches gradients (and finite differences) to ``a`` itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import NonFiniteError, ShapeError
from .gfssm_kernel import FirCoefficients, GfssmInstance, GroupConfig, _filter, input_products
from .rng import Xoshiro256
from .sink_streaming import PromptBank, extend_with_prompts, init_fresh
from .ssd_core import SsdInstance

PARAM_NAMES = ("a", "B", "C", "x", "k", "prompts", "prompt_B")


@dataclass
class LayerGradients:
    grad_a: np.ndarray  # w.r.t. alpha unless decay="raw"
    grad_B: np.ndarray
    grad_C: np.ndarray
    grad_x: np.ndarray
    grad_k: np.ndarray
    grad_prompts: np.ndarray | None = None
    grad_prompt_B: np.ndarray | None = None

    def get(self, name: str) -> np.ndarray | None:
        return getattr(self, "grad_" + name)

    def global_norm(self) -> float:
        total = 0.0
        for name in PARAM_NAMES:
            g = self.get(name)
            if g is not None:
                total += float(np.sum(g * g))
        return math.sqrt(total)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _logit(a):
    return np.log(a) - np.log1p(-a)


def gfssm_forward(inst: GfssmInstance, bank: PromptBank | None = None) -> np.ndarray:
    """Layer output for the real positions (prompts in front when ``bank`` is given)."""
    if bank is None:
        from .gfssm_kernel import grouped_scan

        return grouped_scan(inst)[0]
    return init_fresh(bank.astype(inst.base.dtype), inst)[0]


def gfssm_backward(
    inst: GfssmInstance,
    bank: PromptBank | None,
    upstream: np.ndarray,
    decay: str = "logit",
) -> LayerGradients:
    """Exact gradients of ``sum_t <upstream_t, y_t>``.

    The forward scan is replayed keeping, per step, the pre-update state of the
    group being written and the summed state read by ``C_t``; the backward scan
    then walks the same group schedule in reverse with one adjoint per group.
    Without a bank the kernel's ``prompt_taps`` act as constants.
    """
    if decay not in ("logit", "raw"):
        raise ValueError(f"decay must be 'logit' or 'raw', got {decay!r}")
    base = inst.base
    g_out = np.asarray(upstream, dtype=base.dtype)
    if g_out.shape != (base.T, base.P):
        raise ShapeError("upstream", f"expected ({base.T}, {base.P}), got {g_out.shape}")

    if bank is not None:
        work = extend_with_prompts(bank.astype(base.dtype), inst)
        lead = bank.Q
    else:
        work = inst
        lead = 0
    wb = work.base
    E, Q, n = wb.T, inst.Q, inst.n
    k = inst.fir.k
    taps = work.prompt_taps
    G = np.zeros((E, wb.P), dtype=base.dtype)
    G[lead:] = g_out

    u = input_products(wb.B, wb.x)
    s = _filter(u, k, taps)
    H = np.zeros((Q, wb.N, wb.P), dtype=base.dtype)
    prev = np.empty_like(s)
    totals = np.empty_like(s)
    for e in range(E):
        grp = e % Q
        prev[e] = H[grp]
        H[grp] = wb.a[e] * H[grp] + s[e]
        tot = H[0]
        for i in range(1, Q):
            tot = tot + H[i]
        totals[e] = tot

    lam = np.zeros_like(H)
    grad_s = np.empty_like(s)
    grad_a = np.zeros(E, dtype=base.dtype)
    grad_C = np.zeros((E, wb.N), dtype=base.dtype)
    for e in range(E - 1, -1, -1):
        d = np.outer(wb.C[e], G[e])
        lam += d[None]
        grad_C[e] = totals[e] @ G[e]
        grp = e % Q
        grad_s[e] = lam[grp]
        grad_a[e] = np.sum(lam[grp] * prev[e])
        lam[grp] = wb.a[e] * lam[grp]

    grad_k = np.zeros(n, dtype=base.dtype)
    grad_u = np.zeros_like(u)
    for j in range(n):
        for e in range(E):
            src = e - j
            val = u[src] if src >= 0 else taps[-src - 1]
            grad_k[j] += np.sum(grad_s[e] * val)
            if src >= 0:
                grad_u[src] += k[j] * grad_s[e]
    grad_B = np.einsum("enp,ep->en", grad_u, wb.x)
    grad_x = np.einsum("enp,en->ep", grad_u, wb.B)

    ga = grad_a[lead:]
    if decay == "logit":
        ga = ga * base.a * (1.0 - base.a)
    out = LayerGradients(ga, grad_B[lead:], grad_C[lead:], grad_x[lead:], grad_k)
    if bank is not None:
        out.grad_prompts = grad_x[:lead]
        out.grad_prompt_B = grad_B[:lead]
    return out


def central_difference(f: Callable[[np.ndarray], float], theta, eps: float) -> np.ndarray:
    """``(f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps)`` for every coordinate."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(theta)
        flat[i] = orig - eps
        fm = f(theta)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def _with_param(inst: GfssmInstance, bank: PromptBank | None, name: str, value, decay: str):
    base = inst.base
    if name == "a":
        a = _sigmoid(value) if decay == "logit" else value
        return GfssmInstance(replace(base, a=a), inst.cfg, inst.fir, inst.prompt_taps), bank
    if name in ("B", "C", "x"):
        return GfssmInstance(replace(base, **{name: value}), inst.cfg, inst.fir, inst.prompt_taps), bank
    if name == "k":
        return GfssmInstance(base, inst.cfg, FirCoefficients(value), inst.prompt_taps), bank
    if name in ("prompts", "prompt_B"):
        if bank is None:
            raise ValueError(f"{name} needs a prompt bank")
        return inst, replace(bank, **{name: value})
    raise ValueError(f"unknown parameter {name!r}; choose from {PARAM_NAMES}")


def _current(inst: GfssmInstance, bank: PromptBank | None, name: str, decay: str) -> np.ndarray:
    if name == "a":
        return _logit(inst.base.a) if decay == "logit" else inst.base.a
    if name in ("B", "C", "x"):
        return getattr(inst.base, name)
    if name == "k":
        return inst.fir.k
    if bank is None:
        raise ValueError(f"{name} needs a prompt bank")
    return getattr(bank, name)


def finite_diff_grad(
    param: str,
    inst: GfssmInstance,
    bank: PromptBank | None,
    upstream: np.ndarray,
    eps: float = 1e-5,
    decay: str = "logit",
) -> np.ndarray:
    """Central-difference gradient of ``sum <upstream, y>`` w.r.t. one parameter block."""
    upstream = np.asarray(upstream, dtype=np.float64)

    def objective(theta: np.ndarray) -> float:
        i2, b2 = _with_param(inst, bank, param, theta, decay)
        return float(np.sum(upstream * gfssm_forward(i2, b2)))

    return central_difference(objective, _current(inst, bank, param, decay), eps)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest ``|g - f| / max(|g|, |f|)``; coordinates where both are below
    ``floor`` contribute their absolute difference instead."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    worst = 0.0
    for g, f in zip(analytic, numeric):
        scale = max(abs(g), abs(f))
        err = abs(g - f) if scale < floor else abs(g - f) / scale
        worst = max(worst, err)
    return worst


def random_layer(
    rng: Xoshiro256, T: int, N: int, P: int, cfg: GroupConfig, a_range=(0.05, 0.95)
) -> tuple[GfssmInstance, PromptBank]:
    """Random instance with random taps and prompts (a kept away from 0 and 1 for the logit)."""
    from .ssd_core import random_instance

    base = random_instance(rng, T, N, P, a_range=a_range)
    fir = FirCoefficients(rng.uniform(-1.0, 1.0, cfg.n))
    bank = PromptBank(rng.uniform(-1.0, 1.0, (cfg.Q, P)), rng.uniform(-1.0, 1.0, (cfg.Q, N)))
    return GfssmInstance(base, cfg, fir), bank


# --- toy tasks -------------------------------------------------------------

BLANK, MARKER = 0, 1


@dataclass(frozen=True)
class ToyTask:
    """Synthetic recall task.

    ``selective_copy``: ``n_tokens`` data tokens (ids ``2..vocab-1``) sit at
    random distinct positions among blanks in ``[0, T - n_tokens - 1)``, a
    marker follows, and the last ``n_tokens`` positions (marker inputs) must
    emit the data tokens in order.
    ``delayed_recall``: the token at position 0 must be emitted at ``T - 1``.
    """

    kind: str = "selective_copy"
    vocab: int = 8
    T: int = 32
    seed: int = 0
    n_tokens: int = 4

    def __post_init__(self) -> None:
        if self.kind not in ("selective_copy", "delayed_recall"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.vocab < 3:
            raise ValueError("vocab must leave room for blank, marker and data tokens")
        need = 2 * self.n_tokens + 1 if self.kind == "selective_copy" else 2
        if self.T < need:
            raise ValueError(f"T={self.T} too short for {self.kind} (needs >= {need})")

    @property
    def target_positions(self) -> np.ndarray:
        if self.kind == "selective_copy":
            return np.arange(self.T - self.n_tokens, self.T)
        return np.array([self.T - 1])

    def sample(self, rng: Xoshiro256, batch: int) -> tuple[np.ndarray, np.ndarray]:
        """``(tokens (batch, T), targets (batch, n_targets))``."""
        tokens = np.full((batch, self.T), BLANK, dtype=np.int64)
        targets = np.empty((batch, len(self.target_positions)), dtype=np.int64)
        for b in range(batch):
            if self.kind == "selective_copy":
                K = self.n_tokens
                span = self.T - K - 1
                pos = sorted(rng.permutation(span)[:K])
                data = rng.integers(2, self.vocab, K)
                tokens[b, pos] = data
                tokens[b, span:] = MARKER
                targets[b] = data
            else:
                tok = rng.integers(2, self.vocab)
                tokens[b, 0] = tok
                tokens[b, -1] = MARKER
                targets[b, 0] = tok
        return tokens, targets


@dataclass(frozen=True)
class ModelConfig:
    Q: int = 4
    n: int = 4
    N: int = 8
    P: int = 16
    batch: int = 16
    clip: float | None = 1.0
    a_init: float = 0.9


@dataclass
class ToyModel:
    embed: np.ndarray  # (vocab, P)
    alpha: np.ndarray  # (T,)
    B: np.ndarray
    C: np.ndarray
    k: np.ndarray
    prompts: np.ndarray
    prompt_B: np.ndarray
    W: np.ndarray  # (P, vocab)
    bias: np.ndarray

    @classmethod
    def init(cls, task: ToyTask, cfg: ModelConfig, rng: Xoshiro256) -> "ToyModel":
        V, T, N, P = task.vocab, task.T, cfg.N, cfg.P
        embed = rng.uniform(-1.0, 1.0, (V, P))
        alpha = np.full(T, _logit(cfg.a_init)) + rng.uniform(-0.1, 0.1, T)
        B = rng.uniform(-1.0, 1.0, (T, N)) / math.sqrt(N)
        C = rng.uniform(-1.0, 1.0, (T, N)) / math.sqrt(N)
        k = FirCoefficients.identity(cfg.n).k
        prompts = rng.uniform(-0.1, 0.1, (cfg.Q, P))
        prompt_B = rng.uniform(-0.1, 0.1, (cfg.Q, N))
        W = np.zeros((P, V))
        bias = np.zeros(V)
        return cls(embed, alpha, B, C, k, prompts, prompt_B, W, bias)

    def params(self) -> dict[str, np.ndarray]:
        return dict(vars(self))


def _layer_inputs(model: ToyModel, cfg: ModelConfig, tokens: np.ndarray):
    """Fold the batch into the channel axis: the layer is linear in x and all
    its parameters are shared, so one instance with ``batch * P`` channels is
    exactly ``batch`` independent sequences."""
    batch, T = tokens.shape
    x = model.embed[tokens]  # (batch, T, P)
    x_fold = x.transpose(1, 0, 2).reshape(T, batch * cfg.P)
    base = SsdInstance(_sigmoid(model.alpha), model.B, model.C, x_fold)
    inst = GfssmInstance(base, GroupConfig(cfg.Q, cfg.n), FirCoefficients(model.k))
    bank = PromptBank(np.tile(model.prompts, (1, batch)), model.prompt_B)
    return inst, bank


def _loss_and_grads(model: ToyModel, cfg: ModelConfig, task: ToyTask, tokens, targets, need_grad=True):
    batch, T = tokens.shape
    inst, bank = _layer_inputs(model, cfg, tokens)
    y = gfssm_forward(inst, bank).reshape(T, batch, cfg.P).transpose(1, 0, 2)
    pos = task.target_positions
    feats = y[:, pos]  # (batch, K, P)
    logits = feats @ model.W + model.bias
    logits = logits - logits.max(axis=-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    count = batch * len(pos)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-picked.sum() / count)
    acc = float(np.mean(np.argmax(logp, axis=-1) == targets))
    if not need_grad:
        return loss, acc, None
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1)
    dlogits /= count
    grads = {
        "W": np.einsum("bkp,bkv->pv", feats, dlogits),
        "bias": dlogits.sum(axis=(0, 1)),
    }
    dy = np.zeros_like(y)
    dy[:, pos] = dlogits @ model.W.T
    up = dy.transpose(1, 0, 2).reshape(T, batch * cfg.P)
    lg = gfssm_backward(inst, bank, up, decay="logit")
    grads["alpha"] = lg.grad_a
    grads["B"] = lg.grad_B
    grads["C"] = lg.grad_C
    grads["k"] = lg.grad_k
    grads["prompts"] = lg.grad_prompts.reshape(cfg.Q, batch, cfg.P).sum(axis=1)
    grads["prompt_B"] = lg.grad_prompt_B
    gx = lg.grad_x.reshape(T, batch, cfg.P).transpose(1, 0, 2)
    dembed = np.zeros_like(model.embed)
    np.add.at(dembed, tokens.reshape(-1), gx.reshape(-1, cfg.P))
    grads["embed"] = dembed
    return loss, acc, grads


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    final_accuracy: float = float("nan")
    final_eval_loss: float = float("nan")
    failed: bool = False
    failed_step: int | None = None

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def train_toy(
    task: ToyTask,
    model_cfg: ModelConfig,
    steps: int,
    lr: float,
    seed: int,
    eval_batches: int = 4,
    log: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Plain SGD on ``embed -> GFSSM layer -> linear readout``.

    Loss is softmax cross-entropy over the task's target positions only.
    ``losses[i]`` is the minibatch loss measured before update ``i``.  A
    non-finite loss stops the run and marks it failed at that step.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    rng = Xoshiro256(seed)
    data_rng = Xoshiro256(task.seed)
    model = ToyModel.init(task, model_cfg, rng)
    result = TrainResult()
    for step in range(steps):
        tokens, targets = task.sample(data_rng, model_cfg.batch)
        try:
            loss, _, grads = _loss_and_grads(model, model_cfg, task, tokens, targets)
        except NonFiniteError:
            loss = float("nan")
        if not math.isfinite(loss):
            result.failed, result.failed_step = True, step
            result.losses.append(loss)
            result.grad_norms.append(float("nan"))
            return result
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        result.losses.append(loss)
        result.grad_norms.append(norm)
        if log is not None:
            log(step, loss, norm)
        scale = lr
        if model_cfg.clip is not None and norm > model_cfg.clip:
            scale = lr * model_cfg.clip / norm
        for name, g in grads.items():
            setattr(model, name, getattr(model, name) - scale * g)

    eval_rng = Xoshiro256(task.seed ^ 0x5DEECE66D)
    losses, accs = [], []
    for _ in range(eval_batches):
        tokens, targets = task.sample(eval_rng, model_cfg.batch)
        loss, acc, _ = _loss_and_grads(model, model_cfg, task, tokens, targets, need_grad=False)
        losses.append(loss)
        accs.append(acc)
    result.final_eval_loss = float(np.mean(losses))
    result.final_accuracy = float(np.mean(accs))
    return result
