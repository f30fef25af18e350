"""Parameter-group optimizers: AdamAtan2 and Muon, decoupled weight decay,
warmup learning-rate schedule, and EMA shadow parameters.

AdamAtan2 replaces Adam's epsilon-guarded division with atan2(m_hat, sqrt(v_hat)),
which bounds every coordinate's update by lr*pi/2 and is invariant to rescaling
the gradient history. Muon orthogonalizes the momentum-accumulated gradient of
2-D matrices with a quintic Newton-Schulz iteration; vectors, embeddings, heads
and conv kernels stay in the AdamAtan2 group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from loopformer.tensor import NumericError, Tensor

NS_COEFFS = (3.4445, -4.7750, 2.0315)


@dataclass
class ParamGroup:
    names: list[str]
    lr: float
    weight_decay: float = 0.0
    kind: str = "adam_atan2"  # adam_atan2 | muon

    def __post_init__(self):
        if self.kind not in ("adam_atan2", "muon"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def newton_schulz_orthogonalize(g: np.ndarray, steps: int = 5) -> np.ndarray:
    """Push the singular values of a matrix toward 1 (fixed quintic iteration)."""
    a, b, c = NS_COEFFS
    norm = np.linalg.norm(g)
    if norm == 0.0:
        return g
    x = g / (norm + 1e-7)
    transposed = x.shape[0] > x.shape[1]
    if transposed:
        x = x.T
    for _ in range(steps):
        s = x @ x.T
        x = a * x + (b * s + c * s @ s) @ x
    return x.T if transposed else x


def lr_schedule(step: int, warmup: int, base_lr: float, total_steps: int | None = None,
                kind: str = "constant") -> float:
    """Linear warmup then constant (or cosine decay to zero over total_steps)."""
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if kind == "cosine":
        if total_steps is None:
            raise ValueError("cosine schedule needs total_steps")
        span = max(1, total_steps - warmup)
        frac = min(1.0, (step - warmup) / span)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return base_lr


def ema_update(params: dict[str, Tensor], shadow: dict[str, np.ndarray], decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    for name, t in params.items():
        shadow[name] = decay * shadow[name] + (1.0 - decay) * t.data


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)         # first moments (adam)
    v: dict = field(default_factory=dict)         # second moments (adam)
    momentum: dict = field(default_factory=dict)  # muon buffers
    ema: dict = field(default_factory=dict)       # shadow parameters


class Optimizer:
    """Applies per-group updates; every trainable parameter must belong to
    exactly one group."""

    def __init__(self, params: dict[str, Tensor], groups: list[ParamGroup],
                 beta1: float = 0.9, beta2: float = 0.95,
                 muon_momentum: float = 0.95, nesterov: bool = True, ns_steps: int = 5,
                 ema_decay: float = 0.999):
        self.params = params
        self.groups = groups
        self.beta1, self.beta2 = beta1, beta2
        self.muon_momentum, self.nesterov, self.ns_steps = muon_momentum, nesterov, ns_steps
        self.ema_decay = ema_decay

        claimed = [n for g in groups for n in g.names]
        if sorted(claimed) != sorted(params):
            missing = set(params) - set(claimed)
            extra = set(claimed) - set(params)
            dupes = {n for n in claimed if claimed.count(n) > 1}
            raise ValueError(f"param group partition invalid: missing={sorted(missing)} "
                             f"unknown={sorted(extra)} duplicated={sorted(dupes)}")
        for g in groups:
            if g.kind == "muon":
                bad = [n for n in g.names if params[n].ndim != 2]
                if bad:
                    raise ValueError(f"muon group holds non-matrix params: {bad}")

        self.state = OptimState()
        for g in groups:
            for name in g.names:
                zeros = np.zeros_like(params[name].data)
                if g.kind == "adam_atan2":
                    self.state.m[name] = zeros.copy()
                    self.state.v[name] = zeros.copy()
                else:
                    self.state.momentum[name] = zeros.copy()
        self.state.ema = {name: t.data.copy() for name, t in params.items()}

    def step(self, lr_scale: float = 1.0) -> None:
        self.state.step += 1
        t = self.state.step
        for g in self.groups:
            lr = g.lr * lr_scale
            for name in g.names:
                p = self.params[name]
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                if not np.all(np.isfinite(grad)):
                    raise NumericError(f"non-finite gradient for {name} at step {t}")
                if g.weight_decay:
                    p.data = p.data * np.asarray(1.0 - lr * g.weight_decay, dtype=p.dtype)
                if g.kind == "adam_atan2":
                    self._adam_atan2(name, p, grad, lr, t)
                else:
                    self._muon(name, p, grad, lr)
        ema_update(self.params, self.state.ema, self.ema_decay)

    def _adam_atan2(self, name: str, p: Tensor, grad: np.ndarray, lr: float, t: int) -> None:
        m = self.state.m[name] = self.beta1 * self.state.m[name] + (1 - self.beta1) * grad
        v = self.state.v[name] = self.beta2 * self.state.v[name] + (1 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        p.data = (p.data - lr * np.arctan2(m_hat, np.sqrt(v_hat))).astype(p.dtype)

    def _muon(self, name: str, p: Tensor, grad: np.ndarray, lr: float) -> None:
        buf = self.state.momentum[name]
        buf += (1.0 - self.muon_momentum) * (grad - buf)
        update = grad + (buf - grad) * self.muon_momentum if self.nesterov else buf
        update = newton_schulz_orthogonalize(update, self.ns_steps)
        scale = math.sqrt(max(1.0, p.shape[0] / p.shape[1]))
        p.data = (p.data - lr * scale * update).astype(p.dtype)

    # -- persistence ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([self.state.step], dtype=np.int64)}
        for tag, bag in (("m", self.state.m), ("v", self.state.v),
                         ("momentum", self.state.momentum), ("ema", self.state.ema)):
            for name, arr in bag.items():
                out[f"opt.{tag}.{name}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.step = int(arrays["opt.step"][0])
        for tag, bag in (("m", self.state.m), ("v", self.state.v),
                         ("momentum", self.state.momentum), ("ema", self.state.ema)):
            for name in bag:
                bag[name] = arrays[f"opt.{tag}.{name}"].astype(bag[name].dtype).copy()


def default_groups(named: dict[str, Tensor], lr: float, puzzle_lr: float,
                   weight_decay: float, use_muon: bool = False) -> list[ParamGroup]:
    """Standard partition: puzzle embedding gets its own learning rate; with
    muon on, the stack's projection matrices move to the muon group."""
    puzzle, muon, main = [], [], []
    for name, t in named.items():
        if name == "embed.puzzle_table":
            puzzle.append(name)
        elif (use_muon and t.ndim == 2 and name.startswith("layers.")
              and not name.endswith("w_dwconv") and not name.endswith(".conv")):
            muon.append(name)
        else:
            main.append(name)
    groups = [ParamGroup(names=main, lr=lr, weight_decay=weight_decay)]
    if muon:
        groups.append(ParamGroup(names=muon, lr=lr, weight_decay=weight_decay, kind="muon"))
    if puzzle:
        groups.append(ParamGroup(names=puzzle, lr=puzzle_lr, weight_decay=weight_decay))
    return groups
