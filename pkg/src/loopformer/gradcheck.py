"""Finite-difference verification suite.

Every differentiable kernel is swept over random double-precision inputs and
compared against central differences; one end-to-end tiny looped model is
checked with its truncation boundary frozen (the tape's gradient is the
derivative of the rollout *given* the forward-only segment's output, so the FD
probe holds that boundary at its base value).
"""

from __future__ import annotations

import time

import numpy as np

from loopformer import tasks
from loopformer import tensor as T
from loopformer.model import LoopedModel, ModelConfig
from loopformer.tensor import Tape, Tensor, check_gradients, max_rel_err, numeric_grad

DEFAULT_TOL = 1e-4

OP_CHECKS = [
    ("add", lambda t: T.sum_(T.add(t["a"], t["b"])), {"a": (3, 4), "b": (4,)}),
    ("sub", lambda t: T.sum_(T.sub(t["a"], t["b"])), {"a": (3, 4), "b": (3, 4)}),
    ("mul", lambda t: T.sum_(T.mul(t["a"], t["b"])), {"a": (2, 3, 4), "b": (3, 1)}),
    ("neg", lambda t: T.sum_(T.neg(t["a"])), {"a": (5,)}),
    ("matmul", lambda t: T.sum_(T.matmul(t["a"], t["b"])), {"a": (3, 4), "b": (4, 2)}),
    ("matmul_batched", lambda t: T.sum_(T.matmul(t["a"], t["b"])), {"a": (2, 3, 4), "b": (4, 3)}),
    ("silu", lambda t: T.sum_(T.silu(t["a"])), {"a": (6,)}),
    ("relu", lambda t: T.sum_(T.relu(t["a"])), {"a": (6,)}),
    ("sigmoid", lambda t: T.sum_(T.sigmoid(t["a"])), {"a": (6,)}),
    ("softmax_lastdim", lambda t: T.sum_(T.mul(t["a"], T.softmax_lastdim(t["a"]))), {"a": (3, 5)}),
    ("rmsnorm", lambda t: T.sum_(T.silu(T.rmsnorm(t["a"], t["g"]))), {"a": (3, 4), "g": (4,)}),
    ("dwconv1d", lambda t: T.sum_(T.dwconv1d(t["a"], t["k"])), {"a": (5, 3), "k": (3, 2)}),
    ("mean", lambda t: T.sum_(T.mean(t["a"], axis=1, keepdims=True)), {"a": (3, 4)}),
    ("sum", lambda t: T.mean(T.sum_(t["a"], axis=0)), {"a": (3, 4)}),
    ("reshape", lambda t: T.sum_(T.silu(T.reshape(t["a"], (6, 2)))), {"a": (3, 4)}),
    ("transpose", lambda t: T.sum_(T.silu(T.transpose(t["a"]))), {"a": (3, 4)}),
    ("narrow", lambda t: T.sum_(T.silu(T.narrow(t["a"], 1, 1, 2))), {"a": (3, 4)}),
    ("concat", lambda t: T.sum_(T.silu(T.concat([t["a"], t["b"]], axis=-1))),
     {"a": (3, 2), "b": (3, 3)}),
]


def _cross_entropy_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    targets = np.array([0, 2, -1, 1])
    return check_gradients(
        lambda t: T.cross_entropy(t["l"], targets, ignore_index=-1),
        {"l": rng.normal(size=(4, 3))},
    )


def check_ops(sweeps: int = 20, tol: float = DEFAULT_TOL) -> list[dict]:
    checks = []
    for name, build, shapes in OP_CHECKS:
        worst = 0.0
        for seed in range(sweeps):
            rng = np.random.default_rng(hash(name) % 2**32 + seed)
            arrays = {k: rng.normal(size=s) for k, s in shapes.items()}
            worst = max(worst, check_gradients(build, arrays))
        checks.append({"name": name, "max_rel_err": worst, "tol": tol, "passed": worst < tol})
    worst = max(_cross_entropy_check(seed) for seed in range(sweeps))
    checks.append({"name": "cross_entropy", "max_rel_err": worst, "tol": tol,
                   "passed": worst < tol})
    return checks


def check_detach_exact() -> dict:
    """Gradient upstream of a detach is exactly the constant-replacement one."""
    rng = np.random.default_rng(0)
    xv, wv = rng.normal(size=5), rng.normal(size=5)
    with T.precision("double"):
        w1 = Tensor(wv, requires_grad=True)
        x1 = Tensor(xv, requires_grad=True)
        with Tape() as tape:
            mid = T.silu(T.mul(x1, w1))
            loss = T.sum_(T.mul(T.detach(mid), w1))
        tape.backward(loss)

        w2 = Tensor(wv, requires_grad=True)
        with Tape() as tape2:
            const = Tensor(T.silu(T.mul(Tensor(xv), Tensor(wv))).data)
            loss2 = T.sum_(T.mul(const, w2))
        tape2.backward(loss2)
    exact = bool(np.array_equal(w1.grad, w2.grad) and x1.grad is None)
    return {"name": "detach_zeroing_exact", "max_rel_err": 0.0 if exact else np.inf,
            "tol": 0.0, "passed": exact}


def end_to_end_check(tol: float = DEFAULT_TOL, h: float = 1e-5) -> dict:
    """Tiny looped model (depth 2, hidden 16, 3 loops, 1 forward-only, 6 tokens):
    tape gradients vs FD with the truncation boundary frozen at its base value."""
    cfg = ModelConfig(depth=2, hidden=16, heads=2, loops=3, forward_only_loops=1,
                      act_max_steps=1, vocab_size=tasks.VOCAB_SIZE, max_seq_len=6,
                      ffn_width=16, puzzle_vocab=2, precision="double")
    model = LoopedModel.init(cfg, seed=5)
    rng = np.random.default_rng(6)
    grid = rng.integers(0, tasks.NUM_COLORS, size=(2, 2))
    target = rng.integers(0, tasks.NUM_COLORS, size=(2, 2))
    tok = tasks.Tokenizer(cfg.max_seq_len)
    tokens, targets = tok.encode(grid), tok.encode(target)

    model.params.zero_grad()
    with Tape() as tape:
        result = model.act_forward(tokens, 0)
        loss = model.training_loss(result, targets, ignore_index=tasks.PAD_TOKEN)
    tape.backward(loss)

    n = cfg.forward_only_loops
    embed_step = lambda s: model.embed_input(tokens, 0, s)
    with T.no_grad():
        hcur = embed_step(0)
        for t_idx in range(1, n + 1):
            h_in = T.add(hcur, embed_step(t_idx - 1)) if t_idx > 1 else hcur
            hcur, _ = model.stack(h_in)
    boundary = hcur.data.copy()

    def segment_loss() -> float:
        with T.no_grad():
            hseg = Tensor(boundary)
            total = 0.0
            for t_idx in range(n + 1, cfg.loops + 1):
                h_in = T.add(hseg, embed_step(t_idx - 1)) if t_idx > 1 else hseg
                hseg, _ = model.stack(h_in)
                total += T.cross_entropy(T.matmul(hseg, model.params.unembed), targets,
                                         ignore_index=tasks.PAD_TOKEN).item()
        return total

    worst = 0.0
    for name, tensor in model.params.named().items():
        def f(x, tensor=tensor):
            saved = tensor.data
            tensor.data = x
            try:
                return segment_loss()
            finally:
                tensor.data = saved

        num = numeric_grad(f, tensor.data.copy().astype(np.float64), h)
        ana = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        worst = max(worst, max_rel_err(np.asarray(ana, dtype=np.float64), num))
    return {"name": "end_to_end_tiny_model", "max_rel_err": worst, "tol": tol,
            "passed": worst < tol}


def run_suite(sweeps: int = 20, tol: float = DEFAULT_TOL) -> dict:
    t0 = time.time()
    checks = check_ops(sweeps=sweeps, tol=tol)
    checks.append(check_detach_exact())
    checks.append(end_to_end_check(tol=tol))
    return {
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
        "worst": max(c["max_rel_err"] for c in checks),
        "elapsed_seconds": round(time.time() - t0, 2),
    }
