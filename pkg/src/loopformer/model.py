"""The looped model: a weight-tied layer stack applied for M inner loops with
truncated backpropagation (first N loops forward-only), wrapped in an adaptive
outer loop with token-level halting.

Gradient wiring follows three rules:
  * inner loops 1..N run without tape recording, so values flow but gradients
    stop at the truncation boundary;
  * the hidden-state carry between outer steps is detached, so each outer step
    backpropagates only through its own (M - N)-loop window;
  * the halting head trains through the step-mixture weights.
"""

from __future__ import annotations

import math
from contextlib import nullcontext
from dataclasses import dataclass, fields

import numpy as np

from loopformer import blocks as B
from loopformer import tensor as T
from loopformer.serialize import load_checkpoint, save_checkpoint
from loopformer.tensor import DTYPES, Tensor


class ConfigError(ValueError):
    """Invalid configuration; message lists every violated invariant."""


@dataclass
class ModelConfig:
    depth: int = 4                  # layers in the shared stack
    hidden: int = 512
    heads: int = 8
    loops: int = 8                  # inner loops per outer step
    forward_only_loops: int = 2     # leading loops run without gradients
    act_max_steps: int = 16
    halt_epsilon: float = 0.1
    vocab_size: int = 13
    max_seq_len: int = 64
    conv_insertion: str = "after_mlp_expansion"
    kernel_size: int = 2
    ffn_activation: str = "swiglu"
    attention_softmax: bool = True
    conv_activation: str = "silu"
    ffn_width: int | None = None    # None -> 4 * hidden
    positional: str = "sinusoidal"  # sinusoidal | learned | rotary
    depth_encoding: str = "sinusoidal"  # sinusoidal | learned | none
    depth_table_size: int = 64      # learned depth rows (independent of loop counts)
    pre_norm: bool = False
    causal: bool = False
    input_injection: bool = True
    puzzle_embedding: str = "family"  # instance | family | none
    puzzle_vocab: int = 16
    act_sequence_level: bool = False
    supervise_mixture: bool | None = None  # None -> on when act_max_steps > 1
    normalize_loop_loss: bool = False
    ponder_cost: float = 0.0
    halt_bias_init: float = -2.0
    precision: str = "single"

    @property
    def width(self) -> int:
        return self.ffn_width if self.ffn_width is not None else 4 * self.hidden

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @property
    def mixture_supervised(self) -> bool:
        if self.supervise_mixture is None:
            return self.act_max_steps > 1
        return self.supervise_mixture

    def violations(self) -> list[str]:
        bad = []
        if not (0 <= self.forward_only_loops < self.loops):
            bad.append(f"forward_only_loops must satisfy 0 <= N < loops "
                       f"(N={self.forward_only_loops}, loops={self.loops})")
        if self.act_max_steps < 1:
            bad.append(f"act_max_steps must be >= 1 (got {self.act_max_steps})")
        if not (0.0 < self.halt_epsilon < 0.5):
            bad.append(f"halt_epsilon must lie in (0, 0.5) (got {self.halt_epsilon})")
        if self.hidden % self.heads:
            bad.append(f"hidden ({self.hidden}) not divisible by heads ({self.heads})")
        if self.conv_insertion not in B.CONV_INSERTIONS:
            bad.append(f"unknown conv_insertion {self.conv_insertion!r}")
        if self.ffn_activation not in B.FFN_ACTIVATIONS:
            bad.append(f"unknown ffn_activation {self.ffn_activation!r}")
        if self.kernel_size < 1:
            bad.append(f"kernel_size must be >= 1 (got {self.kernel_size})")
        if self.positional not in ("sinusoidal", "learned", "rotary"):
            bad.append(f"unknown positional scheme {self.positional!r}")
        if self.depth_encoding not in ("sinusoidal", "learned", "none"):
            bad.append(f"unknown depth_encoding {self.depth_encoding!r}")
        if self.puzzle_embedding not in ("instance", "family", "none"):
            bad.append(f"unknown puzzle_embedding {self.puzzle_embedding!r}")
        if self.precision not in DTYPES:
            bad.append(f"unknown precision {self.precision!r}")
        if self.depth < 1 or self.hidden < 1 or self.vocab_size < 2 or self.max_seq_len < 1:
            bad.append("depth, hidden, max_seq_len must be >= 1 and vocab_size >= 2")
        return bad

    def validate(self) -> "ModelConfig":
        bad = self.violations()
        if bad:
            raise ConfigError("invalid model config:\n  - " + "\n  - ".join(bad))
        return self

    def nonlinearity(self) -> B.NonlinearityConfig:
        return B.NonlinearityConfig(ffn_activation=self.ffn_activation,
                                    attention_softmax=self.attention_softmax,
                                    conv_activation=self.conv_activation)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        # strict keys only; callers aggregate invariant violations via validate()
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    embed: B.EmbedParams
    pe: B.PositionalEncoding
    layers: list[B.LayerParams]
    unembed: Tensor
    halt_w: Tensor
    halt_b: Tensor

    def named(self) -> dict[str, Tensor]:
        out = self.embed.named("embed")
        out.update(self.pe.named("pe"))
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layers.{i}"))
        out["head.unembed"] = self.unembed
        out["halt.w"] = self.halt_w
        out["halt.b"] = self.halt_b
        return out

    def count(self) -> int:
        return sum(t.size for t in self.named().values())

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.grad = None


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    cfg.validate()
    dt = cfg.dtype
    d = cfg.hidden
    std = 1.0 / math.sqrt(d)
    token_table = Tensor(B.trunc_normal(rng, (cfg.vocab_size, d), std, dt), requires_grad=True)
    puzzle_table = None
    if cfg.puzzle_embedding != "none":
        puzzle_table = Tensor(np.zeros((cfg.puzzle_vocab, d), dtype=dt), requires_grad=True)
    pos_table = None
    if cfg.positional == "learned":
        pos_table = Tensor(B.trunc_normal(rng, (cfg.max_seq_len, d), std, dt), requires_grad=True)
    depth_table = None
    if cfg.depth_encoding == "learned":
        depth_table = Tensor(B.trunc_normal(rng, (cfg.depth_table_size, d), std, dt),
                             requires_grad=True)
    pe = B.PositionalEncoding(
        scheme=cfg.positional, dim=d, max_len=cfg.max_seq_len,
        max_depth=max(cfg.depth_table_size, cfg.loops * cfg.act_max_steps + 1),
        pos_table=pos_table, depth_table=depth_table,
    )
    nl = cfg.nonlinearity()
    layers = [
        B.init_layer(rng, d, cfg.heads, cfg.width, cfg.conv_insertion, cfg.kernel_size, nl, dt)
        for _ in range(cfg.depth)
    ]
    # small-std head: near-uniform logits at step 0 (closed-form initial loss
    # holds to ~2%) while still letting gradient reach the body immediately
    unembed = Tensor(B.trunc_normal(rng, (d, cfg.vocab_size), 0.1 * std, dt), requires_grad=True)
    halt_w = Tensor(np.zeros((d, 1), dtype=dt), requires_grad=True)
    halt_b = Tensor(np.full((1,), cfg.halt_bias_init, dtype=dt), requires_grad=True)
    return ModelParams(embed=B.EmbedParams(token_table=token_table, puzzle_table=puzzle_table),
                       pe=pe, layers=layers, unembed=unembed, halt_w=halt_w, halt_b=halt_b)


@dataclass
class LoopStep:
    """One inner loop's result."""
    index: int              # 1-based loop index within the rollout
    hidden: Tensor          # top-layer output
    trainable: bool
    attn: list | None = None


@dataclass
class OuterStep:
    loops: list[LoopStep]
    halt_prob: Tensor | None = None   # (B, T) or (T,)
    delta: np.ndarray | None = None
    halted_now: np.ndarray | None = None


@dataclass
class Prediction:
    grids: list
    scores: list
    steps_used: np.ndarray
    truncated: bool


@dataclass
class ActResult:
    """Forward rollout record: mixture state, logits, and halting bookkeeping."""
    h_final: Tensor
    logits: Tensor
    steps_used: np.ndarray          # outer steps consumed per token
    outer: list[OuterStep]
    delta_total: np.ndarray         # summed allocation per token
    remainder: Tensor | None        # allocation paid at the halting step

    @property
    def act_steps(self) -> int:
        return len(self.outer)


class LoopedModel:
    """Config + parameters with the rollout, loss, and decode entry points."""

    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg.validate()
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "LoopedModel":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "LoopedModel":
        """Clone with parameter values replaced by `arrays` (e.g. EMA shadows)."""
        clone = LoopedModel(self.cfg, init_params(self.cfg, np.random.default_rng(0)))
        named = clone.params.named()
        if set(named) != set(arrays):
            missing = set(named) ^ set(arrays)
            raise KeyError(f"parameter names disagree: {sorted(missing)}")
        for name, t in named.items():
            t.data = np.ascontiguousarray(arrays[name].astype(t.dtype))
        return clone

    # -- embedding ---------------------------------------------------------

    def embed_input(self, tokens, puzzle_ids, step: int) -> Tensor:
        return B.embed(tokens, puzzle_ids, self.params.embed, self.params.pe,
                       step if self.cfg.depth_encoding != "none" else 0)

    def _mask(self, seq_len: int) -> Tensor | None:
        if not self.cfg.causal:
            return None
        return B.causal_mask(seq_len, self.cfg.dtype)

    # -- inner rollout with truncated backprop ------------------------------

    def stack(self, h: Tensor, mask=None, collect_attn: bool = False):
        """One application of the shared depth-`D` stack."""
        nl = self.cfg.nonlinearity()
        attns = [] if collect_attn else None
        for layer in self.params.layers:
            h, attn = B.transition_block(h, layer, nl=nl, insertion=self.cfg.conv_insertion,
                                         mask=mask, pe=self.params.pe, pre_norm=self.cfg.pre_norm)
            if collect_attn:
                attns.append(attn)
        return h, attns

    def inner_rollout(self, h0: Tensor, embed_step=None, depth_offset: int = 0,
                      forward_only: int | None = None, collect_attn: bool = False):
        """Apply the stack `loops` times; the first `forward_only` loops are not taped.

        embed_step(global_loop_index) re-injects the input embedding when the
        config flag is on. Returns (final hidden, list of LoopStep).
        """
        cfg = self.cfg
        n = cfg.forward_only_loops if forward_only is None else forward_only
        mask = self._mask(h0.shape[-2])
        steps: list[LoopStep] = []
        h = h0
        for t in range(1, cfg.loops + 1):
            trainable = t > n
            guard = nullcontext() if trainable else T.no_grad()
            with guard:
                h_in = h
                if t > 1 and cfg.input_injection and embed_step is not None:
                    h_in = T.add(h, embed_step(depth_offset + t - 1))
                h, attns = self.stack(h_in, mask=mask, collect_attn=collect_attn)
            steps.append(LoopStep(index=t, hidden=h, trainable=trainable, attn=attns))
        return h, steps

    # -- adaptive outer loop -------------------------------------------------

    def act_forward(self, tokens, puzzle_ids=0, collect_attn: bool = False,
                    forward_only: int | None = None) -> ActResult:
        """Run up to act_max_steps outer steps with per-token halting.

        Each outer step runs one full inner rollout; a token's allocation is its
        halting probability until the step where its accumulated probability
        reaches 1 - epsilon, where it receives the remainder and freezes. At the
        cap, leftover mass goes to the final step.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens)
        lead = tokens.shape  # (T,) or (B, T)
        dt = cfg.dtype

        # the static embedding is one shared graph node; only the depth row
        # changes across loops
        static = B.embed_static(tokens, puzzle_ids, self.params.embed, self.params.pe)

        def embed_step(step):
            if cfg.depth_encoding == "none":
                return static
            depth = self.params.pe.depth(step, dt)
            return T.add(static, depth) if depth is not None else static

        active = np.ones(lead, dtype=bool)
        cum_np = np.zeros(lead, dtype=np.float64)
        cum_t = Tensor(np.zeros(lead, dtype=dt))
        h_final = Tensor(np.zeros(lead + (cfg.hidden,), dtype=dt))
        steps_used = np.zeros(lead, dtype=np.int64)
        remainder = None
        outer: list[OuterStep] = []
        carry = None

        for s in range(1, cfg.act_max_steps + 1):
            base = (s - 1) * cfg.loops
            if s == 1:
                h0 = embed_step(0)
            elif cfg.input_injection:
                h0 = T.add(T.detach(carry), embed_step(base))
            else:
                h0 = T.detach(carry)
            h_top, loops = self.inner_rollout(h0, embed_step=embed_step, depth_offset=base,
                                              forward_only=forward_only, collect_attn=collect_attn)
            carry = h_top

            p = T.sigmoid(T.add(T.matmul(h_top, self.params.halt_w), self.params.halt_b))
            p = T.reshape(p, lead)
            if cfg.act_sequence_level:
                p = T.mean(p, axis=-1, keepdims=True)
            p_np = p.data.astype(np.float64)

            if cfg.act_sequence_level:
                seq_active = active.all(axis=-1, keepdims=True)
                seq_cum = np.where(active, cum_np, np.inf).min(axis=-1, keepdims=True)
                would_halt = seq_active & ((seq_cum + p_np >= 1.0 - cfg.halt_epsilon)
                                           | (s == cfg.act_max_steps))
                halt_now = np.broadcast_to(would_halt, lead).copy() & active
                cont_now = np.broadcast_to(seq_active & ~would_halt, lead).copy() & active
            else:
                halt_now = active & ((cum_np + p_np >= 1.0 - cfg.halt_epsilon)
                                     | (s == cfg.act_max_steps))
                cont_now = active & ~halt_now

            halt_m = Tensor(halt_now.astype(dt), dtype=dt)
            cont_m = Tensor(cont_now.astype(dt), dtype=dt)
            one = Tensor(np.ones(cum_t.shape, dtype=dt))
            delta = T.add(T.mul(cont_m, p), T.mul(halt_m, T.sub(one, cum_t)))
            h_final = T.add(h_final, T.mul(T.reshape(delta, delta.shape + (1,)), h_top))

            rem_step = T.mul(halt_m, T.sub(one, cum_t))
            remainder = rem_step if remainder is None else T.add(remainder, rem_step)

            cum_np = cum_np + np.where(cont_now, p_np, 0.0) + np.where(halt_now, 1.0 - cum_np, 0.0)
            cum_t = T.add(cum_t, delta)
            steps_used[halt_now] = s
            active = active & ~halt_now

            outer.append(OuterStep(loops=loops, halt_prob=p, delta=delta.data.copy(),
                                   halted_now=halt_now))
            if not active.any():
                break

        logits = T.matmul(h_final, self.params.unembed)
        return ActResult(h_final=h_final, logits=logits, steps_used=steps_used, outer=outer,
                         delta_total=cum_np, remainder=remainder)

    # -- losses ---------------------------------------------------------------

    def loop_losses(self, result: ActResult, targets, ignore_index: int) -> list[Tensor]:
        """Cross-entropy on each trainable loop's unembedded output, every outer step."""
        terms = []
        for step in result.outer:
            for loop in step.loops:
                if not loop.trainable:
                    continue
                logits = T.matmul(loop.hidden, self.params.unembed)
                terms.append(T.cross_entropy(logits, targets, ignore_index=ignore_index))
        return terms

    def training_loss(self, result: ActResult, targets, ignore_index: int,
                      terms: list[Tensor] | None = None) -> Tensor:
        cfg = self.cfg
        if terms is None:
            terms = self.loop_losses(result, targets, ignore_index)
        total = terms[0]
        for term in terms[1:]:
            total = T.add(total, term)
        if cfg.normalize_loop_loss:
            total = T.mul(total, 1.0 / max(1, cfg.loops - cfg.forward_only_loops))
        if cfg.mixture_supervised:
            total = T.add(total, T.cross_entropy(result.logits, targets, ignore_index=ignore_index))
        if cfg.ponder_cost > 0 and result.remainder is not None:
            steps_const = Tensor(result.steps_used.astype(cfg.dtype))
            ponder = T.mean(T.add(steps_const, result.remainder))
            total = T.add(total, T.mul(ponder, cfg.ponder_cost))
        return total

    # -- decoding ---------------------------------------------------------------

    def greedy_tokens(self, tokens, puzzle_ids=0):
        """Argmax decode plus per-position log-probability of the chosen tokens."""
        with T.no_grad():
            result = self.act_forward(tokens, puzzle_ids)
        logits = result.logits.data
        pred = logits.argmax(axis=-1)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        chosen = np.take_along_axis(logp, pred[..., None], axis=-1)[..., 0]
        return pred, chosen, result

    def predict(self, instance, n: int = 1, tokenizer=None) -> "Prediction":
        """Ranked candidate grids: the greedy decode first, further candidates
        from dihedral/color-permuted views mapped back through their inverse,
        deduplicated and ordered by aggregate log-probability."""
        from loopformer import tasks

        if n < 1:
            raise ValueError("need n >= 1 candidates")
        tok = tokenizer or tasks.Tokenizer(self.cfg.max_seq_len)
        pid = instance.puzzle_id(self.cfg.puzzle_embedding, self.cfg.puzzle_vocab)
        shape = instance.input_grid.shape
        real = tok.encoded_length(*shape)

        views = [tasks.Augmentation()]
        if n > 1:
            elems = range(1, 8) if shape[0] == shape[1] else (2, 4, 6)
            views += [tasks.Augmentation(dihedral=e) for e in elems]
            present = np.unique(instance.input_grid[instance.input_grid > 0])
            if len(present) > 1:
                perm_rng = np.random.default_rng(instance.instance_id)
                views += [tasks.Augmentation(color_perm=p)
                          for p in tasks.color_permutations(present, n, perm_rng)]

        ranked: dict[bytes, list] = {}
        steps_used = None
        for order, view in enumerate(views):
            grid_in = view.apply(instance.input_grid)
            pred, logp, result = self.greedy_tokens(tok.encode(grid_in), pid)
            if steps_used is None:
                steps_used = result.steps_used
            decoded = tok.decode_with_shape(pred, grid_in.shape)
            if order > 0 and (decoded < 0).any():
                continue  # view predicted separators in cell slots
            candidate = decoded if order == 0 else view.invert(decoded)
            score = float(logp[:real].mean())
            key = candidate.tobytes() + bytes(str(candidate.shape), "ascii")
            if key in ranked:
                ranked[key][1] += score
            else:
                ranked[key] = [candidate, score, order]

        entries = sorted(ranked.values(), key=lambda e: (e[2] > 0, -e[1], e[2]))
        grids = [e[0] for e in entries[:n]]
        scores = [e[1] for e in entries[:n]]
        return Prediction(grids=grids, scores=scores, steps_used=steps_used,
                          truncated=len(grids) < n)

    def parameter_count(self) -> int:
        return self.params.count()

    # -- persistence --------------------------------------------------------------

    def save(self, path: str, extra_tensors: dict | None = None, meta: dict | None = None):
        tensors = {f"model.{k}": v.data for k, v in self.params.named().items()}
        if extra_tensors:
            tensors.update(extra_tensors)
        payload = {"model_config": self.cfg.to_dict()}
        payload.update(meta or {})
        save_checkpoint(path, tensors, payload)

    @classmethod
    def load(cls, path: str):
        tensors, meta = load_checkpoint(path)
        cfg = ModelConfig.from_dict(meta["model_config"]).validate()
        model = cls.init(cfg, seed=0)
        named = model.params.named()
        for name, t in named.items():
            t.data = np.ascontiguousarray(tensors[f"model.{name}"].astype(t.dtype))
        rest = {k: v for k, v in tensors.items() if not k.startswith("model.")}
        return model, rest, meta


def vanilla_forward(model: LoopedModel, tokens, puzzle_ids=0):
    """Plain one-pass stacked transformer sharing the looped model's weights."""
    h = model.embed_input(tokens, puzzle_ids, step=0)
    h, _ = model.stack(h, mask=model._mask(np.asarray(tokens).shape[-1]))
    return T.matmul(h, model.params.unembed)
