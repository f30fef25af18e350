"""Training loop orchestration: deterministic batching, metrics emission,
periodic evaluation, checkpointing, and resume.

A run is a pure function of (config, seed): datasets regenerate from the data
spec, batch order comes from a checkpointed generator, and all metric fields
except wall_clock replay bitwise across reruns and resumes.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from loopformer import tasks
from loopformer.config import RunConfig, save_config
from loopformer.model import LoopedModel
from loopformer.optim import Optimizer, default_groups, lr_schedule
from loopformer.serialize import load_checkpoint, rng_from_json, rng_state_to_json, save_checkpoint
from loopformer.tensor import Tape

CHECKPOINT_NAME = "checkpoint.ckpt"
METRICS_NAME = "metrics.jsonl"


def assemble_batch(instances, idx, tok: tasks.Tokenizer, model_cfg):
    batch = [instances[i] for i in idx]
    tokens = np.stack([tok.encode(b.input_grid) for b in batch])
    targets = np.stack([tok.encode(b.target_grid) for b in batch])
    pids = np.array([b.puzzle_id(model_cfg.puzzle_embedding, model_cfg.puzzle_vocab)
                     for b in batch])
    return tokens, targets, pids


def build_optimizer(model: LoopedModel, cfg: RunConfig) -> Optimizer:
    named = model.params.named()
    groups = default_groups(named, lr=cfg.optim.lr, puzzle_lr=cfg.optim.puzzle_lr,
                            weight_decay=cfg.optim.weight_decay,
                            use_muon=cfg.optim.optimizer == "muon")
    return Optimizer(named, groups, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2,
                     muon_momentum=cfg.optim.muon_momentum, nesterov=cfg.optim.nesterov,
                     ns_steps=cfg.optim.ns_steps, ema_decay=cfg.optim.ema_decay)


def eval_model(model: LoopedModel, opt: Optimizer, use_ema: bool) -> LoopedModel:
    if not use_ema:
        return model
    return model.with_arrays(opt.state.ema)


def save_run_checkpoint(path: str, cfg: RunConfig, model: LoopedModel, opt: Optimizer,
                        data_rng: np.random.Generator, step: int) -> None:
    tensors = {f"model.{k}": v.data for k, v in model.params.named().items()}
    tensors.update(opt.state_arrays())
    meta = {
        "run_config": cfg.to_dict(),
        "model_config": cfg.model.to_dict(),
        "step": step,
        "data_rng": rng_state_to_json(data_rng),
    }
    save_checkpoint(path, tensors, meta)


def load_run_checkpoint(path: str):
    tensors, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["run_config"])
    model = LoopedModel.init(cfg.model, seed=cfg.seed)
    for name, t in model.params.named().items():
        t.data = np.ascontiguousarray(tensors[f"model.{name}"].astype(t.dtype))
    opt = build_optimizer(model, cfg)
    opt.load_state_arrays(tensors)
    data_rng = rng_from_json(meta["data_rng"])
    return cfg, model, opt, data_rng, int(meta["step"])


class MetricsWriter:
    def __init__(self, path: str, append: bool = False):
        self.fh = open(path, "a" if append else "w")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True))
        self.fh.write("\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def run_training(cfg: RunConfig, out_dir: str, resume_from: str | None = None,
                 render_figures: bool = True) -> dict:
    """Train per config, returning the summary (also written to summary.json)."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.json"))

    train_set, eval_set = tasks.generate_dataset(cfg.data)
    tok = tasks.Tokenizer(cfg.model.max_seq_len)

    if resume_from:
        ckpt_cfg, model, opt, data_rng, start_step = load_run_checkpoint(resume_from)
        # cadence/extension knobs may differ; everything the trajectory depends
        # on must match for the resume to replay the uninterrupted run
        for key in ("model", "optim", "data", "batch_size", "seed"):
            if ckpt_cfg.to_dict()[key] != cfg.to_dict()[key]:
                raise ValueError(f"checkpoint config does not match the requested "
                                 f"run config (field {key!r})")
    else:
        model = LoopedModel.init(cfg.model, seed=cfg.seed)
        opt = build_optimizer(model, cfg)
        data_rng = np.random.default_rng(cfg.seed + 1)
        start_step = 0

    metrics = MetricsWriter(os.path.join(out_dir, METRICS_NAME), append=start_step > 0)
    last_eval = None
    t_start = time.time()

    for step in range(start_step + 1, cfg.total_steps + 1):
        idx = data_rng.integers(0, len(train_set), size=cfg.batch_size)
        tokens, targets, pids = assemble_batch(train_set, idx, tok, cfg.model)

        model.params.zero_grad()
        with Tape() as tape:
            result = model.act_forward(tokens, pids)
            terms = model.loop_losses(result, targets, ignore_index=tasks.PAD_TOKEN)
            loss = model.training_loss(result, targets, ignore_index=tasks.PAD_TOKEN,
                                       terms=terms)
        tape.backward(loss)

        factor = lr_schedule(step, cfg.optim.warmup_steps, 1.0,
                             total_steps=cfg.total_steps, kind=cfg.optim.schedule)
        opt.step(lr_scale=factor)

        is_last = step == cfg.total_steps
        if is_last or (cfg.log_every and step % cfg.log_every == 0):
            record = {
                "step": step,
                "loss": loss.item(),
                "loop_losses": [t.item() for t in terms],
                "lr": cfg.optim.lr * factor,
                "mean_act_steps": float(result.steps_used.mean()),
                "wall_clock": round(time.time() - t_start, 3),
            }
            if is_last or (cfg.eval_every and step % cfg.eval_every == 0):
                em = eval_model(model, opt, cfg.eval_with_ema)
                last_eval = tasks.evaluate_pass_n(em, eval_set, cfg.eval_pass_n, tok)
                record["eval"] = last_eval
            metrics.write(record)

        if is_last or (cfg.checkpoint_every and step % cfg.checkpoint_every == 0):
            save_run_checkpoint(os.path.join(out_dir, CHECKPOINT_NAME),
                                cfg, model, opt, data_rng, step)
    metrics.close()

    summary = {
        "total_steps": cfg.total_steps,
        "final_loss": loss.item(),
        "eval": last_eval,
        "wall_clock": round(time.time() - t_start, 3),
        "parameter_count": model.parameter_count(),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if render_figures:
        from loopformer import report
        report.render_training(out_dir)
    return summary


def read_metrics(out_dir: str) -> list[dict]:
    path = os.path.join(out_dir, METRICS_NAME)
    with open(path) as fh:
        return [json.loads(line) for line in fh]
