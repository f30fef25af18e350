"""Run configuration: model + optimizer + data + loop settings, with strict
JSON round-tripping (unknown keys are errors) and aggregate validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from loopformer.model import ConfigError, ModelConfig
from loopformer.tasks import SUDOKU_FAMILIES, GRID_FAMILIES, VOCAB_SIZE, DataSpec, Tokenizer

SCHEMA_VERSION = 1


@dataclass
class OptimSettings:
    optimizer: str = "adam_atan2"  # adam_atan2 | muon (muon covers stack matrices)
    lr: float = 1e-3
    puzzle_lr: float = 1e-2
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    muon_momentum: float = 0.95
    nesterov: bool = True
    ns_steps: int = 5
    ema_decay: float = 0.999
    warmup_steps: int = 20
    schedule: str = "constant"  # constant | cosine

    def violations(self) -> list[str]:
        bad = []
        if self.optimizer not in ("adam_atan2", "muon"):
            bad.append(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            bad.append(f"unknown schedule {self.schedule!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            bad.append("betas must lie in [0, 1)")
        if not 0 <= self.ema_decay <= 1:
            bad.append("ema_decay must lie in [0, 1]")
        if self.lr <= 0 or self.puzzle_lr <= 0:
            bad.append("learning rates must be positive")
        if self.warmup_steps < 0:
            bad.append("warmup_steps must be >= 0")
        return bad


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimSettings = field(default_factory=OptimSettings)
    data: DataSpec = field(default_factory=DataSpec)
    batch_size: int = 32
    total_steps: int = 200
    seed: int = 0
    log_every: int = 10
    eval_every: int = 0        # 0 -> final step only
    eval_pass_n: int = 1
    checkpoint_every: int = 0  # 0 -> final step only
    eval_with_ema: bool = True

    def sequence_length_needed(self) -> int:
        if self.data.task in SUDOKU_FAMILIES:
            side = 4 if self.data.task == "sudoku4" else 6
            return Tokenizer.encoded_length(side, side)
        return Tokenizer.encoded_length(self.data.size, self.data.size)

    def violations(self) -> list[str]:
        bad = [f"model: {v}" for v in self.model.violations()]
        bad += [f"optim: {v}" for v in self.optim.violations()]
        if self.schema_version != SCHEMA_VERSION:
            bad.append(f"schema_version {self.schema_version} unsupported (want {SCHEMA_VERSION})")
        if self.data.task not in SUDOKU_FAMILIES + GRID_FAMILIES:
            bad.append(f"data: unknown task {self.data.task!r}")
        if self.batch_size < 1 or self.total_steps < 1:
            bad.append("batch_size and total_steps must be >= 1")
        if self.eval_pass_n < 1:
            bad.append("eval_pass_n must be >= 1")
        if not self.model.violations():
            if self.model.vocab_size != VOCAB_SIZE:
                bad.append(f"model.vocab_size must be {VOCAB_SIZE} for the grid tokenizer")
            need = self.sequence_length_needed()
            if self.model.max_seq_len < need:
                bad.append(f"model.max_seq_len {self.model.max_seq_len} below the "
                           f"{need} tokens task {self.data.task!r} needs")
            if (self.model.puzzle_embedding == "instance"
                    and self.model.puzzle_vocab < self.data.train_count + self.data.eval_count):
                bad.append("model.puzzle_vocab too small for per-instance embeddings")
        return bad

    def validate(self) -> "RunConfig":
        bad = self.violations()
        if bad:
            raise ConfigError("invalid run config:\n  - " + "\n  - ".join(bad))
        return self

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "model": self.model.to_dict(),
            "optim": asdict(self.optim),
            "data": self.data.to_dict(),
            **{f.name: getattr(self, f.name) for f in fields(self)
               if f.name not in ("schema_version", "model", "optim", "data")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        payload = dict(d)
        model = ModelConfig.from_dict(payload.pop("model", {}))
        optim_d = payload.pop("optim", {})
        optim_known = {f.name for f in fields(OptimSettings)}
        optim_unknown = set(optim_d) - optim_known
        if optim_unknown:
            raise ConfigError(f"unknown optim config keys: {sorted(optim_unknown)}")
        data_d = payload.pop("data", {})
        try:
            data = DataSpec.from_dict(data_d)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        return cls(model=model, optim=OptimSettings(**optim_d), data=data,
                   **payload).validate()


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))
