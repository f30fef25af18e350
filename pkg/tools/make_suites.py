#!/usr/bin/env python3
"""Regenerate the shipped ablation suite files from one base recipe."""

import copy
import json
import os

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "loopformer", "suites")

BASE = {
    "schema_version": 1,
    "model": {
        "depth": 2, "hidden": 32, "heads": 4, "loops": 8, "forward_only_loops": 2,
        "act_max_steps": 1, "vocab_size": 13, "max_seq_len": 20, "ffn_width": 64,
        "kernel_size": 2, "conv_insertion": "after_mlp_expansion",
        "puzzle_embedding": "family", "puzzle_vocab": 4, "precision": "single",
    },
    "optim": {"lr": 1e-2, "weight_decay": 0.05, "ema_decay": 0.99, "warmup_steps": 20},
    "data": {"task": "sudoku4", "train_count": 512, "eval_count": 96,
             "holes": 10, "seed": 100},
    "batch_size": 32,
    "total_steps": 600,
    "log_every": 20,
}


def base(**model_overrides):
    cfg = copy.deepcopy(BASE)
    cfg["model"].update(model_overrides)
    return cfg


SUITES = {
    "loops-vs-vanilla": {
        "suite": "loops-vs-vanilla",
        "description": "weight-tied looped stacks vs plain stacks at matched "
                       "parameter and FLOPs budgets (exact-match accuracy)",
        "seeds": [0, 1, 2],
        "budget_seconds": 0,
        "base": base(),
        "cells": [
            {"label": "vanilla D=2",
             "overrides": {"model": {"depth": 2, "loops": 1, "forward_only_loops": 0,
                                     "conv_insertion": "none"}}},
            {"label": "vanilla D=4",
             "overrides": {"model": {"depth": 4, "loops": 1, "forward_only_loops": 0,
                                     "conv_insertion": "none"}}},
            {"label": "vanilla D=16 (FLOPs match)",
             "overrides": {"model": {"depth": 16, "loops": 1, "forward_only_loops": 0,
                                     "conv_insertion": "none"}}},
            {"label": "looped D=2 x4",
             "overrides": {"model": {"depth": 2, "loops": 4, "forward_only_loops": 1,
                                     "conv_insertion": "none"}}},
            {"label": "looped D=2 x8",
             "overrides": {"model": {"depth": 2, "loops": 8, "forward_only_loops": 2,
                                     "conv_insertion": "none"}}},
        ],
    },
    "truncation-sweep": {
        "suite": "truncation-sweep",
        "description": "forward-only loop count swept at fixed 8 inner loops",
        "seeds": [0, 1, 2],
        "budget_seconds": 0,
        "base": base(conv_insertion="none"),
        "cells": [
            {"label": f"N={n}",
             "overrides": {"model": {"forward_only_loops": n}}}
            for n in range(8)
        ],
    },
    "conv-position": {
        "suite": "conv-position",
        "description": "short-conv insertion point within the shared layer",
        "seeds": [0, 1, 2],
        "budget_seconds": 0,
        "base": base(),
        "cells": [
            {"label": "none", "overrides": {"model": {"conv_insertion": "none"}}},
            {"label": "(a) after SDPA", "overrides": {"model": {"conv_insertion": "after_sdpa"}}},
            {"label": "(b) after value", "overrides": {"model": {"conv_insertion": "after_value"}}},
            {"label": "(c) after key", "overrides": {"model": {"conv_insertion": "after_key"}}},
            {"label": "(d) after query", "overrides": {"model": {"conv_insertion": "after_query"}}},
            {"label": "(e) before out proj",
             "overrides": {"model": {"conv_insertion": "before_output_proj"}}},
            {"label": "(f) after MLP expansion",
             "overrides": {"model": {"conv_insertion": "after_mlp_expansion"}}},
        ],
    },
    "nonlinearity": {
        "suite": "nonlinearity",
        "description": "nonlinear components removed one at a time",
        "seeds": [0, 1, 2],
        "budget_seconds": 0,
        "base": base(),
        "cells": [
            {"label": "ConvSwiGLU", "overrides": {}},
            {"label": "SwiGLU (no conv)",
             "overrides": {"model": {"conv_insertion": "none"}}},
            {"label": "SiLU",
             "overrides": {"model": {"conv_insertion": "none", "ffn_activation": "silu"}}},
            {"label": "ReLU",
             "overrides": {"model": {"conv_insertion": "none", "ffn_activation": "relu"}}},
            {"label": "no attention softmax",
             "overrides": {"model": {"attention_softmax": False}}},
        ],
    },
    "optimizer": {
        "suite": "optimizer",
        "description": "AdamAtan2 vs Muon at identical settings",
        "seeds": [0, 1, 2],
        "budget_seconds": 0,
        "loss_threshold": 1.0,
        "base": base(conv_insertion="none"),
        "cells": [
            {"label": "adam_atan2", "overrides": {"optim": {"optimizer": "adam_atan2"}}},
            {"label": "muon", "overrides": {"optim": {"optimizer": "muon"}}},
        ],
    },
}


def main():
    os.makedirs(OUT, exist_ok=True)
    for name, suite in SUITES.items():
        path = os.path.join(OUT, f"{name}.json")
        with open(path, "w") as fh:
            json.dump(suite, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print("wrote", path)


if __name__ == "__main__":
    main()
