"""Command-line entry points.

Exit codes: 0 success, 1 config validation failure, 2 numeric failure (NaN),
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _pin_blas_threads() -> None:
    # single-threaded kernels: deterministic and faster at desk scale
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopformer",
                                     description="depth-recurrent transformer lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training loop from a config file")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: regenerate from config)")
    p.add_argument("--n", type=int, default=1, help="candidates per instance")
    p.add_argument("--raw", action="store_true", help="use raw weights instead of EMA")
    p.add_argument("--out", help="write the metrics record here (JSON)")

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--sweeps", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True,
                   help="suite name (loops-vs-vanilla, truncation-sweep, conv-position, "
                        "nonlinearity, optimizer) or a suite JSON path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--budget", type=float, help="wall-clock budget in seconds")

    p = sub.add_parser("dump-attention", help="write raw attention matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: regenerate from config)")
    p.add_argument("--index", type=int, default=0, help="eval instance index")
    p.add_argument("--out", required=True, help="output base path (.bin/.json appended)")
    p.add_argument("--raw", action="store_true", help="use raw weights instead of EMA")

    p = sub.add_parser("gen-data", help="generate a dataset to disk")
    p.add_argument("--task", required=True)
    p.add_argument("--train-count", type=int, default=256)
    p.add_argument("--eval-count", type=int, default=64)
    p.add_argument("--size", type=int, default=6)
    p.add_argument("--holes", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _load_eval_bits(args):
    import numpy as np

    from loopformer import tasks
    from loopformer.train import load_run_checkpoint

    cfg, model, opt, _, step = load_run_checkpoint(args.checkpoint)
    if not args.raw:
        model = model.with_arrays(opt.state.ema)
    if args.data:
        _, eval_set, _ = tasks.load_dataset(args.data)
    else:
        _, eval_set = tasks.generate_dataset(cfg.data)
    return cfg, model, eval_set, step


def cmd_train(args) -> int:
    from loopformer.config import load_config
    from loopformer.train import run_training

    cfg = load_config(args.config)
    summary = run_training(cfg, args.out, resume_from=args.resume,
                           render_figures=not args.no_figures)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from loopformer import tasks

    cfg, model, eval_set, step = _load_eval_bits(args)
    tok = tasks.Tokenizer(cfg.model.max_seq_len)
    metrics = tasks.evaluate_pass_n(model, eval_set, args.n, tok)
    record = {"checkpoint_step": step, "weights": "raw" if args.raw else "ema", **metrics}
    print(json.dumps(record, indent=2, sort_keys=True))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_gradcheck(args) -> int:
    from loopformer.gradcheck import run_suite

    report = run_suite(sweeps=args.sweeps, tol=args.tol)
    for check in report["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        print(f"{status} {check['name']}: max rel err {check['max_rel_err']:.3g} "
              f"(tol {check['tol']:.0e})")
    print(f"{'PASS' if report['passed'] else 'FAIL'} overall "
          f"in {report['elapsed_seconds']}s")
    return 0 if report["passed"] else 3


def cmd_ablate(args) -> int:
    from loopformer.ablate import load_suite, run_suite

    suite = load_suite(args.suite)
    results = run_suite(suite, args.out, budget_seconds=args.budget)
    for row in results["rows"]:
        mean = row.get("pass1_mean")
        shown = f"{mean:.3f}" if mean is not None else "-"
        print(f"{row['status']:>8}  {row['label']:<28} pass@1 {shown}")
    print(f"results in {args.out} ({results['elapsed_seconds']}s)")
    return 0


def cmd_dump_attention(args) -> int:
    import numpy as np

    from loopformer import tasks
    from loopformer.blocks import attention_entropy, write_attention_dump

    cfg, model, eval_set, _ = _load_eval_bits(args)
    inst = eval_set[args.index]
    tok = tasks.Tokenizer(cfg.model.max_seq_len)
    tokens = tok.encode(inst.input_grid)
    pid = inst.puzzle_id(cfg.model.puzzle_embedding, cfg.model.puzzle_vocab)

    from loopformer.tensor import no_grad
    with no_grad():
        result = model.act_forward(tokens, pid, collect_attn=True)
    loops_total = sum(len(o.loops) for o in result.outer)
    seq_len = tokens.shape[-1]
    attn = np.zeros((cfg.model.depth, loops_total, cfg.model.heads, seq_len, seq_len),
                    dtype=np.float32)
    loop_idx = 0
    for outer in result.outer:
        for loop in outer.loops:
            for layer_idx, layer_attn in enumerate(loop.attn):
                attn[layer_idx, loop_idx] = layer_attn.data
            loop_idx += 1
    bin_path, json_path = write_attention_dump(args.out, attn)

    entropy = attention_entropy(attn)
    summary = {
        "dims": list(attn.shape),
        "instance_id": inst.instance_id,
        "row_entropy_mean": entropy.mean(axis=-1).tolist(),  # (layer, loop, head)
        "row_entropy_overall": float(entropy.mean()),
    }
    with open(args.out + ".entropy.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {bin_path}, {json_path}, {args.out}.entropy.json")
    return 0


def cmd_gen_data(args) -> int:
    from loopformer.tasks import DataSpec, write_dataset

    spec = DataSpec(task=args.task, train_count=args.train_count,
                    eval_count=args.eval_count, size=args.size,
                    holes=args.holes, seed=args.seed)
    manifest = write_dataset(args.out, spec)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "dump-attention": cmd_dump_attention,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    _pin_blas_threads()
    args = build_parser().parse_args(argv)
    from loopformer.model import ConfigError
    from loopformer.tensor import NumericError

    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config validation failed:\n{err}", file=sys.stderr)
        return 1
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
