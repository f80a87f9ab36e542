"""Command-line entry point: ``attnprune {train,collect,mask,retrain,sweep,cost,inspect}``.

Exit codes: 0 success, 1 experiment failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import shutil
import sys
from fractions import Fraction
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import experiment as ex
from .attention import AttentionConfig, AttentionKind, HeadKey, multi_head
from .cost import CostParams, attention_macs, cost_report, count_macs_instrumented
from .errors import AttnPruneError, ConfigError
from .model import init_params, load_checkpoint, save_checkpoint
from .pruning import (PruneSpec, average, build_masks, load_masks, load_stats,
                      mask_sparsity, merge, random_masks, save_masks, save_stats)
from .tensor import Tensor
from .train import collect_stats, evaluate, train, train_baseline

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> ex.ExperimentConfig:
    if not args.config:
        raise UsageError("--config is required")
    return ex.load_config(args.config, out=args.out, seed=args.seed)


def _kinds(text: Optional[str]):
    if not text:
        return tuple(AttentionKind)
    try:
        return tuple(AttentionKind(k) for k in text.split(","))
    except ValueError:
        raise UsageError(f"unknown attention kind in {text!r}") from None


def _out_dir(args, cfg=None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None:
        return Path(cfg.out)
    raise UsageError("--out is required")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _config(args)
    task = ex.build_task(cfg)
    mcfg = ex.build_model_config(cfg, task)
    status = EXIT_OK
    for seed in cfg.seeds:
        run = train_baseline(mcfg, task, cfg.train_config(seed))
        ex.write_baseline(run, ex.seed_dir(cfg, seed))
        metric = ex.primary_metric(mcfg.arch)
        print(f"seed {seed}: {metric} {getattr(run.test, metric):.6f} "
              f"({run.log.steps} steps, best at {run.log.best_step})")
        if run.log.status != "ok":
            status = EXIT_FAIL
    return status


def cmd_collect(args) -> int:
    cfg = _config(args)
    task = ex.build_task(cfg)
    seed = cfg.seeds[0]
    ckpt_path = Path(args.checkpoint) if args.checkpoint else \
        ex.seed_dir(cfg, seed) / "baseline.json"
    ckpt = load_checkpoint(ckpt_path)
    expected = ex.build_model_config(cfg, task)
    if ckpt.config != expected:
        raise ConfigError(f"checkpoint {ckpt_path} does not match the configured model")
    shards = max(1, args.shards)
    examples = task.train.examples
    if shards == 1:
        stats = collect_stats(ckpt, task.train)
    else:
        from .data import Dataset
        stats = None
        for i in range(shards):
            part = Dataset(task.train.kind, examples[i::shards], "train", task.name)
            if not len(part):
                continue
            s = collect_stats(ckpt, part)
            stats = s if stats is None else merge(stats, s)
    path = Path(args.stats) if args.stats else ex.seed_dir(cfg, seed) / "stats.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_stats(stats, path)
    print(f"{stats.examples_seen} examples -> {path}")
    return EXIT_OK


def _print_sparsity(masks) -> None:
    sp = mask_sparsity(masks)
    print("scope,sparsity")
    print(f"overall,{sp['overall']:.6f}")
    for k, v in sp["per_kind"].items():
        print(f"{k},{v:.6f}")
    for k, v in sp["per_layer"].items():
        print(f"{k},{v:.6f}")


def cmd_mask(args) -> int:
    if not args.stats:
        raise UsageError("--stats is required")
    if args.p is None:
        raise UsageError("--p is required")
    stats = load_stats(args.stats)
    out = Path(args.masks) if args.masks else Path(args.stats).with_name("masks.json")
    if args.ood:
        masks = load_masks(args.ood)
        if (masks.n_layers, masks.n_heads) != (stats.n_layers, stats.n_heads) or any(
                stats.windows.get(k) != masks.windows[k] for k in masks.kinds):
            raise ConfigError(f"mask {args.ood} does not fit the statistics layout")
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(args.ood, out)
    else:
        kinds = [k for k in _kinds(args.kinds) if k in stats.windows]
        if args.random is not None:
            masks = random_masks(stats, args.p, args.random, kinds=kinds)
        else:
            masks = build_masks(average(stats), PruneSpec(args.p, kinds),
                                source_dataset=args.source or "")
        out.parent.mkdir(parents=True, exist_ok=True)
        save_masks(masks, out)
    _print_sparsity(masks)
    return EXIT_OK


def cmd_retrain(args) -> int:
    cfg = _config(args)
    if not args.masks:
        raise UsageError("--masks is required")
    task = ex.build_task(cfg)
    mcfg = ex.build_model_config(cfg, task)
    seed = cfg.seeds[0]
    masks = load_masks(args.masks, mcfg)
    mode = cfg.retrain_mode
    if mode == "finetune":
        start = load_checkpoint(args.checkpoint or ex.seed_dir(cfg, seed) / "baseline.json")
    else:
        start = init_params(mcfg, seed)
    tc = cfg.train_config(seed)
    pruned, log = train(start, task, tc, masks)
    test = evaluate(pruned, task.test, masks, max_len=mcfg.max_tgt_len,
                    with_bleu=mcfg.arch != "lm" and tc.eval_bleu)
    directory = _out_dir(args, cfg) / f"seed{seed}" / f"retrain_{mode}"
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(pruned, directory / "pruned.json")
    (directory / "log.csv").write_text(log.to_csv())
    ex.write_json(directory / "metrics.json",
                  {"retrain_mode": mode, "masks": str(args.masks), "test": test.to_dict(),
                   "sparsity": mask_sparsity(masks), "status": log.status})
    ex.write_json(directory / "timing.json", {"train_ms": round(log.wall_ms, 1)})
    metric = ex.primary_metric(mcfg.arch)
    print(f"{mode}: {metric} {getattr(test, metric):.6f}")
    return EXIT_OK if log.status == "ok" else EXIT_FAIL


def cmd_sweep(args) -> int:
    cfg = _config(args)
    report, timing = ex.run_sweep(cfg, jobs=max(1, args.jobs))
    out = Path(cfg.out)
    ex.write_json(out / "report.json", report)
    ex.write_json(out / "timing.json", timing)
    cols, rows = ex.sweep_rows(report["cells"], report["medians"])
    (out / "report.csv").write_text(ex.csv_text(cols, rows))
    for m in report["medians"]:
        print(f"{m['kinds']} p={m['p']}: {m['metric']} {m['metric_baseline']:.6f} -> "
              f"{m['metric_pruned']:.6f} (sparsity {m['sparsity']:.4f})")
    if report["failed"]:
        print(f"{report['failed']} cell(s) failed", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _instrumented(d, n, heads, batch, p):
    """Counted MACs under a mask pruning about ``p`` of the scores, plus the formula's
    value at the fraction actually pruned (column 0 always stays so rows keep a key)."""
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(batch, n, d)))
    params = {k: Tensor(rng.normal(scale=0.1, size=(d, d))) for k in ("wq", "wk", "wv", "wo")}
    k_prune = min(int(round(p * n * n)), n * (n - 1))
    mask = np.zeros((heads, n, n))
    for i, j in [(i, j) for j in range(n - 1, 0, -1) for i in range(n)][:k_prune]:
        mask[:, i, j] = -1e9
    cfg = AttentionConfig(d, heads)
    got = count_macs_instrumented(lambda: multi_head(x, x, params, cfg, head_masks=mask))
    want = attention_macs(CostParams(batch, n, d, heads, d // heads, Fraction(k_prune, n * n)))
    return got, want


def cmd_cost(args) -> int:
    ps = args.ps or [0.0, 0.5, 0.8, 0.9]
    if any(not 0 <= p <= 1 for p in ps):
        raise UsageError("--ps are fractions in [0, 1]")
    if args.d % args.heads:
        raise UsageError("--heads must divide --d")
    rep = cost_report(args.d, args.n, ps, heads=args.heads, batch=args.batch)
    print("p,qkv_projection,scores,weighted_values,output_projection,total,fraction"
          + (",instrumented_total" if args.instrumented else ""))
    for row in rep["rows"]:
        m = row["macs"]
        line = (f"{row['p']},{m['qkv_projection']},{m['scores']},{m['weighted_values']},"
                f"{m['output_projection']},{m['total']},{row['fraction']!r}")
        if args.instrumented:
            got, want = _instrumented(args.d, args.n, args.heads, args.batch, row["p"])
            row["instrumented"] = got
            row["instrumented_matches"] = got == want
            line += f",{got['total']}"
        print(line)
    if args.out:
        ex.write_json(Path(args.out) / "cost.json", rep)
    return EXIT_OK


def _matrix_csv(mat, blank=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for i, row in enumerate(mat):
        w.writerow(["" if blank is not None and blank[i, j] else repr(float(v))
                    for j, v in enumerate(row)])
    return buf.getvalue()


def cmd_inspect(args) -> int:
    if bool(args.stats) == bool(args.masks):
        raise UsageError("give exactly one of --stats or --masks")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    if args.stats:
        avg = average(load_stats(args.stats))
        for key in sorted(avg.mean, key=lambda k: (k.kind.value, k.layer, k.head)):
            name = f"avg_{key.kind.value}_l{key.layer}_h{key.head}.csv"
            (out / name).write_text(_matrix_csv(avg.mean[key], ~avg.visited[key]))
            written += 1
        for kind in avg.windows:
            for layer in range(avg.n_layers):
                keys = [HeadKey(kind, layer, h) for h in range(avg.n_heads)]
                stack = np.stack([np.where(avg.visited[k], avg.mean[k], np.nan) for k in keys])
                seen = ~np.isnan(stack)
                total = np.where(seen, stack, 0.0).sum(axis=0)
                cnt = seen.sum(axis=0)
                mean = np.divide(total, cnt, out=np.zeros_like(total), where=cnt > 0)
                (out / f"avg_{kind.value}_l{layer}_mean.csv").write_text(
                    _matrix_csv(mean, cnt == 0))
                written += 1
    else:
        masks = load_masks(args.masks)
        for key in sorted(masks.heads, key=lambda k: (k.kind.value, k.layer, k.head)):
            hm = masks.heads[key]
            name = f"mask_{key.kind.value}_l{key.layer}_h{key.head}.csv"
            buf = io.StringIO()
            csv.writer(buf, lineterminator="\n").writerows(hm.pruned.astype(int).tolist())
            (out / name).write_text(buf.getvalue())
            written += 1
    print(f"wrote {written} CSV files to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="run only this seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    parser = argparse.ArgumentParser(prog="attnprune", parents=[common],
                                     description="Attention pruning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train baseline models")
    p = sub.add_parser("collect", parents=[common], help="accumulate average attention")
    p.add_argument("--checkpoint")
    p.add_argument("--stats", help="output statistics file")
    p.add_argument("--shards", type=int, default=1)
    p = sub.add_parser("mask", parents=[common], help="build a prune mask from statistics")
    p.add_argument("--stats")
    p.add_argument("--p", type=float)
    p.add_argument("--kinds", help="comma list of self_encoder,self_decoder,cross")
    p.add_argument("--masks", help="output mask file")
    p.add_argument("--source", help="dataset name recorded in the mask")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--random", type=int, metavar="SEED")
    g.add_argument("--ood", metavar="PATH")
    p = sub.add_parser("retrain", parents=[common], help="retrain under a mask")
    p.add_argument("--masks")
    p.add_argument("--checkpoint")
    sub.add_parser("sweep", parents=[common], help="run all (seed, p, kinds) cells")
    p = sub.add_parser("cost", parents=[common], help="MAC cost table")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--ps", type=float, nargs="*")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--instrumented", action="store_true")
    p = sub.add_parser("inspect", parents=[common], help="dump matrices as CSV")
    p.add_argument("--stats")
    p.add_argument("--masks")
    return parser


COMMANDS = {"train": cmd_train, "collect": cmd_collect, "mask": cmd_mask, "retrain": cmd_retrain,
            "sweep": cmd_sweep, "cost": cmd_cost, "inspect": cmd_inspect}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"attnprune {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AttnPruneError, ValueError, ArithmeticError, OSError) as exc:
        print(f"attnprune {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
