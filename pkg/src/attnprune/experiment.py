"""Experiment configuration documents and the sweep runner behind the CLI."""
from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import Activation, AttentionConfig, AttentionKind
from .data import TaskData, char_lm_ingest, gen_copy, gen_reverse, gen_toy_translation
from .errors import AttnPruneError, ConfigError
from .model import TransformerConfig, save_checkpoint
from .pruning import MaskSet, PruneSpec, load_masks, save_masks
from .train import (BaselineRun, TrainConfig, collect_stats, prune_and_retrain,
                    train_baseline)

TASKS = ("copy", "reverse", "toy-translation", "char-lm")
BASELINES = ("none", "random")
OUT_ENV = "ATTNPRUNE_OUT"

CSV_HEAD = ("seed", "p", "kinds", "metric_baseline", "metric_pruned", "sparsity", "mac_fraction")


@dataclass
class ExperimentConfig:
    task: dict
    model: dict
    train: dict = field(default_factory=dict)
    prune: dict = field(default_factory=dict)
    activation: str = "softmax"
    seeds: List[int] = field(default_factory=lambda: [0])
    out: str = "runs/default"

    # derived views -----------------------------------------------------

    @property
    def kind_sets(self) -> List[Tuple[AttentionKind, ...]]:
        kinds = self.prune.get("kinds", [[k.value for k in AttentionKind]])
        if kinds and isinstance(kinds[0], str):
            kinds = [kinds]
        return [tuple(AttentionKind(k) for k in ks) for ks in kinds]

    @property
    def ps(self) -> List[float]:
        return list(self.prune.get("p", [0]))

    @property
    def retrain_mode(self) -> str:
        return self.prune.get("retrain_mode", "fresh")

    @property
    def baseline(self) -> str:
        return self.prune.get("baseline", "none")

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**dict(self.train, seed=seed))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def _expect(doc, key, kind, path, required=True):
    if key not in doc:
        if required:
            _fail(f"{path}.{key}", "missing")
        return None
    val = doc[key]
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        _fail(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}, got {val!r}")
    return val


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a config document; errors name the offending field path."""
    if not isinstance(doc, dict):
        _fail("config", "top level must be an object")
    unknown = set(doc) - {f.name for f in fields(ExperimentConfig)}
    if unknown:
        _fail(f"config.{sorted(unknown)[0]}", "unknown field")
    task = _expect(doc, "task", dict, "config")
    name = _expect(task, "name", str, "config.task")
    if name not in TASKS:
        _fail("config.task.name", f"must be one of {', '.join(TASKS)}")
    if name == "char-lm":
        _expect(task, "path", str, "config.task")
    model = _expect(doc, "model", dict, "config")
    for key in ("n_layers", "d_model", "n_heads", "d_ff"):
        v = _expect(model, key, int, "config.model")
        if v < 1:
            _fail(f"config.model.{key}", "must be >= 1")
    if model["d_model"] % model["n_heads"]:
        _fail("config.model.n_heads", "must divide d_model")
    train = _expect(doc, "train", dict, "config", required=False) or {}
    allowed = {f.name for f in fields(TrainConfig)} - {"seed"}
    for key, val in train.items():
        if key not in allowed:
            _fail(f"config.train.{key}", "unknown field")
    try:
        TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        _fail("config.train", str(exc))
    prune = _expect(doc, "prune", dict, "config", required=False) or {}
    for i, p in enumerate(prune.get("p", [0])):
        if not isinstance(p, (int, float)) or isinstance(p, bool) or not 0 <= p <= 100:
            _fail(f"config.prune.p[{i}]", "must be a number in [0, 100]")
    kinds = prune.get("kinds", [[k.value for k in AttentionKind]])
    if not isinstance(kinds, list) or not kinds:
        _fail("config.prune.kinds", "must be a non-empty list")
    sets = [kinds] if isinstance(kinds[0], str) else kinds
    valid_kinds = [k.value for k in AttentionKind] if name != "char-lm" else ["self_decoder"]
    for i, ks in enumerate(sets):
        for k in ks:
            if k not in valid_kinds:
                _fail(f"config.prune.kinds[{i}]", f"{k!r} not in {valid_kinds}")
    if prune.get("retrain_mode", "fresh") not in ("fresh", "finetune"):
        _fail("config.prune.retrain_mode", "must be fresh or finetune")
    base = prune.get("baseline", "none")
    if not isinstance(base, str) or not (base in BASELINES or base.startswith("ood:")):
        _fail("config.prune.baseline", "must be none, random or ood:<path>")
    activation = doc.get("activation", model.get("activation", "softmax"))
    if activation not in [a.value for a in Activation]:
        _fail("config.activation", "must be softmax or entmax15")
    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        _fail("config.seeds", "must be a non-empty list of integers")
    out = doc.get("out", "runs/default")
    if not isinstance(out, str):
        _fail("config.out", "must be a path string")
    return ExperimentConfig(task=task, model=model, train=train, prune=prune,
                            activation=activation, seeds=seeds, out=out)


def load_config(path, out: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = parse_config(doc)
    if os.environ.get(OUT_ENV):
        cfg.out = os.environ[OUT_ENV]
    if out is not None:
        cfg.out = out
    if seed is not None:
        cfg.seeds = [seed]
    return cfg


# ------------------------------------------------------------ construction


def build_task(cfg: ExperimentConfig) -> TaskData:
    t = cfg.task
    name = t["name"]
    seed = t.get("seed", 0)
    if name in ("copy", "reverse"):
        gen = gen_copy if name == "copy" else gen_reverse
        return gen(t.get("count", 4000), t.get("len_min", 3), t.get("len_max", 10),
                   t.get("alphabet", 10), seed)
    if name == "toy-translation":
        return gen_toy_translation(t.get("count", 4000), seed)
    return char_lm_ingest(t["path"], t.get("max_chars"), t.get("seq_len", 32))


def build_model_config(cfg: ExperimentConfig, task: TaskData) -> TransformerConfig:
    m = cfg.model
    att = AttentionConfig(m["d_model"], m["n_heads"], activation=cfg.activation,
                          neg_fill=m.get("neg_fill", -1e9))
    arch = "lm" if task.train.kind == "lm" else "encdec"
    return TransformerConfig(m["n_layers"], att, m["d_ff"], len(task.vocab),
                             m.get("max_src_len", task.max_src_len),
                             m.get("max_tgt_len", task.max_tgt_len),
                             tie_embeddings=m.get("tie_embeddings", True), arch=arch)


def primary_metric(arch: str) -> str:
    return "perplexity" if arch == "lm" else "token_accuracy"


def seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out) / f"seed{seed}"


def write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_baseline(run: BaselineRun, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.best, directory / "baseline.json")
    (directory / "log.csv").write_text(run.log.to_csv())
    write_json(directory / "metrics.json",
               {"test": run.test.to_dict(), "status": run.log.status, "steps": run.log.steps,
                "best_step": run.log.best_step, "checkpoint": run.best.digest()})
    write_json(directory / "timing.json", {"train_ms": round(run.log.wall_ms, 1)})


# ------------------------------------------------------------------- sweep


def cell_name(kinds: Sequence[AttentionKind], p) -> str:
    return "+".join(k.value for k in kinds) + f"_p{_num(p)}"


def _num(v):
    return int(v) if float(v).is_integer() else v


def _cell_masks(cfg, base) -> Tuple[Optional[MaskSet], str]:
    if cfg.baseline.startswith("ood:"):
        return load_masks(cfg.baseline[4:], base.best.config), "ood"
    if cfg.baseline == "random":
        return None, "random"
    return None, "ap"


def run_seed(cfg_doc: dict, seed: int) -> Tuple[List[dict], Dict[str, dict]]:
    """Steps 1-4 for one seed over every (kind set, p) cell; failed cells are marked."""
    cfg = parse_config(cfg_doc)
    task = build_task(cfg)
    mcfg = build_model_config(cfg, task)
    tc = cfg.train_config(seed)
    directory = seed_dir(cfg, seed)
    base = train_baseline(mcfg, task, tc)
    write_baseline(base, directory)
    base.stats = collect_stats(base.best, task.train)
    metric = primary_metric(mcfg.arch)
    cells, timing = [], {"baseline": {"train_ms": round(base.log.wall_ms, 1)}}
    for kinds in cfg.kind_sets:
        for p in cfg.ps:
            name = cell_name(kinds, p)
            cell = {"seed": seed, "p": _num(p), "kinds": "+".join(k.value for k in kinds),
                    "metric": metric}
            try:
                masks, btype = _cell_masks(cfg, base)
                report, pruned, masks = prune_and_retrain(
                    base, task, PruneSpec(p, kinds), tc, cfg.retrain_mode,
                    baseline_type=btype, maskset=masks)
            except (AttnPruneError, ValueError, ArithmeticError, OSError) as exc:
                cell.update(status="failed", error=f"{type(exc).__name__}: {exc}")
                cells.append(cell)
                continue
            cdir = directory / name
            cdir.mkdir(parents=True, exist_ok=True)
            save_masks(masks, cdir / "masks.json")
            save_checkpoint(pruned, cdir / "pruned.json")
            rep = report.to_dict(with_wall=False)
            write_json(cdir / "report.json", rep)
            cell.update(status="ok", baseline=rep["baseline"], pruned=rep["pruned"],
                        sparsity=rep["sparsity"], thresholds=rep["thresholds"],
                        mac_fraction=rep["mac_fraction"], eval_length=rep["eval_length"],
                        retrain_mode=rep["retrain_mode"], baseline_type=rep["baseline_type"],
                        steps=rep["steps"], baseline_checkpoint=rep["baseline_checkpoint"])
            cells.append(cell)
            timing[name] = report.wall_ms
    return cells, timing


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def aggregate(cells: List[dict]) -> List[dict]:
    """Median over seeds of the primary metrics per (kinds, p) cell."""
    groups: Dict[Tuple[str, float], List[dict]] = {}
    for c in cells:
        if c["status"] == "ok":
            groups.setdefault((c["kinds"], c["p"]), []).append(c)
    out = []
    for (kinds, p), cs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        metric = cs[0]["metric"]
        out.append({"kinds": kinds, "p": p, "metric": metric, "seeds": len(cs),
                    "metric_baseline": _median(c["baseline"][metric] for c in cs),
                    "metric_pruned": _median(c["pruned"][metric] for c in cs),
                    "bleu_pruned": _median(c["pruned"].get("bleu") for c in cs),
                    "sparsity": _median(c["sparsity"]["overall"] for c in cs),
                    "mac_fraction": _median(c["mac_fraction"] for c in cs)})
    return out


def _flatten(prefix, value, out):
    if isinstance(value, dict):
        for k in sorted(value):
            _flatten(f"{prefix}.{k}" if prefix else k, value[k], out)
    elif isinstance(value, list):
        for item in value:
            if isinstance(item, dict) and {"kind", "layer", "tau"} <= set(item):
                out[f"{prefix}.{item['kind']}.{item['layer']}"] = item["tau"]
            else:
                out[prefix] = json.dumps(value)
                break
    else:
        out[prefix] = value


def sweep_rows(cells: List[dict], medians: List[dict]) -> Tuple[List[str], List[dict]]:
    """Flat CSV rows: one per cell plus one median row per (kinds, p)."""
    rows = []
    for c in cells:
        row = {"seed": c["seed"], "p": c["p"], "kinds": c["kinds"]}
        if c["status"] == "ok":
            m = c["metric"]
            row.update(metric_baseline=c["baseline"][m], metric_pruned=c["pruned"][m],
                       sparsity=c["sparsity"]["overall"], mac_fraction=c["mac_fraction"])
        rest = {k: v for k, v in c.items() if k not in ("seed", "p", "kinds")}
        _flatten("", rest, row)
        rows.append(row)
    for m in medians:
        row = {"seed": "median"}
        _flatten("", m, row)
        rows.append(row)
    extra = sorted({k for r in rows for k in r} - set(CSV_HEAD))
    return list(CSV_HEAD) + extra, rows


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else ("" if v is None else v))
                    for k, v in r.items()})
    return buf.getvalue()


def run_sweep(cfg: ExperimentConfig, jobs: int = 1) -> Tuple[dict, Dict[str, dict]]:
    doc = cfg.to_dict()
    t0 = time.perf_counter()
    if jobs > 1 and len(cfg.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_seed, [doc] * len(cfg.seeds), cfg.seeds))
    else:
        results = [run_seed(doc, s) for s in cfg.seeds]
    cells = [c for cs, _ in results for c in cs]
    timing = {f"seed{s}": t for s, (_, t) in zip(cfg.seeds, results)}
    timing["total_ms"] = round((time.perf_counter() - t0) * 1000, 1)
    report = {"config": doc, "cells": cells, "medians": aggregate(cells),
              "failed": sum(c["status"] != "ok" for c in cells)}
    return report, timing
