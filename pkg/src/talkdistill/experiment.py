"""Run-level plumbing behind the CLI: data loading, pretrain, distill, sweep, analyze.

Every run directory holds ``config.yaml`` (fully resolved), ``metrics.csv``,
``summary.json`` and a TDCK checkpoint; the config alone reproduces the run.
"""
from __future__ import annotations

import csv
import functools
import hashlib
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, config as config_mod
from .analysis import probe_and_grid, write_grids
from .data import (GENRES, MovieLensFeaturizer, SyntheticSpec, gen_synthetic, ingest_movielens,
                   make_tasks, write_split)
from .engine import METRIC_COLUMNS, Channels, Rngs, build_channels
from .errors import ConfigError, ContractError, DataError
from .estimators import PartitionedMLPRegressor, TalkingDistiller, build_net

log = logging.getLogger(__name__)


@dataclass
class Tasks:
    """Featurised pretrain and downstream splits plus probe buckets for CKA."""

    source: str
    pretrain: object
    downstream: object
    table_sizes: tuple | None
    probe_X: object
    probe_buckets: np.ndarray
    downstream_all: list | None = None


def synthetic_spec(cfg):
    return SyntheticSpec(**config_mod.section(cfg, "synthetic"))


@functools.lru_cache(maxsize=4)
def _movielens(data_dir, min_eval):
    if not data_dir:
        raise DataError("MovieLens needs data.dir or the TD_DATA_DIR environment variable")
    examples = ingest_movielens(data_dir)
    pretrain, downstream = make_tasks(examples, min_eval=min_eval)
    featurizer = MovieLensFeaturizer().fit(pretrain.X_train)
    return pretrain, downstream, featurizer


def _featurize(task, featurizer):
    from copy import copy

    out = copy(task)
    out.X_train = featurizer.transform(task.X_train)
    out.X_eval = featurizer.transform(task.X_eval)
    return out


def select_genre(tasks, genre):
    for t in tasks:
        if genre == t.meta["rank"] or str(genre) == t.name:
            return t
    names = ", ".join(f"{t.meta['rank']}={t.name}" for t in tasks)
    raise ConfigError(f"unknown downstream genre {genre!r}; available: {names}")


def load_tasks(cfg):
    source = cfg["data.source"]
    if source == "synthetic":
        pretrain, downstream = gen_synthetic(synthetic_spec(cfg))
        return Tasks(source, pretrain, downstream, None, pretrain.X_eval,
                     pretrain.meta["subpop_eval"])
    if source == "movielens":
        pretrain, tasks, featurizer = _movielens(cfg["data.dir"], int(cfg["data.min_eval"]))
        downstream = _featurize(select_genre(tasks, cfg["data.genre"]), featurizer)
        ratings = np.rint(downstream.y_eval).astype(int)
        return Tasks(source, _featurize(pretrain, featurizer), downstream, featurizer.table_sizes,
                     downstream.X_eval, ratings, tasks)
    raise ConfigError(f"unknown data.source {source!r}")


# --- run directories -----------------------------------------------------------

def prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


class MetricsWriter:
    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        self._w.writeheader()

    def __call__(self, row):
        self._w.writerow({k: _fmt(v) for k, v in row.items()})

    def close(self):
        self._fh.close()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def teacher_estimator(cfg, tasks):
    t = config_mod.section(cfg, "teacher")
    return PartitionedMLPRegressor(hidden=tuple(t["hidden"]), dropout=t["dropout"], lr=t["lr"],
                                   train_steps=t["steps"], batch_size=t["batch_size"],
                                   eval_every=t["eval_every"], log_every=cfg["train.log_every"],
                                   seed=t["seed"], table_sizes=tasks.table_sizes,
                                   select=t["select"])


def build_teacher_net(cfg, tasks):
    rng = Rngs(cfg["teacher.seed"]).init_student
    return build_net(tasks.pretrain.X_train, tuple(cfg["teacher.hidden"]), rng,
                     cfg["teacher.dropout"], tasks.table_sizes)


def load_teacher(cfg, tasks, path):
    net = build_teacher_net(cfg, tasks)
    tensors = checkpoint.load(path)
    checkpoint.load_into(net.named_parameters(), tensors, prefix="teacher.")
    net.freeze()
    return net


def run_pretrain(cfg, out, force=False):
    """Train the teacher on the all-subpopulation / all-genre task."""
    out = prepare_out(out, force)
    config_mod.dump(cfg, out / "config.yaml")
    tasks = load_tasks(cfg)
    p = tasks.pretrain
    writer = MetricsWriter(out / "metrics.csv")
    try:
        est = teacher_estimator(cfg, tasks).fit(p.X_train, p.y_train, eval_set=(p.X_eval, p.y_eval),
                                                on_row=writer, wall_clock=cfg["log.wall_clock"])
    finally:
        writer.close()
    checkpoint.save(out / "teacher.tdck", checkpoint.state_of("teacher.", est.net_.named_parameters()))
    summary = {"metric": est.result_.metric_name, "eval_metric": est.eval_metric_,
               "final_metric": est.result_.final_metric, "best_metric": est.result_.best_metric,
               "best_step": est.result_.best_step}
    if tasks.downstream is not None:
        d = tasks.downstream
        from .analysis import rmse
        summary["downstream_rmse"] = rmse(est.predict(d.X_eval), d.y_eval)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def distiller(cfg, teacher, tasks):
    t = config_mod.section(cfg, "train")
    return TalkingDistiller(
        teacher=teacher, method=t["method"], k=t["k"], interaction=t["interaction"],
        w1=t["w1"], w2=t["w2"], w3=t["w3"], lambda_logit=t["lambda_logit"],
        lambda_feature=t["lambda_feature"], lambda_fitnet=t["lambda_fitnet"],
        lambda_hybrid_logit=t["lambda_hybrid_logit"],
        lambda_hybrid_feature=t["lambda_hybrid_feature"], noise_sigma=t["noise_sigma"],
        ramp_student_steps=t["ramp_student_steps"], ramp_channel_steps=t["ramp_channel_steps"],
        student_hidden=tuple(cfg["student.hidden"]), student_dropout=cfg["student.dropout"],
        msg_dim=cfg["channel.msg_dim"], channel_hidden=cfg["channel.hidden"],
        channel_dropout=cfg["channel.dropout"], lr=t["lr"], train_steps=t["steps"],
        batch_size=t["batch_size"], eval_every=t["eval_every"], log_every=t["log_every"],
        seed=cfg["run.seed"], table_sizes=tasks.table_sizes, select=t["select"])


def run_distill(cfg, teacher_ckpt, out, force=False):
    """Distil the teacher checkpoint into a student on the downstream task."""
    out = prepare_out(out, force)
    config_mod.dump(cfg, out / "config.yaml")
    tasks = load_tasks(cfg)
    teacher = load_teacher(cfg, tasks, teacher_ckpt) if cfg["train.method"] != "scratch" else None
    d = tasks.downstream
    est = distiller(cfg, teacher, tasks)
    writer = MetricsWriter(out / "metrics.csv")
    try:
        est.fit(d.X_train, d.y_train, eval_set=(d.X_eval, d.y_eval), on_row=writer,
                wall_clock=cfg["log.wall_clock"])
    finally:
        writer.close()
    tensors = checkpoint.state_of("student.", est.student_.named_parameters())
    tensors.update(checkpoint.state_of("", est.channels_.named_parameters()))
    checkpoint.save(out / "student.tdck", tensors)
    summary = {"method": cfg["train.method"], "task": d.name, "metric": est.result_.metric_name,
               "eval_metric": est.eval_metric_, "final_metric": est.result_.final_metric,
               "best_metric": est.result_.best_metric, "best_step": est.result_.best_step}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def run_analyze(cfg, teacher_ckpt, student_ckpt, out, force=False):
    """CKA grids between teacher/student states and the student's message space."""
    out = prepare_out(out, force)
    tasks = load_tasks(cfg)
    teacher = load_teacher(cfg, tasks, teacher_ckpt)
    tensors = checkpoint.load(student_ckpt)
    if not any(name.startswith("E_g.") for name in tensors):
        raise ContractError(f"{student_ckpt} has no E_g.* channel tensors; a scratch or LD "
                            "checkpoint cannot be analysed in message space")
    est = distiller({**cfg, "train.method": "TD"}, teacher, tasks)
    _, student, channels, _ = est.build(tasks.pretrain.X_train)
    checkpoint.load_into(student.named_parameters(), tensors, prefix="student.")
    checkpoint.load_into(channels.named_parameters(), tensors)
    grids = probe_and_grid(teacher, student, channels, tasks.probe_X, tasks.probe_buckets,
                           per_class_n=int(cfg["analyze.per_class_n"]),
                           rng=np.random.default_rng(cfg["run.seed"]))
    write_grids(grids, out)
    config_mod.dump(cfg, out / "config.yaml")
    return grids


def run_gen_data(cfg, out, force=False):
    """Materialise task splits as tab-separated text for inspection."""
    out = prepare_out(out, force)
    config_mod.dump(cfg, out / "config.yaml")
    if cfg["data.source"] == "synthetic":
        pretrain, downstream = gen_synthetic(synthetic_spec(cfg))
        for task, tag in ((pretrain, "pretrain"), (downstream, "downstream")):
            for split in ("train", "eval"):
                X, y = getattr(task, f"X_{split}"), getattr(task, f"y_{split}")
                header = "\t".join([f"x{i}" for i in range(X.shape[1])] + ["y"])
                np.savetxt(out / f"{tag}_{split}.tsv", np.column_stack([X, y]), delimiter="\t",
                           header=header, comments="", fmt="%.9g")
        return sorted(p.name for p in out.glob("*.tsv"))
    if cfg["data.source"] == "movielens":
        pretrain, tasks, _ = _movielens(cfg["data.dir"], int(cfg["data.min_eval"]))
        write_split(pretrain.X_train, out / "pretrain_train.tsv")
        write_split(pretrain.X_eval, out / "pretrain_eval.tsv")
        rows = ["rank\tgenre\tgroup\tn_train\tn_eval"]
        for t in tasks:
            slug = t.name.lower().replace("'", "").replace("-", "")
            write_split(t.X_train, out / f"genre{t.meta['rank']}_{slug}_train.tsv")
            write_split(t.X_eval, out / f"genre{t.meta['rank']}_{slug}_eval.tsv")
            rows.append(f"{t.meta['rank']}\t{t.name}\t{t.meta['group']}\t{t.meta['n_train']}\t"
                        f"{t.meta['n_eval']}")
        (out / "tasks.tsv").write_text("\n".join(rows) + "\n")
        return sorted(p.name for p in out.glob("*.tsv"))
    raise ConfigError(f"unknown data.source {cfg['data.source']!r}")


# --- sweeps --------------------------------------------------------------------

def expand_cells(cfg):
    """Grid cells as override dicts: Cartesian ``sweep.grid`` or list-form ``sweep.cells``."""
    grid, cells = cfg["sweep.grid"] or {}, list(cfg["sweep.cells"] or [])
    if grid:
        keys = list(grid)
        for combo in itertools.product(*(grid[k] if isinstance(grid[k], list) else [grid[k]]
                                         for k in keys)):
            cells.append(dict(zip(keys, combo)))
    if not cells:
        raise ConfigError("sweep needs sweep.grid or sweep.cells")
    for cell in cells:
        unknown = set(cell) - set(config_mod.DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown keys in sweep cell: {sorted(unknown)}")
    # one scratch reference arm per data setting
    data_keys = sorted({k for c in cells for k in c if k.startswith(("data.", "synthetic."))})
    refs = []
    for cell in cells:
        ref = {"train.method": "scratch", **{k: cell[k] for k in data_keys if k in cell}}
        if ref not in refs and not any(_same_ref(c, ref, data_keys) for c in cells):
            refs.append(ref)
    return refs + cells, data_keys


def _same_ref(cell, ref, data_keys):
    return cell.get("train.method") == "scratch" and all(cell.get(k) == ref.get(k) for k in data_keys)


def cell_id(cell):
    text = json.dumps(cell, sort_keys=True)
    label = "_".join(f"{k.split('.')[-1]}={v}" for k, v in sorted(cell.items()))
    label = "".join(ch if ch.isalnum() or ch in "=_.-" else "-" for ch in label)[:80]
    return f"{label}_{hashlib.sha1(text.encode()).hexdigest()[:8]}"


def _teacher_key(cfg):
    keys = sorted(k for k in cfg if k.startswith(("teacher.", "data.", "synthetic.")))
    return hashlib.sha1(json.dumps([(k, cfg[k]) for k in keys], default=str).encode()).hexdigest()[:10]


def _run_cell(args):
    cfg, teacher_ckpt, out = args
    summary_path = Path(out) / "summary.json"
    if summary_path.exists():
        return json.loads(summary_path.read_text())
    return run_distill(cfg, teacher_ckpt, out, force=True)


def aggregate(records, data_keys, metric="rmse"):
    """Mean, standard error and relative improvement over the matching scratch arm."""
    groups = {}
    for cell, seed, value in records:
        groups.setdefault(json.dumps(cell, sort_keys=True), []).append(value)
    rows = []
    for key, values in groups.items():
        cell = json.loads(key)
        v = np.asarray(values, dtype=np.float64)
        stderr = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        rows.append({"cell": cell, "n": len(v), "mean": float(v.mean()), "stderr": stderr})
    for row in rows:
        ref = next((r for r in rows if _same_ref(r["cell"], {k: row["cell"].get(k) for k in data_keys},
                                                 data_keys)), None)
        if ref is None:
            row["rel_improvement_pct"] = float("nan")
        elif metric == "rmse":
            row["rel_improvement_pct"] = 100.0 * (ref["mean"] - row["mean"]) / ref["mean"]
        else:
            row["rel_improvement_pct"] = 100.0 * (row["mean"] - ref["mean"]) / ref["mean"]
    return rows


def write_results(rows, path):
    keys = sorted({k for r in rows for k in r["cell"]})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", *keys, "n_seeds", "mean", "stderr", "rel_improvement_pct"])
        for r in rows:
            w.writerow([cell_id(r["cell"]), *(r["cell"].get(k, "") for k in keys), r["n"],
                        repr(r["mean"]), repr(r["stderr"]), f"{r['rel_improvement_pct']:.4f}"])


def run_sweep(cfg, out, teacher_ckpt=None, jobs=1, force=False):
    """One distill run per (cell, seed); aggregates into ``results.csv``."""
    cells, data_keys = expand_cells(cfg)
    seeds = list(cfg["sweep.seeds"])
    n_runs = len(cells) * len(seeds)
    if n_runs > int(cfg["sweep.max_runs"]):
        raise ConfigError(f"sweep needs {n_runs} runs, above sweep.max_runs={cfg['sweep.max_runs']}")
    out = Path(out)
    if out.exists() and (out / "results.csv").exists() and not force:
        raise ConfigError(f"{out} already holds sweep results (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "config.yaml")

    teachers = {}
    jobs_list = []
    for cell in cells:
        cell_cfg = {**cfg, **cell}
        ckpt = teacher_ckpt
        if ckpt is None:
            key = _teacher_key(cell_cfg)
            if key not in teachers:
                tdir = out / "teachers" / key
                if not (tdir / "teacher.tdck").exists():
                    run_pretrain(cell_cfg, tdir, force=True)
                teachers[key] = tdir / "teacher.tdck"
            ckpt = teachers[key]
        for seed in seeds:
            run_cfg = {**cell_cfg, "run.seed": seed}
            jobs_list.append((cell, seed, (run_cfg, str(ckpt), str(out / "runs" / cell_id(cell) / f"seed{seed}"))))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_run_cell, [j[2] for j in jobs_list]))
    else:
        summaries = [_run_cell(j[2]) for j in jobs_list]
    records = [(cell, seed, s["eval_metric"]) for (cell, seed, _), s in zip(jobs_list, summaries)]
    metric = summaries[0]["metric"] if summaries else "rmse"
    rows = aggregate(records, data_keys, metric)
    write_results(rows, out / "results.csv")
    return rows


__all__ = ["load_tasks", "run_pretrain", "run_distill", "run_sweep", "run_analyze", "run_gen_data",
           "aggregate", "expand_cells", "GENRES", "Channels", "build_channels"]
