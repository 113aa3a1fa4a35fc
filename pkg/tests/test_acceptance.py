"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The synthetic and MovieLens experiments take tens of minutes on one core;
select them with ``-m slow`` or leave them out with ``-m "not slow"``.
"""
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import ROOT, movielens_dir
from helpers import gradcheck
from talkdistill import checkpoint
from talkdistill import config as config_mod
from talkdistill import experiment
from talkdistill import numkernel as nk
from talkdistill.analysis import linear_cka
from talkdistill.data import SyntheticSpec, gen_synthetic
from talkdistill.engine import METHODS, Rngs, TrainConfig, baseline_step, build_channels, td_step
from talkdistill.estimators import PartitionedMLPRegressor, TalkingDistiller
from talkdistill.losses import LossWeights
from talkdistill.nets import PartitionedNet
from test_analysis import hsic_cka
from test_engine import WEIGHT_CASES, _oracle_case
from test_numkernel import CASES


def report(capsys, label, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


def improvement(scratch, other):
    return 100.0 * (np.mean(scratch) - np.mean(other)) / np.mean(scratch)


# --- 1: finite-difference gradient checks -------------------------------------------

def test_c1_gradchecks(capsys):
    t0 = time.perf_counter()
    worst, n = {}, 0
    for op, make in sorted(CASES.items()):
        for seed in range(20):
            arrays, build = make(np.random.default_rng(seed))
            err = max(gradcheck(build, arrays, seed=seed).values())
            worst[op] = max(worst.get(op, 0.0), err)
            n += 1
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    report(capsys, "C1 gradchecks", ok,
           f"{len(worst)} ops x 20 instances, worst rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s")


# --- 2: td_step against a straight-line reimplementation --------------------------------

def test_c2_td_step_oracle(capsys):
    diffs = [abs(np.subtract(*_oracle_case(k, w, np.float64))) for k in range(4) for w in WEIGHT_CASES]
    report(capsys, "C2 td_step oracle", max(diffs) < 1e-6,
           f"{len(diffs)} cases (k 0..3), max |total - oracle| {max(diffs):.2e}")


# --- 3: excision ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_teacher(small_synthetic):
    pre, _ = small_synthetic
    return PartitionedMLPRegressor(hidden=(16, 8), train_steps=150, batch_size=64,
                                   eval_every=150).fit(pre.X_train, pre.y_train)


def _fit_small(teacher, data, **kw):
    base = dict(student_hidden=(6, 4), msg_dim=4, channel_hidden=8, train_steps=40, batch_size=16,
                eval_every=10, log_every=5, seed=3, student_dropout=0.2, channel_dropout=0.3)
    est = TalkingDistiller(teacher, **{**base, **kw})
    return est.fit(data.X_train, data.y_train, eval_set=(data.X_eval, data.y_eval), wall_clock=False)


def _state(est):
    # the logged method name and distillation columns legitimately differ
    curves = [(r["split"], r["metric_value"], r["loss_total"], r["loss_gt"]) for r in est.history_]
    return [p.data.tobytes() for p in est.student_.parameters()], curves


def _teacher_grads_zero(method):
    rngs = Rngs(0)
    teacher = PartitionedNet(3, (8, 6), rng=np.random.default_rng(9))
    teacher.freeze()
    student = PartitionedNet(3, (5, 4), rng=rngs.init_student)
    channels = build_channels(method, teacher, student, rngs.init_comm, msg_dim=4, hidden=7)
    before = [p.data.tobytes() for p in teacher.parameters()]
    opt = nk.Adam(student.parameters() + channels.parameters(), lr=0.1)
    cfg = TrainConfig(method=method, k=3)
    batch = (nk.Tensor(np.random.default_rng(1).normal(size=(4, 3))), nk.Tensor(np.ones((4, 1))))
    step = td_step if method == "TD" else baseline_step
    for _ in range(3):
        step(batch, teacher, student, channels, cfg, rngs, optimizer=opt)
    return all((p.grad is None or not np.any(p.grad)) and p.data.tobytes() == b
               for p, b in zip(teacher.parameters(), before))


def test_c3_excision(capsys, small_teacher, small_synthetic):
    t0 = time.perf_counter()
    _, down = small_synthetic
    scratch = _state(_fit_small(None, down, method="scratch"))
    zero_td = all(_state(_fit_small(small_teacher, down, method="TD", k=k, w1=0.0, w2=0.0,
                                    w3=0.0)) == scratch for k in range(4))
    hybrid_ld = (_state(_fit_small(small_teacher, down, method="Hybrid", lambda_hybrid_logit=0.6,
                                   lambda_hybrid_feature=0.0))
                 == _state(_fit_small(small_teacher, down, method="LD", lambda_logit=0.6)))
    frozen = {m: _teacher_grads_zero(m) for m in METHODS if m != "scratch"}
    elapsed = time.perf_counter() - t0
    ok = zero_td and hybrid_ld and all(frozen.values()) and elapsed < 5 * 60
    report(capsys, "C3 excision", ok,
           f"zero-weight TD == scratch (k 0..3): {zero_td}; Hybrid(feature 0) == LD: {hybrid_ld}; "
           f"teacher grads zero: {sorted(m for m, v in frozen.items() if v)}; {elapsed:.1f}s")


# --- 4: CKA ---------------------------------------------------------------------------

def test_c4_cka(capsys):
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X, Y = rng.normal(size=(20, 16)), rng.normal(size=(20, 16))
        Y[:, :6] += X[:, :6] * seed / 4
        base = linear_cka(X, Y)
        Q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
        errs += [abs(linear_cka(X, X) - 1.0), abs(linear_cka(2.5 * X, Y) - base),
                 abs(linear_cka(X @ Q, Y) - base), abs(base - hsic_cka(X, Y))]
    report(capsys, "C4 CKA", max(errs) < 1e-6,
           f"self/scale/orthogonal/HSIC over 10 seeds, max deviation {max(errs):.2e}")


# --- 5 and 6: synthetic --------------------------------------------------------------

SEEDS = range(5)
STUDENT = dict(student_hidden=(16, 8), msg_dim=16, channel_hidden=32, channel_dropout=0.0,
               train_steps=1500, batch_size=32, eval_every=100, log_every=50)


class Synthetic:
    def __init__(self):
        t0 = time.perf_counter()
        self.pre, self.down = gen_synthetic(SyntheticSpec())
        self.teacher = PartitionedMLPRegressor(hidden=(64, 32), train_steps=4000, batch_size=128,
                                               eval_every=500)
        self.teacher.fit(self.pre.X_train, self.pre.y_train, eval_set=(self.pre.X_eval, self.pre.y_eval))
        self.teacher_seconds = time.perf_counter() - t0
        self.results, self.seconds = {}, {}

    def arm(self, name, **kw):
        if name not in self.results:
            t0 = time.perf_counter()
            d = self.down
            teacher = None if kw.get("method") == "scratch" else self.teacher.net_
            self.results[name] = np.array([
                TalkingDistiller(teacher, seed=s, **{**STUDENT, **kw})
                .fit(d.X_train, d.y_train, eval_set=(d.X_eval, d.y_eval), wall_clock=False)
                .result_.final_metric for s in SEEDS])
            self.seconds[name] = time.perf_counter() - t0
        return self.results[name]


@pytest.fixture(scope="module")
def synthetic():
    return Synthetic()


@pytest.mark.slow
def test_c5_synthetic_ordering(capsys, synthetic):
    scratch = synthetic.arm("scratch", method="scratch")
    hybrid = synthetic.arm("Hybrid", method="Hybrid")
    td = synthetic.arm("TD", method="TD", k=1)
    elapsed = synthetic.teacher_seconds + sum(synthetic.seconds[a] for a in ("scratch", "Hybrid", "TD"))
    wins = int(np.sum(td < scratch))
    ok = td.mean() <= hybrid.mean() <= scratch.mean() and wins >= 4 and elapsed < 20 * 60
    report(capsys, "C5 synthetic", ok,
           f"mean RMSE TD {td.mean():.4f} <= Hybrid {hybrid.mean():.4f} <= scratch "
           f"{scratch.mean():.4f}; TD wins {wins}/5; {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_c6_interaction_helps(capsys, synthetic):
    scratch = synthetic.arm("scratch", method="scratch")
    t0 = time.perf_counter()
    off = improvement(scratch, synthetic.arm("no-interaction", method="TD", k=1, interaction=False))
    gains = {k: improvement(scratch, synthetic.arm(f"k{k}", method="TD", k=k, w1=1.0 / (k + 1)))
             for k in (2, 3)}
    elapsed = time.perf_counter() - t0 + synthetic.seconds["scratch"]
    ok = all(g >= off for g in gains.values()) and elapsed < 30 * 60
    report(capsys, "C6 interaction", ok,
           f"improvement k=2 {gains[2]:+.2f}%, k=3 {gains[3]:+.2f}% vs disabled {off:+.2f}%; "
           f"{elapsed / 60:.1f} min")


# --- 7: MovieLens --------------------------------------------------------------------

def _movielens_or_materialize():
    d = movielens_dir()
    if not (d / "u.data").is_file():
        subprocess.run([sys.executable, str(ROOT / "scripts" / "materialize_movielens.py"), str(d)],
                       check=False)
    return d


@pytest.mark.slow
def test_c7_movielens(capsys, tmp_path):
    t0 = time.perf_counter()
    data_dir = _movielens_or_materialize()
    if not (data_dir / "u.data").is_file():
        report(capsys, "C7 MovieLens", False, f"dataset unavailable at {data_dir}")
    cfg = config_mod.load(None, {"data.source": "movielens", "data.dir": str(data_dir),
                                 "log.wall_clock": False})
    experiment.run_pretrain(cfg, tmp_path / "teacher")
    tasks = experiment.load_tasks(cfg)
    teacher = experiment.load_teacher(cfg, tasks, tmp_path / "teacher" / "teacher.tdck")
    scratch, td, out_of_band = {}, {}, []
    sparsest = sorted(t.meta["rank"] for t in tasks.downstream_all)[-4:]
    for task in tasks.downstream_all:
        rank = task.meta["rank"]
        g = {**cfg, "data.genre": rank}
        gt = experiment.load_tasks(g)
        d = gt.downstream
        for seed in SEEDS:
            runs = [("scratch", None, scratch)] + ([("TD", teacher, td)] if rank in sparsest else [])
            for method, t, store in runs:
                c = {**g, "train.method": method, "run.seed": seed}
                est = experiment.distiller(c, t, gt).fit(d.X_train, d.y_train,
                                                        eval_set=(d.X_eval, d.y_eval),
                                                        wall_clock=False)
                store.setdefault(rank, []).append(est.result_.final_metric)
        mean = float(np.mean(scratch[rank]))
        if not 0.95 <= mean <= 1.25:
            out_of_band.append((task.meta["group"], round(mean, 4)))
    per_genre = {r: improvement(scratch[r], td[r]) for r in td}
    mean_gain = float(np.mean(list(per_genre.values())))
    elapsed = time.perf_counter() - t0
    lo = min(np.mean(v) for v in scratch.values())
    hi = max(np.mean(v) for v in scratch.values())
    ok = not out_of_band and mean_gain > 0 and elapsed < 2 * 3600
    report(capsys, "C7 MovieLens", ok,
           f"scratch RMSE range [{lo:.4f}, {hi:.4f}] over {len(scratch)} genres; "
           f"TD improvement on 4 sparsest {mean_gain:+.2f}% "
           f"({', '.join(f'{r}:{v:+.2f}' for r, v in sorted(per_genre.items()))}); "
           f"{elapsed / 60:.1f} min" + (f"; out of band {out_of_band}" if out_of_band else ""))


# --- 8: engineering --------------------------------------------------------------------

def _step_seconds(k, reps=15):
    rngs = Rngs(0)
    x_dim = 32
    teacher = PartitionedNet(x_dim, (512, 256), rng=np.random.default_rng(1))
    teacher.freeze()
    student = PartitionedNet(x_dim, (128, 64), rng=rngs.init_student)
    channels = build_channels("TD", teacher, student, rngs.init_comm)
    opt = nk.Adam(student.parameters() + channels.parameters())
    rng = np.random.default_rng(2)
    batch = (nk.Tensor(rng.normal(size=(256, x_dim))), nk.Tensor(rng.normal(size=(256, 1))))
    cfg = TrainConfig(method="TD", k=k)
    times = []
    for i in range(reps + 3):
        t0 = time.perf_counter()
        td_step(batch, teacher, student, channels, cfg, rngs, optimizer=opt)
        if i >= 3:
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def test_c8_engineering(capsys, tmp_path):
    start = time.perf_counter()
    cfg = config_mod.load(None, {
        "synthetic.n_pretrain": 1000, "synthetic.n_pretrain_eval": 200,
        "synthetic.n_downstream_train": 60, "synthetic.n_downstream_eval": 200,
        "teacher.hidden": [16, 8], "teacher.steps": 60, "teacher.eval_every": 30,
        "student.hidden": [6, 4], "channel.hidden": 8, "channel.msg_dim": 4,
        "train.steps": 40, "train.eval_every": 10, "train.batch_size": 16, "train.k": 2,
        "log.wall_clock": False, "run.seed": 11})
    experiment.run_pretrain(cfg, tmp_path / "t")
    teacher = tmp_path / "t" / "teacher.tdck"
    for name in ("a", "b"):
        experiment.run_distill(cfg, teacher, tmp_path / name)
    same_metrics = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    src = tmp_path / "a" / "student.tdck"
    loaded = checkpoint.load(src)
    checkpoint.save(tmp_path / "again.tdck", loaded)
    tasks = experiment.load_tasks(cfg)
    est = experiment.distiller(cfg, experiment.load_teacher(cfg, tasks, teacher), tasks)
    _, student, _, _ = est.build(tasks.downstream.X_train)
    checkpoint.load_into(student.named_parameters(), loaded, prefix="student.")
    roundtrip = (src.read_bytes() == (tmp_path / "again.tdck").read_bytes()
                 and all(loaded["student." + n].tobytes() == p.data.tobytes()
                         for n, p in student.named_parameters()))

    t0, t3 = _step_seconds(0), _step_seconds(3)
    ratio = t3 / t0
    elapsed = time.perf_counter() - start
    ok = roundtrip and same_metrics and ratio <= 5 and elapsed < 10 * 60
    report(capsys, "C8 engineering", ok,
           f"checkpoint round-trip bit-identical: {roundtrip}; seeded metrics identical: "
           f"{same_metrics}; step time k=3/k=0 {t3 * 1e3:.0f}/{t0 * 1e3:.0f} ms = {ratio:.2f}x; "
           f"{elapsed:.1f}s")
