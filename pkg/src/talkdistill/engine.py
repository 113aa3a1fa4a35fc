"""Training loops: Talking-model Distillation and the classical KD baselines.

One TD step follows the interactive protocol: the student encodes its
states, the teacher decodes them, re-runs its middle block on the decoded
lower states, encodes the result and sends it back; the student decodes the
reply, is pulled towards it by L_interact, interprets it with its own middle
block and sends a follow-up. The teacher body never receives an update.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .analysis import rmse, accuracy
from .comm import CommChannel, add_noise
from .errors import ConfigError, ContractError, DataError, NumericalError
from .losses import (LossWeights, combined_loss, ground_truth_loss, l_feature, l_fitnet,
                     l_interact, l_logit, l_mc, l_sc)
from .nets import HiddenStates, PartitionedNet, take_rows

log = logging.getLogger(__name__)

METHODS = ("scratch", "LD", "FD", "FitNet", "Hybrid", "TD")
BASELINES = ("scratch", "LD", "FD", "FitNet", "Hybrid")
METRIC_COLUMNS = ["step", "wall_ms", "split", "method", "k", "loss_total", "loss_gt",
                  "loss_interact", "loss_mc", "loss_sc", "loss_kd", "metric_name", "metric_value"]


@dataclass
class TrainConfig:
    method: str = "TD"
    k: int = 1
    interaction: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    noise_sigma: float = 0.0
    ramp_student_steps: int = 0
    ramp_channel_steps: int = 0
    train_steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 100
    log_every: int = 10
    task: str = "regression"
    max_k: int = 3

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "TD" and not 0 <= self.k <= self.max_k:
            raise ConfigError(f"k must be in [0, {self.max_k}], got {self.k}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.ramp_student_steps + self.ramp_channel_steps > self.train_steps:
            raise ConfigError("ramp-up steps exceed train_steps")
        for name in ("train_steps", "batch_size", "eval_every", "log_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class StepTrace:
    """Activations of each communication round of one TD step (numpy copies)."""

    student_messages: list = field(default_factory=list)
    teacher_decoded: list = field(default_factory=list)
    teacher_interpreted: list = field(default_factory=list)
    teacher_messages: list = field(default_factory=list)
    student_decoded: list = field(default_factory=list)
    student_interpreted: list = field(default_factory=list)

    @property
    def teacher_interpret_calls(self):
        return len(self.teacher_interpreted)


class Rngs:
    """Independent random streams so that unused terms never shift the
    student's random draws."""

    def __init__(self, seed):
        ss = np.random.SeedSequence(seed)
        init_student, init_comm, batches, student, comm = ss.spawn(5)
        self.init_student = np.random.default_rng(init_student)
        self.init_comm = np.random.default_rng(init_comm)
        self.batches = np.random.default_rng(batches)
        self.student = np.random.default_rng(student)
        self.comm = np.random.default_rng(comm)


@dataclass
class Channels:
    g: CommChannel | None = None
    h: CommChannel | None = None

    def parameters(self):
        return [p for ch in (self.g, self.h) if ch is not None for p in ch.parameters()]

    def named_parameters(self):
        return [(n, p) for ch in (self.g, self.h) if ch is not None
                for n, p in ch.named_parameters()]


def build_channels(method, teacher, student, rng, msg_dim=128, hidden=256, dropout=0.1):
    """Channels a method needs: both for TD/FD/Hybrid, student decoder only for FitNet."""
    if method in ("scratch", "LD"):
        return Channels()
    if method == "FitNet":
        g = CommChannel("g", student.s_width, student.e_width, msg_dim, hidden, dropout, rng,
                        decoder_in=teacher.s_width + teacher.e_width, with_encoder=False)
        return Channels(g=g)
    g = CommChannel("g", student.s_width, student.e_width, msg_dim, hidden, dropout, rng)
    h = CommChannel("h", teacher.s_width, teacher.e_width, msg_dim, hidden, dropout, rng)
    if g.msg_dim != h.msg_dim:
        raise ContractError("teacher and student channels must share the message width")
    return Channels(g=g, h=h)


def _check_teacher_frozen(teacher):
    if teacher is None:
        return
    for name, p in teacher.named_parameters():
        if not p.frozen or p.grad is not None:
            raise ContractError(f"teacher parameter {name} is not frozen")


def _check_finite(report, trace=None):
    if not np.isfinite(report.total):
        detail = f"loss report: {report}"
        if trace is not None:
            detail += f"; trace rounds: {trace.teacher_interpret_calls}"
        raise NumericalError(f"non-finite loss; {detail}")


def _apply_update(total, optimizer, teacher):
    optimizer.zero_grad()
    total.backward()
    _check_teacher_frozen(teacher)
    optimizer.step()


def td_step(batch, teacher: PartitionedNet, student: PartitionedNet, channels: Channels,
            cfg: TrainConfig, rngs: Rngs, optimizer=None, keep_trace=False):
    """One TD step on ``batch = (x, y)``. Returns ``(total, report, trace)``.

    When ``optimizer`` is given, backpropagates and applies one update.
    """
    x, y = batch
    g_ch, h_ch = channels.g, channels.h
    trace = StepTrace()

    y_g, states_g = student.forward_with_taps(x, training=True, rng=rngs.student)
    m_g = g_ch.encode(states_g, 0, training=True, rng=rngs.comm)
    y_h, states_h = teacher.forward_with_taps(x, training=False)
    m_h0 = h_ch.encode(states_h, 0, training=True, rng=rngs.comm)

    gt = ground_truth_loss(y_g, y, cfg.task)
    sc = l_sc(states_g, states_h, m_g, m_h0, g_ch, h_ch, training=True, rng=rngs.comm)
    mc = l_mc(m_g, m_h0)

    interact = []
    if cfg.interaction:
        current = states_g
        for i in range(cfg.k + 1):
            dec_h = h_ch.decode(m_g, training=True, rng=rngs.comm)
            s_h = add_noise(dec_h.s, cfg.noise_sigma, rngs.comm)
            e_h_tilde = teacher.run_middle(s_h, training=False)
            m_h = h_ch.encode(HiddenStates(s_h, e_h_tilde), i + 1, training=True, rng=rngs.comm)
            dec_g = g_ch.decode(m_h, training=True, rng=rngs.comm)
            interact.append(l_interact(current, dec_g))
            e_g_tilde = student.run_middle(dec_g.s, training=True, rng=rngs.comm)
            if keep_trace:
                trace.student_messages.append(m_g.tensor.data.copy())
                trace.teacher_decoded.append((dec_h.s.data.copy(), dec_h.e.data.copy()))
                trace.teacher_interpreted.append(e_h_tilde.data.copy())
                trace.teacher_messages.append(m_h.tensor.data.copy())
                trace.student_decoded.append((dec_g.s.data.copy(), dec_g.e.data.copy()))
                trace.student_interpreted.append(e_g_tilde.data.copy())
            else:
                trace.teacher_interpreted.append(None)
            current = HiddenStates(dec_g.s, e_g_tilde)
            if i < cfg.k:
                m_g = g_ch.encode(current, i + 1, training=True, rng=rngs.comm)

    total, report = combined_loss(gt, interact, mc, sc, cfg.weights)
    _check_finite(report, trace)
    if optimizer is not None:
        _apply_update(total, optimizer, teacher)
    return total, report, trace


def baseline_step(batch, teacher, student, channels: Channels, cfg: TrainConfig, rngs: Rngs,
                  optimizer=None):
    """One step of scratch / LD / FD / FitNet / Hybrid. Returns ``(total, report)``."""
    if cfg.method == "TD":
        raise ContractError("baseline_step called with method TD; use td_step")
    x, y = batch
    w = cfg.weights
    y_g, states_g = student.forward_with_taps(x, training=True, rng=rngs.student)
    gt = ground_truth_loss(y_g, y, cfg.task)
    kd = {}
    if cfg.method != "scratch":
        y_h, states_h = teacher.forward_with_taps(x, training=False)
        if cfg.method in ("LD", "Hybrid"):
            weight = w.lambda_logit if cfg.method == "LD" else w.lambda_hybrid_logit
            kd["logit"] = (weight, l_logit(y_g, y_h))
        if cfg.method in ("FD", "Hybrid"):
            weight = w.lambda_feature if cfg.method == "FD" else w.lambda_hybrid_feature
            m_g = channels.g.encode(states_g, training=True, rng=rngs.comm)
            m_h = channels.h.encode(states_h, training=True, rng=rngs.comm)
            kd["feature"] = (weight, l_feature(m_g, m_h))
        if cfg.method == "FitNet":
            kd["fitnet"] = (w.lambda_fitnet,
                            l_fitnet(states_g, states_h, channels.g, training=True, rng=rngs.comm))
    total, report = combined_loss(gt, [], None, None, w, kd_terms=kd)
    _check_finite(report)
    if optimizer is not None:
        _apply_update(total, optimizer, teacher)
    return total, report


def evaluate(net, X, y, task="regression", batch_size=4096):
    preds = net.predict(X, batch_size)
    if task == "regression":
        return "rmse", rmse(preds.reshape(-1), np.asarray(y).reshape(-1))
    return "accuracy", accuracy(preds, np.asarray(y))


@dataclass
class TrainResult:
    student: PartitionedNet
    channels: Channels
    history: list
    final_metric: float
    best_metric: float
    best_step: int
    best_state: dict
    metric_name: str


def _snapshot(named):
    return {n: p.data.copy() for n, p in named}


def _batch_indices(n, batch_size, rng):
    """Endless shuffled epochs of row indices."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[start:start + batch_size]


def _as_target(y, task):
    if task == "regression":
        return nk.Tensor(np.asarray(y, dtype=nk.DTYPE).reshape(-1, 1))
    return np.asarray(y, dtype=np.int64)


def _row(step, t0, split, cfg, report=None, metric_name="", metric_value="", wall_clock=True):
    row = dict.fromkeys(METRIC_COLUMNS, "")
    row.update(step=step, wall_ms=int((time.perf_counter() - t0) * 1000) if wall_clock else 0,
               split=split, method=cfg.method, k=cfg.k if cfg.method == "TD" else "",
               metric_name=metric_name, metric_value=metric_value)
    if report is not None:
        row.update(loss_total=report.total, loss_gt=report.column("gt"),
                   loss_interact=report.column("interact"), loss_mc=report.column("mc"),
                   loss_sc=report.column("sc"), loss_kd=report.column("kd"))
    return row


def train(teacher: PartitionedNet, student: PartitionedNet, channels: Channels, data,
          cfg: TrainConfig, rngs: Rngs | None = None, on_row=None, wall_clock=True):
    """Train ``student`` against the frozen ``teacher``.

    ``data`` is ``(X_train, y_train, X_eval, y_eval)``. Steps are split into
    an optional student-only ramp, an optional channels-only ramp (student
    frozen) and joint training. ``on_row`` receives every metric row.
    """
    X_tr, y_tr, X_ev, y_ev = data
    if len(y_tr) == 0 or len(y_ev) == 0:
        raise DataError("empty train or eval split")
    if teacher is not None:
        teacher.freeze()
    elif cfg.method != "scratch":
        raise ContractError(f"method {cfg.method} needs a teacher")
    rngs = rngs or Rngs(cfg.seed)
    params = student.parameters() + channels.parameters()
    optimizer = nk.Adam(params, lr=cfg.lr)
    named = [(f"student.{n}", p) for n, p in student.named_parameters()] + channels.named_parameters()

    history = []

    def emit(row):
        history.append(row)
        if on_row is not None:
            on_row(row)

    scratch_cfg = copy.copy(cfg)
    scratch_cfg.method = "scratch"
    batches = _batch_indices(len(y_tr), min(cfg.batch_size, len(y_tr)), rngs.batches)
    t0 = time.perf_counter()
    best = (np.inf if cfg.task == "regression" else -np.inf, 0, _snapshot(named))
    metric_name, final = "rmse", float("nan")
    ramp1 = cfg.ramp_student_steps
    ramp2 = ramp1 + cfg.ramp_channel_steps

    for step in range(1, cfg.train_steps + 1):
        if step <= ramp1:
            phase, step_cfg = "ramp_student", scratch_cfg
        elif step <= ramp2:
            phase, step_cfg = "ramp_channels", cfg
        else:
            phase, step_cfg = "train", cfg
        if step == ramp1 + 1 and cfg.ramp_channel_steps:
            student.freeze(True)
        if step == ramp2 + 1 and cfg.ramp_channel_steps:
            student.freeze(False)

        rows = next(batches)
        batch = (take_rows(X_tr, rows), _as_target(y_tr[rows], cfg.task))
        if step_cfg.method == "TD":
            _, report, _ = td_step(batch, teacher, student, channels, step_cfg, rngs, optimizer)
        else:
            _, report = baseline_step(batch, teacher, student, channels, step_cfg, rngs, optimizer)

        if step % cfg.log_every == 0 or step == cfg.train_steps:
            emit(_row(step, t0, phase, cfg, report, wall_clock=wall_clock))
        if step % cfg.eval_every == 0 or step == cfg.train_steps:
            metric_name, final = evaluate(student, X_ev, y_ev, cfg.task)
            better = final < best[0] if cfg.task == "regression" else final > best[0]
            if better:
                best = (final, step, _snapshot(named))
            emit(_row(step, t0, "eval", cfg, metric_name=metric_name, metric_value=final,
                      wall_clock=wall_clock))
            log.debug("step %d %s %s=%.5f", step, phase, metric_name, final)

    return TrainResult(student, channels, history, final, best[0], best[1], best[2], metric_name)


def restore(named, state):
    for n, p in named:
        p.data[...] = state[n]
