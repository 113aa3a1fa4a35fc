"""Distillation loss terms. The distance ``d`` is always :func:`numkernel.mse`."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

from . import numkernel as nk
from .comm import CommChannel, Message
from .errors import ConfigError, ContractError, DimensionError
from .nets import HiddenStates


@dataclass
class LossWeights:
    """Non-negative loss weights.

    ``w1`` scales every L_interact term, ``w2`` scales L_SC and ``w3``
    scales L_MC. The remaining weights belong to the baselines.
    """

    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    lambda_logit: float = 1.0
    lambda_feature: float = 1.0
    lambda_fitnet: float = 1.0
    lambda_hybrid_logit: float = 1.0
    lambda_hybrid_feature: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative, "
                                  f"got {getattr(self, f.name)}")


@dataclass
class LossReport:
    """Raw per-term values, their weighted contributions, and the total.

    ``weighted`` keys: gt, interact, mc, sc, kd. ``total`` equals their sum
    up to float32 rounding.
    """

    gt: float = 0.0
    interact: list = field(default_factory=list)
    mc: float | None = None
    sc: float | None = None
    kd: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    total: float = 0.0

    def column(self, key):
        return self.weighted.get(key, 0.0)


def _states_tensor(x):
    return x.cat() if isinstance(x, HiddenStates) else x


def l_logit(y_g, y_h):
    """Logit distillation: ``d(y_g, y_h)`` with ``y_h`` from the frozen teacher."""
    return nk.mse(y_g, y_h)


def l_feature(m_g, m_h):
    a = m_g.tensor if isinstance(m_g, Message) else m_g
    b = m_h.tensor if isinstance(m_h, Message) else m_h
    if a.shape != b.shape:
        raise DimensionError(f"l_feature: message shapes {a.shape} vs {b.shape}")
    return nk.mse(a, b)


def l_fitnet(states_g, states_h, decoder, training=False, rng=None):
    """``d({s_g; e_g}, D_g({s_h; e_h}))`` - teacher states enter ``D_g`` untouched.

    ``decoder`` is either a :class:`CommChannel` built with
    ``decoder_in = width(s_h) + width(e_h)`` or a bare decoder module.
    """
    raw = _states_tensor(states_h)
    if isinstance(decoder, CommChannel):
        decoded = decoder.decode(raw, training, rng).cat()
    else:
        if raw.shape[-1] != decoder.in_dim:
            raise DimensionError(f"l_fitnet: decoder expects width {decoder.in_dim}, got {raw.shape}")
        decoded = decoder(raw, training, rng)
    return nk.mse(_states_tensor(states_g), decoded)


def l_interact(states_g_current, decoded_return):
    """Student's current-iteration states vs states decoded from the teacher reply."""
    a, b = _states_tensor(states_g_current), _states_tensor(decoded_return)
    if a.shape != b.shape:
        raise DimensionError(f"l_interact: shapes {a.shape} vs {b.shape}")
    return nk.mse(a, b)


def _require_round_zero(*msgs):
    for m in msgs:
        if isinstance(m, Message) and m.iteration != 0:
            raise ContractError(
                f"consistency losses take iteration-0 messages only, got iteration {m.iteration}")


def l_mc(m_g0, m_h0):
    _require_round_zero(m_g0, m_h0)
    return l_feature(m_g0, m_h0)


def l_sc(states_g, states_h, m_g0, m_h0, ch_g: CommChannel, ch_h: CommChannel,
         training=False, rng=None):
    """``d({s_g;e_g}, D_g(m_h0)) + d({s_h;e_h}, D_h(m_g0))``."""
    _require_round_zero(m_g0, m_h0)
    student_side = nk.mse(_states_tensor(states_g), ch_g.decode(m_h0, training, rng).cat())
    teacher_side = nk.mse(_states_tensor(states_h), ch_h.decode(m_g0, training, rng).cat())
    return student_side + teacher_side


def ground_truth_loss(y_pred, y_true, task="regression"):
    if task == "regression":
        y_true = y_true if isinstance(y_true, nk.Tensor) else nk.Tensor(y_true, dtype=y_pred.data.dtype)
        return nk.mse(y_pred, y_true)
    if task == "classification":
        return nk.softmax_cross_entropy(y_pred, y_true)
    raise ConfigError(f"unknown task kind {task!r}")


def combined_loss(gt_loss, interact_losses, mc, sc, w: LossWeights, kd_terms=None):
    """``gt + w1 * sum(interact) + w2 * L_SC + w3 * L_MC (+ weighted KD terms)``.

    Terms whose weight is zero are left out of the graph, so they contribute
    no gradient at all. ``kd_terms`` maps a name to ``(weight, loss)`` for the
    baseline methods. Returns ``(total, LossReport)``.
    """
    report = LossReport(gt=gt_loss.item())
    total = gt_loss
    weighted = {"gt": gt_loss.item(), "interact": 0.0, "mc": 0.0, "sc": 0.0, "kd": 0.0}

    def add_term(key, weight, loss):
        nonlocal total
        if weight < 0:
            raise ConfigError(f"weight for {key} must be non-negative, got {weight}")
        if loss is None or weight == 0:
            return
        term = nk.mul(loss, float(weight))
        weighted[key] += term.item()
        total = total + term

    for loss in interact_losses:
        report.interact.append(loss.item())
        add_term("interact", w.w1, loss)
    if sc is not None:
        report.sc = sc.item()
        add_term("sc", w.w2, sc)
    if mc is not None:
        report.mc = mc.item()
        add_term("mc", w.w3, mc)
    for name, (weight, loss) in (kd_terms or {}).items():
        report.kd[name] = loss.item()
        add_term("kd", weight, loss)
    report.weighted = weighted
    report.total = total.item()
    return total, report


__all__ = ["LossWeights", "LossReport", "l_logit", "l_feature", "l_fitnet", "l_interact",
           "l_mc", "l_sc", "ground_truth_loss", "combined_loss"]
