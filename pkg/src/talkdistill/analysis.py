"""Linear CKA between representation sets, plus rmse/accuracy."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError

log = logging.getLogger(__name__)

REPRESENTATIONS = ("s_g", "e_g", "m_g", "s_h", "e_h")


def rmse(preds, targets):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(preds) != len(targets):
        raise DimensionError(f"rmse: {len(preds)} predictions vs {len(targets)} targets")
    if len(preds) == 0:
        raise DataError("rmse of empty input")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


def accuracy(logits, labels):
    logits = np.asarray(logits)
    labels = np.asarray(labels).reshape(-1)
    if len(logits) != len(labels):
        raise DimensionError(f"accuracy: {len(logits)} rows vs {len(labels)} labels")
    if len(labels) == 0:
        raise DataError("accuracy of empty input")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def linear_cka(X, Y):
    """Linear CKA ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)``.

    Columns are centred internally. Returns 0 when either side is constant.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2:
        raise DimensionError(f"linear_cka needs 2-d inputs, got {X.shape} and {Y.shape}")
    if X.shape[0] != Y.shape[0]:
        raise DimensionError(f"linear_cka: {X.shape[0]} vs {Y.shape[0]} examples")
    if X.shape[0] < 2:
        raise DataError("linear_cka needs at least 2 examples")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    denom = np.linalg.norm(Xc.T @ Xc) * np.linalg.norm(Yc.T @ Yc)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(Yc.T @ Xc) ** 2 / denom)


@dataclass
class RepresentationSet:
    label: str
    matrix: np.ndarray


@dataclass
class SimilarityGrid:
    """CKA between every pair of representation sets for one bucket."""

    bucket: str
    labels: tuple
    values: np.ndarray
    n: int

    def cell(self, row, col):
        return float(self.values[self.labels.index(row), self.labels.index(col)])

    def write(self, path):
        path = Path(path)
        lines = ["\t".join(["", *self.labels])]
        for label, row in zip(self.labels, self.values):
            lines.append("\t".join([label, *(f"{v:.9f}" for v in row)]))
        path.write_text("\n".join(lines) + "\n")


def collect_representations(teacher, student, channels, X):
    """The five probe sets ``s_g, e_g, m_g, s_h, e_h`` in eval mode."""
    _, st_g = student.forward_with_taps(X, training=False)
    _, st_h = teacher.forward_with_taps(X, training=False)
    m_g = channels.g.encode(st_g, training=False).tensor
    mats = {"s_g": st_g.s.data, "e_g": st_g.e.data, "m_g": m_g.data,
            "s_h": st_h.s.data, "e_h": st_h.e.data}
    return [RepresentationSet(k, mats[k]) for k in REPRESENTATIONS]


def grid_from_sets(bucket, sets):
    n = len(sets[0].matrix)
    if any(len(s.matrix) != n for s in sets):
        raise DimensionError("representation sets disagree on the number of probe examples")
    values = np.array([[linear_cka(a.matrix, b.matrix) for b in sets] for a in sets])
    return SimilarityGrid(bucket, tuple(s.label for s in sets), values, n)


def probe_and_grid(teacher, student, channels, X, buckets, per_class_n=20, rng=None):
    """One :class:`SimilarityGrid` per bucket of ``buckets`` (a label per row of X)."""
    from .nets import take_rows

    if channels is None or channels.g is None or channels.g.encoder is None:
        raise DataError("probe_and_grid needs the student's communication encoder")
    rng = np.random.default_rng(0) if rng is None else rng
    buckets = np.asarray(buckets)
    grids = []
    for b in np.unique(buckets):
        rows = np.flatnonzero(buckets == b)
        if len(rows) < per_class_n:
            log.warning("bucket %s has %d examples (< %d); using all", b, len(rows), per_class_n)
        else:
            rows = np.sort(rng.choice(rows, size=per_class_n, replace=False))
        if len(rows) < 2:
            log.warning("bucket %s skipped: fewer than 2 examples", b)
            continue
        sets = collect_representations(teacher, student, channels, take_rows(X, rows))
        grids.append(grid_from_sets(str(b), sets))
    return grids


SUMMARY_PAIRS = (("s_g", "s_h"), ("e_g", "e_h"), ("m_g", "s_h"), ("m_g", "e_h"))


def write_grids(grids, out_dir):
    """One matrix file per bucket plus ``summary.csv`` of student-teacher diagonal cells."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["bucket", "n"] + [f"{a}~{b}" for a, b in SUMMARY_PAIRS]
    lines = [",".join(header)]
    for g in grids:
        g.write(out_dir / f"cka_{g.bucket}.tsv")
        lines.append(",".join([g.bucket, str(g.n)] + [f"{g.cell(a, b):.9f}" for a, b in SUMMARY_PAIRS]))
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")
