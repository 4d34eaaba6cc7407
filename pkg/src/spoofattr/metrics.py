"""EER, balanced accuracy, confusion matrices and attack -> value flow tables."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import AlignmentError, EmptyClassRow, EmptyPool


@dataclass(frozen=True)
class ScorePool:
    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "target_scores", np.asarray(self.target_scores, dtype=np.float64).ravel())
        object.__setattr__(self, "nontarget_scores", np.asarray(self.nontarget_scores, dtype=np.float64).ravel())


class EER(NamedTuple):
    value: float
    threshold: float


def finite_scores(*arrays):
    """Replace -inf/+inf by (min finite - 1)/(max finite + 1) across all arrays.

    Ordering is preserved; no arithmetic is ever done on infinities.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    if any(np.isnan(a).any() for a in arrays):
        raise ValueError("scores contain NaN")
    finite = np.concatenate([a[np.isfinite(a)] for a in arrays]) if arrays else np.array([])
    lo = finite.min() - 1.0 if finite.size else -1.0
    hi = finite.max() + 1.0 if finite.size else 1.0
    out = []
    for a in arrays:
        a = a.copy()
        a[a == -np.inf] = lo
        a[a == np.inf] = hi
        out.append(a)
    return out


def eer(pool: ScorePool) -> EER:
    """Equal error rate by sweeping thresholds over the pooled scores.

    At threshold t: FAR = #(nontarget >= t)/n_non, FRR = #(target < t)/n_tar.
    The threshold minimising |FAR - FRR| is chosen (lowest one on ties) and
    the EER reported as (FAR + FRR)/2 there.  The comparison is done on
    integer counts, so no rounding can reorder near-ties.
    """
    tar, non = pool.target_scores, pool.nontarget_scores
    if tar.size == 0 or non.size == 0:
        raise EmptyPool(f"need target and non-target scores (got {tar.size} and {non.size})")
    tar, non = finite_scores(tar, non)
    tar_sorted = np.sort(tar)
    non_sorted = np.sort(non)
    thresholds = np.unique(np.concatenate([tar, non]))
    n_tar, n_non = tar.size, non.size
    fr = np.searchsorted(tar_sorted, thresholds, side="left").astype(np.int64)
    fa = n_non - np.searchsorted(non_sorted, thresholds, side="left").astype(np.int64)
    gap = np.abs(fa * n_tar - fr * n_non)
    k = int(np.argmin(gap))
    value = (int(fa[k]) * n_tar + int(fr[k]) * n_non) / (2 * n_tar * n_non)
    return EER(value, float(thresholds[k]))


def confusion_matrix(truths, preds, n_classes: int) -> np.ndarray:
    truths = np.asarray(truths, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if truths.shape != preds.shape:
        raise AlignmentError(f"{truths.size} truths vs {preds.size} predictions")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm


def balanced_accuracy(cm) -> float:
    """Mean per-class recall; rows are true classes."""
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(rows < 1):
        empty = int(np.argmin(rows))
        raise EmptyClassRow(f"class {empty} has no trials")
    return float(np.mean(np.diag(cm) / rows))


def multiclass_eer(scores, truths, pooling: str = "pooled") -> float:
    """EER for C-class scores.

    ``pooled``: every (trial, class) score goes into one pool, target when the
    class is the trial's true class.  ``macro``: one EER per class (that class's
    score column, its trials as targets), averaged over classes that have both
    target and non-target trials.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError("need an (N, C) score matrix with C >= 2")
    if scores.shape[0] != truths.size:
        raise AlignmentError(f"{scores.shape[0]} score rows vs {truths.size} labels")
    (scores,) = finite_scores(scores)
    mask = np.zeros(scores.shape, dtype=bool)
    mask[np.arange(truths.size), truths] = True
    if pooling == "pooled":
        return eer(ScorePool(scores[mask], scores[~mask])).value
    if pooling == "macro":
        vals = []
        for c in range(scores.shape[1]):
            t, n = scores[mask[:, c], c], scores[~mask[:, c], c]
            if t.size and n.size:
                vals.append(eer(ScorePool(t, n)).value)
        if not vals:
            raise EmptyPool("no class has both target and non-target trials")
        return float(np.mean(vals))
    raise ValueError(f"unknown pooling {pooling!r}")


def block_argmax(rho, schema) -> np.ndarray:
    """(N, L) index of the most probable value in each attribute block."""
    rho = np.asarray(rho)
    return np.stack([rho[:, schema.block(l)].argmax(axis=1) for l in range(schema.n_attributes)], axis=1)


def flow_report(rho, labels: Sequence[str], schema, with_eer: bool = True) -> dict:
    """Per attribute, counts of each attack's utterances landing on each value.

    Assignment is by the largest probability in the attribute's block; the
    table is a confusion matrix between attack labels and attribute values.
    Only labels with a schema row are counted (bonafide is skipped).
    """
    from .attribank import attribute_value_eer  # circular at import time

    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape[0] != len(labels):
        raise AlignmentError(f"{rho.shape[0]} embeddings vs {len(labels)} labels")
    if rho.shape[1] != schema.total_values:
        raise AlignmentError(f"embedding width {rho.shape[1]} vs schema total {schema.total_values}")
    keep = [i for i, lab in enumerate(labels) if lab in schema.attack_table]
    attacks = sorted({labels[i] for i in keep})
    preds = block_argmax(rho[keep], schema) if keep else np.zeros((0, schema.n_attributes), dtype=int)
    kept_labels = [labels[i] for i in keep]
    out = {"attacks": attacks, "attributes": []}
    for l, attr in enumerate(schema.attributes):
        table = {a: [0] * len(attr.values) for a in attacks}
        for lab, p in zip(kept_labels, preds[:, l]):
            table[lab][int(p)] += 1
        entry = {
            "name": attr.name,
            "values": list(attr.values),
            "truth": {a: attr.values[schema.attack_table[a][l]] for a in attacks},
            "counts": table,
        }
        if with_eer and keep:
            truths = np.array([schema.attack_table[lab][l] for lab in kept_labels])
            try:
                entry["eer"] = attribute_value_eer(rho[keep][:, schema.block(l)], truths)
            except Exception:
                entry["eer"] = None
        out["attributes"].append(entry)
    return out
