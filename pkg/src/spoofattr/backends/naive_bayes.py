"""Categorical naive Bayes over probabilistic attribute embeddings.

Each class holds one distribution theta per attribute.  Fitting sums the
soft value probabilities of the class's utterances (S) and normalises:

    theta = (S + alpha) / (sum(S) + alpha * M_l)

which is plain relative-frequency counting for one-hot rows and alpha = 0.
Scores are ``log prior + sum rho * log theta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyClass, SchemaMismatch, UnknownClass


@dataclass
class CategoricalModel:
    classes: tuple
    priors: np.ndarray  # (C,)
    theta: list  # per attribute, (C, M_l)
    alpha: float = 0.0

    @property
    def sizes(self) -> tuple:
        return tuple(t.shape[1] for t in self.theta)

    @property
    def n_features(self) -> int:
        return sum(self.sizes)


def _class_index(labels, classes):
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([lookup[lab] for lab in labels], dtype=np.int64)
    except KeyError as exc:
        raise UnknownClass(f"label {exc.args[0]!r} is not one of {list(classes)}") from None


def nb_fit(rho, labels, sizes, alpha: float = 0.0, classes=None, priors=None) -> CategoricalModel:
    """Estimate per-class attribute distributions from (soft) observations.

    ``sizes`` are the attribute block widths (or an AttributeSchema).
    Priors default to uniform.
    """
    sizes = tuple(getattr(sizes, "sizes", sizes))
    rho = np.asarray(rho, dtype=np.float64)
    if rho.ndim != 2 or rho.shape[1] != sum(sizes):
        raise SchemaMismatch(f"embedding width {rho.shape[-1]} does not match blocks {sizes}")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    classes = tuple(classes) if classes is not None else tuple(sorted(set(labels)))
    y = _class_index(labels, classes)
    counts = np.bincount(y, minlength=len(classes))
    if np.any(counts == 0):
        raise EmptyClass(f"class {classes[int(np.argmin(counts))]!r} has no training utterances")
    soft = np.zeros((len(classes), rho.shape[1]))
    np.add.at(soft, y, rho)
    theta, off = [], 0
    for m in sizes:
        s = soft[:, off:off + m]
        theta.append((s + alpha) / (s.sum(axis=1, keepdims=True) + alpha * m))
        off += m
    if priors is None:
        priors = np.full(len(classes), 1.0 / len(classes))
    priors = np.asarray(priors, dtype=np.float64)
    if priors.shape != (len(classes),) or not np.isclose(priors.sum(), 1.0):
        raise ValueError("priors must be one probability per class summing to 1")
    return CategoricalModel(classes, priors, theta, float(alpha))


def nb_score(model: CategoricalModel, rho, clamp: float | None = None) -> np.ndarray:
    """(N, C) scores ``log pi_i + sum_l sum_m rho_lm * log theta_ilm``.

    A zero theta paired with a zero rho contributes nothing; paired with a
    positive rho the class score is -inf.  With ``clamp`` set, theta is
    floored at that value instead, which keeps every score finite.
    """
    rho = np.atleast_2d(np.asarray(rho, dtype=np.float64))
    if rho.shape[1] != model.n_features:
        raise SchemaMismatch(f"embedding width {rho.shape[1]} vs model blocks {model.sizes}")
    theta = np.concatenate(model.theta, axis=1)  # (C, M)
    with np.errstate(divide="ignore"):
        log_prior = np.log(model.priors)
    if clamp is not None:
        return log_prior + rho @ np.log(np.maximum(theta, clamp)).T
    zero = theta == 0
    log_theta = np.log(np.where(zero, 1.0, theta))
    out = log_prior + rho @ log_theta.T
    hit = (rho > 0).astype(np.float64) @ zero.T.astype(np.float64) > 0
    out[hit] = -np.inf
    return out
