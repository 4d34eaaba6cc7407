"""Back-end classifiers behind one fit/score/predict interface.

``fit_backend(kind, x, labels, ...)`` returns a :class:`Backend` whatever the
kind (``nb``, ``dt``, ``lr``, ``svm``).  Models serialise to JSON documents
carrying a type tag plus a free-form manifest (schema hash, hyperparameters,
seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dataio import BONAFIDE, FORMAT_VERSION, dumps_canonical
from ..errors import EmptyClass, SchemaMismatch, SpoofAttrError, UnknownClass
from ..metrics import finite_scores
from .linear import LinearOvRModel, fit_hinge, fit_logistic, ovr_fit, ovr_score
from .naive_bayes import CategoricalModel, nb_fit, nb_score
from .tree import TreeModel, tree_fit, tree_predict, tree_predict_proba

KINDS = ("nb", "dt", "lr", "svm")
DETECTION_CLASSES = (BONAFIDE, "spoof")


def detection_labels(labels) -> list:
    """Collapse attack labels to the two detection classes."""
    return [BONAFIDE if lab == BONAFIDE else "spoof" for lab in labels]


@dataclass
class Backend:
    kind: str
    model: object
    manifest: dict = field(default_factory=dict)

    @property
    def classes(self) -> tuple:
        return tuple(self.model.classes) if self.kind != "dt" else tuple(self.manifest["classes"])

    def score(self, x, clamp: float | None = None) -> np.ndarray:
        """(N, C) class scores: NB log-posterior up to a constant, tree leaf
        probabilities, or linear margins."""
        if self.kind == "nb":
            return nb_score(self.model, x, clamp=clamp)
        if self.kind == "dt":
            return tree_predict_proba(self.model, x)
        return ovr_score(self.model, x)

    def predict(self, x) -> np.ndarray:
        """Class indices; the lowest index wins ties (including all -inf rows)."""
        s = self.score(x)
        (s,) = finite_scores(s)
        return np.argmax(s, axis=1)

    def predict_labels(self, x) -> list:
        return [self.classes[i] for i in self.predict(x)]

    def detection_score(self, x) -> np.ndarray:
        """score(spoof) - score(bonafide) for a detection model."""
        cls = self.classes
        if set(cls) != set(DETECTION_CLASSES):
            raise UnknownClass(f"not a detection model: classes {list(cls)}")
        (s,) = finite_scores(self.score(x))
        return s[:, cls.index("spoof")] - s[:, cls.index(BONAFIDE)]

    # -- persistence ---------------------------------------------------------

    def to_document(self) -> dict:
        m = self.model
        if self.kind == "nb":
            params = {
                "classes": list(m.classes),
                "priors": m.priors.tolist(),
                "theta": [t.tolist() for t in m.theta],
                "alpha": m.alpha,
            }
        elif self.kind == "dt":
            params = {
                "feature": m.feature.tolist(),
                "threshold": m.threshold.tolist(),
                "left": m.left.tolist(),
                "right": m.right.tolist(),
                "value": m.value.tolist(),
                "n_features": m.n_features,
                "max_depth": m.max_depth,
                "min_leaf": m.min_leaf,
            }
        else:
            params = {
                "classes": list(m.classes),
                "weights": m.weights.tolist(),
                "biases": m.biases.tolist(),
                "objective": m.objective,
                "reg": m.reg,
                "diagnostics": m.diagnostics,
            }
        return {"schema_version": FORMAT_VERSION, "type": self.kind, "manifest": self.manifest, "params": params}

    @classmethod
    def from_document(cls, doc: dict) -> "Backend":
        kind, p = doc["type"], doc["params"]
        if kind == "nb":
            model = CategoricalModel(tuple(p["classes"]), np.array(p["priors"]),
                                     [np.array(t, dtype=np.float64) for t in p["theta"]], p["alpha"])
        elif kind == "dt":
            model = TreeModel(np.array(p["feature"], dtype=np.int64), np.array(p["threshold"], dtype=np.float64),
                              np.array(p["left"], dtype=np.int64), np.array(p["right"], dtype=np.int64),
                              np.array(p["value"], dtype=np.float64), p["n_features"], p["max_depth"], p["min_leaf"])
        elif kind in ("lr", "svm"):
            model = LinearOvRModel(tuple(p["classes"]), np.array(p["weights"], dtype=np.float64).reshape(len(p["classes"]), -1),
                                   np.array(p["biases"], dtype=np.float64), p["objective"], p["reg"], p["diagnostics"])
        else:
            raise SpoofAttrError(f"unknown model type {kind!r}")
        return cls(kind, model, dict(doc.get("manifest", {})))


def fit_backend(kind: str, x, labels, *, sizes=None, classes=None, alpha: float = 0.0, max_depth: int = 5,
                min_leaf: int = 1, reg: float = 1e-4, seed: int = 0, workers: int = 1, manifest=None) -> Backend:
    """Train any back-end on features ``x`` and string labels.

    ``sizes`` (attribute block widths or a schema) is required for ``nb``.
    """
    x = np.asarray(x, dtype=np.float64)
    classes = tuple(classes) if classes is not None else tuple(sorted(set(labels)))
    man = dict(manifest or {})
    if kind == "nb":
        if sizes is None:
            raise SchemaMismatch("naive Bayes needs the attribute block sizes")
        model = nb_fit(x, labels, sizes, alpha=alpha, classes=classes)
        man.setdefault("hyperparameters", {"alpha": alpha})
    elif kind == "dt":
        lookup = {c: i for i, c in enumerate(classes)}
        missing = [c for c in classes if c not in set(labels)]
        if missing:
            raise EmptyClass(f"class {missing[0]!r} has no training utterances")
        try:
            y = np.array([lookup[lab] for lab in labels], dtype=np.int64)
        except KeyError as exc:
            raise UnknownClass(f"label {exc.args[0]!r} is not one of {list(classes)}") from None
        model = tree_fit(x, y, n_classes=len(classes), max_depth=max_depth, min_leaf=min_leaf, seed=seed)
        man["classes"] = list(classes)
        man.setdefault("hyperparameters", {"max_depth": max_depth, "min_leaf": min_leaf})
    elif kind in ("lr", "svm"):
        objective = "logistic" if kind == "lr" else "hinge"
        model = ovr_fit(x, labels, objective=objective, reg=reg, seed=seed, classes=classes, workers=workers)
        man.setdefault("hyperparameters", {"reg": reg, "objective": objective})
    else:
        raise ValueError(f"unknown back-end {kind!r}; expected one of {KINDS}")
    man.setdefault("seed", seed)
    return Backend(kind, model, man)


def save_model(backend: Backend, path) -> None:
    Path(path).write_text(dumps_canonical(backend.to_document()), encoding="utf-8")


def load_model(path) -> Backend:
    return Backend.from_document(json.loads(Path(path).read_text(encoding="utf-8")))


__all__ = [
    "Backend", "CategoricalModel", "DETECTION_CLASSES", "KINDS", "LinearOvRModel", "TreeModel",
    "detection_labels", "fit_backend", "fit_hinge", "fit_logistic", "load_model", "nb_fit", "nb_score",
    "ovr_fit", "ovr_score", "save_model", "tree_fit", "tree_predict", "tree_predict_proba",
]
