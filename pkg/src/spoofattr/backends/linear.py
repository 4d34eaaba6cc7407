"""One-vs-rest linear classifiers: L2-regularised logistic regression and hinge-loss SVM.

Scores are raw margins ``w_c . x + b_c``; prediction is the argmax with the
lowest class index winning ties.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionMismatch, NonConvergenceWarning, SingleClass
from ..seeding import rng_for

OBJECTIVES = ("logistic", "hinge")


@dataclass
class LinearOvRModel:
    classes: tuple
    weights: np.ndarray  # (C, F)
    biases: np.ndarray  # (C,)
    objective: str = "logistic"
    reg: float = 1e-4
    diagnostics: list = field(default_factory=list)  # per class {"iterations", "grad_norm", "converged"}

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]


def logistic_objective(w, b, x, y, reg):
    """Mean log-loss plus (reg/2)|w|^2, for labels y in {-1, +1}."""
    z = x @ w + b
    return float(np.mean(np.logaddexp(0.0, -y * z)) + 0.5 * reg * (w @ w))


def _logistic_grad_hess(w, b, x, y, reg):
    z = x @ w + b
    s = np.exp(-np.logaddexp(0.0, y * z))  # sigmoid(-y z)
    r = -y * s / x.shape[0]
    g = np.concatenate([x.T @ r + reg * w, [r.sum()]])
    p = np.exp(-np.logaddexp(0.0, -z))
    d = p * (1.0 - p) / x.shape[0]
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    h = (xa * d[:, None]).T @ xa
    h[np.diag_indices(x.shape[1])] += reg
    return g, h


def fit_logistic(x, y, reg=1e-4, tol=1e-6, max_iter=None, solver="newton", trace=None):
    """Minimise the regularised log-loss by descent with Armijo backtracking.

    ``solver="newton"`` takes Newton directions (falling back to the negative
    gradient when that is not a descent direction); ``"gd"`` always uses the
    negative gradient.  Every accepted step lowers the objective.  Stops when
    the gradient norm drops below ``tol`` or after ``max_iter`` iterations.
    """
    if max_iter is None:
        max_iter = 200 if solver == "newton" else 20000
    f_dim = x.shape[1]
    theta = np.zeros(f_dim + 1)
    obj = logistic_objective(theta[:f_dim], theta[f_dim], x, y, reg)
    if trace is not None:
        trace.append(obj)
    gnorm = np.inf
    it = 0
    step = 1.0
    for it in range(1, max_iter + 1):
        g, h = _logistic_grad_hess(theta[:f_dim], theta[f_dim], x, y, reg)
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            it -= 1
            break
        direction = -g
        if solver == "newton":
            step = 1.0
            try:
                nd = -np.linalg.solve(h + 1e-12 * np.eye(f_dim + 1), g)
                if np.all(np.isfinite(nd)) and nd @ g < 0:
                    direction = nd
            except np.linalg.LinAlgError:
                pass
        else:
            step = min(1.0, step * 4.0)
        slope = float(g @ direction)
        while True:
            cand = theta + step * direction
            new = logistic_objective(cand[:f_dim], cand[f_dim], x, y, reg)
            if new <= obj + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-30:
                cand, new = theta, obj
                break
        if new == obj and np.array_equal(cand, theta):
            break  # no representable improvement left
        theta, obj = cand, new
        if trace is not None:
            trace.append(obj)
    else:
        g, _ = _logistic_grad_hess(theta[:f_dim], theta[f_dim], x, y, reg)
        gnorm = float(np.linalg.norm(g))
    return theta[:f_dim], float(theta[f_dim]), {"iterations": it, "grad_norm": gnorm, "converged": gnorm < tol}


def hinge_objective(w, b, x, y, reg):
    """Mean hinge loss plus (reg/2)|[w, b]|^2 (the bias is an augmented feature)."""
    z = x @ w + b
    return float(np.mean(np.maximum(0.0, 1.0 - y * z)) + 0.5 * reg * (w @ w + b * b))


def fit_hinge(x, y, reg=1e-4, epochs=50, batch_size=64, rng=None):
    """Mini-batch stochastic subgradient descent with step 1/(reg * t).

    The bias rides along as a constant feature.  Iterates are projected onto
    the ball of radius 1/sqrt(reg), and the returned weights are the average
    of the second half of the iterates.
    """
    rng = rng or np.random.default_rng(0)
    n, f_dim = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    w = np.zeros(f_dim + 1)
    avg = np.zeros(f_dim + 1)
    steps_per_epoch = -(-n // batch_size)
    total = epochs * steps_per_epoch
    start_avg = total // 2
    radius = 1.0 / np.sqrt(reg)
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            t += 1
            idx = order[s:s + batch_size]
            eta = 1.0 / (reg * t)
            viol = y[idx] * (xa[idx] @ w) < 1.0
            grad_part = (y[idx, None] * xa[idx])[viol].sum(axis=0) / idx.size
            w = (1.0 - eta * reg) * w + eta * grad_part
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
            if t > start_avg:
                avg += w
    avg /= total - start_avg
    return avg[:f_dim], float(avg[f_dim]), {"iterations": t, "objective": hinge_objective(avg[:f_dim], avg[f_dim], x, y, reg)}


def ovr_fit(x, labels, objective="logistic", reg=1e-4, seed=0, classes=None, workers=1, **kw) -> LinearOvRModel:
    """One binary classifier per class (that class positive, the rest negative)."""
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    classes = tuple(classes) if classes is not None else tuple(sorted(set(labels)))
    if len(set(labels)) < 2 or len(classes) < 2:
        raise SingleClass("one-vs-rest training needs at least two classes")
    lab = np.asarray(labels)

    def job(c):
        y = np.where(lab == classes[c], 1.0, -1.0)
        if objective == "logistic":
            return fit_logistic(x, y, reg=reg, **kw)
        return fit_hinge(x, y, reg=reg, rng=rng_for(seed, "ovr", c), **kw)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        fits = list(pool.map(job, range(len(classes))))
    for c, (_, _, diag) in zip(classes, fits):
        if objective == "logistic" and not diag["converged"]:
            warnings.warn(
                f"logistic fit for class {c!r} stopped after {diag['iterations']} iterations "
                f"with gradient norm {diag['grad_norm']:.3g}",
                NonConvergenceWarning,
                stacklevel=2,
            )
    return LinearOvRModel(
        classes,
        np.array([f[0] for f in fits]).reshape(len(classes), x.shape[1]),
        np.array([f[1] for f in fits]),
        objective,
        float(reg),
        [f[2] for f in fits],
    )


def ovr_score(model: LinearOvRModel, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.n_features:
        raise DimensionMismatch(f"input has {x.shape[1]} features, model expects {model.n_features}")
    return x @ model.weights.T + model.biases
