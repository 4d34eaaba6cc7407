"""Shapley attributions of back-end scores to attribute values, and their ranking.

Coalitions are interventional: features outside a coalition take values
from background rows, and a coalition's worth is the mean score over the
background.  Nothing re-normalises the probability blocks after such a
substitution.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyBackground, EmptyReportSet, NonFiniteScore, TooManyFeatures
from .seeding import derive_seed

MAX_EXACT_FEATURES = 20
NB_EXPLAIN_CLAMP = 1e-12
_ROW_BUDGET = 1 << 18  # rows per f call when enumerating coalitions


@dataclass
class ShapleyResult:
    phi: np.ndarray  # (T,) or (T, C)
    base: np.ndarray  # E[f] over the background, scalar or (C,)
    fx: np.ndarray  # f(x)
    estimator: str
    se: np.ndarray | None = None


def _evaluate(f, rows):
    out = np.asarray(f(rows), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteScore("score function returned a non-finite value")
    return out


def _pick(out, c):
    return out if c is None or out.ndim == 1 else out[..., c]


def _check(x, background):
    x = np.asarray(x, dtype=np.float64).ravel()
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if background.shape[0] == 0:
        raise EmptyBackground("background set is empty")
    if background.shape[1] != x.size:
        raise ValueError(f"background has {background.shape[1]} features, x has {x.size}")
    return x, background


def coalition_weights(t: int) -> np.ndarray:
    """w[s] = s! (T - s - 1)! / T! for coalitions of size s excluding the feature."""
    return np.array([factorial(s) * factorial(t - s - 1) / factorial(t) for s in range(t)])


def shapley_exact(f, x, background, c: int | None = None) -> ShapleyResult:
    """Exact Shapley values by enumerating all 2^T coalitions.

    ``f`` maps an (n, T) array to (n,) or (n, C) scores; ``c`` picks one
    column, otherwise every column is explained at once.
    """
    x, background = _check(x, background)
    t, b = x.size, background.shape[0]
    if t > MAX_EXACT_FEATURES:
        raise TooManyFeatures(f"{t} features; exact enumeration is limited to {MAX_EXACT_FEATURES}")
    n_masks = 1 << t
    bits = ((np.arange(n_masks)[:, None] >> np.arange(t)) & 1).astype(bool)
    per_call = max(1, _ROW_BUDGET // b)
    values = []
    for start in range(0, n_masks, per_call):
        m = bits[start:start + per_call]
        rows = np.where(m[:, None, :], x, background[None, :, :]).reshape(-1, t)
        out = _pick(_evaluate(f, rows), c)
        values.append(out.reshape(m.shape[0], b, *out.shape[1:]).mean(axis=1))
    v = np.concatenate(values, axis=0)
    sizes = bits.sum(axis=1)
    w = coalition_weights(t)
    idx = np.arange(n_masks)
    phi = []
    for j in range(t):
        without = idx[~bits[:, j]]
        wj = w[sizes[without]]
        delta = v[without | (1 << j)] - v[without]
        phi.append(np.tensordot(wj, delta, axes=(0, 0)))
    return ShapleyResult(np.array(phi), v[0], v[-1], "exact")


def shapley_sample(f, x, background, c: int | None = None, n_permutations: int = 2000, seed: int = 0) -> ShapleyResult:
    """Permutation-sampling estimate with per-feature standard errors.

    Each sample draws a permutation and one background row, then switches
    features from the background row to ``x`` in permutation order, crediting
    each feature with the score change it causes.
    """
    x, background = _check(x, background)
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    t = x.size
    rng = np.random.default_rng(seed)
    perms = np.argsort(rng.random((n_permutations, t)), axis=1)
    picks = rng.integers(0, background.shape[0], size=n_permutations)
    per_call = max(1, _ROW_BUDGET // (t + 1))
    contrib = []
    for start in range(0, n_permutations, per_call):
        p = perms[start:start + per_call]
        k = p.shape[0]
        # step s has the first s features of the permutation switched to x
        switched = np.zeros((k, t + 1, t), dtype=bool)
        rank = np.argsort(p, axis=1)  # position of each feature in its permutation
        switched[:, 1:, :] = rank[:, None, :] < np.arange(1, t + 1)[None, :, None]
        rows = np.where(switched, x, background[picks[start:start + k]][:, None, :]).reshape(-1, t)
        out = _pick(_evaluate(f, rows), c)
        out = out.reshape(k, t + 1, *out.shape[1:])
        step = np.diff(out, axis=1)  # change when the s-th feature switches
        # reorder from permutation position to feature index
        gather = np.take_along_axis(step, rank.reshape(k, t, *([1] * (step.ndim - 2))), axis=1)
        contrib.append(gather)
    contrib = np.concatenate(contrib, axis=0)
    phi = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / np.sqrt(n_permutations) if n_permutations > 1 else np.full_like(phi, np.inf)
    base = _pick(_evaluate(f, background), c).mean(axis=0)
    fx = _pick(_evaluate(f, x[None, :]), c)[0]
    return ShapleyResult(phi, base, fx, f"permutation({n_permutations})", se)


# ---------------------------------------------------------------------------
# explaining a back-end over a dataset


def score_function(backend):
    """The native score each back-end explains: NB log-posterior (theta
    floored at 1e-12 so coalitions never hit -inf), tree leaf probability,
    linear margin.  Returns (n, C)."""
    if backend.kind == "nb":
        return lambda rows: backend.score(rows, clamp=NB_EXPLAIN_CLAMP)
    return backend.score


def background_sample(x, n: int = 100, seed: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyBackground("no rows to draw a background from")
    if x.shape[0] <= n:
        return x.copy()
    idx = np.sort(np.random.default_rng(derive_seed(seed, "background")).choice(x.shape[0], n, replace=False))
    return x[idx]


@dataclass
class ShapleyReport:
    phi: np.ndarray  # (U, T, C)
    base: np.ndarray  # (C,)
    fx: np.ndarray  # (U, C)
    estimator: str
    se: np.ndarray | None = None
    background: dict = field(default_factory=dict)


def explain_dataset(backend, x, background, method: str = "sample", n_permutations: int = 2000,
                    seed: int = 0, workers: int = 1) -> ShapleyReport:
    """Shapley values of every class score for every row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    f = score_function(backend)

    def job(i):
        if method == "exact":
            return shapley_exact(f, x[i], background)
        if method == "sample":
            return shapley_sample(f, x[i], background, n_permutations=n_permutations,
                                  seed=derive_seed(seed, "shapley", i))
        raise ValueError(f"unknown method {method!r}")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(job, range(x.shape[0])))
    if not results:
        raise EmptyReportSet("nothing to explain")
    se = None if results[0].se is None else np.stack([r.se for r in results])
    return ShapleyReport(
        phi=np.stack([r.phi for r in results]),
        base=np.asarray(results[0].base),
        fx=np.stack([r.fx for r in results]),
        estimator=results[0].estimator,
        se=se,
        background={"rows": int(background.shape[0])},
    )


# ---------------------------------------------------------------------------
# ranking


@dataclass
class RankingTable:
    value_labels: list
    value_rank: np.ndarray  # (M,)
    attribute_names: list
    attribute_rank: np.ndarray  # (L,)
    n_rankings: int

    def ordering(self) -> list:
        """Attribute names from most to least influential (stable on ties)."""
        return [self.attribute_names[i] for i in np.argsort(self.attribute_rank, kind="stable")]

    def to_document(self) -> dict:
        return {
            "values": [{"value": v, "mean_rank": float(r)} for v, r in zip(self.value_labels, self.value_rank)],
            "attributes": [{"attribute": a, "mean_rank": float(r)} for a, r in zip(self.attribute_names, self.attribute_rank)],
            "ordering": self.ordering(),
            "n_rankings": self.n_rankings,
        }


def rank_aggregate(phis, schema, class_mode: str = "per-class") -> RankingTable:
    """Average rank of each attribute value by |phi| (rank 1 = largest).

    ``phis`` is (U, M) or (U, M, C).  ``per-class`` ranks within every
    (utterance, class) pair before averaging; ``pooled`` first averages |phi|
    over classes per utterance.  Tied magnitudes share the average rank.
    """
    phis = np.abs(np.asarray(phis, dtype=np.float64))
    if phis.size == 0 or phis.shape[0] == 0:
        raise EmptyReportSet("no Shapley vectors to rank")
    if phis.ndim == 2:
        phis = phis[:, :, None]
    if phis.shape[1] != schema.total_values:
        raise ValueError(f"vectors have {phis.shape[1]} entries, schema has {schema.total_values} values")
    if class_mode == "pooled":
        phis = phis.mean(axis=2, keepdims=True)
    elif class_mode != "per-class":
        raise ValueError(f"unknown class_mode {class_mode!r}")
    flat = np.moveaxis(phis, 1, 2).reshape(-1, phis.shape[1])  # one row per ranking
    ranks = rankdata(-flat, method="average", axis=1)
    value_rank = ranks.mean(axis=0)
    attr_rank = np.array([value_rank[schema.block(l)].mean() for l in range(schema.n_attributes)])
    return RankingTable(schema.value_labels(), value_rank, [a.name for a in schema.attributes], attr_rank, flat.shape[0])
