"""The bank of per-attribute extractors: training, epoch selection, extraction.

Each attribute gets its own small MLP (D -> 64 -> 32 -> M_l, softmax head)
trained on spoofed utterances only.  After every epoch the development set is
scored and the snapshot with the lowest attribute EER is kept.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nnet
from .dataio import (
    FORMAT_VERSION,
    AttributeSchema,
    EmbeddingDataset,
    dumps_canonical,
    schema_from_document,
    value_truths,
)
from .errors import (
    AttributeWithSingleValueInTrain,
    DegenerateScorePool,
    DimensionMismatch,
    NoSpoofedData,
    NonFiniteActivation,
    SchemaMismatch,
    SpoofAttrError,
)
from .metrics import ScorePool, eer
from .seeding import derive_seed, rng_for

CHUNK = 1024  # rows per extraction task; fixed so worker count never changes results


@dataclass
class TrainConfig:
    hidden: tuple = (64, 32)
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 256
    pooling: str = "pooled"  # dev-EER pooling used for epoch selection
    normalize: bool = False  # length-normalise embeddings before the extractors

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def attribute_value_eer(pred, truths, pooling: str = "pooled") -> float:
    """EER of one attribute's value probabilities.

    Pooled: every (utterance, value) probability is a score, a target when the
    value is the utterance's true one.  Macro: one EER per value column, then
    the mean over values that have both target and non-target utterances.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    if pred.ndim != 2 or pred.shape[0] != truths.size:
        raise DimensionMismatch(f"predictions {pred.shape} vs {truths.size} truths")
    mask = np.zeros(pred.shape, dtype=bool)
    mask[np.arange(truths.size), truths] = True
    if pooling == "pooled":
        tar, non = pred[mask], pred[~mask]
        if tar.size == 0 or non.size == 0:
            raise DegenerateScorePool(f"{tar.size} target and {non.size} non-target scores")
        return eer(ScorePool(tar, non)).value
    if pooling == "macro":
        vals = [
            eer(ScorePool(pred[mask[:, m], m], pred[~mask[:, m], m])).value
            for m in range(pred.shape[1])
            if mask[:, m].any() and (~mask[:, m]).any()
        ]
        if not vals:
            raise DegenerateScorePool("no value has both target and non-target utterances")
        return float(np.mean(vals))
    raise ValueError(f"unknown pooling {pooling!r}")


@dataclass
class ProbAttrEmbedding:
    """A flat rho vector viewed as one probability block per attribute."""

    flat: np.ndarray
    schema: AttributeSchema

    @property
    def blocks(self) -> list:
        return [self.flat[self.schema.block(l)] for l in range(self.schema.n_attributes)]


@dataclass
class ExtractorBank:
    schema: AttributeSchema
    extractors: list
    selected_epoch: list
    dev_eer: list
    config: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    dev_eer_curves: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.extractors) != self.schema.n_attributes:
            raise SchemaMismatch(f"{len(self.extractors)} extractors for {self.schema.n_attributes} attributes")
        for m, size, attr in zip(self.extractors, self.schema.sizes, self.schema.attributes):
            if m.n_out != size:
                raise SchemaMismatch(f"extractor for {attr.name!r} outputs {m.n_out} values, schema has {size}")
        dims = {m.n_in for m in self.extractors}
        if len(dims) != 1:
            raise DimensionMismatch(f"extractors disagree on input dimension: {sorted(dims)}")

    @property
    def input_dim(self) -> int:
        return self.extractors[0].n_in

    def transform(self, x) -> np.ndarray:
        """(N, D) embeddings -> (N, M) stacked attribute probabilities."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"embedding has {x.shape[1]} dims, bank expects {self.input_dim}")
        if self.config.normalize:
            x = unit_rows(x)
        return np.concatenate([m.forward(x) for m in self.extractors], axis=1)


def unit_rows(x) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms)


def _train_one(ell, x, y, dev_x, dev_truth, cfg: TrainConfig, seed):
    model = nnet.MLP.build([x.shape[1], *cfg.hidden, y.shape[1]], rng_for(seed, "extractor", ell, "init"))
    result = nnet.train(
        model, x, y, nnet.AdamState(lr=cfg.lr), epochs=cfg.epochs, batch_size=cfg.batch_size,
        seed=derive_seed(seed, "extractor", ell, "shuffle"),
    )
    curve = []
    probe = model.copy()
    for snap in result.snapshots:
        # score exactly what a checkpoint would hold
        probe.set_flat(snap.astype(np.float32).astype(np.float64))
        curve.append(attribute_value_eer(probe.forward(dev_x), dev_truth, cfg.pooling))
    best = int(np.argmin(curve))  # first minimum = earliest epoch
    probe.set_flat(result.snapshots[best].astype(np.float32).astype(np.float64))
    return probe, best + 1, curve[best], curve


def spoofed_only(ds: EmbeddingDataset, what: str) -> EmbeddingDataset:
    out = ds.take(np.flatnonzero(ds.spoof_mask()))
    if len(out) == 0:
        raise NoSpoofedData(f"{what} set has no spoofed utterances")
    return out


def train_bank(train: EmbeddingDataset, dev: EmbeddingDataset, schema: AttributeSchema,
               config: TrainConfig | None = None, seed: int = 0, workers: int = 1) -> ExtractorBank:
    """Train one extractor per attribute and keep each one's best dev epoch.

    Bonafide records are dropped from both sets.  Attributes train
    concurrently; each draws from its own derived seed.
    """
    cfg = config or TrainConfig()
    train = spoofed_only(train, "training")
    dev = spoofed_only(dev, "development")
    tr_truth = value_truths(schema, train.labels)
    dev_truth = value_truths(schema, dev.labels)
    for ell, attr in enumerate(schema.attributes):
        present = np.unique(tr_truth[:, ell])
        if present.size < 2:
            raise AttributeWithSingleValueInTrain(
                f"attribute {attr.name!r} takes only the value {attr.values[present[0]]!r} in training data"
            )
    x = train.vectors.astype(np.float64)
    dev_x = dev.vectors.astype(np.float64)
    if cfg.normalize:
        x, dev_x = unit_rows(x), unit_rows(dev_x)

    def job(ell):
        y = np.eye(schema.sizes[ell])[tr_truth[:, ell]]
        return _train_one(ell, x, y, dev_x, dev_truth[:, ell], cfg, seed)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(job, range(schema.n_attributes)))
    return ExtractorBank(
        schema=schema,
        extractors=[r[0] for r in results],
        selected_epoch=[r[1] for r in results],
        dev_eer=[r[2] for r in results],
        config=cfg,
        seed=seed,
        dev_eer_curves=[r[3] for r in results],
    )


def extract(bank: ExtractorBank, e) -> ProbAttrEmbedding:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1:
        raise DimensionMismatch("extract takes a single embedding vector")
    return ProbAttrEmbedding(bank.transform(e)[0], bank.schema)


def extract_all(bank: ExtractorBank, dataset: EmbeddingDataset, workers: int = 1) -> EmbeddingDataset:
    """rho for every record, bonafide included; ids and labels kept in order."""
    if dataset.dim != bank.input_dim:
        raise DimensionMismatch(f"dataset has {dataset.dim} dims, bank expects {bank.input_dim}")
    n = len(dataset)
    starts = list(range(0, n, CHUNK))

    def job(start):
        block = dataset.vectors[start:start + CHUNK]
        try:
            return bank.transform(block)
        except NonFiniteActivation as exc:
            for i in range(block.shape[0]):
                try:
                    bank.transform(block[i])
                except NonFiniteActivation:
                    raise NonFiniteActivation(f"utterance {dataset.ids[start + i]!r}: {exc}") from exc
            raise

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(job, starts))
    rho = np.concatenate(parts, axis=0) if parts else np.zeros((0, bank.schema.total_values))
    return dataset.with_vectors(rho)


# ---------------------------------------------------------------------------
# persistence: <dir>/manifest.json + <dir>/extractor_<l>.pam


def save_bank(bank: ExtractorBank, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for ell, m in enumerate(bank.extractors):
        name = f"extractor_{ell}.pam"
        nnet.save_checkpoint(m, directory / name)
        files.append(name)
    manifest = {
        "schema_version": FORMAT_VERSION,
        "kind": "extractor-bank",
        "schema_hash": bank.schema.digest(),
        "schema": bank.schema.to_document(),
        "input_dim": bank.input_dim,
        "selected_epoch": list(bank.selected_epoch),
        "dev_eer": [float(v) for v in bank.dev_eer],
        "dev_eer_curves": [[float(v) for v in c] for c in bank.dev_eer_curves],
        "config": bank.config.to_dict(),
        "seed": bank.seed,
        "checkpoints": files,
    }
    (directory / "manifest.json").write_text(dumps_canonical(manifest), encoding="utf-8")


def load_bank(directory, schema: AttributeSchema | None = None) -> ExtractorBank:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("kind") != "extractor-bank":
        raise SpoofAttrError(f"{directory}: not an extractor bank")
    stored = schema_from_document(manifest["schema"], source=str(directory))
    if schema is not None and schema.digest() != manifest["schema_hash"]:
        raise SchemaMismatch(f"{directory}: bank was trained on schema {stored.name!r} ({manifest['schema_hash'][:12]})")
    cfg = manifest["config"]
    return ExtractorBank(
        schema=stored,
        extractors=[nnet.load_checkpoint(directory / f) for f in manifest["checkpoints"]],
        selected_epoch=manifest["selected_epoch"],
        dev_eer=manifest["dev_eer"],
        config=TrainConfig(tuple(cfg["hidden"]), cfg["epochs"], cfg["lr"], cfg["batch_size"], cfg["pooling"],
                           cfg.get("normalize", False)),
        seed=manifest["seed"],
        dev_eer_curves=manifest["dev_eer_curves"],
    )
