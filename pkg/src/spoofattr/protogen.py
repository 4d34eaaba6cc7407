"""Protocol construction, attack confusability, and synthetic embedding data."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from .dataio import (
    BONAFIDE,
    FORMAT_VERSION,
    AttributeSchema,
    EmbeddingDataset,
    ProtocolSplit,
    dumps_canonical,
    load_schema,
)
from .errors import DimensionMismatch, MissingSpeaker, UnknownAttack
from .seeding import rng_for

KNOWN_ATTACKS = tuple(f"A{i:02d}" for i in range(1, 7))
UNKNOWN_ATTACKS = tuple(f"A{i:02d}" for i in range(7, 20))


def largest_remainder(total: int, ratios: Sequence) -> list:
    """Integer counts summing to ``total`` in the given proportions.

    Floors first, then the leftover units go to the largest fractional parts;
    equal remainders favour the earlier entry.
    """
    weights = [Fraction(str(r)) if isinstance(r, float) else Fraction(r) for r in ratios]
    norm = sum(weights)
    if norm <= 0 or any(w < 0 for w in weights):
        raise ValueError(f"ratios must be non-negative and not all zero: {ratios}")
    exact = [total * w / norm for w in weights]
    counts = [int(e) for e in exact]  # floor; all values are >= 0
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


# ---------------------------------------------------------------------------
# attr-17 style protocols


@dataclass
class PartitionSpec:
    """How to carve per-attack pools into train/dev/eval.

    Known attacks: utterances of original training origin are split
    ``known_ratio`` (train:dev); those of development origin become eval.
    Unknown attacks: speaker-disjoint utterances all go to eval.  When
    ``common_eval_total`` is set it is spread over the unknown attacks in
    proportion to their speaker-common pools (largest remainder) and the rest
    of each pool is split train:dev by ``remainder_ratio``.  Otherwise each pool
    is split ``unknown_ratio`` (train:dev:eval) and the eval share must hold
    at least the disjoint utterances.
    """

    known_attacks: tuple = KNOWN_ATTACKS
    unknown_attacks: tuple = UNKNOWN_ATTACKS
    known_ratio: tuple = (0.8, 0.2)
    unknown_ratio: tuple = (0.5, 0.1, 0.4)
    remainder_ratio: tuple = (0.8, 0.2)
    disjoint_speakers: tuple = ()
    common_speakers: tuple | None = None
    common_eval_total: int | None = None
    seed: int = 0
    name: str = "attr17"

    def __post_init__(self):
        for r in (self.known_ratio, self.unknown_ratio, self.remainder_ratio):
            if sum(Fraction(str(x)) for x in r) != 1:
                raise ValueError(f"ratios {r} do not sum to 1")
        if self.common_speakers is not None and set(self.common_speakers) & set(self.disjoint_speakers):
            raise ValueError("a speaker cannot be both common and disjoint")
        if set(self.known_attacks) & set(self.unknown_attacks):
            raise ValueError("an attack cannot be both known and unknown")

    def to_document(self) -> dict:
        d = asdict(self)
        d["schema_version"] = FORMAT_VERSION
        return d

    @classmethod
    def from_document(cls, doc: dict) -> "PartitionSpec":
        doc = {k: v for k, v in doc.items() if k != "schema_version"}
        for k in ("known_attacks", "unknown_attacks", "known_ratio", "unknown_ratio",
                  "remainder_ratio", "disjoint_speakers"):
            if k in doc:
                doc[k] = tuple(doc[k])
        if doc.get("common_speakers") is not None:
            doc["common_speakers"] = tuple(doc["common_speakers"])
        return cls(**doc)


def _shuffled(ids, seed, *keys):
    ids = sorted(ids)
    perm = rng_for(seed, *keys).permutation(len(ids))
    return [ids[i] for i in perm]


def build_attr17(metadata: Mapping[str, Mapping], spec: PartitionSpec) -> ProtocolSplit:
    """Assign utterances to partitions per attack.

    ``metadata`` maps utterance id to ``{"attack", "speaker", "origin"}`` where
    origin is the utterance's partition in the source corpus.  Bonafide
    entries are ignored.
    """
    pools: dict = {}
    disjoint = set(spec.disjoint_speakers)
    common = None if spec.common_speakers is None else set(spec.common_speakers)
    for u, meta in metadata.items():
        attack = meta.get("attack")
        if attack == BONAFIDE:
            continue
        if attack not in spec.known_attacks and attack not in spec.unknown_attacks:
            raise UnknownAttack(f"utterance {u!r}: attack {attack!r} not covered by the partition spec")
        spk = meta.get("speaker")
        if not spk:
            raise MissingSpeaker(f"utterance {u!r} has no speaker")
        if common is not None and spk not in common and spk not in disjoint:
            raise MissingSpeaker(f"speaker {spk!r} of {u!r} is in neither speaker list")
        pools.setdefault(attack, []).append(u)

    train, dev, evl, tags = [], [], [], {}
    for attack in sorted(a for a in pools if a in spec.known_attacks):
        origin_train = [u for u in pools[attack] if metadata[u].get("origin", "train") == "train"]
        rest = [u for u in pools[attack] if metadata[u].get("origin", "train") != "train"]
        n_tr, n_dev = largest_remainder(len(origin_train), spec.known_ratio)
        order = _shuffled(origin_train, spec.seed, "partition", attack)
        train += order[:n_tr]
        dev += order[n_tr:]
        evl += sorted(rest)
        for u in pools[attack]:
            tags[u] = "n/a"

    unknown = sorted(a for a in pools if a in spec.unknown_attacks)
    split_common = {a: [u for u in pools[a] if metadata[u]["speaker"] not in disjoint] for a in unknown}
    if spec.common_eval_total is not None and unknown:
        sizes = [len(split_common[a]) for a in unknown]
        eval_common = dict(zip(unknown, largest_remainder(spec.common_eval_total, sizes)))
    else:
        eval_common = None
    for attack in unknown:
        com = split_common[attack]
        dis = [u for u in pools[attack] if metadata[u]["speaker"] in disjoint]
        if eval_common is not None:
            n_ev = min(eval_common[attack], len(com))
            n_tr, n_dev = largest_remainder(len(com) - n_ev, spec.remainder_ratio)
        else:
            _, _, n_eval_total = largest_remainder(len(pools[attack]), spec.unknown_ratio)
            n_ev = max(0, n_eval_total - len(dis))
            n_tr, n_dev = largest_remainder(len(com) - n_ev, spec.unknown_ratio[:2])
        order = _shuffled(com, spec.seed, "partition", attack)
        evl += order[:n_ev]
        train += order[n_ev:n_ev + n_tr]
        dev += order[n_ev + n_tr:]
        evl += sorted(dis)
        for u in com:
            tags[u] = "common"
        for u in dis:
            tags[u] = "disjoint"
    return ProtocolSplit.from_lists(spec.name, train, dev, evl, tags)


# ---------------------------------------------------------------------------
# confusability


def hamming_matrix(schema: AttributeSchema, attacks: Sequence[str] | None = None):
    """Pairwise Hamming distances between concatenated one-hot attack rows.

    Returns ``(attacks, matrix)``; entries are twice the number of differing
    attributes.
    """
    attacks = list(attacks or schema.attacks)
    rows = np.array([schema.truth(a) for a in attacks], dtype=np.int64)
    diff = (rows[:, None, :] != rows[None, :, :]).sum(axis=2)
    return attacks, 2 * diff


def confusability_check(confusion, hamming) -> dict:
    """Spearman correlation, per unknown attack (row), between how often it is
    assigned to each known attack (column) and the negative Hamming distance.

    Rows with a constant input have no defined correlation; they are reported
    as None and left out of the mean.
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    hamming = np.asarray(hamming, dtype=np.float64)
    if confusion.shape != hamming.shape or confusion.ndim != 2:
        raise DimensionMismatch(f"confusion {confusion.shape} vs hamming {hamming.shape}")
    per = []
    for c_row, h_row in zip(confusion, hamming):
        if np.ptp(c_row) == 0 or np.ptp(h_row) == 0:
            per.append(None)
            continue
        per.append(float(spearmanr(c_row, -h_row).statistic))
    valid = [p for p in per if p is not None]
    return {"per_attack": per, "mean": float(np.mean(valid)) if valid else None}


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    """Gaussian clusters around attribute-derived means.

    An attack's mean is ``separation * Q[:, :M] @ onehot(attack)`` with Q a
    seeded D x (M+1) matrix of orthonormal columns.  Bonafide either sits on
    the spare column Q[:, M] at the same norm (``"orthogonal"``) or on the
    one-hot pattern of a value combination no attack uses (``"combination"``:
    per attribute, the value fewest attacks take).
    """

    schema: str = "det"
    attacks: tuple | None = None  # default: every attack in the schema
    bonafide: bool = True
    bonafide_mean: str = "combination"
    counts: dict = field(default_factory=lambda: {"train": 500, "dev": 500, "eval": 500})
    sigma: float = 0.05
    dim: int = 160
    separation: float = 1.0
    seed: int = 7

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if any(int(c) < 1 for c in self.counts.values()):
            raise ValueError("counts must be >= 1")
        if self.attacks is not None:
            self.attacks = tuple(self.attacks)
        if self.bonafide_mean not in ("orthogonal", "combination"):
            raise ValueError(f"unknown bonafide_mean {self.bonafide_mean!r}")

    def load_schema(self) -> AttributeSchema:
        return load_schema(self.schema)

    def to_document(self) -> dict:
        d = asdict(self)
        d["attacks"] = None if self.attacks is None else list(self.attacks)
        d["schema_version"] = FORMAT_VERSION
        return d

    @classmethod
    def from_document(cls, doc: dict) -> "SynthSpec":
        return cls(**{k: v for k, v in doc.items() if k != "schema_version"})


BUILTIN_SYNTH = {"det": "synth_det.json", "attr17": "synth_attr17.json"}


def load_synth_spec(path) -> SynthSpec:
    if str(path) in BUILTIN_SYNTH:
        text = resources.files("spoofattr.data").joinpath(BUILTIN_SYNTH[str(path)]).read_text("utf-8")
        return SynthSpec.from_document(json.loads(text))
    return SynthSpec.from_document(json.loads(Path(path).read_text(encoding="utf-8")))


def save_synth_spec(spec: SynthSpec, path) -> None:
    Path(path).write_text(dumps_canonical(spec.to_document()), encoding="utf-8")


def class_means(spec: SynthSpec, schema: AttributeSchema | None = None) -> dict:
    schema = schema or spec.load_schema()
    m = schema.total_values
    if spec.dim < m + 1:
        raise DimensionMismatch(f"dim {spec.dim} cannot hold {m} value directions plus a bonafide one")
    g = rng_for(spec.seed, "synth", "projection").standard_normal((spec.dim, m + 1))
    q, _ = np.linalg.qr(g)
    attacks = spec.attacks or schema.attacks
    means = {a: spec.separation * q[:, :m] @ schema.onehot(a) for a in attacks}
    if spec.bonafide and spec.bonafide_mean == "orthogonal":
        means[BONAFIDE] = spec.separation * np.sqrt(schema.n_attributes) * q[:, m]
    elif spec.bonafide:
        combo = unused_combination(schema, attacks)
        onehot = np.zeros(m)
        onehot[[o + v for o, v in zip(schema.offsets, combo)]] = 1.0
        means[BONAFIDE] = spec.separation * q[:, :m] @ onehot
    return means


def unused_combination(schema: AttributeSchema, attacks=None) -> tuple:
    """Per attribute the least-used value (lowest index on ties); must differ
    from every attack row."""
    attacks = list(attacks or schema.attacks)
    rows = np.array([schema.truth(a) for a in attacks])
    combo = tuple(
        int(np.argmin(np.bincount(rows[:, l], minlength=size))) for l, size in enumerate(schema.sizes)
    )
    if any(tuple(r) == combo for r in rows):
        raise ValueError("least-used value combination coincides with an attack")
    return combo


def synth_generate(spec: SynthSpec):
    """Seeded dataset plus the protocol assigning its utterances to partitions."""
    schema = spec.load_schema()
    means = class_means(spec, schema)
    rows, ids, labels, speakers = [], [], [], []
    assign = {}
    for part in ("train", "dev", "eval"):
        n = int(spec.counts.get(part, 0))
        for label, mu in means.items():
            if n == 0:
                continue
            noise = rng_for(spec.seed, "synth", part, label).standard_normal((n, spec.dim))
            rows.append(mu + spec.sigma * noise)
            for i in range(n):
                u = f"{part}_{label}_{i:05d}"
                ids.append(u)
                labels.append(label)
                speakers.append(f"spk{i % 20:02d}")
                assign[u] = part
    vectors = np.concatenate(rows, axis=0)
    ds = EmbeddingDataset(tuple(ids), tuple(labels), tuple(speakers), (None,) * len(ids), vectors)
    proto = ProtocolSplit(f"synth-{spec.schema}", assign, {u: "n/a" for u in assign})
    return ds, proto
