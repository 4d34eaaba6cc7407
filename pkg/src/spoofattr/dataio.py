"""Embedding datasets, attribute schemas and protocol splits on disk.

Embeddings live in a little-endian float32 container::

    b"PAE1" | u32 count | u32 dim | count * dim float32

with a companion tab-separated index, one row per record in file order::

    utterance_id <TAB> label <TAB> speaker_id <TAB> gender

``gender`` is ``F``, ``M`` or ``-`` when unknown.  Schemas and protocols are
JSON documents carrying ``schema_version: 1``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CountMismatch,
    DimensionMismatch,
    DuplicateUtteranceId,
    MagicMismatch,
    MissingAttribute,
    NoAttributeGroundTruth,
    NonFiniteValue,
    PartitionOverlap,
    UnknownUtterance,
    UnknownValueName,
    UnsupportedVersion,
)

MAGIC = b"PAE1"
HEADER = struct.Struct("<4sII")
BONAFIDE = "bonafide"
PARTITIONS = ("train", "dev", "eval")
SPEAKER_TAGS = ("common", "disjoint", "n/a")
FORMAT_VERSION = 1


def dumps_canonical(obj) -> str:
    """Deterministic JSON text used for every structured file we write."""
    return json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Embedding datasets


@dataclass(frozen=True)
class EmbeddingDataset:
    """Utterance-indexed embeddings. Immutable once built."""

    ids: tuple
    labels: tuple
    speakers: tuple
    genders: tuple
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vec.ndim != 2:
            raise DimensionMismatch(f"vectors must be 2-D, got shape {vec.shape}")
        n = vec.shape[0]
        for name in ("ids", "labels", "speakers", "genders"):
            col = tuple(getattr(self, name))
            if len(col) != n:
                raise CountMismatch(f"{name} has {len(col)} entries for {n} vectors")
            object.__setattr__(self, name, col)
        if not np.all(np.isfinite(vec)):
            bad = int(np.argwhere(~np.isfinite(vec))[0, 0])
            raise NonFiniteValue(f"non-finite component in record {self.ids[bad]!r}")
        if len(set(self.ids)) != n:
            seen = set()
            dup = next(u for u in self.ids if u in seen or seen.add(u))
            raise DuplicateUtteranceId(f"utterance id {dup!r} appears more than once")
        for g in self.genders:
            if g not in (None, "F", "M"):
                raise ValueError(f"gender must be F, M or None, got {g!r}")
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def spoof_mask(self) -> np.ndarray:
        return np.array([lab != BONAFIDE for lab in self.labels], dtype=bool)

    def take(self, indices) -> "EmbeddingDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return EmbeddingDataset(
            ids=tuple(self.ids[i] for i in idx),
            labels=tuple(self.labels[i] for i in idx),
            speakers=tuple(self.speakers[i] for i in idx),
            genders=tuple(self.genders[i] for i in idx),
            vectors=self.vectors[idx],
        )

    def select(self, ids: Iterable[str]) -> "EmbeddingDataset":
        """Records whose ids are in ``ids``, kept in dataset order."""
        wanted = set(ids)
        return self.take([i for i, u in enumerate(self.ids) if u in wanted])

    def with_vectors(self, vectors) -> "EmbeddingDataset":
        return EmbeddingDataset(self.ids, self.labels, self.speakers, self.genders, vectors)

    def length_normalized(self) -> "EmbeddingDataset":
        v = self.vectors.astype(np.float64)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return self.with_vectors(v / norms)


def write_embeddings(dataset: EmbeddingDataset, path, index_path) -> None:
    n, d = dataset.vectors.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, n, d))
        fh.write(dataset.vectors.astype("<f4", copy=False).tobytes(order="C"))
    rows = []
    for u, lab, spk, g in zip(dataset.ids, dataset.labels, dataset.speakers, dataset.genders):
        for col in (u, lab, spk):
            if "\t" in col or "\n" in col or not col:
                raise ValueError(f"index column {col!r} is empty or contains a tab/newline")
        rows.append(f"{u}\t{lab}\t{spk}\t{g or '-'}\n")
    with open(index_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(rows)


def _read_index(index_path):
    rows = []
    with open(index_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{index_path}:{lineno}: expected 4 tab-separated columns")
            u, lab, spk, g = parts
            if g not in ("F", "M", "-"):
                raise ValueError(f"{index_path}:{lineno}: bad gender {g!r}")
            rows.append((u, lab, spk, None if g == "-" else g))
    return rows


def load_embeddings(path, index_path, normalize: bool = False) -> EmbeddingDataset:
    """Read a PAE1 container and its index; validate every record."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise MagicMismatch(f"{path}: file too short for a PAE1 header")
    magic, count, dim = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MagicMismatch(f"{path}: expected magic {MAGIC!r}, found {magic!r}")
    body = raw[HEADER.size:]
    if len(body) != 4 * count * dim:
        raise DimensionMismatch(
            f"{path}: payload holds {len(body) // 4} floats, header declares {count}x{dim}"
        )
    rows = _read_index(index_path)
    if len(rows) != count:
        raise CountMismatch(f"{index_path}: {len(rows)} index rows for {count} records")
    vectors = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float32)
    ids, labels, speakers, genders = (tuple(c) for c in zip(*rows)) if rows else ((),) * 4
    if not rows:
        vectors = np.zeros((0, dim), dtype=np.float32)
    ds = EmbeddingDataset(ids, labels, speakers, genders, vectors)
    return ds.length_normalized() if normalize else ds


# ---------------------------------------------------------------------------
# Attribute schemas


@dataclass(frozen=True)
class Attribute:
    name: str
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if len(set(self.values)) != len(self.values):
            raise ValueError(f"attribute {self.name!r} has duplicate value names")
        if not self.values:
            raise ValueError(f"attribute {self.name!r} has no values")


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attributes plus the attack -> value-index table."""

    name: str
    attributes: tuple
    attack_table: Mapping[str, tuple]

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        table = {}
        for attack, idx in self.attack_table.items():
            idx = tuple(int(i) for i in idx)
            if len(idx) != len(self.attributes):
                raise MissingAttribute(
                    f"attack {attack!r} has {len(idx)} entries, schema has {len(self.attributes)} attributes"
                )
            for a, i in zip(self.attributes, idx):
                if not 0 <= i < len(a.values):
                    raise UnknownValueName(f"attack {attack!r}: index {i} out of range for {a.name!r}")
            table[attack] = idx
        object.__setattr__(self, "attack_table", table)

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def sizes(self) -> tuple:
        return tuple(len(a.values) for a in self.attributes)

    @property
    def total_values(self) -> int:
        return sum(self.sizes)

    @property
    def offsets(self) -> tuple:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.sizes)]))

    def block(self, ell: int) -> slice:
        off = self.offsets
        return slice(off[ell], off[ell + 1])

    @property
    def attacks(self) -> tuple:
        return tuple(self.attack_table)

    def value_labels(self) -> list:
        """Flat ``attribute.value`` names in embedding order."""
        return [f"{a.name}.{v}" for a in self.attributes for v in a.values]

    def truth(self, label: str) -> tuple:
        if label not in self.attack_table:
            if label == BONAFIDE:
                raise NoAttributeGroundTruth("bonafide speech has no generation attributes")
            raise NoAttributeGroundTruth(f"attack {label!r} is not in schema {self.name!r}")
        return self.attack_table[label]

    def onehot(self, label: str) -> np.ndarray:
        return np.concatenate(one_hot_targets(self, label))

    def to_document(self) -> dict:
        return {
            "schema_version": FORMAT_VERSION,
            "name": self.name,
            "attributes": [{"name": a.name, "values": list(a.values)} for a in self.attributes],
            "attacks": {
                attack: {a.name: a.values[i] for a, i in zip(self.attributes, idx)}
                for attack, idx in self.attack_table.items()
            },
        }

    def digest(self) -> str:
        return hashlib.sha256(dumps_canonical(self.to_document()).encode("utf-8")).hexdigest()


def _check_version(doc, path):
    version = doc.get("schema_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: schema_version {version!r} (expected {FORMAT_VERSION})")


def schema_from_document(doc: dict, source="<document>") -> AttributeSchema:
    _check_version(doc, source)
    attributes = [Attribute(a["name"], a["values"]) for a in doc["attributes"]]
    table = {}
    for attack, row in doc["attacks"].items():
        idx = []
        for a in attributes:
            if a.name not in row:
                raise MissingAttribute(f"{source}: attack {attack!r} lacks attribute {a.name!r}")
            if row[a.name] not in a.values:
                raise UnknownValueName(
                    f"{source}: attack {attack!r} uses {row[a.name]!r}, not a value of {a.name!r}"
                )
            idx.append(a.values.index(row[a.name]))
        extra = set(row) - {a.name for a in attributes}
        if extra:
            raise MissingAttribute(f"{source}: attack {attack!r} names unknown attributes {sorted(extra)}")
        table[attack] = tuple(idx)
    return AttributeSchema(doc["name"], attributes, table)


BUILTIN_SCHEMAS = {"det": "schema_det.json", "attr17": "schema_attr17.json"}


def load_schema(path) -> AttributeSchema:
    """Load a schema file; ``det`` and ``attr17`` resolve to the shipped tables."""
    if str(path) in BUILTIN_SCHEMAS:
        text = resources.files("spoofattr.data").joinpath(BUILTIN_SCHEMAS[str(path)]).read_text("utf-8")
        return schema_from_document(json.loads(text), source=str(path))
    with open(path, encoding="utf-8") as fh:
        return schema_from_document(json.load(fh), source=path)


def save_schema(schema: AttributeSchema, path) -> None:
    Path(path).write_text(dumps_canonical(schema.to_document()), encoding="utf-8")


def one_hot_targets(schema: AttributeSchema, label: str) -> list:
    """One one-hot vector per attribute for an attack label."""
    out = []
    for a, i in zip(schema.attributes, schema.truth(label)):
        v = np.zeros(len(a.values))
        v[i] = 1.0
        out.append(v)
    return out


def value_truths(schema: AttributeSchema, labels: Sequence[str]) -> np.ndarray:
    """(N, L) integer array of ground-truth value indices."""
    return np.array([schema.truth(lab) for lab in labels], dtype=np.int64).reshape(len(labels), schema.n_attributes)


# ---------------------------------------------------------------------------
# Protocol splits


@dataclass(frozen=True)
class ProtocolSplit:
    name: str
    assignments: Mapping[str, str]
    speaker_tag: Mapping[str, str]

    def __post_init__(self):
        for u, p in self.assignments.items():
            if p not in PARTITIONS:
                raise ValueError(f"utterance {u!r}: unknown partition {p!r}")
        for u, t in self.speaker_tag.items():
            if t not in SPEAKER_TAGS:
                raise ValueError(f"utterance {u!r}: unknown speaker tag {t!r}")
            if u not in self.assignments:
                raise UnknownUtterance(f"speaker tag for unassigned utterance {u!r}")

    @classmethod
    def from_lists(cls, name, train=(), dev=(), eval=(), speaker_tag=None) -> "ProtocolSplit":
        assignments = {}
        for part, ids in zip(PARTITIONS, (train, dev, eval)):
            for u in ids:
                if u in assignments:
                    raise PartitionOverlap(f"utterance {u!r} listed in both {assignments[u]} and {part}")
                assignments[u] = part
        return cls(name, assignments, dict(speaker_tag or {}))

    def ids(self, partition: str) -> list:
        return [u for u, p in self.assignments.items() if p == partition]

    def counts(self) -> dict:
        out = {p: 0 for p in PARTITIONS}
        for p in self.assignments.values():
            out[p] += 1
        return out

    def resolve(self, dataset: EmbeddingDataset, partition: str) -> EmbeddingDataset:
        """Subset of ``dataset`` assigned to ``partition``; ids must exist."""
        known = set(dataset.ids)
        wanted = self.ids(partition)
        missing = [u for u in wanted if u not in known]
        if missing:
            raise UnknownUtterance(
                f"protocol {self.name!r}: {len(missing)} {partition} ids absent from dataset, e.g. {missing[0]!r}"
            )
        return dataset.select(wanted)

    def to_document(self) -> dict:
        order = sorted(self.assignments)
        return {
            "schema_version": FORMAT_VERSION,
            "name": self.name,
            "assignments": {u: self.assignments[u] for u in order},
            "speaker_tag": {u: self.speaker_tag[u] for u in order if u in self.speaker_tag},
        }


def load_protocol(path) -> ProtocolSplit:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    _check_version(doc, path)
    return ProtocolSplit(doc["name"], dict(doc["assignments"]), dict(doc.get("speaker_tag", {})))


def save_protocol(protocol: ProtocolSplit, path) -> None:
    Path(path).write_text(dumps_canonical(protocol.to_document()), encoding="utf-8")
