import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spoofattr import dataio
from spoofattr.errors import (
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
)


def make_ds(n=4, d=3, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    ids = tuple(f"u{i}" for i in range(n))
    labels = labels or tuple("A01" if i % 2 else "bonafide" for i in range(n))
    return dataio.EmbeddingDataset(ids, labels, tuple(f"s{i % 2}" for i in range(n)),
                                   tuple("F" if i % 3 else None for i in range(n)),
                                   rng.normal(size=(n, d)).astype(np.float32))


def raw_container(rows, count=None, dim=None, magic=b"PAE1"):
    rows = np.asarray(rows, dtype="<f4")
    count = rows.shape[0] if count is None else count
    dim = rows.shape[1] if dim is None else dim
    return struct.pack("<4sII", magic, count, dim) + rows.tobytes()


def write_index(path, ids):
    path.write_text("".join(f"{u}\tA01\tspk\tM\n" for u in ids))


def test_small_container_loads(tmp_path):
    (tmp_path / "e.pae").write_bytes(raw_container([[1, 0, 0], [0, 1, 0]]))
    write_index(tmp_path / "e.tsv", ["a", "b"])
    ds = dataio.load_embeddings(tmp_path / "e.pae", tmp_path / "e.tsv")
    assert len(ds) == 2 and ds.dim == 3
    np.testing.assert_array_equal(ds.vectors, [[1, 0, 0], [0, 1, 0]])
    assert ds.genders == ("M", "M")


def test_index_longer_than_container(tmp_path):
    (tmp_path / "e.pae").write_bytes(raw_container([[1, 0, 0], [0, 1, 0]]))
    write_index(tmp_path / "e.tsv", ["a", "b", "c"])
    with pytest.raises(CountMismatch):
        dataio.load_embeddings(tmp_path / "e.pae", tmp_path / "e.tsv")


def test_bad_magic(tmp_path):
    (tmp_path / "e.pae").write_bytes(raw_container([[1.0]], magic=b"NOPE"))
    write_index(tmp_path / "e.tsv", ["a"])
    with pytest.raises(MagicMismatch):
        dataio.load_embeddings(tmp_path / "e.pae", tmp_path / "e.tsv")


def test_payload_shorter_than_header(tmp_path):
    (tmp_path / "e.pae").write_bytes(raw_container([[1, 2]], dim=3))
    write_index(tmp_path / "e.tsv", ["a"])
    with pytest.raises(DimensionMismatch):
        dataio.load_embeddings(tmp_path / "e.pae", tmp_path / "e.tsv")


def test_non_finite_rejected(tmp_path):
    (tmp_path / "e.pae").write_bytes(raw_container([[1, np.nan]]))
    write_index(tmp_path / "e.tsv", ["a"])
    with pytest.raises(NonFiniteValue):
        dataio.load_embeddings(tmp_path / "e.pae", tmp_path / "e.tsv")


def test_duplicate_ids_rejected(tmp_path):
    (tmp_path / "e.pae").write_bytes(raw_container([[1.0], [2.0]]))
    write_index(tmp_path / "e.tsv", ["a", "a"])
    with pytest.raises(DuplicateUtteranceId):
        dataio.load_embeddings(tmp_path / "e.pae", tmp_path / "e.tsv")


def test_roundtrip_100x160_bytes(tmp_path):
    rng = np.random.default_rng(11)
    vec = rng.normal(size=(100, 160)).astype(np.float32)
    ds = dataio.EmbeddingDataset(tuple(f"utt{i:03d}" for i in range(100)), ("A02",) * 100,
                                 ("spk",) * 100, (None,) * 100, vec)
    dataio.write_embeddings(ds, tmp_path / "a.pae", tmp_path / "a.tsv")
    back = dataio.load_embeddings(tmp_path / "a.pae", tmp_path / "a.tsv")
    assert back.vectors.tobytes() == vec.astype("<f4").tobytes()
    dataio.write_embeddings(back, tmp_path / "b.pae", tmp_path / "b.tsv")
    assert (tmp_path / "a.pae").read_bytes() == (tmp_path / "b.pae").read_bytes()
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


@given(st.integers(1, 12), st.integers(1, 9), st.integers(0, 2**31))
def test_container_roundtrip_property(tmp_path_factory, n, d, seed):
    tmp = tmp_path_factory.mktemp("rt")
    ds = make_ds(n, d, seed)
    dataio.write_embeddings(ds, tmp / "x.pae", tmp / "x.tsv")
    back = dataio.load_embeddings(tmp / "x.pae", tmp / "x.tsv")
    assert back.ids == ds.ids and back.labels == ds.labels and back.genders == ds.genders
    assert back.vectors.tobytes() == ds.vectors.tobytes()


def test_dataset_is_read_only():
    ds = make_ds()
    with pytest.raises(ValueError):
        ds.vectors[0, 0] = 1.0


def test_length_normalisation():
    ds = make_ds(5, 4).length_normalized()
    np.testing.assert_allclose(np.linalg.norm(ds.vectors, axis=1), 1.0, rtol=1e-6)


# ---------------------------------------------------------------------------
# schemas


def test_shipped_schema_sizes():
    det = dataio.load_schema("det")
    attr17 = dataio.load_schema("attr17")
    assert det.n_attributes == 7 and det.total_values == 25
    assert det.sizes == (2, 3, 3, 5, 3, 5, 4)
    assert attr17.n_attributes == 7 and attr17.total_values == 50
    assert [a.name for a in det.attributes] == [
        "inputs", "input processor", "duration", "conversion", "speaker", "outputs", "waveform gen"]


def test_shipped_twins_share_rows():
    s = dataio.load_schema("attr17")
    assert s.truth("A04") == s.truth("A16")
    assert s.truth("A06") == s.truth("A19")
    assert len(set(s.attack_table.values())) == 17


def test_a01_targets_match_table():
    s = dataio.load_schema("det")
    hot = dataio.one_hot_targets(s, "A01")
    assert len(hot) == 7
    names = [a.values[int(np.argmax(h))] for a, h in zip(s.attributes, hot)]
    assert names == ["Text", "NLP", "HMM", "AR-RNN", "VAE", "MCC-F0", "WaveNet"]
    for h, size in zip(hot, s.sizes):
        assert h.shape == (size,) and h.sum() == 1 and set(np.unique(h)) <= {0.0, 1.0}


def test_bonafide_has_no_targets():
    with pytest.raises(NoAttributeGroundTruth):
        dataio.one_hot_targets(dataio.load_schema("det"), "bonafide")
    with pytest.raises(NoAttributeGroundTruth):
        dataio.one_hot_targets(dataio.load_schema("det"), "A17")


@pytest.mark.parametrize("name", ["det", "attr17"])
def test_every_attack_onehot_has_L_ones(name):
    s = dataio.load_schema(name)
    for attack in s.attacks:
        v = s.onehot(attack)
        assert v.shape == (s.total_values,)
        assert v.sum() == s.n_attributes
        assert set(np.unique(v)) == {0.0, 1.0}


def test_schema_file_roundtrip_bytes(tmp_path):
    for name in ("det", "attr17"):
        s = dataio.load_schema(name)
        dataio.save_schema(s, tmp_path / "s.json")
        again = dataio.load_schema(tmp_path / "s.json")
        assert again == s
        dataio.save_schema(again, tmp_path / "t.json")
        assert (tmp_path / "s.json").read_bytes() == (tmp_path / "t.json").read_bytes()


def test_unknown_value_name(tmp_path):
    doc = dataio.load_schema("det").to_document()
    doc["attacks"]["A01"]["speaker"] = "Martian"
    (tmp_path / "s.json").write_text(json.dumps(doc))
    with pytest.raises(UnknownValueName):
        dataio.load_schema(tmp_path / "s.json")


def test_missing_attribute(tmp_path):
    doc = dataio.load_schema("det").to_document()
    del doc["attacks"]["A02"]["duration"]
    (tmp_path / "s.json").write_text(json.dumps(doc))
    with pytest.raises(MissingAttribute):
        dataio.load_schema(tmp_path / "s.json")


def test_alias_attack_resolves_identically():
    doc = dataio.load_schema("det").to_document()
    doc["attacks"]["A16"] = dict(doc["attacks"]["A04"])
    s = dataio.schema_from_document(doc)
    assert s.truth("A16") == s.truth("A04")


# ---------------------------------------------------------------------------
# protocols


def test_overlapping_lists_rejected():
    with pytest.raises(PartitionOverlap):
        dataio.ProtocolSplit.from_lists("p", train=["a", "b"], eval=["b"])


def test_protocol_roundtrip_and_resolve(tmp_path):
    ds = make_ds(6)
    p = dataio.ProtocolSplit.from_lists("p", train=["u0", "u5"], dev=["u2"], eval=["u1", "u3", "u4"],
                                        speaker_tag={"u1": "common", "u3": "disjoint"})
    dataio.save_protocol(p, tmp_path / "p.json")
    q = dataio.load_protocol(tmp_path / "p.json")
    assert q.counts() == {"train": 2, "dev": 1, "eval": 3}
    assert q.resolve(ds, "train").ids == ("u0", "u5")
    dataio.save_protocol(q, tmp_path / "q.json")
    assert (tmp_path / "p.json").read_bytes() == (tmp_path / "q.json").read_bytes()


def test_resolve_unknown_id():
    p = dataio.ProtocolSplit.from_lists("p", train=["zzz"])
    with pytest.raises(UnknownUtterance):
        p.resolve(make_ds(), "train")
