from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from corpus import DISJOINT_SPEAKERS, attr17_metadata, full_spec
from spoofattr import dataio, protogen
from spoofattr.errors import DimensionMismatch, MissingSpeaker, UnknownAttack
from spoofattr.protogen import PartitionSpec, SynthSpec, build_attr17, hamming_matrix, largest_remainder


def test_largest_remainder_examples():
    assert largest_remainder(3800, (0.8, 0.2)) == [3040, 760]
    assert largest_remainder(4914, (0.5, 0.1, 0.4)) == [2457, 491, 1966]
    assert largest_remainder(10, (1, 1, 1)) == [4, 3, 3]  # ties go to the earlier entry
    assert largest_remainder(0, (0.5, 0.5)) == [0, 0]


@given(st.integers(0, 10**6), st.lists(st.integers(1, 50), min_size=1, max_size=6))
def test_largest_remainder_properties(total, weights):
    parts = largest_remainder(total, weights)
    assert sum(parts) == total
    w = sum(weights)
    for p, q in zip(parts, weights):
        assert abs(p - Fraction(total * q, w)) < 1


@pytest.fixture(scope="module")
def full_split():
    meta = attr17_metadata()
    return meta, build_attr17(meta, full_spec())


def per_attack_counts(meta, split):
    out = {}
    for u, part in split.assignments.items():
        out.setdefault(meta[u]["attack"], Counter())[part] += 1
    return out


def test_published_counts(full_split):
    meta, split = full_split
    counts = per_attack_counts(meta, split)
    for a in protogen.KNOWN_ATTACKS:
        assert (counts[a]["train"], counts[a]["dev"], counts[a]["eval"]) == (3040, 760, 3716)
    for a in protogen.UNKNOWN_ATTACKS:
        assert (counts[a]["train"], counts[a]["dev"], counts[a]["eval"]) == (2357, 589, 1968)
    tags = Counter(split.speaker_tag[u] for u, p in split.assignments.items() if p == "eval")
    assert tags["common"] == 12948 and tags["disjoint"] == 12636


def test_disjoint_speakers_only_in_eval(full_split):
    meta, split = full_split
    dis = set(DISJOINT_SPEAKERS)
    for u, part in split.assignments.items():
        if meta[u]["speaker"] in dis:
            assert part == "eval" and split.speaker_tag[u] == "disjoint"


def test_partition_is_exact_cover(full_split):
    meta, split = full_split
    assert set(split.assignments) == set(meta)
    assert sum(split.counts().values()) == len(meta)


def test_build_is_seeded():
    meta = attr17_metadata(50, 20, 60, 5)
    spec = full_spec(common_eval_total=None)
    a, b = build_attr17(meta, spec), build_attr17(meta, spec)
    assert a.assignments == b.assignments
    c = build_attr17(meta, full_spec(common_eval_total=None, seed=1))
    assert c.assignments != a.assignments
    assert Counter(c.assignments.values()) == Counter(a.assignments.values())


def test_fallback_ratios_without_common_total():
    meta = attr17_metadata(100, 40, 90, 2)
    split = build_attr17(meta, full_spec(common_eval_total=None))
    counts = per_attack_counts(meta, split)
    # pool 108: 50:10:40 -> 54/11/43, eval already holds the 18 disjoint utterances
    assert (counts["A07"]["train"], counts["A07"]["dev"], counts["A07"]["eval"]) == (54, 11, 43)
    assert (counts["A01"]["train"], counts["A01"]["dev"], counts["A01"]["eval"]) == (80, 20, 40)


def test_errors():
    spec = full_spec()
    with pytest.raises(UnknownAttack):
        build_attr17({"u": {"attack": "A42", "speaker": "LA_0000"}}, spec)
    with pytest.raises(MissingSpeaker):
        build_attr17({"u": {"attack": "A07", "speaker": ""}}, spec)
    with pytest.raises(MissingSpeaker):
        build_attr17({"u": {"attack": "A07", "speaker": "nobody"}}, spec)
    with pytest.raises(ValueError):
        PartitionSpec(("A01",), ("A07",), known_ratio=(0.5, 0.4))
    with pytest.raises(ValueError):
        PartitionSpec(("A01",), ("A07",), disjoint_speakers=("s",), common_speakers=("s",))


def test_partition_spec_document_roundtrip():
    spec = full_spec()
    assert PartitionSpec.from_document(spec.to_document()) == spec


# ---------------------------------------------------------------------------
# Hamming confusability


def test_hamming_properties():
    s = dataio.load_schema("attr17")
    attacks, h = hamming_matrix(s)
    assert np.array_equal(h, h.T)
    assert np.all(np.diag(h) == 0)
    assert np.all(h % 2 == 0)
    assert h[attacks.index("A04"), attacks.index("A16")] == 0
    assert h[attacks.index("A06"), attacks.index("A19")] == 0


def test_hamming_counts_differing_attributes():
    s = dataio.load_schema("det")
    attacks, h = hamming_matrix(s)
    for i, a in enumerate(attacks):
        for j, b in enumerate(attacks):
            differ = sum(x != y for x, y in zip(s.truth(a), s.truth(b)))
            assert h[i, j] == 2 * differ
    three = [(i, j) for i in range(len(attacks)) for j in range(len(attacks)) if h[i, j] == 6]
    assert three  # some pair differs in exactly three attributes


def test_confusability_twin_is_maximal():
    h = np.array([[0, 4, 6, 8], [4, 0, 2, 6]])
    c = np.array([[10, 0, 0, 0], [0, 10, 0, 0]])
    res = protogen.confusability_check(c, h)
    assert all(r > 0.7 for r in res["per_attack"])


def test_confusability_exponential_decay_positive():
    h = np.array([[0, 2, 4, 6, 8, 10, 12]])
    c = np.exp(-h.astype(float))
    res = protogen.confusability_check(c, h)
    assert res["per_attack"][0] == pytest.approx(1.0)
    assert res["mean"] > 0


def test_confusability_uniform_and_mismatch():
    res = protogen.confusability_check(np.ones((1, 3)), np.array([[0, 2, 4]]))
    assert res["per_attack"] == [None] and res["mean"] is None
    with pytest.raises(DimensionMismatch):
        protogen.confusability_check(np.ones((2, 3)), np.ones((3, 2)))


def test_confusability_uniform_in_expectation():
    rng = np.random.default_rng(0)
    h = rng.integers(0, 8, (200, 6)) * 2
    c = rng.multinomial(60, [1 / 6] * 6, size=200)
    assert abs(protogen.confusability_check(c, h)["mean"]) < 0.1


# ---------------------------------------------------------------------------
# synthetic data


def nearest_mean_accuracy(ds, means):
    labels = list(means)
    mu = np.stack([means[k] for k in labels])
    d = ((ds.vectors[:, None, :] - mu[None]) ** 2).sum(axis=2)
    pred = [labels[i] for i in d.argmin(axis=1)]
    return np.mean([p == t for p, t in zip(pred, ds.labels)])


def test_nearest_mean_recovers_fully_distinct_attacks():
    s = dataio.load_schema("det")
    rows = {a: s.truth(a) for a in s.attacks}
    pair = next((a, b) for a in rows for b in rows if all(x != y for x, y in zip(rows[a], rows[b])))
    spec = SynthSpec(attacks=pair, bonafide=False, sigma=0.01, counts={"train": 500, "dev": 1, "eval": 1})
    ds, _ = protogen.synth_generate(spec)
    train = ds.take(np.flatnonzero([u.startswith("train") for u in ds.ids]))
    assert len(train) == 1000
    assert nearest_mean_accuracy(train, protogen.class_means(spec)) == 1.0


def test_synth_is_seeded(tmp_path):
    spec = SynthSpec(counts={"train": 3, "dev": 2, "eval": 2})
    a, pa = protogen.synth_generate(spec)
    b, pb = protogen.synth_generate(spec)
    assert a.vectors.tobytes() == b.vectors.tobytes() and a.ids == b.ids and pa.assignments == pb.assignments
    c, _ = protogen.synth_generate(SynthSpec(counts={"train": 3, "dev": 2, "eval": 2}, seed=8))
    assert c.vectors.tobytes() != a.vectors.tobytes()
    protogen.save_synth_spec(spec, tmp_path / "s.json")
    assert protogen.load_synth_spec(tmp_path / "s.json") == spec


def test_twins_share_means_and_are_inseparable():
    spec = SynthSpec(schema="attr17", attacks=("A04", "A16"), bonafide=False, counts={"train": 500, "dev": 1, "eval": 1})
    means = protogen.class_means(spec)
    assert np.array_equal(means["A04"], means["A16"])
    ds, _ = protogen.synth_generate(spec)
    acc = nearest_mean_accuracy(ds, means)  # argmin ties all go to A04
    assert abs(acc - 0.5) < 0.05


def test_bonafide_mean_is_distinct():
    for name in ("det", "attr17"):
        spec = protogen.load_synth_spec(name)
        means = protogen.class_means(spec)
        if dataio.BONAFIDE in means:
            bona = means[dataio.BONAFIDE]
            assert min(np.linalg.norm(bona - m) for k, m in means.items() if k != dataio.BONAFIDE) > 1.0


def test_shipped_specs():
    det = protogen.load_synth_spec("det")
    assert (det.schema, det.sigma, det.seed, det.bonafide) == ("det", 0.05, 7, True)
    assert det.counts == {"train": 500, "dev": 500, "eval": 500}
    attr = protogen.load_synth_spec("attr17")
    assert (attr.schema, attr.sigma) == ("attr17", 0.05) and set(attr.counts.values()) == {300}
