import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spoofattr import attribank, dataio, nnet, protogen
from spoofattr.attribank import TrainConfig, attribute_value_eer
from spoofattr.errors import (
    AttributeWithSingleValueInTrain,
    DegenerateScorePool,
    DimensionMismatch,
    NoSpoofedData,
    SchemaMismatch,
)
from spoofattr.metrics import ScorePool, eer
from spoofattr.seeding import derive_seed, rng_for

# the default setting (lr 1e-4, batch 256) needs ~10k steps; these small
# sets get a few hundred, so the unit tests use a larger step and batch of 32
FAST = TrainConfig(epochs=12, lr=1e-3, batch_size=32)


def onehot_dataset(schema, part, n, seed, sigma=0.01, bonafide=0):
    rng = np.random.default_rng(seed)
    ids, labels, vec = [], [], []
    for a in schema.attacks:
        for i in range(n):
            ids.append(f"{part}_{a}_{i}")
            labels.append(a)
            vec.append(schema.onehot(a) + sigma * rng.standard_normal(schema.total_values))
    for i in range(bonafide):
        ids.append(f"{part}_bona_{i}")
        labels.append(dataio.BONAFIDE)
        vec.append(np.full(schema.total_values, 0.3) + sigma * rng.standard_normal(schema.total_values))
    return dataio.EmbeddingDataset(tuple(ids), tuple(labels), ("s",) * len(ids), (None,) * len(ids), np.array(vec))


@pytest.fixture(scope="module")
def det():
    return dataio.load_schema("det")


@pytest.fixture(scope="module")
def onehot_bank(det):
    tr = onehot_dataset(det, "t", 60, 0, bonafide=20)
    dv = onehot_dataset(det, "d", 30, 1, bonafide=10)
    return tr, dv, attribank.train_bank(tr, dv, det, FAST, seed=3)


def test_value_eer_examples():
    assert attribute_value_eer(np.eye(3)[[0, 2, 1, 1]], [0, 2, 1, 1]) == 0.0
    assert attribute_value_eer(np.full((4, 4), 0.25), [0, 1, 2, 3]) == 0.5
    pred = [[0.9, 0.1], [0.6, 0.4], [0.2, 0.8]]
    assert attribute_value_eer(pred, [0, 0, 1]) == 0.0
    assert eer(ScorePool([0.9, 0.6, 0.8], [0.1, 0.4, 0.2])).value == 0.0
    assert attribute_value_eer(pred, [0, 0, 1], pooling="macro") == 0.0
    with pytest.raises(DegenerateScorePool):
        attribute_value_eer(np.ones((2, 1)), [0, 0])
    with pytest.raises(DimensionMismatch):
        attribute_value_eer(np.ones((2, 2)), [0])


def test_onehot_embeddings_give_near_zero_dev_eer(onehot_bank):
    bank = onehot_bank[2]
    assert all(e < 0.005 for e in bank.dev_eer)
    assert all(1 <= k <= FAST.epochs for k in bank.selected_epoch)


def test_det_widths_and_flat_length(onehot_bank, det):
    bank = onehot_bank[2]
    assert [m.n_out for m in bank.extractors] == [2, 3, 3, 5, 3, 5, 4]
    assert attribank.extract(bank, np.zeros(25)).flat.shape == (25,)


def test_attr17_flat_length():
    s = dataio.load_schema("attr17")
    rng = np.random.default_rng(0)
    exts = [nnet.MLP.build([12, 8, m], rng) for m in s.sizes]
    bank = attribank.ExtractorBank(s, exts, [1] * 7, [0.0] * 7)
    assert attribank.extract(bank, rng.normal(size=12)).flat.shape == (50,)


def test_bank_rejects_wrong_widths(det):
    rng = np.random.default_rng(0)
    exts = [nnet.MLP.build([4, 3, 2], rng) for _ in det.sizes]
    with pytest.raises(SchemaMismatch):
        attribank.ExtractorBank(det, exts, [1] * 7, [0.0] * 7)


@settings(max_examples=30)
@given(st.lists(st.floats(-1e3, 1e3), min_size=25, max_size=25))
def test_blocks_are_simplexes(onehot_bank, x):
    emb = attribank.extract(onehot_bank[2], np.array(x))
    for block in emb.blocks:
        assert np.all(block >= 0) and abs(block.sum() - 1) < 1e-6
    assert np.all(emb.flat >= 0)


def test_extract_dimension_mismatch(onehot_bank):
    with pytest.raises(DimensionMismatch):
        attribank.extract(onehot_bank[2], np.zeros(24))


def test_training_is_deterministic(onehot_bank, det):
    tr, dv, bank = onehot_bank
    again = attribank.train_bank(tr, dv, det, FAST, seed=3)
    assert again.selected_epoch == bank.selected_epoch
    for a, b in zip(again.extractors, bank.extractors):
        assert a.flat().tobytes() == b.flat().tobytes()


def test_selected_epoch_minimises_reevaluated_curve(onehot_bank, det):
    tr, dv, bank = onehot_bank
    tr_s, dv_s = attribank.spoofed_only(tr, "t"), attribank.spoofed_only(dv, "d")
    truths = dataio.value_truths(det, tr_s.labels)
    dev_truths = dataio.value_truths(det, dv_s.labels)
    for ell in (0, 3):
        model = nnet.MLP.build([25, *FAST.hidden, det.sizes[ell]], rng_for(3, "extractor", ell, "init"))
        res = nnet.train(model, tr_s.vectors.astype(np.float64), np.eye(det.sizes[ell])[truths[:, ell]],
                         nnet.AdamState(lr=FAST.lr), epochs=FAST.epochs, batch_size=FAST.batch_size,
                         seed=derive_seed(3, "extractor", ell, "shuffle"))
        curve = []
        for snap in res.snapshots:
            model.set_flat(snap.astype(np.float32).astype(np.float64))
            curve.append(attribute_value_eer(model.forward(dv_s.vectors), dev_truths[:, ell]))
        assert curve == bank.dev_eer_curves[ell]
        k = bank.selected_epoch[ell]
        assert not any(c < curve[k - 1] for c in curve)
        assert all(c > curve[k - 1] for c in curve[:k - 1])  # earliest among ties


def test_extract_all_keeps_bonafide_order_and_is_worker_independent(onehot_bank, det):
    rng = np.random.default_rng(4)
    big = onehot_dataset(det, "e", 90, 5, bonafide=700)  # > 1 chunk of rows
    assert len(big) > attribank.CHUNK
    bank = onehot_bank[2]
    one = attribank.extract_all(bank, big, workers=1)
    four = attribank.extract_all(bank, big, workers=4)
    assert one.ids == big.ids and one.labels == big.labels
    assert dataio.BONAFIDE in one.labels and one.vectors.shape == (len(big), 25)
    assert one.vectors.tobytes() == four.vectors.tobytes()
    rows = rng.integers(0, len(big), 5)
    direct = np.stack([attribank.extract(bank, big.vectors[i]).flat for i in rows])
    np.testing.assert_allclose(direct, one.vectors[rows], rtol=1e-6)


def test_argmax_recovers_values_on_heldout_synthetic(det):
    spec = protogen.SynthSpec(counts={"train": 80, "dev": 30, "eval": 100}, sigma=0.05, seed=11)
    ds, proto = protogen.synth_generate(spec)
    bank = attribank.train_bank(proto.resolve(ds, "train"), proto.resolve(ds, "dev"), det, FAST, seed=1)
    ev = attribank.spoofed_only(proto.resolve(ds, "eval"), "eval")
    rho = attribank.extract_all(bank, ev).vectors
    truth = dataio.value_truths(det, ev.labels)
    for ell in range(det.n_attributes):
        assert np.mean(rho[:, det.block(ell)].argmax(axis=1) == truth[:, ell]) >= 0.99


def test_save_load_roundtrip(onehot_bank, det, tmp_path):
    bank = onehot_bank[2]
    attribank.save_bank(bank, tmp_path / "bank")
    back = attribank.load_bank(tmp_path / "bank", det)
    assert back.selected_epoch == bank.selected_epoch and back.dev_eer == bank.dev_eer
    x = onehot_bank[1].vectors[:50]
    assert back.transform(x).tobytes() == bank.transform(x).tobytes()
    with pytest.raises(SchemaMismatch):
        attribank.load_bank(tmp_path / "bank", dataio.load_schema("attr17"))


def test_training_errors(det):
    only_bona = onehot_dataset(det, "b", 0, 0, bonafide=5)
    spoof = onehot_dataset(det, "s", 3, 0)
    with pytest.raises(NoSpoofedData):
        attribank.train_bank(only_bona, spoof, det, FAST)
    with pytest.raises(NoSpoofedData):
        attribank.train_bank(spoof, only_bona, det, FAST)
    one_attack = spoof.take(np.flatnonzero([lab == "A01" for lab in spoof.labels]))
    with pytest.raises(AttributeWithSingleValueInTrain, match="inputs"):
        attribank.train_bank(one_attack, spoof, det, FAST)
