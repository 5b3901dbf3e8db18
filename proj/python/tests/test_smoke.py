import math

import numpy as np
import pytest

import cainnflow as cf


def test_auroc_examples():
    assert cf.auroc([3.0, 4.0], [1.0, 2.0]) == 1.0
    assert cf.auroc([1.0], [1.0]) == 0.5
    assert cf.auroc([0.0], [1.0, 2.0]) == 0.0


def test_auroc_matches_pair_count():
    rng = np.random.default_rng(0)
    pos = rng.integers(0, 5, 30).astype(float)
    neg = rng.integers(0, 5, 40).astype(float)
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    assert cf.auroc(pos.tolist(), neg.tolist()) == pytest.approx(wins / (30 * 40), abs=1e-12)


def test_identity_start_is_exact():
    flow = cf.Flow(4, 3, 3, steps=2, variant="CAC")
    x = np.random.default_rng(1).normal(size=(2, 4, 3, 3))
    z, logdet = flow.forward(x)
    np.testing.assert_array_equal(z, x)
    assert logdet == [0.0, 0.0]


@pytest.mark.parametrize("variant", ["CA", "AC", "CAC", "CC"])
def test_round_trip(variant):
    flow = cf.Flow(4, 3, 3, steps=3, variant=variant, seed=5, random_init=True)
    x = np.random.default_rng(2).normal(size=(3, 4, 3, 3))
    z, _ = flow.forward(x)
    assert np.max(np.abs(flow.inverse(z) - x)) < 1e-10
    assert np.max(np.abs(z - x)) > 1e-3


def test_nll_of_identity_flow():
    flow = cf.Flow(2, 1, 1, steps=1, variant="CC")
    x = np.zeros((1, 2, 1, 1))
    assert flow.nll(x) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)


def test_shape_errors_map_to_python():
    flow = cf.Flow(4, 3, 3)
    with pytest.raises(cf.ShapeError):
        flow.forward(np.zeros((4, 3, 3)))
    with pytest.raises(cf.ContractError):
        cf.Flow(4, 3, 3, variant="XYZ")
    assert issubclass(cf.ShapeError, cf.Error)


def test_anomaly_map():
    z = np.zeros((1, 2, 2, 2))
    z[0, :, 1, 0] = [3.0, 4.0]
    m = cf.anomaly_map(z)
    assert m.shape == (2, 2)
    assert m[1, 0] == pytest.approx(12.5)
    assert m.sum() == pytest.approx(12.5)


def test_train_evaluate_checkpoint(tmp_path):
    train_manifest, test_manifest = cf.synth_generate(
        tmp_path / "data", n_train=24, n_test_normal=4, n_test_anomalous=4, image_size=16
    )
    data = cf.load_features(train_manifest)
    assert data.shape == (24, 16, 4, 4)

    flow, history = cf.train(data, epochs=4, lr=2e-3, batch_size=8, seed=3)
    assert len(history) == 4
    assert history[-1] < history[0]
    np.testing.assert_allclose(flow.norm_mean, data.mean(axis=(0, 2, 3)), atol=1e-10)

    metrics = cf.evaluate(flow, test_manifest)
    assert 0.0 <= metrics["image_auroc"] <= 1.0
    assert metrics["n_images"] == 8

    ckpt = tmp_path / "model.cafw"
    cf.save_checkpoint(flow, ckpt, history, lr=2e-3, batch_size=8)
    again, hist = cf.load_checkpoint(ckpt)
    assert hist == history
    assert again.parameter_names == flow.parameter_names
    np.testing.assert_array_equal(again.forward(data[:2])[0], flow.forward(data[:2])[0])
    assert cf.evaluate(again, test_manifest) == metrics


def test_feature_file_round_trip(tmp_path):
    x = np.random.default_rng(4).normal(size=(2, 3, 4, 5))
    cf.write_features(x, tmp_path / "x.cafm")
    np.testing.assert_array_equal(cf.read_features(tmp_path / "x.cafm"), x)
    cf.write_features(x, tmp_path / "x32.cafm", f32=True)
    np.testing.assert_allclose(cf.read_features(tmp_path / "x32.cafm"), x, rtol=1e-6)


def test_corrupt_checkpoint_raises_io_error(tmp_path):
    bad = tmp_path / "bad.cafw"
    bad.write_bytes(b"junk")
    with pytest.raises(cf.IoError):
        cf.load_checkpoint(bad)
