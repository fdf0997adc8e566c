import numpy as np
import pytest

from spritz.models import (COMBINER_WIDTH, FLATTEN_WIDTH, H0, H1, LATENT_WIDTH, EnsembleModel,
                           UntrainedModelError, build_autoencoder, build_cnn2c, build_combiner,
                           cnn2c_predict, decide_from_proba, ensemble_features, ensemble_predict,
                           oneclass_decide, reconstruction_error)
from spritz.tensor import ShapeError


@pytest.fixture(scope="module")
def ensemble():
    return EnsembleModel(build_cnn2c(0), build_autoencoder(1, "leg"), build_autoencoder(2, "mal"),
                         build_combiner(3), 10.0, 10.0, True)


def test_cnn2c_structure():
    g = build_cnn2c(0)
    kinds = [n.kind for n in g.nodes]
    assert kinds.count("conv2d") == 9
    assert all(n.attrs.get("stride", 1) == 1 for n in g.nodes if n.kind == "conv2d")
    assert kinds.count("maxpool2x2") >= 1
    assert kinds.count("dense") == 1 and kinds[-1] == "sigmoid"
    x = np.random.default_rng(0).uniform(0, 255, (2, 64, 64))
    assert g.predict(x, until="flatten").shape == (2, FLATTEN_WIDTH)
    p = g.predict(x)
    assert p.shape == (2, 1) and np.all((p > 0) & (p < 1))


def test_autoencoder_structure():
    g = build_autoencoder(0)
    x = np.random.default_rng(1).uniform(0, 255, (2, 64, 64))
    assert g.predict(x, until="latent").shape == (2, LATENT_WIDTH)
    assert g.predict(x).shape == (2, 64, 64, 1)
    assert all(n.attrs["stride"] == 2 for n in g.nodes if n.kind in ("tconv2d",))
    dense = [n for n in g.nodes if n.kind == "dense"]
    assert dense[0].params["w"].shape == (LATENT_WIDTH, LATENT_WIDTH)


def test_combiner_width():
    g = build_combiner(0)
    assert g.nodes[0].params["w"].shape[0] == COMBINER_WIDTH == 2752
    assert g.predict(np.zeros((3, COMBINER_WIDTH))).shape == (3, 2)


def test_same_seed_same_weights():
    a, b = build_cnn2c(7), build_cnn2c(7)
    assert all(np.array_equal(a.state_arrays()[k], b.state_arrays()[k]) for k in a.state_arrays())


def test_wrong_input_shape():
    with pytest.raises(ShapeError):
        build_cnn2c(0).predict(np.zeros((32, 32)))


def test_features_are_concatenated_in_order(ensemble):
    x = np.random.default_rng(2).uniform(0, 255, (64, 64))
    f = ensemble_features(ensemble, x)
    assert f.shape == (1, COMBINER_WIDTH)
    assert np.array_equal(f[0, :FLATTEN_WIDTH], ensemble.cnn2c.predict(x, until="flatten")[0])
    assert np.array_equal(f[0, FLATTEN_WIDTH:FLATTEN_WIDTH + LATENT_WIDTH], ensemble.leg.predict(x, until="latent")[0])
    assert np.array_equal(f[0, -LATENT_WIDTH:], ensemble.mal.predict(x, until="latent")[0])


def test_ensemble_predict_is_deterministic(ensemble):
    x = np.random.default_rng(3).uniform(0, 255, (2, 64, 64))
    la, pa = ensemble_predict(ensemble, x)
    lb, pb = ensemble_predict(ensemble, x)
    assert np.array_equal(pa, pb) and np.array_equal(la, lb)
    assert np.allclose(pa.sum(axis=1), 1.0)


def test_untrained_combiner_refuses_to_predict():
    e = EnsembleModel(build_cnn2c(0), build_autoencoder(1), build_autoencoder(2), build_combiner(3))
    with pytest.raises(UntrainedModelError):
        e.predict(np.zeros((64, 64)))


def test_ties_fail_closed():
    assert decide_from_proba(np.array([[0.5, 0.5]]))[0] == H1
    assert decide_from_proba(np.array([[0.6, 0.4]]))[0] == H0


def test_negative_threshold_rejected():
    with pytest.raises(ValueError):
        EnsembleModel(build_cnn2c(0), build_autoencoder(1), build_autoencoder(2), build_combiner(3), -1.0, 1.0)


def test_oneclass_decision_uses_threshold():
    ae = build_autoencoder(0)
    x = np.full((64, 64), 127.5)
    err = reconstruction_error(ae, x)
    assert isinstance(err, float) and err >= 0
    assert oneclass_decide(ae, err, x)
    assert not oneclass_decide(ae, err * 0.5, x) or err == 0


def test_cnn2c_decision_matches_sigmoid_rule():
    g = build_cnn2c(1)
    x = np.random.default_rng(4).uniform(0, 255, (4, 64, 64))
    assert np.array_equal(cnn2c_predict(g, x), (g.predict(x).reshape(-1) >= 0.5).astype(int))
