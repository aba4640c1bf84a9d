import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mama import ContrastivePretrainer, LinearProbe, ZeroShotClassifier
from mama.errors import InputError, ShapeError
from factories import tiny_corpus

FAST = dict(total_steps=3, batch_size=4, delta=1, image_size=16, patch_grid=(2, 2), embed_dim=8)


@pytest.fixture(scope="module")
def corpus():
    return tiny_corpus(patients=4)


@pytest.fixture(scope="module")
def fitted(corpus):
    return ContrastivePretrainer(**FAST).fit(corpus.records, images=corpus.images)


def test_params_and_clone():
    est = ContrastivePretrainer(lr=0.01, strategy="same")
    params = est.get_params()
    assert params["lr"] == 0.01 and params["strategy"] == "same" and params["tau_local"] is None
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(lr=0.02).lr == 0.02


def test_preset_fills_unset_values():
    cfg = ContrastivePretrainer(total_steps=20).build_config()
    assert cfg.train.total_steps == 20 and cfg.train.lr == 1e-3 and cfg.loss.tau_local == 0.5
    assert cfg.train.warmup_steps <= 20 and cfg.loss.delta <= 20
    assert ContrastivePretrainer(preset="full", tau_local=0.2).build_config().loss.tau_local == 0.2
    with pytest.raises(InputError):
        ContrastivePretrainer(preset="nope").build_config()


def test_fit_transform(fitted, corpus):
    x = np.stack([corpus.images[r.image_id] for r in corpus.records[:5]])
    z = fitted.transform(x)
    assert z.shape == (5, 8)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)
    assert len(fitted.history_) == 3 and fitted.n_features_out_ == 8


def test_transform_validates(fitted):
    with pytest.raises((InputError, ShapeError)):
        fitted.transform(np.zeros((2, 8, 8)))
    with pytest.raises(NotFittedError):
        ContrastivePretrainer().transform(np.zeros((1, 32, 32)))


def test_fit_validates(corpus):
    with pytest.raises(InputError):
        ContrastivePretrainer(**FAST).fit([], images=corpus.images)
    with pytest.raises(InputError):
        ContrastivePretrainer(**FAST).fit(["not a record"], images=corpus.images)
    with pytest.raises(InputError):
        ContrastivePretrainer(**FAST).fit(corpus.records)


def test_save_load(fitted, corpus, tmp_path):
    fitted.save(tmp_path / "ck")
    back = ContrastivePretrainer.load(tmp_path / "ck")
    x = np.stack([corpus.images[r.image_id] for r in corpus.records[:3]])
    np.testing.assert_array_equal(back.transform(x), fitted.transform(x))
    assert back.get_params()["total_steps"] == 3


def test_probe_on_embeddings(fitted, corpus):
    x = np.stack([corpus.images[r.image_id] for r in corpus.records])
    y = corpus.labels(corpus.records)
    with pytest.warns(UserWarning):
        probe = LinearProbe(encoder=fitted, num_classes=4).fit(x, y)
    assert probe.predict_proba(x).shape == (16, 4) and set(probe.predict(x)) <= set(range(4))
    twin = clone(probe).get_params()["encoder"]
    assert twin.get_params() == fitted.get_params() and not hasattr(twin, "state_")


def test_probe_on_features_with_absent_class():
    x = np.array([[0.0], [0.1], [1.0], [1.1]])
    with pytest.warns(UserWarning, match="no training examples"):
        probe = LinearProbe(num_classes=3).fit(x, [0, 0, 1, 1])
    assert probe.absent_classes_ == [2] and probe.predict(x).tolist() == [0, 0, 1, 1]
    with pytest.raises(InputError):
        LinearProbe().fit(np.zeros((3, 2, 2)), [0, 1, 0])


def test_zero_shot(fitted, corpus):
    recs = corpus.records[:4]
    x = np.stack([corpus.images[r.image_id] for r in recs])
    clf = ZeroShotClassifier(encoder=fitted).fit()
    assert clf.predict(x, recs).shape == (4,)
    np.testing.assert_allclose(clf.predict_proba(x, recs).sum(axis=1), 1.0)
    assert clf.decision_function(x, recs).shape == (4, 4)
    with pytest.raises(InputError):
        ZeroShotClassifier().fit()
    with pytest.raises(NotFittedError):
        ZeroShotClassifier(encoder=fitted).predict(x, recs)
