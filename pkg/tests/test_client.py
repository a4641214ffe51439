import dataclasses

import numpy as np
import pytest

from fedmho._validation import ValidationError
from fedmho.client import (
    ClassifierUpdate,
    ClientConfig,
    ClientKind,
    GenerativeUpdate,
    client_rng,
    derive_rng,
    load_update,
    save_update,
    train_classifier_local,
    train_cvae_local,
)
from fedmho.data import label_histogram, make_blobs
from fedmho.models import ConditionalVAE, MLPClassifier


@pytest.fixture(scope="module")
def blobs():
    return make_blobs(4, 60, 6, 0.5, seed=0)


def _cls_cfg(**kw):
    base = dict(client_id=0, kind=ClientKind.CLASSIFIER, local_epochs=20, learning_rate=1e-3)
    base.update(kw)
    return ClientConfig(**base)


def _gen_cfg(**kw):
    base = dict(client_id=1, kind=ClientKind.GENERATIVE, local_epochs=15, learning_rate=1e-2)
    base.update(kw)
    return ClientConfig(**base)


def test_config_rejects_zero_epochs():
    with pytest.raises(ValidationError):
        _cls_cfg(local_epochs=0)
    with pytest.raises(ValidationError):
        _cls_cfg(batch_size=0)


def test_zero_lr_returns_init(blobs):
    tmpl = MLPClassifier(hidden_layer_sizes=(8,), n_classes=4)
    init = tmpl.initialize(6, 4, np.random.default_rng(0)).get_weights()
    up = train_classifier_local(_cls_cfg(learning_rate=0.0), tmpl, blobs.images, blobs.labels,
                                init_params=init)
    for a, b in zip(up.params, init):
        np.testing.assert_array_equal(a, b)


def test_classifier_learns_separable_blobs(blobs):
    up = train_classifier_local(_cls_cfg(), MLPClassifier(hidden_layer_sizes=(16,), n_classes=4),
                                blobs.images, blobs.labels)
    acc = np.mean(up.to_estimator().predict(blobs.images) == blobs.labels)
    assert acc > 0.95


def test_classifier_loss_trend(blobs):
    m = MLPClassifier(hidden_layer_sizes=(16,), n_classes=4, learning_rate=1e-3,
                      max_epochs=20, random_state=0).fit(blobs.images, blobs.labels)
    assert m.loss_curve_[-1] < m.loss_curve_[0]


def test_classifier_update_is_frozen(blobs):
    up = train_classifier_local(_cls_cfg(local_epochs=1), MLPClassifier(hidden_layer_sizes=(4,), n_classes=4),
                                blobs.images, blobs.labels)
    with pytest.raises(ValueError):
        up.params[0][0, 0] = 1.0
    assert up.layer_dims == [6, 4, 4]


def test_wrong_kind_rejected(blobs):
    with pytest.raises(ValidationError):
        train_classifier_local(_gen_cfg(), MLPClassifier(n_classes=4), blobs.images, blobs.labels)
    with pytest.raises(ValidationError):
        train_cvae_local(_cls_cfg(), ConditionalVAE(n_classes=4), blobs.images, blobs.labels)


def test_empty_local_data_rejected():
    with pytest.raises(ValidationError):
        train_classifier_local(_cls_cfg(), MLPClassifier(n_classes=2), np.zeros((0, 3)), [])
    with pytest.raises(ValidationError):
        train_cvae_local(_gen_cfg(), ConditionalVAE(n_classes=2), np.zeros((0, 3)), [])


def test_cvae_update_carries_histogram_and_decoder_only(blobs):
    idx = np.arange(0, 240, 3)
    X, y = blobs.images[idx], blobs.labels[idx]
    up = train_cvae_local(_gen_cfg(), ConditionalVAE(latent_dim=2, hidden_size=8, n_classes=4), X, y)
    assert isinstance(up, GenerativeUpdate)
    np.testing.assert_array_equal(up.label_counts, label_histogram(blobs, idx))
    assert up.label_counts.sum() == len(idx)
    assert {f.name for f in dataclasses.fields(up)} == {"client_id", "decoder", "label_counts"}
    assert up.decoder.layer_dims == [2 + 4, 8, 6]


def test_cvae_training_is_deterministic(blobs):
    tmpl = ConditionalVAE(latent_dim=2, hidden_size=8, n_classes=4)
    a = train_cvae_local(_gen_cfg(seed=4), tmpl, blobs.images, blobs.labels)
    b = train_cvae_local(_gen_cfg(seed=4), tmpl, blobs.images, blobs.labels)
    for x, y in zip(a.decoder.weights, b.decoder.weights):
        assert x.tobytes() == y.tobytes()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cvae_loss_halves_on_blobs(seed):
    # high-contrast blobs: soft pixels put a Bernoulli entropy floor under the loss
    ds = make_blobs(4, 150, 16, 0.5, seed=seed, center_scale=5.0)
    m = ConditionalVAE(latent_dim=4, hidden_size=32, n_classes=4, learning_rate=1e-2,
                       max_epochs=30, random_state=seed).fit(ds.images, ds.labels)
    assert m.loss_curve_[-1] < 0.5 * m.loss_curve_[0]
    x = ds.images
    floor = -np.mean(np.sum(x * np.log(x) + (1 - x) * np.log1p(-x), axis=1))
    assert m.loss_curve_[-1] < floor + 0.5


def test_classifier_training_is_deterministic(blobs):
    tmpl = MLPClassifier(hidden_layer_sizes=(8,), n_classes=4)
    a = train_classifier_local(_cls_cfg(seed=3, local_epochs=3), tmpl, blobs.images, blobs.labels)
    b = train_classifier_local(_cls_cfg(seed=3, local_epochs=3), tmpl, blobs.images, blobs.labels)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params, b.params))


def test_client_streams_independent_of_other_clients():
    a = client_rng(5, 2).random(4)
    assert a.tobytes() == client_rng(5, 2).random(4).tobytes()
    assert a.tobytes() != client_rng(5, 3).random(4).tobytes()
    # keys are not confused with a longer spawn path
    assert derive_rng(5, 1).random(3).tobytes() != derive_rng(5, 1, 0).random(3).tobytes()


def test_update_persistence_round_trip(tmp_path, blobs):
    cls = train_classifier_local(_cls_cfg(client_id=3, local_epochs=1),
                                 MLPClassifier(hidden_layer_sizes=(4,), n_classes=4),
                                 blobs.images, blobs.labels)
    gen = train_cvae_local(_gen_cfg(client_id=8, local_epochs=1),
                           ConditionalVAE(latent_dim=2, hidden_size=4, n_classes=4),
                           blobs.images[:50], blobs.labels[:50])
    back = load_update(save_update(cls, tmp_path))
    assert isinstance(back, ClassifierUpdate) and back.client_id == 3
    assert all(a.tobytes() == b.tobytes() for a, b in zip(back.params, cls.params))
    back = load_update(save_update(gen, tmp_path))
    assert back.client_id == 8 and back.decoder.latent_dim == 2
    np.testing.assert_array_equal(back.label_counts, gen.label_counts)
    assert (tmp_path / "client_8.labels.txt").read_text().split() == [str(c) for c in gen.label_counts]
