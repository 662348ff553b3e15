import numpy as np
import pytest
from sklearn.base import clone

from chestsep import datagen
from chestsep.errors import NonFiniteError, ShapeMismatch
from chestsep.estimator import ChestSoundSeparator

TINY_PARAMS = dict(
    kernel_size=64, stride=32, feature_size=32, mask_feature_size=16,
    conv_layers=1, transformer_depth=1, num_heads=2,
    epochs=3, batch_size=2, learning_rate=1e-3, weight_decay=0.0,
)


def small_data(n=4, length=1500):
    stream = datagen.TrainingStream(seed=11, crop_s=None, duration_s=1.0)
    mixtures, targets = stream.batch(0, 0, n, (-20.0, 0.0))
    return mixtures[:, :length], targets[:, :, :length]


class TestSklearnProtocol:
    def test_get_set_params_roundtrip(self):
        est = ChestSoundSeparator(**TINY_PARAMS)
        params = est.get_params()
        assert params["kernel_size"] == 64
        est.set_params(epochs=5)
        assert est.get_params()["epochs"] == 5

    def test_clone_preserves_params(self):
        est = ChestSoundSeparator(**TINY_PARAMS, random_state=7)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_unfitted_transform_raises(self):
        with pytest.raises(ShapeMismatch):
            ChestSoundSeparator(**TINY_PARAMS).transform(np.zeros((1, 100), dtype=np.float32))


class TestFitTransform:
    def test_fit_transform_shapes(self):
        X, y = small_data()
        est = ChestSoundSeparator(**TINY_PARAMS).fit(X, y)
        out = est.transform(X)
        assert out.shape == (4, 2, 1500)
        assert np.all(np.isfinite(out))
        assert est.predict(X).shape == out.shape

    def test_fit_improves_score(self):
        X, y = small_data()
        est = ChestSoundSeparator(**{**TINY_PARAMS, "epochs": 8}, random_state=0)
        est.fit(X, y)
        assert len(est.history_.epochs) == 8
        first, last = est.history_.epochs[0], est.history_.epochs[-1]
        assert last.val_loss < first.val_loss

    def test_score_is_mean_si_sdr(self):
        X, y = small_data()
        est = ChestSoundSeparator(**TINY_PARAMS).fit(X, y)
        assert np.isfinite(est.score(X, y))

    def test_shape_validation(self):
        X, y = small_data()
        est = ChestSoundSeparator(**TINY_PARAMS)
        with pytest.raises(ShapeMismatch):
            est.fit(X, y[:, :1])  # single-source targets
        with pytest.raises(NonFiniteError):
            bad = X.copy()
            bad[0, 0] = np.nan
            est.fit(bad, y)

    def test_single_waveform_transform(self):
        X, y = small_data()
        est = ChestSoundSeparator(**TINY_PARAMS).fit(X, y)
        out = est.transform(X[0])
        assert out.shape == (1, 2, 1500)


class TestPersistence:
    def test_save_and_reload_transforms_identically(self, tmp_path):
        X, y = small_data()
        est = ChestSoundSeparator(**TINY_PARAMS).fit(X, y)
        path = tmp_path / "est.ckpt"
        est.save(path)
        loaded = ChestSoundSeparator.from_checkpoint(path)
        np.testing.assert_array_equal(loaded.transform(X), est.transform(X))
        assert loaded.get_params()["kernel_size"] == 64
