import hashlib
import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from copycat import model_zoo as mz
from copycat.data import LabelSource, Split, from_arrays
from copycat.errors import TrainingDivergedError, ValidationError

from conftest import toy_separable


def micro_spec(k=3, shape=(4, 4, 1)):
    return mz.ModelSpec("micro", mz.Arch.CUSTOM, shape, k, (mz.Dense(5), mz.ReLU(), mz.Dense(k)))


def test_build_model_deterministic():
    spec = mz.ModelSpec.create("SMALL", 10)
    assert mz.build_model(spec, 7).content_hash == mz.build_model(spec, 7).content_hash
    assert mz.build_model(spec, 7).content_hash != mz.build_model(spec, 8).content_hash


@pytest.mark.parametrize("k", [2, 3, 10, 100, 1000])
@pytest.mark.parametrize("shape", [(32, 32, 1), (32, 32, 3), (64, 48, 1), (16, 16, 3)])
def test_capacity_ordering(k, shape):
    big = mz.parameter_count(mz.ModelSpec.create("LARGE", k, shape))
    small = mz.parameter_count(mz.ModelSpec.create("SMALL", k, shape))
    assert big > small


def test_single_class_rejected():
    with pytest.raises(ValidationError):
        mz.ModelSpec.create("SMALL", 1)
    with pytest.raises(ValidationError):
        mz.ModelSpec("bad", "CUSTOM", (4, 4, 1), 1, (mz.Dense(1),))


def test_final_layer_must_emit_k_logits():
    with pytest.raises(ValidationError):
        mz.ModelSpec("bad", "CUSTOM", (4, 4, 1), 3, (mz.Dense(4),))
    spec = mz.ModelSpec.create("LARGE", 7)
    assert spec.shapes()[-1] == (7,)


def test_spec_roundtrip():
    spec = mz.ModelSpec.create("LARGE", 5, (32, 32, 3), subtract_mean=True)
    assert mz.ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_train_config_validation():
    for bad in ({"max_epochs": -1}, {"batch_size": 0}, {"lr": 0}, {"gamma": 0}, {"gamma": 1.5},
                {"loss": "MSE"}, {"step_size": 3, "step_epochs": 1}):
        with pytest.raises(ValidationError):
            mz.TrainConfig(**bad)


def test_toy_separable_is_fit(toy_data, toy_model):
    xs, ys, manifest = toy_data
    flat = np.stack([x.ravel() for x in xs])
    # the data are linearly separable: a plain logistic regression fits them
    assert LogisticRegression(max_iter=2000).fit(flat, ys).score(flat, ys) >= 0.95
    preds = mz.predict_labels(toy_model, np.stack([_resize(x, 16) for x in xs]))
    assert np.mean(preds == np.array(ys)) >= 0.95
    assert toy_model.epochs_completed == 5


def _resize(x, size):
    from copycat.data.images import to_model_input
    return to_model_input(x, (size, size, 1))


def test_train_rejects_empty_and_out_of_range():
    spec = mz.ModelSpec.create("SMALL", 2, (16, 16, 1))
    ckpt = mz.build_model(spec, 0)
    empty = from_arrays([], [], split=Split.ODD, label_source=LabelSource.OL, num_classes=2)
    with pytest.raises(ValidationError):
        mz.train(ckpt, empty, mz.TrainConfig(max_epochs=1))
    xs, _ = toy_separable(4)
    bad = from_arrays(xs, [0, 1, 2, 0], split=Split.PDD, label_source=LabelSource.SL)
    with pytest.raises(ValidationError):
        mz.train(ckpt, bad, mz.TrainConfig(max_epochs=1))


def test_train_reproducible(toy_data):
    _, _, manifest = toy_data
    spec = mz.ModelSpec.create("SMALL", 2, (16, 16, 1))
    cfg = mz.TrainConfig(max_epochs=2, seed=5)
    a = mz.train(mz.build_model(spec, 3), manifest, cfg)
    b = mz.train(mz.build_model(spec, 3), manifest, cfg)
    assert a.content_hash == b.content_hash
    assert a.content_hash != mz.train(mz.build_model(spec, 3), manifest, cfg.replace(seed=6)).content_hash


def test_divergence_detected(toy_data):
    _, _, manifest = toy_data
    spec = mz.ModelSpec.create("SMALL", 2, (16, 16, 1))
    with pytest.raises(TrainingDivergedError):
        mz.train(mz.build_model(spec, 0), manifest, mz.TrainConfig(max_epochs=3, lr=1e12, momentum=0.0))


def test_mean_layer_is_filled_from_training_data(toy_data):
    xs, _, manifest = toy_data
    spec = mz.ModelSpec.create("SMALL", 2, (16, 16, 1), subtract_mean=True)
    ckpt = mz.train(mz.build_model(spec, 0), manifest, mz.TrainConfig(max_epochs=1))
    mean = ckpt.module()[0].mean.numpy()
    expected = np.mean([_resize(x, 16) for x in xs], axis=0).transpose(2, 0, 1)
    np.testing.assert_allclose(mean, expected, atol=1e-5)


def test_softmax_normalized_and_in_range():
    rng = np.random.default_rng(0)
    for arch in ("SMALL", "LARGE"):
        ckpt = mz.build_model(mz.ModelSpec.create(arch, 10), 1)
        p = mz.predict_soft_batch(ckpt, rng.random((10, 32, 32, 1)).astype(np.float32))
        assert np.all(np.isfinite(p)) and p.min() >= 0 and p.max() <= 1
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-6)
        s = mz.predict_soft(ckpt, rng.random((32, 32, 1)))
        assert abs(s.probabilities.sum() - 1) <= 1e-6


def test_zero_output_layer_gives_uniform():
    spec = mz.ModelSpec.create("SMALL", 2)
    module = mz.build_module(spec)
    with torch.no_grad():
        module[-1].weight.zero_()
        module[-1].bias.zero_()
    ckpt = mz.checkpoint_from_module(spec, module)
    p = mz.predict_soft(ckpt, np.random.default_rng(0).random((32, 32, 1))).probabilities
    np.testing.assert_array_equal(p, [0.5, 0.5])


def test_shape_mismatch():
    ckpt = mz.build_model(mz.ModelSpec.create("SMALL", 3), 0)
    with pytest.raises(ValidationError):
        mz.predict_soft(ckpt, np.zeros((16, 16, 1)))
    with pytest.raises(ValidationError):
        mz.extract_features(ckpt, np.zeros((32, 32, 3)))


def test_features_nonnegative_and_deterministic(toy_model):
    rng = np.random.default_rng(3)
    a, b = rng.random((16, 16, 1)), rng.random((16, 16, 1))
    fa = mz.extract_features(toy_model, a)
    assert fa.min() >= 0
    np.testing.assert_array_equal(fa, mz.extract_features(toy_model, a))
    assert not np.array_equal(fa, mz.extract_features(toy_model, b))
    large = mz.build_model(mz.ModelSpec.create("LARGE", 10), 0)
    f = mz.extract_features(large, rng.random((32, 32, 1)))
    assert f.shape == (128,) and f.min() >= 0


def test_checkpoint_container_roundtrip(tmp_path, toy_model):
    path = tmp_path / "m.ckpt"
    mz.save_checkpoint(toy_model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"CCK1"
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    blob = raw[12 + n:]
    assert header["content_hash"] == hashlib.sha256(blob).hexdigest() == toy_model.content_hash
    # documented layout: first tensor is the first conv weight, float32 little-endian
    w0 = toy_model.module()[0].weight.detach().numpy()
    np.testing.assert_array_equal(np.frombuffer(blob[:w0.size * 4], "<f4").reshape(w0.shape), w0)
    back = mz.load_checkpoint(path)
    assert back.content_hash == toy_model.content_hash
    assert back.epochs_completed == toy_model.epochs_completed
    assert back.train_config == toy_model.train_config
    mz.save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == raw


def test_checkpoint_hash_tamper_detected(toy_model):
    with pytest.raises(ValidationError):
        mz.Checkpoint(toy_model.model_spec, toy_model.parameters, content_hash="0" * 64)


def _flat_params(module):
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def _set_flat(module, flat):
    pos = 0
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(flat[pos:pos + p.numel()].reshape(p.shape))
            pos += p.numel()


def gradient_check(module, x, y, h=1e-6):
    """Max relative error between autograd and central finite differences."""
    module.zero_grad()
    mz.batch_loss(module, x, y).backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in module.parameters()])
    theta = _flat_params(module)
    numeric = torch.zeros_like(theta)
    with torch.no_grad():
        for i in range(theta.numel()):
            for sign in (1, -1):
                t = theta.clone()
                t[i] += sign * h
                _set_flat(module, t)
                numeric[i] += sign * mz.batch_loss(module, x, y) / (2 * h)
    _set_flat(module, theta)
    denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=1e-8)
    return float(((analytic - numeric).abs() / denom).max())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed):
    torch.manual_seed(seed)
    module = mz.build_module(micro_spec()).double()
    x = torch.randn(3, 1, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    y = torch.tensor([0, 1, 2])
    assert gradient_check(module, x, y) <= 1e-4


def test_gradient_check_detects_wrong_gradient(monkeypatch):
    module = mz.build_module(micro_spec()).double()
    x = torch.randn(3, 1, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    y = torch.tensor([0, 1, 2])
    orig = mz.batch_loss

    def broken(m, xb, yb):
        w = m[1].weight
        # zero in value, but contributes 0.1 to every weight gradient
        return orig(m, xb, yb) + 0.1 * (w - w.detach()).sum()

    monkeypatch.setattr(mz, "batch_loss", broken)
    assert gradient_check(module, x, y) > 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_inference_is_pure(seed):
    spec = mz.ModelSpec.create("SMALL", 4)
    ckpt = mz.build_model(spec, seed % 97)
    img = np.random.default_rng(seed).random((32, 32, 1))
    np.testing.assert_array_equal(mz.predict_soft(ckpt, img).probabilities,
                                  mz.predict_soft(ckpt, img).probabilities)
