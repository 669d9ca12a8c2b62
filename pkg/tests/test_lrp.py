import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings, strategies as st

from copycat import lrp, model_zoo as mz
from copycat.errors import UnsupportedLayerError, ValidationError


def linears(module):
    return [m for m in module if isinstance(m, torch.nn.Linear)]


def mlp(shape, widths, k, seed, bias=True):
    layers = []
    for w in widths:
        layers += [mz.Dense(w, bias=bias), mz.ReLU()]
    spec = mz.ModelSpec("mlp", mz.Arch.CUSTOM, shape, k, tuple(layers) + (mz.Dense(k, bias=bias),))
    ckpt = mz.build_model(spec, seed)
    if bias:
        module = ckpt.module()
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in module:
                if isinstance(m, torch.nn.Linear):
                    m.bias.copy_(torch.randn(m.bias.shape, generator=g) * 0.1)
        ckpt = mz.checkpoint_from_module(spec, module)
    return ckpt


def reference_lrp(ckpt, x, c, eps=lrp.EPSILON):
    """Loop version of the rule for dense/ReLU stacks.

    Bias shares go to every pixel at the first layer and to active units
    deeper in; shares of units with no active input are spread over all pixels.
    """
    mats = [(m.weight.detach().double().numpy(), None if m.bias is None else m.bias.detach().double().numpy())
            for m in ckpt.module() if isinstance(m, torch.nn.Linear)]
    a = [x.astype(np.float32).transpose(2, 0, 1).ravel().astype(np.float64)]  # inputs are float32 images
    for n, (w, b) in enumerate(mats):
        out = w @ a[-1] + (0 if b is None else b)
        a.append(np.maximum(out, 0) if n < len(mats) - 1 else out)
    r = np.zeros_like(a[-1])
    r[c] = a[-1][c]
    orphaned = 0.0
    for n in range(len(mats) - 1, -1, -1):
        w, b = mats[n]
        b = np.zeros(w.shape[0]) if b is None else b
        new = np.zeros_like(a[n])
        for j in range(w.shape[0]):
            z = float(w[j] @ a[n]) + b[j]
            denom = z + eps * (1 if z >= 0 else -1)
            eligible = [i for i in range(w.shape[1]) if n == 0 or a[n][i] != 0]
            if not eligible:
                orphaned += b[j] / denom * r[j]
            for i in range(w.shape[1]):
                share = b[j] / len(eligible) if i in eligible else 0.0
                new[i] += (a[n][i] * w[j, i] + share) / denom * r[j]
        r = new
    r = r + orphaned / r.size
    return r.reshape(x.shape[2], x.shape[0], x.shape[1]).sum(axis=0)


def test_single_dense_layer_is_contribution():
    ckpt = mlp((2, 2, 1), [], 2, seed=0, bias=False)
    w = linears(ckpt.module())[0].weight.detach().double().numpy()
    x = np.array([[0.25, 0.875], [0.5, 0.125]]).reshape(2, 2, 1)  # exact in float32
    h = lrp.relevance(ckpt, x, class_index=1)
    z = w[1] * x.ravel()
    expected = z * z.sum() / (z.sum() + lrp.EPSILON * np.sign(z.sum()))
    np.testing.assert_allclose(h.values.ravel(), expected, rtol=0, atol=1e-12)
    assert h.total == pytest.approx(h.explained_score, abs=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_matches_reference_implementation(seed):
    ckpt = mlp((3, 3, 1), [6, 4], 3, seed)
    x = np.random.default_rng(seed).random((3, 3, 1))
    for c in range(3):
        np.testing.assert_allclose(lrp.relevance(ckpt, x, c).values, reference_lrp(ckpt, x, c), atol=1e-10)


def test_relu_masks_dead_units():
    spec = mz.ModelSpec("m", mz.Arch.CUSTOM, (1, 2, 1), 2, (mz.Dense(2, bias=False), mz.ReLU(), mz.Dense(2, bias=False)))
    module = mz.build_module(spec)
    with torch.no_grad():
        first, second = linears(module)
        first.weight.copy_(torch.tensor([[1.0, 1.0], [-1.0, -1.0]]))  # second unit is dead for x >= 0
        second.weight.copy_(torch.tensor([[2.0, 5.0], [1.0, 1.0]]))
    ckpt = mz.checkpoint_from_module(spec, module)
    h = lrp.relevance(ckpt, np.array([0.25, 0.75]).reshape(1, 2, 1), class_index=0)
    # only the live unit carries relevance, split 1:3 like the inputs
    np.testing.assert_allclose(h.values.ravel(), [0.5, 1.5], atol=1e-5)


def test_zero_input_gives_zero_map():
    ckpt = mlp((4, 4, 1), [5], 2, seed=2, bias=False)
    h = lrp.relevance(ckpt, np.zeros((4, 4, 1)))
    assert np.all(h.values == 0)


@pytest.mark.parametrize("arch", ["SMALL", "LARGE"])
def test_conservation_on_cnns(arch):
    rng = np.random.default_rng(7)
    for seed in range(4):
        ckpt = mz.build_model(mz.ModelSpec.create(arch, 10, subtract_mean=False), seed)
        x = rng.random((32, 32, 1))
        h = lrp.relevance(ckpt, x)
        assert abs(h.total - h.explained_score) <= 1e-3 * abs(h.explained_score) + 1e-6
        assert h.explained_class == int(np.argmax(mz.predict_logits_batch(ckpt, x[None].astype(np.float32))[0]))


def test_conservation_on_zero_background():
    """Conv units over an all-zero patch output pure bias; that relevance must still reach the input."""
    ckpt = mz.build_model(mz.ModelSpec.create("SMALL", 10), 3)
    module = ckpt.module()
    with torch.no_grad():
        for m in module:
            if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
                m.bias.fill_(0.2)
    ckpt = mz.checkpoint_from_module(ckpt.model_spec, module)
    x = np.zeros((32, 32, 1), dtype=np.float32)
    x[10:20, 12:16] = 1.0
    for c in range(10):
        h = lrp.relevance(ckpt, x, c)
        assert abs(h.total - h.explained_score) <= 1e-3 * abs(h.explained_score) + 1e-6
    h = lrp.relevance(ckpt, np.zeros((32, 32, 1)))
    assert abs(h.total - h.explained_score) <= 1e-3 * abs(h.explained_score) + 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 2))
def test_conservation_property(seed, c):
    ckpt = mlp((3, 4, 1), [7, 5], 3, seed % 50)
    x = np.random.default_rng(seed).random((3, 4, 1))
    # the rule loses eps/|z_j| of what passes through unit j, so keep clear of z_j ~ 0
    assume(min_abs_preactivation(ckpt, x) >= 1e-2)
    h = lrp.relevance(ckpt, x, c)
    np.testing.assert_allclose(h.values.ravel(), np.ravel(reference_lrp(ckpt, x, c)), atol=1e-9)
    assert abs(h.total - h.explained_score) <= 1e-3 * abs(h.explained_score) + 1e-6


def min_abs_preactivation(ckpt, x):
    a = torch.as_tensor(x, dtype=torch.float32).permute(2, 0, 1)[None]
    smallest = np.inf
    with torch.no_grad():
        for m in ckpt.module():
            a = m(a)
            if isinstance(m, torch.nn.Linear):
                smallest = min(smallest, float(a.abs().min()))
    return smallest


def test_class_index_validated():
    ckpt = mlp((2, 2, 1), [], 2, seed=0)
    with pytest.raises(ValidationError):
        lrp.relevance(ckpt, np.zeros((2, 2, 1)), class_index=2)


def test_unsupported_layer(monkeypatch):
    ckpt = mlp((2, 2, 1), [], 2, seed=0)
    seq = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(4, 2), torch.nn.Tanh())
    monkeypatch.setattr(type(ckpt), "module", lambda self: seq)
    with pytest.raises(UnsupportedLayerError):
        lrp.relevance(ckpt, np.zeros((2, 2, 1)))


def test_cosine_similarity_cases():
    a = np.array([[1.0, -2.0], [0.5, 3.0]])
    assert lrp.cosine_similarity(a, a) == pytest.approx(1.0)
    assert lrp.cosine_similarity(a, -a) == pytest.approx(-1.0)
    assert lrp.cosine_similarity(a, 3 * a) == pytest.approx(1.0)
    assert lrp.cosine_similarity(np.zeros(4), np.zeros(4)) == 1.0
    assert lrp.cosine_similarity(np.zeros(4), np.ones(4)) == 0.0


@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.lists(st.floats(-10, 10), min_size=4, max_size=4))
def test_cosine_symmetric_and_bounded(a, b):
    s = lrp.cosine_similarity(a, b)
    assert s == lrp.cosine_similarity(b, a) and -1.0 <= s <= 1.0


def test_compare_self_and_agreement(toy_model):
    x = np.random.default_rng(0).random((16, 16, 1))
    cmp = lrp.compare(toy_model, toy_model, x, truth=int(mz.predict_labels(toy_model, x[None])[0]))
    assert cmp.similarity == pytest.approx(1.0) and cmp.agreement is lrp.Agreement.BOTH_CORRECT
    wrong = 1 - cmp.target.explained_class
    assert lrp.compare(toy_model, toy_model, x, wrong).agreement is lrp.Agreement.BOTH_WRONG
    other = mz.build_model(mz.ModelSpec.create("SMALL", 3, (16, 16, 1)), 0)
    with pytest.raises(ValidationError):
        lrp.compare(toy_model, other, x, 0)


def test_export_roundtrip(tmp_path, toy_model):
    h = lrp.relevance(toy_model, np.random.default_rng(1).random((16, 16, 1)), image_ref="img-1")
    lrp.export_heatmap(h, str(tmp_path / "hm"))
    raw = (tmp_path / "hm.f32").read_bytes()
    assert len(raw) == 16 * 16 * 4
    values, meta = lrp.read_heatmap(str(tmp_path / "hm"))
    np.testing.assert_array_equal(values, h.values.astype("<f4"))
    assert meta["shape"] == [16, 16] and meta["source_checkpoint"] == toy_model.content_hash
    assert meta["image_ref"] == "img-1" and meta["explained_class"] == h.explained_class


def test_trained_copy_is_closer_than_random(toy_model, toy_data):
    """A model trained on the same task should explain like the original more than a random net does."""
    from copycat.data.images import to_model_input
    xs, ys, manifest = toy_data
    twin = mz.train(mz.build_model(toy_model.model_spec, 9), manifest, mz.TrainConfig(max_epochs=5, seed=2))
    rand = mz.build_model(toy_model.model_spec, 10)
    trained, random_ = [], []
    for x, y in zip(xs[:20], ys[:20]):
        x = to_model_input(x, (16, 16, 1))
        trained.append(lrp.compare(toy_model, twin, x, y).similarity)
        random_.append(lrp.compare(toy_model, rand, x, y).similarity)
    assert np.mean(trained) > np.mean(random_)


def test_dead_units_carry_no_bias_share():
    spec = mz.ModelSpec("m", mz.Arch.CUSTOM, (1, 2, 1), 2, (mz.Dense(2), mz.ReLU(), mz.Dense(2)))
    module = mz.build_module(spec)
    with torch.no_grad():
        first, second = linears(module)
        first.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, -1.0]]))  # unit 1 sees only pixel 1 and is dead
        first.bias.zero_()
        second.weight.copy_(torch.tensor([[2.0, 5.0], [1.0, 1.0]]))
        second.bias.copy_(torch.tensor([0.5, 0.0]))
    ckpt = mz.checkpoint_from_module(spec, module)
    h = lrp.relevance(ckpt, np.array([0.5, 0.75]).reshape(1, 2, 1), class_index=0)
    # logit 2 * 0.5 + 0.5 = 1.5, all of it through the live unit to pixel 0
    np.testing.assert_allclose(h.values.ravel(), [1.5, 0.0], atol=1e-5)
