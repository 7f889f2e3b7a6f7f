import hypothesis
import numpy as np
import pytest

from capsnet_lstm.tensor import seeded_rng

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return seeded_rng(1234)


def naive_conv2d(x, k, b, stride=1, pad=(0, 0, 0, 0)):
    """Direct seven-loop cross-correlation on an explicitly zero-padded copy."""
    top, bottom, left, right = pad
    h, w, cin = x.shape
    xp = np.zeros((h + top + bottom, w + left + right, cin))
    xp[top:top + h, left:left + w] = x
    kh, kw, _, cout = k.shape
    ho = (xp.shape[0] - kh) // stride + 1
    wo = (xp.shape[1] - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = 0.0 if b is None else b[o]
                for di in range(kh):
                    for dj in range(kw):
                        for c in range(cin):
                            acc += xp[i * stride + di, j * stride + dj, c] * k[di, dj, c, o]
                out[i, j, o] = acc
    return out


def layer_grad_error(layer, x, seed=0, coords=None):
    """Max FD relative error of ``sum(w * layer(x))`` w.r.t. the input and every parameter."""
    from capsnet_lstm.tensor import grad_check

    layer.cast(np.float64)
    w = seeded_rng(seed).normal(size=layer.forward(x).shape)

    def run(v):
        layer.zero_grad()
        out = layer.forward(v)
        return float(np.sum(out * w)), layer.backward(w)

    errors = [grad_check(run, x, coords=coords)]
    for key in list(layer.params):
        def run_param(v, key=key):
            saved = layer.params[key]
            layer.params[key] = v
            try:
                layer.zero_grad()
                out = layer.forward(x)
                layer.backward(w)
                return float(np.sum(out * w)), layer.grads[key].copy()
            finally:
                layer.params[key] = saved

        errors.append(grad_check(run_param, layer.params[key].copy(), coords=coords))
    return max(errors)


def full_model_grad_error(coords=20):
    """FD check of the scaled-down model's loss w.r.t. every parameter tensor (f64, B=2).

    Weights are scaled x2 from the seeded init so that hidden pre-activations sit
    well away from the ReLU kinks relative to the FD step.
    """
    from capsnet_lstm.model import build_model, preset
    from capsnet_lstm.tensor import grad_check
    from capsnet_lstm.training import one_hot

    model = build_model(preset("scaled-down"), dtype=np.float64)
    for layer in model.layers:
        for key in layer.params:
            layer.params[key] *= 2.0
    x = seeded_rng(100).uniform(0, 1, size=(2,) + model.input_shape)
    y = one_hot([0, 1], 2, np.float64)
    worst = {}
    for layer in model.layers:
        for key in list(layer.params):
            def run(v, layer=layer, key=key):
                saved = layer.params[key]
                layer.params[key] = v
                try:
                    model.zero_grad()
                    loss = model.backward(x, y)
                    return loss, layer.grads[key].copy()
                finally:
                    layer.params[key] = saved

            worst[f"{layer.name}/{key}"] = grad_check(run, layer.params[key].copy(), coords=coords)
    return worst


def pair_count_auc(scores, labels):
    """O(N^2) pair counting in exact rationals, rounded once to the nearest float."""
    from fractions import Fraction

    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    if not pos or not neg:
        return None
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return float(wins / (len(pos) * len(neg)))


def random_auc_case(seed):
    """Seeded score/label set of size <= 100 with frequent ties."""
    rng = seeded_rng(seed)
    n = int(rng.integers(2, 101))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    levels = int(rng.integers(2, 12)) if seed % 2 == 0 else 10_000
    scores = rng.integers(0, levels, size=n) / levels
    return scores, labels


def trained_localisation_model():
    """Toy spatially aligned detector trained on 32 planted-pattern clips."""
    from capsnet_lstm.data import ArrayClips, planted_clips
    from capsnet_lstm.loop import TrainConfig, train_loop
    from capsnet_lstm.model import build_localisation_model

    x, y, _ = planted_clips(32, seed=11)
    model = build_localisation_model(seed=0)
    train_loop(model, ArrayClips(x.astype(np.float32) / 255, y), None, TrainConfig(epochs=30, lr=1e-2, seed=11))
    return model


def localisation_trials(model, seeds=range(1000, 1010)):
    """For each seed, whether the FAKE-class heatmap peak falls inside the planted patch."""
    from capsnet_lstm.data import planted_clips
    from capsnet_lstm.explain import gradcam

    hits, maps = [], []
    for seed in seeds:
        x, _, corners = planted_clips(2, seed=seed)
        heat = gradcam(model, x[1].astype(np.float32) / 255, 1, "conv1")
        r, c = np.unravel_index(np.argmax(heat.upsampled), heat.upsampled.shape)
        r0, c0 = corners[1]
        hits.append(bool(r0 <= r < r0 + 8 and c0 <= c < c0 + 8))
        maps.append(heat)
    return hits, maps
