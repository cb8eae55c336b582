"""Smoke test for the Python bindings; values are checked against numpy."""

import math
import tempfile
from pathlib import Path

import numpy as np

import medlitenet as m


def arr(t):
    return np.asarray(t.tolist(), dtype=np.float64).reshape(t.shape)


def tensor(a):
    a = np.asarray(a, dtype=np.float32)
    return m.Tensor(list(a.shape), a.ravel().tolist())


def check_conv():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 7, 6))
    for i in range(7):
        for j in range(6):
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", xp[:, :, i:i + 3, j:j + 3], w) + b
    out = arr(m.conv2d(tensor(x), tensor(w), tensor(b)))
    assert np.abs(out - ref).max() < 1e-4, np.abs(out - ref).max()
    strided = m.conv2d(tensor(x), tensor(w), stride=2)
    assert strided.shape == [2, 4, 4, 3], strided.shape


def check_softmax():
    x = np.random.default_rng(1).normal(size=(3, 5))
    ref = np.exp(x - x.max(1, keepdims=True))
    ref /= ref.sum(1, keepdims=True)
    assert np.abs(arr(m.softmax(tensor(x), 1)) - ref).max() < 1e-6


def check_metrics_and_loss():
    image, mask = m.synth_sample(7, 64, "irregular")
    assert image.shape == [3, 64, 64] and mask.shape == [1, 64, 64]
    g = arr(mask).ravel()
    assert set(np.unique(g)) <= {0.0, 1.0} and 0 < g.mean() < 1
    p = np.roll(g, 5)
    r = m.confusion(tensor(p), mask)
    tp, fp, fn = (p * g).sum(), (p * (1 - g)).sum(), ((1 - p) * g).sum()
    assert (r["tp"], r["fp"], r["fn"]) == (tp, fp, fn)
    assert math.isclose(r["dice"], 2 * tp / (2 * tp + fp + fn), rel_tol=1e-12)
    assert math.isclose(r["dice"], 2 * r["iou"] / (1 + r["iou"]), rel_tol=1e-12)

    prob = np.clip(0.8 * g + 0.1, 0, 1).reshape(1, 1, 64, 64)
    q = np.clip(prob, 1e-7, 1 - 1e-7)
    gt = g.reshape(prob.shape)
    bce = -(gt * np.log(q) + (1 - gt) * np.log(1 - q)).mean()
    dice = 1 - (2 * (prob * gt).sum() + 1e-6) / (prob.sum() + gt.sum() + 1e-6)
    got = m.total_loss(tensor(prob), tensor(gt))
    assert abs(got - (0.5 * bce + 0.5 * dice)) < 1e-5, (got, bce, dice)


def check_schedule_and_ensemble():
    assert m.cosine_lr(0, 10, 1e-3, 1e-6) == 1e-3
    assert m.cosine_lr(10, 10, 1e-3, 1e-6) == 1e-6
    w = m.ensemble_weights([0.9, 0.8, 0.7])
    assert np.allclose(w, np.array([0.9, 0.8, 0.7]) / 2.4)


def check_model():
    model = m.Model("micro", seed=0)
    assert model.parameter_count() == sum(c for _, c in model.parameter_breakdown())
    assert m.Model("micro", width_multiplier=0.5).parameter_count() < model.parameter_count()
    image, _ = m.synth_sample(3, model.input_size)
    history = model.fit_synthetic(n_train=4, n_val=2, epochs=2, batch_size=2, seed=1)
    assert [h["epoch"] for h in history] == [0, 1]
    assert history[0]["lr"] == 1e-3 and all(math.isfinite(h["val_dice"]) for h in history)
    prob = model.predict(image)
    assert prob.shape == [1, 1, 64, 64]
    p = arr(prob)
    assert np.all((p >= 0) & (p <= 1))
    assert model.predict_tta(image).shape == prob.shape
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.ckpt"
        model.save(path)
        assert m.Model.load(path, ema=False).predict(image) == prob
    try:
        m.Model("micro").predict(m.Tensor.zeros([1, 3, 48, 64]))
    except ValueError as e:
        assert "32" in str(e)
    else:
        raise AssertionError("expected ValueError for a 48-pixel input")


def check_gradients():
    rows = m.gradcheck("ops")
    assert rows and all(ok for _, _, ok in rows), [r for r in rows if not r[2]]


if __name__ == "__main__":
    for check in [check_conv, check_softmax, check_metrics_and_loss, check_schedule_and_ensemble, check_model, check_gradients]:
        check()
        print(f"{check.__name__}: ok")
