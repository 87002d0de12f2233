import numpy as np
import pytest

import neurofuse as nf


def test_otsu_splits_a_bimodal_image():
    img = np.zeros((20, 20), np.uint8)
    img[:, 10:] = 200
    t = nf.otsu_threshold(img)
    assert 0 <= t < 200


def test_preprocess_output_size_and_rgb_input():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (50, 70, 3), dtype=np.uint8)
    out = nf.preprocess(img, out_size=32, roi=False)
    assert out.shape == (32, 32)
    assert out.dtype == np.uint8
    assert nf.clahe(img[:, :, 0]).shape == (50, 70)
    with pytest.raises(ValueError):
        nf.preprocess(np.zeros((2, 2, 2), np.uint8))


def test_gbdt_round_trip_and_metrics():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 4))
    y = (x[:, 0] > 0).astype(np.int32) + (x[:, 1] > 1).astype(np.int32)
    model = nf.gbdt_fit(x, y, rounds=20, max_depth=3, num_classes=3)
    p = model.predict_proba(x)
    assert p.shape == (60, 3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert nf.TreeEnsemble.from_bytes(model.to_bytes()) == model
    report = nf.evaluate_scores(p, y)
    assert report["accuracy"] > 0.9
    assert report["confusion"].sum() == 60


def test_quantize_tensor_error_bound():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 3, 2, 5)).astype(np.float32)
    q, scales = nf.quantize_tensor(w, per_channel=True, axis=3)
    assert q.dtype == np.int8 and scales.shape == (5,)
    assert np.all(np.abs(w - q * scales) <= scales / 2 + 1e-7)


def test_train_predict_explain(tmp_path):
    manifest = nf.synth(str(tmp_path / "data"), seed=3, per_class=10)
    summary = nf.train(manifest, str(tmp_path / "run"), epochs=1, seed=3)
    assert summary["trainable_params"] == 74259
    assert len(summary["train_loss"]) == 1

    run = nf.Run.open(str(tmp_path / "run"))
    assert run.class_names == ["c0_small", "c1_medium", "c2_large"]
    assert not run.has_head
    run.fit_head(rounds=5)
    assert run.has_head

    image = str(tmp_path / "data" / "images" / "c2_large" / "0000.png")
    p = run.predict([image])
    assert p.shape == (1, 3)
    cls, heat = run.grad_cam(image, class_index=2)
    assert cls == 2 and heat.shape == (64, 64)
    assert heat.min() >= 0 and heat.max() <= 1
    assert run.evaluate("test")["confusion"].sum() == 6

    size = run.quantize(str(tmp_path / "model.q8"))
    assert size["ratio"] > 3
    quantized = nf.Run.open(str(tmp_path / "run"), str(tmp_path / "model.q8"))
    assert quantized.predict([image]).shape == (1, 3)
