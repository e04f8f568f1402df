"""Smoke tests for the pybind11 module against the C++ core."""

import json
import math

import numpy as np
import pytest

import icaps


@pytest.fixture(scope="module")
def synth():
    images, labels, factors = icaps.make_synthetic(n=96, seed=3)
    return images, labels, factors


def test_make_synthetic_shapes_and_determinism(synth):
    images, labels, factors = synth
    assert images.shape == (96, 1, 16, 16)
    assert images.dtype == np.float32
    assert labels.shape == (96,)
    assert set(np.unique(labels)) == {0, 1}
    assert images.min() >= 0.0 and images.max() <= 1.0
    again, labels2, _ = icaps.make_synthetic(n=96, seed=3)
    np.testing.assert_array_equal(images, again)
    np.testing.assert_array_equal(labels, labels2)
    assert set(factors) == {"shape", "dx", "dy", "rotation", "thickness"}
    np.testing.assert_array_equal(factors["shape"].astype(np.int64), labels)


def test_dataset_roundtrip(tmp_path, synth):
    images, labels, _ = synth
    path = str(tmp_path / "d.icds")
    icaps.save_dataset(path, images, labels)
    loaded_images, loaded_labels = icaps.load_dataset(path)
    np.testing.assert_array_equal(images, loaded_images)
    np.testing.assert_array_equal(labels, loaded_labels)


def test_mutual_information_oracle():
    labels = [i % 2 for i in range(10000)]
    values = [float(y) for y in labels]
    assert icaps.mutual_information(values, labels, 20) == pytest.approx(math.log(2), abs=1e-9)


def test_model_forward_surfaces(synth):
    images, labels, _ = synth
    model = icaps.Model.from_config(icaps.default_config())
    pred, conf = model.predict(images[:8])
    assert pred.shape == (8,)
    assert np.all((conf >= 0) & (conf < 1))
    c = model.encode_concepts(images[:8])
    r = model.encode_residual(images[:8])
    assert c.shape == (8, 4)
    assert r.shape == (8, 8)
    gen = model.generate(c, r)
    assert gen.shape == (8, 1, 16, 16)
    assert np.isfinite(gen).all()
    grid, score = model.traversal(images[:1], steps=8)
    assert grid.shape == (4, 8, 1, 16, 16)
    assert 0.0 <= score <= 1.0
    record = model.explain(images[:1])
    assert 0.0 <= record["confidence"] < 1.0
    assert len(record["concepts"]) == 4


def test_train_and_checkpoint_roundtrip(tmp_path, synth):
    images, labels, _ = synth
    config = json.loads(icaps.default_config())
    config["train"] = {"epochs": 2, "batch_size": 16, "seed": 1}
    config["loss_weights"]["lgp"] = 0.0  # keep the smoke run quick
    steps = []
    model = icaps.train(json.dumps(config), images, labels, on_step=steps.append)
    assert steps and all(math.isfinite(s["margin"]) for s in steps)

    acc = model.accuracy(images, labels)
    assert 0.0 <= acc <= 1.0
    mi = model.mi_report(images, labels, bins=10)
    assert len(mi["mi_c"]) == 4 and len(mi["mi_r"]) == 8

    path = str(tmp_path / "m.icap")
    model.save(path)
    restored = icaps.Model.load(path)
    np.testing.assert_array_equal(
        model.encode_concepts(images[:4]), restored.encode_concepts(images[:4])
    )
    pred_a, _ = model.predict(images[:16])
    pred_b, _ = restored.predict(images[:16])
    np.testing.assert_array_equal(pred_a, pred_b)


def test_validation_errors_surface_as_python_exceptions():
    with pytest.raises(ValueError):
        icaps.Model.from_config("{\"model\": {\"unknown_key\": 1}}")
    with pytest.raises(IOError):
        icaps.Model.load("/no/such/checkpoint.icap")
