import numpy as np
import pytest

from lvadsim.estimator.model import CnnModel, reference_layers
from lvadsim.estimator.train import (
    TrainConfig,
    dataset_digest,
    kfold_split,
    load_dataset,
    save_dataset,
    train,
)
from lvadsim.estimator.windows import (
    WINDOW,
    WindowUnavailable,
    cycle_windows,
    detect_flow_peak,
    extract_window,
)


def pulsatile(n=2000, period=200, phase=0):
    t = np.arange(n)
    return 5 + 2 * np.sin(2 * np.pi * (t - phase) / period)


def test_reference_stack_shapes():
    m = CnnModel.reference()
    shape = (1, WINDOW)
    seen = []
    for layer in m.layers:
        shape = layer.output_shape(shape)
        seen.append(shape)
    convs = [layer.spec() for layer in m.layers if layer.kind == "conv"]
    assert [(c["kernel"], c["filters"]) for c in convs] == [(30, 3), (20, 3), (10, 5), (7, 10), (7, 10), (5, 10),
                                                           (3, 10), (3, 10)]
    assert sum(layer.kind == "pool" for layer in m.layers) == 2
    assert [layer.spec()["units"] for layer in m.layers if layer.kind == "dense"] == [100, 20, 1]
    assert shape == (1,)


def test_too_short_input_rejected():
    with pytest.raises(ValueError):
        reference_layers(input_length=50)


def test_inference_is_deterministic_and_save_roundtrip(tmp_path):
    m = CnnModel.reference(input_mean=5.0, input_std=2.0).init(3)
    w = np.stack([pulsatile(WINDOW, phase=p) for p in range(4)])
    a = m.predict(w)
    np.testing.assert_array_equal(a, m.predict(w))
    m.save(tmp_path / "m.json")
    back = CnnModel.load(tmp_path / "m.json")
    np.testing.assert_allclose(back.predict(w), a, rtol=1e-12)
    assert back.digest() == m.digest()


def test_corrupt_model_rejected(tmp_path):
    d = CnnModel.reference().init(0).to_dict()
    d["version"] = 99
    with pytest.raises(ValueError):
        CnnModel.from_dict(d)
    d = CnnModel.reference().init(0).to_dict()
    d["layers"][0]["params"]["W"]["shape"] = [3, 1, 29]
    d["layers"][0]["params"]["W"]["data"] = d["layers"][0]["params"]["W"]["data"][:87]
    with pytest.raises(ValueError):
        CnnModel.from_dict(d)


def test_wrong_window_length_rejected():
    with pytest.raises(ValueError):
        CnnModel.reference().init(0).predict(np.zeros((1, 599)))


def synthetic(n=64, seed=0):
    rng = np.random.default_rng(seed)
    amp = rng.uniform(0.5, 3.0, n)
    t = np.arange(WINDOW)
    w = 4 + amp[:, None] * np.sin(2 * np.pi * t / 150)[None, :]
    return w, 4.0 * amp + 2.0


def test_training_reduces_loss_and_is_seed_deterministic():
    w, y = synthetic()
    cfg = TrainConfig(iterations=30, batch_size=32, learning_rate=3e-3, seed=5, dtype="float64")
    m1, c1 = train(w, y, cfg)
    m2, c2 = train(w, y, cfg)
    assert m1.digest() == m2.digest()
    np.testing.assert_array_equal(c1, c2)
    assert np.mean(c1[-5:]) < np.mean(c1[:5])
    m3, _ = train(w, y, TrainConfig(iterations=30, batch_size=32, learning_rate=3e-3, seed=6, dtype="float64"))
    assert m3.digest() != m1.digest()


def test_batch_size_capped_at_dataset_size():
    w, y = synthetic(n=10)
    m, curve = train(w, y, TrainConfig(iterations=2, batch_size=1102))
    assert len(curve) == 2 and m.meta["n_train"] == 10


def test_train_rejects_bad_input():
    with pytest.raises(ValueError):
        train(np.zeros((0, WINDOW)), np.zeros(0), TrainConfig(iterations=1))
    w, y = synthetic(n=4)
    y[0] = np.nan
    with pytest.raises(ValueError):
        train(w, y, TrainConfig(iterations=1))


def test_kfold_is_patient_disjoint_and_covering():
    groups = np.repeat(np.arange(20), 7)
    folds = kfold_split(groups, 10, seed=1)
    assert len(folds) == 10
    seen = np.concatenate([va for _, va in folds])
    assert sorted(seen.tolist()) == list(range(len(groups)))
    for tr, va in folds:
        assert not set(groups[tr]) & set(groups[va])
        assert len(set(groups[va])) == 2
    assert [v.tolist() for _, v in folds] == [v.tolist() for _, v in kfold_split(groups, 10, seed=1)]
    with pytest.raises(ValueError):
        kfold_split(np.arange(5), 10)


def test_dataset_roundtrip(tmp_path):
    ds = {"windows": np.ones((3, WINDOW)), "labels": np.array([1.0, 2.0, 3.0]), "patient": np.array([0, 0, 1]),
          "scenario": np.array([0, 1, 2]), "speed": np.full(3, 2000.0), "cycle": np.arange(3)}
    save_dataset(tmp_path / "d.npz", **ds)
    back = load_dataset(tmp_path / "d.npz")
    assert dataset_digest(back) == dataset_digest(ds)
    with pytest.raises(ValueError):
        save_dataset(tmp_path / "e.npz", windows=ds["windows"])


def test_peak_detection_and_refractory():
    flow = pulsatile(1000, period=200)
    peak = detect_flow_peak(flow, 1.0, start=800)
    assert peak == 850
    assert detect_flow_peak(flow, 1.0, start=800, previous_peak=850) is None or \
        detect_flow_peak(flow, 1.0, start=800, previous_peak=850) >= 950
    assert detect_flow_peak(np.full(400, 3.0), 1.0) is None
    with pytest.raises(ValueError):
        detect_flow_peak(flow, 0.0)


def test_window_extraction():
    flow = np.arange(1000.0)
    w = extract_window(flow, 999)
    assert w.shape == (WINDOW,) and w[-1] == 999 and w[0] == 400
    with pytest.raises(WindowUnavailable):
        extract_window(flow, 100)


def test_cycle_windows_labels_follow_onsets():
    flow = pulsatile(2000, period=200)
    onsets = list(range(0, 2001, 200))
    pre = [float(k) for k in range(len(onsets))]
    items = cycle_windows(flow, onsets, pre)
    assert [k for _, _, k in items] == list(range(3, 10))
    for w, y, k in items:
        assert y == float(k) and w.shape == (WINDOW,)
