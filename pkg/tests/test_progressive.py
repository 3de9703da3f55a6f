import json

import numpy as np
import pytest

import progretinex.progressive as prog
from progretinex.networks import TrainConfig, TrainingError, predict
from progretinex.progressive import (
    ProgressiveConfig,
    StageModels,
    _grid_to_image,
    cascade,
    infer_maps,
    infer_patch,
    load_stage_models,
    save_stage_models,
    train_progressive,
    window_layout,
    with_feedback,
)

QUICK = TrainConfig(iterations=20, batch_size=8, seed=5, log_every=10)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    low = rng.random((24, 3, 32, 32)).astype(np.float32)
    return low, rng.random(24), rng.random(24) * 0.1


@pytest.fixture(scope="module")
def trained(data):
    return train_progressive(*data, QUICK, ProgressiveConfig(k_iterations=2), baseline=True, sanity=False)


def test_config_validation():
    assert ProgressiveConfig().k_iterations == 4 and ProgressiveConfig().stride == 16
    for bad in ({"k_iterations": 0}, {"k_iterations": 9}, {"patch_size": 16}, {"stride": 0}, {"stride": 40}):
        with pytest.raises(ValueError):
            ProgressiveConfig(**bad)


def test_with_feedback_broadcasts():
    low = np.zeros((2, 3, 32, 32))
    x = with_feedback(low, [0.25, 0.5])
    assert x.shape == (2, 4, 32, 32)
    assert np.all(x[0, 3] == 0.25) and np.all(x[1, 3] == 0.5)


def test_stage_layout(trained):
    models, curves = trained
    assert models.k == 2 and len(models.im) == len(models.nm) == 2
    assert models.baseline_nm is not None
    assert list(curves) == ["IM1", "NM1", "IM2", "NM2", "NM0"]


def test_feedback_chain(data, monkeypatch):
    seen = []
    real_train = prog.train

    def spy(net, inputs, targets, cfg, params=None, label=""):
        seen.append((label, inputs[:, 3].copy(), np.asarray(targets).copy()))
        return real_train(net, inputs, targets, cfg, params, label)

    monkeypatch.setattr(prog, "train", spy)
    low, t, sigma = data
    models, _ = train_progressive(low, t, sigma, QUICK, ProgressiveConfig(k_iterations=2), sanity=False)
    fb = {label: channel for label, channel, _ in seen}
    tg = {label: target for label, _, target in seen}
    assert not fb["IM1"].any()
    t1 = predict(models.im_net, models.im[0], with_feedback(low, np.zeros(len(low))))
    np.testing.assert_allclose(fb["NM1"][:, 0, 0], t1, rtol=1e-6)
    assert np.all(fb["NM1"] == fb["NM1"][:, :1, :1])
    s1 = predict(models.nm_net, models.nm[0], with_feedback(low, t1))
    np.testing.assert_allclose(fb["IM2"][:, 0, 0], s1, rtol=1e-6)
    np.testing.assert_array_equal(tg["IM1"], t)
    np.testing.assert_array_equal(tg["NM2"], sigma)


def test_adding_a_stage_keeps_earlier_answers(data, trained):
    models, _ = trained
    one, _ = train_progressive(*data, QUICK, ProgressiveConfig(k_iterations=1), sanity=False)
    for name in one.im[0]:
        np.testing.assert_array_equal(one.im[0][name].weights, models.im[0][name].weights)
    low = data[0]
    a = cascade(models, low, 1)
    b = cascade(models.truncated(1), low, 1)
    c = cascade(one, low, 1)
    for x, y, z in zip(a, b, c):
        np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(x, z)
    t_hat, s_hat = infer_patch(models, low[3], 2)
    assert isinstance(t_hat, float) and isinstance(s_hat, float)
    assert (t_hat, s_hat) == infer_patch(models, low[3:4], 2)


def test_k0_uses_baseline(data, trained):
    models, _ = trained
    low = data[0]
    t0, s0 = cascade(models, low, 0)
    zeros = with_feedback(low, np.zeros(len(low)))
    np.testing.assert_array_equal(t0, predict(models.im_net, models.im[0], zeros))
    np.testing.assert_array_equal(s0, predict(models.nm_net, models.baseline_nm, zeros))
    with pytest.raises(ValueError):
        cascade(StageModels(models.im, models.nm), low, 0)
    with pytest.raises(ValueError):
        cascade(models, low, 3)


def test_sanity_failure_names_stage(data, monkeypatch):
    monkeypatch.setattr(prog, "SANITY_LOSS", 0.0)
    with pytest.raises(TrainingError, match="IM1"):
        train_progressive(*data, QUICK, ProgressiveConfig(k_iterations=1))


def test_window_layout_129():
    ys, xs = window_layout(129, 129)
    assert ys == xs == [0, 16, 32, 48, 64, 80, 97]


def test_grid_interpolation():
    # a linear ramp across window centres stays linear between them, flat outside
    ys, xs = [0, 16], [0, 16, 32]
    grid = np.array([[0.0, 1.0, 2.0], [0.0, 1.0, 2.0]])
    img = _grid_to_image(grid, ys, xs, 48, 64, 32)
    cx = np.array(xs) + 15.5
    np.testing.assert_allclose(img[0, 16:48], (np.arange(16, 48) - cx[0]) / 16, atol=1e-12)
    assert np.all(img[:, :16] == 0.0) and np.all(img[:, 48:] == 2.0)
    np.testing.assert_allclose(_grid_to_image(np.full((2, 3), 0.3), ys, xs, 48, 64, 32), 0.3)


def test_infer_maps_ranges(trained):
    models, _ = trained
    image = np.random.default_rng(3).random((3, 129, 129))
    illum, noise = infer_maps(models, image, k=2)
    assert illum.shape == noise.shape == (129, 129)
    assert illum.min() >= 1e-3 and illum.max() <= 1 and noise.min() >= 0 and noise.max() <= 1
    again = infer_maps(models, image, k=2)
    np.testing.assert_array_equal(illum, again[0])
    with pytest.raises(ValueError):
        infer_maps(models, image[:, :20, :])


def test_save_load_roundtrip(tmp_path, trained, data):
    models, _ = trained
    written = save_stage_models(tmp_path, models, ProgressiveConfig(k_iterations=2))
    assert sorted(p.name for p in written) == ["im_stage1.prtx", "im_stage2.prtx", "nm_stage0.prtx",
                                               "nm_stage1.prtx", "nm_stage2.prtx"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["k"] == 2 and manifest["stride"] == 16 and manifest["patch_size"] == 32
    assert manifest["seed"] == QUICK.seed and manifest["baseline"] is True
    loaded, cfg = load_stage_models(tmp_path)
    assert cfg.k_iterations == 2
    for k in (0, 1, 2):
        for a, b in zip(cascade(models, data[0], k), cascade(loaded, data[0], k)):
            np.testing.assert_array_equal(a, b)


def test_load_rejects_swapped_files(tmp_path, trained):
    models, _ = trained
    save_stage_models(tmp_path, models)
    (tmp_path / "im_stage1.prtx").write_bytes((tmp_path / "nm_stage1.prtx").read_bytes())
    with pytest.raises(ValueError):
        load_stage_models(tmp_path)
