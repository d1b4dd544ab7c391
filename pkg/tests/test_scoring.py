import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inpforge.data import build_splits, inject_anomaly
from inpforge.errors import ContractError
from inpforge.inp import INPFormer
from inpforge.pipeline import class_mean, per_class_reports, predict_maps, report, score_samples
from inpforge.scoring import anomaly_map, image_score, upsample_bilinear, zero_shot_distance_map
from inpforge.tensor import Tensor
from inpforge.train import train

from conftest import tiny_config, tiny_data


def _groups(rng, cfg, n_groups=2):
    return [Tensor(rng.standard_normal((cfg.num_tokens, cfg.embed_dim))) for _ in range(n_groups)]


def test_anomaly_map_zero_when_decoder_matches(rng):
    cfg = tiny_config()
    enc = _groups(rng, cfg)
    amap = anomaly_map(enc, [Tensor(e.data.copy()) for e in enc], cfg)
    assert amap.shape == (16, 16)
    np.testing.assert_allclose(amap, 0.0, atol=1e-6)


def test_anomaly_map_zero_under_positive_token_scaling(rng):
    cfg = tiny_config()
    enc = _groups(rng, cfg)
    scale = rng.uniform(0.2, 5.0, size=(cfg.num_tokens, 1))
    amap = anomaly_map(enc, [Tensor(e.data * scale) for e in enc], cfg)
    np.testing.assert_allclose(amap, 0.0, atol=1e-6)


def test_single_corrupted_token_is_localized(rng):
    cfg = tiny_config()
    enc = _groups(rng, cfg)
    dec = [Tensor(e.data.copy()) for e in enc]
    token = 9  # grid row 2, column 1 -> pixels [8:12, 4:8]
    for d in dec:
        d.data[token] = -d.data[token]
    amap = anomaly_map(enc, dec, cfg, smooth_map=False)
    r, c = np.unravel_index(np.argmax(amap), amap.shape)
    assert 8 <= r < 12 and 4 <= c < 8


def test_group_average_matches_independent_maps(rng):
    cfg = tiny_config()
    enc, dec = _groups(rng, cfg), _groups(rng, cfg)
    per_group = [anomaly_map([e], [d], cfg) for e, d in zip(enc, dec)]
    np.testing.assert_allclose(anomaly_map(enc, dec, cfg), np.mean(per_group, axis=0), atol=1e-12)


def test_upsample_constant_and_shape():
    out = upsample_bilinear(np.full((4, 4), 0.25), 16)
    assert out.shape == (16, 16)
    np.testing.assert_allclose(out, 0.25)


def test_image_score_one_percent_ones():
    m = np.zeros((20, 20))
    m.flat[[3, 77, 150, 399]] = 1.0  # 4 of 400 pixels
    assert image_score(m) == 1.0


def test_image_score_constant():
    assert image_score(np.full((10, 10), 0.37)) == pytest.approx(0.37, abs=1e-15)


def test_image_score_matches_full_sort(rng):
    m = rng.uniform(size=(20, 20))
    count = max(1, math.floor(0.01 * 400))
    assert image_score(m) == math.fsum(np.sort(m.reshape(-1))[::-1][:count].tolist()) / count
    top = rng.uniform(0.01, 1.0)
    k = max(1, math.floor(top * 400))
    assert image_score(m, top) == pytest.approx(np.sort(m.reshape(-1))[::-1][:k].mean(), abs=1e-14)


def test_image_score_small_map_uses_at_least_one_pixel():
    assert image_score(np.array([[0.1, 0.9]])) == 0.9


@pytest.mark.parametrize("bad", [0.0, -0.5, 1.01])
def test_image_score_fraction_contract(bad):
    with pytest.raises(ContractError):
        image_score(np.ones((4, 4)), bad)


def test_image_score_empty_map():
    with pytest.raises(ContractError):
        image_score(np.zeros((0, 0)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.005, 1.0))
def test_image_score_monotone(seed, frac):
    rng = np.random.default_rng(seed)
    m = rng.uniform(size=(12, 12))
    bumped = m.copy()
    bumped.flat[int(rng.integers(144))] += rng.uniform(0, 1)
    assert image_score(bumped, frac) >= image_score(m, frac)


@pytest.fixture(scope="module")
def trained_tiny():
    cfg = tiny_config(epochs=25, batch_size=6)
    dcfg = tiny_data(classes=(0,), train_per_class=12)
    splits = build_splits(dcfg)
    model = INPFormer(cfg)
    train(model, np.stack([s.image for s in splits["train"]]))
    return model, splits, dcfg


def test_zero_shot_map_shape_and_range(trained_tiny):
    model, splits, _ = trained_tiny
    images = np.stack([s.image for s in splits["test"]])
    maps = zero_shot_distance_map(images, model)
    assert maps.shape == (len(images), 16, 16)
    assert np.isfinite(maps).all()
    assert maps.min() >= 0.0 and maps.max() <= 2.0


def test_zero_shot_distance_rises_with_injected_anomaly(trained_tiny):
    model, splits, dcfg = trained_tiny
    for i, normal in enumerate(splits["train"][:4]):
        bad = inject_anomaly(normal, 100 + i, dcfg, kind="scratch")
        d_normal = zero_shot_distance_map(normal.image[None], model, smooth_map=False).mean()
        d_bad = zero_shot_distance_map(bad.image[None], model, smooth_map=False).mean()
        assert d_normal <= d_bad


def test_scored_samples_and_reports(trained_tiny):
    model, splits, _ = trained_tiny
    scored = score_samples(model, splits["test"])
    for s in scored:
        assert np.isfinite(s.pixel_map).all()
        assert s.image_score == image_score(s.pixel_map, model.cfg.top_fraction)
        assert (s.gt_mask is not None) == bool(s.label)
    rep = report(scored)
    assert all(0 <= v <= 1 for v in rep.as_dict().values())
    per = per_class_reports(scored)
    assert list(per) == [0]
    assert class_mean(per, "i_auroc") == per[0].i_auroc
    assert report(scored, pixel=False).p_auroc is None


def test_predict_maps_independent_of_workers_and_chunks(trained_tiny):
    model, splits, _ = trained_tiny
    images = np.stack([s.image for s in splits["test"]])
    ref = predict_maps(model, images, chunk=16, workers=1)
    assert np.array_equal(ref, predict_maps(model, images, chunk=2, workers=3))

