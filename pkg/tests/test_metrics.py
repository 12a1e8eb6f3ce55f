import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from mdae import metrics as M
from mdae.errors import ContractError, ShapeError


def phantom(size=64):
    yy, xx = np.mgrid[:size, :size]
    r = np.hypot(yy - size / 2, xx - size / 2)
    img = np.where(r < size * 0.35, 0.6, 0.0)
    img[r < size * 0.2] = 1.0
    return img


# -- PSNR --------------------------------------------------------------------

def test_psnr_known_values():
    a = np.full((8, 8), 0.5)
    assert M.psnr(a, a) == math.inf
    assert M.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ShapeError):
        M.psnr(a, a[:4])


def test_psnr_matches_definition():
    rng = np.random.default_rng(0)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    ref = 10 * math.log10(1 / np.mean((a - b) ** 2))
    assert M.psnr(a, b) == pytest.approx(ref, abs=1e-9)
    assert M.psnr(2 * a, 2 * b, data_range=2) == pytest.approx(ref, abs=1e-9)


# -- SSIM ------------------------------------------------------------------

def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    assert M.ssim(a, a) == 1.0
    assert M.ssim(a, b) == pytest.approx(M.ssim(b, a), abs=1e-12)
    assert -1 <= M.ssim(a, b) < 1


def test_ssim_inverted_image_is_negative():
    img = phantom(48)
    assert M.ssim(img, 1 - img) < 0


def test_ssim_small_image_rejected():
    with pytest.raises(ContractError):
        M.ssim(np.zeros((8, 8)), np.ones((8, 8)))


def test_ssim_matches_skimage():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(2)
    a = phantom(40)
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    ref = skm.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
    assert M.ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_volume_is_slice_mean():
    rng = np.random.default_rng(3)
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert M.ssim(a, b) == pytest.approx(np.mean([M.ssim(x, y) for x, y in zip(a, b)]))


# -- edges -------------------------------------------------------------------

def test_step_edge_is_one_pixel_wide():
    img = np.zeros((64, 64))
    img[:, 32:] = 1.0
    es = M.edge_profile_stats(img)
    assert not es.empty and es.edge_pixels > 0
    assert es.sharpness == pytest.approx(1.0)
    assert es.edge_width == pytest.approx(1 / math.hypot(64, 64))


def test_blur_widens_edges_and_lowers_sharpness():
    img = phantom()
    stats = [M.edge_profile_stats(ndimage.gaussian_filter(img, s)) for s in (0.5, 1.0, 2.0)]
    widths = [s.edge_width for s in stats]
    sharp = [s.sharpness for s in stats]
    assert widths[0] < widths[1] < widths[2]
    assert sharp[0] > sharp[1] > sharp[2]


def test_constant_image_has_no_edges():
    with pytest.warns(RuntimeWarning, match="edge"):
        es = M.edge_profile_stats(np.full((16, 16), 0.3))
    assert es.empty and es.edge_pixels == 0


def test_otsu_splits_bimodal():
    v = np.concatenate([np.full(100, 0.2), np.full(100, 0.8)])
    t = M.otsu_threshold(v)
    assert 0.2 < t <= 0.8


# -- histogram matching -------------------------------------------------------------

def test_histogram_match_idempotent():
    x = np.random.default_rng(4).random((64, 64))
    assert np.abs(M.histogram_match(x, x) - x).max() <= 1 / 256


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_histogram_match_properties(seed):
    rng = np.random.default_rng(seed)
    src = rng.random((64, 64)) ** 2
    ref = rng.beta(2, 5, (64, 64))
    out = M.histogram_match(src, ref)
    assert out.min() >= 0 and out.max() <= 1
    order = np.argsort(src.ravel(), kind="stable")
    assert np.all(np.diff(out.ravel()[order]) >= 0)
    h_out, _ = np.histogram(out, 256, (0, 1))
    h_ref, _ = np.histogram(ref, 256, (0, 1))
    assert np.abs(h_out - h_ref).max() <= 2


# -- dice ------------------------------------------------------------------

@pytest.mark.parametrize("a, b, expected", [
    ([1, 1, 0, 0], [1, 1, 0, 0], 1.0),
    ([1, 1, 0, 0], [0, 0, 1, 1], 0.0),
    ([1, 1, 0, 0], [1, 0, 0, 0], 2 / 3),
    ([1, 1, 0, 0], [1, 0, 1, 0], 0.5),
    ([0, 0], [0, 0], 1.0),
])
def test_dice_fixtures(a, b, expected):
    assert M.dice(np.array(a), np.array(b), 1) == pytest.approx(expected)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.data())
def test_dice_symmetric(a, data):
    b = data.draw(st.lists(st.integers(0, 3), min_size=len(a), max_size=len(a)))
    for c in range(4):
        assert M.dice(np.array(a), np.array(b), c) == M.dice(np.array(b), np.array(a), c)


# -- evaluation and reports ------------------------------------------------------

def test_evaluate_perfect_prediction():
    vol = np.stack([phantom(32)] * 2)
    labels = (vol > 0.5).astype(np.uint16) + (vol > 0).astype(np.uint16)
    vm = M.evaluate_volume(vol, vol, subject="s", pred_labels=labels, truth_labels=labels)
    assert all(s.psnr == math.inf and s.ssim == 1.0 for s in vm.slices)
    assert vm.dice == {1: 1.0, 2: 1.0, 3: 1.0}
    doc = json.loads(M.MetricReport([vm]).to_json())
    assert doc["slices"][0]["psnr"] == "inf"
    assert doc["aggregate"]["psnr"] == {"mean": "inf", "std": 0.0}
    assert M.MetricReport([vm]).to_csv().splitlines()[1].startswith("s,0,inf,1.0")


def test_hm_changes_the_score():
    rng = np.random.default_rng(5)
    truth = np.stack([phantom(32)] * 2)
    pred = np.clip(truth * 0.8 + rng.normal(0, 0.02, truth.shape), 0, 1)
    lf = np.clip(truth ** 0.7, 0, 1)
    plain = M.evaluate_volume(pred, truth).mean("psnr")
    matched = M.evaluate_volume(pred, truth, lf, apply_hm=True).mean("psnr")
    assert plain != matched
    with pytest.raises(ContractError):
        M.evaluate_volume(pred, truth, apply_hm=True)


def test_report_aggregates_across_volumes():
    rng = np.random.default_rng(6)
    truth = np.stack([phantom(32)] * 2)
    vms = [M.evaluate_volume(np.clip(truth + rng.normal(0, s, truth.shape), 0, 1), truth, subject=f"v{i}")
           for i, s in enumerate((0.01, 0.05))]
    agg = M.MetricReport(vms).aggregate()
    means = [v.mean("psnr") for v in vms]
    assert agg["psnr"][0] == pytest.approx(np.mean(means))
    assert agg["psnr"][1] == pytest.approx(np.std(means))
    assert means[0] > means[1]
