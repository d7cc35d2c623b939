import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from mtmr.metrics import (PSNR_CAP, ConfusionCounts, build_report, component_dice, confusion, dice,
                          precision, psnr, recall, size_bins, ssim)
from mtmr.phantom import PhantomConfig, generate_phantom

from oracles import mse_psnr, tally


def test_confusion_exact_match():
    truth = np.zeros((4, 4), dtype=int)
    truth.flat[[0, 3, 5, 9, 15]] = 1
    assert confusion(truth, truth, 1) == ConfusionCounts(5, 0, 0, 11)


def test_confusion_all_background_prediction():
    truth = np.eye(4, dtype=int)
    c = confusion(np.zeros_like(truth), truth, 1)
    assert (c.tp, c.fp) == (0, 0)
    assert c.fn == 4


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)), 1)


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, (16, 16), elements=st.integers(0, 2)),
       arrays(np.int64, (16, 16), elements=st.integers(0, 2)),
       st.integers(0, 2))
def test_confusion_matches_tally(pred, truth, cls):
    c = confusion(pred, truth, cls)
    assert (c.tp, c.fp, c.fn, c.tn) == tally(pred, truth, cls)
    assert c.total == 256


def test_metric_values():
    perfect = ConfusionCounts(5, 0, 0, 11)
    assert (dice(perfect), precision(perfect), recall(perfect)) == (1.0, 1.0, 1.0)
    miss = ConfusionCounts(0, 3, 2, 11)
    assert (dice(miss), precision(miss), recall(miss)) == (0.0, 0.0, 0.0)
    c = ConfusionCounts(3, 1, 2, 10)
    assert dice(c) == pytest.approx(6 / 9, abs=1e-15)
    assert precision(c) == pytest.approx(3 / 4, abs=1e-15)
    assert recall(c) == pytest.approx(3 / 5, abs=1e-15)


def test_empty_mask_conventions():
    both_empty = ConfusionCounts(0, 0, 0, 16)
    assert (dice(both_empty), precision(both_empty), recall(both_empty)) == (1.0, 1.0, 1.0)
    only_truth = ConfusionCounts(0, 0, 4, 12)
    assert precision(only_truth) == 0.0 and recall(only_truth) == 0.0 and dice(only_truth) == 0.0
    only_pred = ConfusionCounts(0, 4, 0, 12)
    assert precision(only_pred) == 0.0 and recall(only_pred) == 0.0 and dice(only_pred) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.integers(0, 500), st.integers(0, 500))
def test_dice_is_f1(tp, fp, fn):
    c = ConfusionCounts(tp, fp, fn, 0)
    p, r = precision(c), recall(c)
    assert abs(dice(c) - 2 * p * r / (p + r)) < 1e-12


def test_psnr_cap_and_closed_form():
    rng = np.random.default_rng(0)
    ref = rng.random((16, 16))
    ref[0, 0] = 1.0
    assert psnr(ref, ref) == PSNR_CAP
    # every pixel off by 0.1 -> MSE 0.01, peak 1 -> 20 dB
    assert abs(psnr(ref + 0.1, ref) - 20.0) < 1e-9


def test_psnr_matches_oracle():
    rng = np.random.default_rng(1)
    ref, pred = rng.random((12, 12)), rng.random((12, 12))
    assert abs(psnr(pred, ref) - mse_psnr(pred, ref)) < 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((3, 3)))


def test_ssim_identity_and_constant():
    ph = generate_phantom(PhantomConfig(), 0)
    assert abs(ssim(ph.image, ph.image) - 1.0) < 1e-9
    const = np.full((16, 16), 0.4)
    assert abs(ssim(const, const) - 1.0) < 1e-9


def test_ssim_inverted_phantom_is_low():
    # seed-0 phantom measured at -0.55 when this bound was set
    ph = generate_phantom(PhantomConfig(), 0).image.astype(np.float64)
    inverted = -ph + ph.max()
    assert ssim(inverted, ph) < 0.5


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    ref = generate_phantom(PhantomConfig(), seed).image.astype(np.float64)
    pred = np.clip(ref + 0.05 * rng.standard_normal(ref.shape), 0, 1)
    expected = structural_similarity(pred, ref, data_range=ref.max(), gaussian_weights=True, sigma=1.5,
                                     use_sample_covariance=False)
    assert abs(ssim(pred, ref) - expected) < 1e-9


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_transpose_invariance():
    rng = np.random.default_rng(3)
    ref = generate_phantom(PhantomConfig(), 3).image.astype(np.float64)
    pred = np.clip(ref + 0.1 * rng.standard_normal(ref.shape), 0, 1)
    assert abs(psnr(pred.T, ref.T) - psnr(pred, ref)) < 1e-9
    assert abs(ssim(pred.T, ref.T) - ssim(pred, ref)) < 1e-9


def test_component_dice_and_bins():
    truth = np.zeros((20, 20), dtype=int)
    truth[2:4, 2:4] = 1
    truth[10:16, 10:16] = 1
    pred = truth.copy()
    pred[10:16, 10:13] = 0
    comps = component_dice(pred, truth)
    assert comps[0] == (4, 1.0)
    assert comps[1][0] == 36 and comps[1][1] == pytest.approx(2 * 18 / (18 + 36))
    edges = size_bins(np.arange(1, 61))
    assert len(edges) == 5 and np.all(np.diff(edges) > 0)


def test_report_means_are_means_of_volumes():
    rng = np.random.default_rng(4)
    volumes = {}
    for v in range(3):
        ref = np.stack([generate_phantom(PhantomConfig(), 10 * v + s).image for s in range(2)]).astype(np.float64)
        truth = np.stack([generate_phantom(PhantomConfig(), 10 * v + s).labels for s in range(2)])
        recon = np.clip(ref + 0.05 * rng.standard_normal(ref.shape), 0, 1)
        pred = truth.copy()
        pred[:, :5] = 0
        volumes[v] = (recon, ref, pred, truth)
    report = build_report(volumes, ["background", "lesion"])
    rows = report.rows()
    for key in ("psnr", "ssim", "dice_lesion", "precision_lesion", "recall_lesion"):
        assert report.mean[key] == pytest.approx(np.mean([r[key] for r in rows]), abs=1e-12)
        assert math.isfinite(report.std[key])
    csv_lines = report.to_csv().splitlines()
    assert csv_lines[0].split(",")[:4] == ["volume_id", "n_slices", "psnr", "ssim"]
    assert len(csv_lines) == 4
    assert report.size_stratified and all(0 <= b["size_bin"] < 6 for b in report.size_stratified)


def test_report_rejects_empty_split():
    with pytest.raises(ValueError):
        build_report({}, ["background", "lesion"])
