"""Per-slot scoring metrics, Mahalanobis fitting, and aggregation."""

import logging
import math

import numpy as np
import pytest

from oracles import pooled_mahalanobis_score
from slotosr.scoring import (LOGIT_SCORES, aggregate, fit_mahalanobis,
                             score_energy, score_maxlogit, score_msp,
                             score_mahalanobis, score_odin, score_record)


# ---------------------------------------------------------------------------
# closed forms

def test_msp_closed_form():
    assert score_msp(np.array([0.0, 0.0])) == pytest.approx(0.5)
    # softmax of [ln 1, ln 3] is [0.25, 0.75]
    assert score_msp(np.log([1.0, 3.0])) == pytest.approx(0.75)


def test_maxlogit_closed_form():
    assert score_maxlogit(np.array([-2.0, 4.0, 1.5])) == 4.0


def test_energy_closed_form():
    assert score_energy(np.array([0.0, 0.0])) == pytest.approx(math.log(2.0))
    x = np.array([1.0, 2.0, 3.0])
    assert score_energy(x) == pytest.approx(math.log(np.exp(x).sum()))
    # temperature: T * lse(x / T)
    assert score_energy(x, temperature=2.0) == pytest.approx(
        2.0 * math.log(np.exp(x / 2.0).sum()))


def test_odin_is_temperature_scaled_msp():
    x = np.array([3.0, -1.0, 0.5])
    assert score_odin(x, temperature=1000.0) == pytest.approx(
        score_msp(x / 1000.0))
    assert score_odin(x, temperature=1.0) == pytest.approx(score_msp(x))


def test_energy_strictly_above_maxlogit():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.normal(size=rng.integers(2, 8))
        assert score_energy(x) > score_maxlogit(x)


def test_shift_behavior():
    rng = np.random.default_rng(1)
    x = rng.normal(size=6)
    # msp ignores constant shifts; energy and maxlogit move with them
    assert score_msp(x + 10.0) == pytest.approx(score_msp(x))
    assert score_energy(x + 10.0) == pytest.approx(score_energy(x) + 10.0)
    assert score_maxlogit(x + 10.0) == pytest.approx(score_maxlogit(x) + 10.0)


def test_batched_shapes():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 6, 5))
    for fn in LOGIT_SCORES.values():
        assert fn(x).shape == (4, 6)


def test_registry_contents():
    assert set(LOGIT_SCORES) == {"msp", "maxlogit", "energy", "odin"}


# ---------------------------------------------------------------------------
# Mahalanobis

def _gaussian_blobs(rng, n_per=30, dim=5):
    feats, labels = [], []
    for cid, centre in enumerate((-2.0, 0.5, 3.0)):
        feats.append(rng.normal(loc=centre, scale=0.7, size=(n_per, dim)))
        labels.extend([cid] * n_per)
    return np.concatenate(feats), np.array(labels)


def test_mahalanobis_matches_hand_rolled_oracle():
    rng = np.random.default_rng(3)
    feats, labels = _gaussian_blobs(rng)
    model = fit_mahalanobis(feats, labels)
    for _ in range(20):
        q = rng.normal(scale=2.0, size=feats.shape[1])
        assert score_mahalanobis(model, q) == pytest.approx(
            pooled_mahalanobis_score(q, feats, labels), rel=1e-9)


def test_mahalanobis_scores_own_mean_highest():
    rng = np.random.default_rng(4)
    feats, labels = _gaussian_blobs(rng)
    model = fit_mahalanobis(feats, labels)
    # a class mean is distance ~0 from itself, far points score lower
    near = score_mahalanobis(model, model.means[1])
    far = score_mahalanobis(model, model.means[1] + 50.0)
    assert near > far
    assert near == pytest.approx(0.0, abs=1e-9)


def test_mahalanobis_batched_scoring():
    rng = np.random.default_rng(5)
    feats, labels = _gaussian_blobs(rng)
    model = fit_mahalanobis(feats, labels)
    q = rng.normal(size=(4, 6, feats.shape[1]))
    batched = score_mahalanobis(model, q)
    assert batched.shape == (4, 6)
    assert batched[2, 3] == pytest.approx(score_mahalanobis(model, q[2, 3]))


def test_mahalanobis_fit_validation():
    rng = np.random.default_rng(6)
    feats = rng.normal(size=(5, 3))
    with pytest.raises(ValueError, match="fewer than 2"):
        fit_mahalanobis(feats, np.array([0, 0, 1, 1, 2]))
    with pytest.raises(ValueError, match="bad shapes"):
        fit_mahalanobis(feats, np.array([0, 0, 1]))
    with pytest.raises(ValueError, match="bad shapes"):
        fit_mahalanobis(feats[:, :, None], np.zeros(5))


def test_mahalanobis_noncontiguous_class_ids():
    rng = np.random.default_rng(7)
    feats, labels = _gaussian_blobs(rng)
    remapped = np.array([3, 7, 11])[labels]
    model = fit_mahalanobis(feats, remapped)
    assert model.num_classes == 3
    q = rng.normal(size=feats.shape[1])
    assert score_mahalanobis(model, q) == pytest.approx(
        pooled_mahalanobis_score(q, feats, remapped), rel=1e-9)


# ---------------------------------------------------------------------------
# aggregation

def test_aggregate_all_sums_every_slot():
    scores = np.array([1.0, -2.0, 0.5])
    report = aggregate(scores, "all")
    assert report.decision == pytest.approx(-0.5)
    assert report.scheme == "all"
    assert report.fg_mask is None
    np.testing.assert_array_equal(report.per_slot, scores)


def test_aggregate_selective_keeps_low_noise_slots():
    scores = np.array([1.0, 2.0, 4.0, 8.0])
    nz = np.array([0.0, 1.0, 2.0, 3.0])     # normalized: 0, 1/3, 2/3, 1
    report = aggregate(scores, "selective", nz_logits=nz, gamma=0.75)
    assert report.fg_mask.tolist() == [True, True, True, False]
    assert report.decision == pytest.approx(7.0)


def test_aggregate_selective_boundary_is_strict():
    scores = np.array([1.0, 2.0, 4.0])
    nz = np.array([0.0, 0.75, 1.0])         # middle normalizes to exactly gamma
    report = aggregate(scores, "selective", nz_logits=nz, gamma=0.75)
    assert report.fg_mask.tolist() == [True, False, False]
    assert report.decision == pytest.approx(1.0)


def test_aggregate_selective_flat_noise_keeps_all():
    scores = np.array([1.0, 2.0])
    report = aggregate(scores, "selective", nz_logits=np.array([5.0, 5.0]))
    assert report.fg_mask.tolist() == [True, True]
    assert report.decision == pytest.approx(3.0)


def test_aggregate_all_excluded_pins_minus_inf(caplog):
    scores = np.array([1.0, 2.0])
    with caplog.at_level(logging.WARNING):
        report = aggregate(scores, "selective",
                           nz_logits=np.array([0.0, 1.0]), gamma=0.0)
    assert report.decision == float("-inf")
    assert not report.fg_mask.any()
    assert any("every slot excluded" in r.message for r in caplog.records)


def test_aggregate_validation():
    with pytest.raises(ValueError, match="unknown scheme"):
        aggregate(np.ones(3), "some")
    with pytest.raises(ValueError, match="noise-head logits"):
        aggregate(np.ones(3), "selective")
    with pytest.raises(ValueError, match="nonempty"):
        aggregate(np.array([]), "all")
    with pytest.raises(ValueError, match="shape"):
        aggregate(np.ones(3), "selective", nz_logits=np.ones(4))


def test_aggregate_all_is_additive_in_slots():
    rng = np.random.default_rng(8)
    scores = rng.normal(size=5)
    extra = 1.25
    a = aggregate(scores, "all").decision
    b = aggregate(np.append(scores, extra), "all").decision
    assert b == pytest.approx(a + extra)


def test_score_record_flattens_report():
    report = aggregate(np.array([1.5, 2.5]), "all")
    rec = score_record("img_007", report)
    assert rec == {"image_id": "img_007", "scheme": "all",
                   "slot0": 1.5, "slot1": 2.5, "decision": 4.0}
