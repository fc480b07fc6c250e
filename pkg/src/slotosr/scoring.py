"""Known-vs-unknown scoring of per-slot class logits.

Every metric follows one sign convention: higher = more confidently known,
so downstream decisions always compare with a single ">" threshold.  The
per-image decision score sums per-slot scores, either over all slots or
only over slots the noise head considers foreground (Selective).
"""

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.75


def _logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# per-slot metrics: logits (..., K) -> score (...)

def score_msp(logits):
    """Maximum softmax probability."""
    return np.max(_softmax(np.asarray(logits, dtype=np.float64)), axis=-1)


def score_maxlogit(logits):
    """Largest raw logit."""
    return np.max(np.asarray(logits, dtype=np.float64), axis=-1)


def score_energy(logits, temperature=1.0):
    """T * logsumexp(logits / T).  Upper-bounds maxlogit for T=1."""
    x = np.asarray(logits, dtype=np.float64)
    return temperature * _logsumexp(x / temperature)


def score_odin(logits, temperature=1000.0):
    """Temperature-scaled maximum softmax probability.

    The original method also perturbs the input image; slot vectors are not
    pixel inputs, so only the temperature half applies here.
    """
    x = np.asarray(logits, dtype=np.float64)
    return np.max(_softmax(x / temperature), axis=-1)


LOGIT_SCORES = {
    "msp": score_msp,
    "maxlogit": score_maxlogit,
    "energy": score_energy,
    "odin": score_odin,
}


# ---------------------------------------------------------------------------
# Mahalanobis distance to class-conditional Gaussians

@dataclass(frozen=True)
class MahalanobisModel:
    """Per-class means with one shared covariance over slot features."""

    means: np.ndarray      # (K, D)
    cov: np.ndarray        # (D, D), regularized
    inv_cov: np.ndarray    # (D, D)
    num_classes: int


def fit_mahalanobis(features, labels, ridge=1e-4):
    """Fit class means and a shared (pooled) covariance.

    ``features`` is (M, D) foreground slot vectors, ``labels`` their class
    ids.  The covariance pools per-class centred outer products over all M
    samples and is regularized with ridge * I; a covariance that is still
    not positive definite afterwards is rejected.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError(f"fit_mahalanobis: bad shapes {x.shape} vs {y.shape}")
    classes = np.unique(y)
    counts = {int(c): int((y == c).sum()) for c in classes}
    thin = [c for c, n in counts.items() if n < 2]
    if thin:
        raise ValueError(f"fit_mahalanobis: classes {thin} have fewer than 2 samples")
    dim = x.shape[1]
    means = np.stack([x[y == c].mean(axis=0) for c in classes])
    centred = x - means[np.searchsorted(classes, y)]
    cov = centred.T @ centred / len(x) + ridge * np.eye(dim)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError(
            f"fit_mahalanobis: covariance singular after ridge {ridge} "
            f"(D={dim}, M={len(x)}; need more samples or a larger ridge)"
        )
    return MahalanobisModel(means=means, cov=cov, inv_cov=np.linalg.inv(cov), num_classes=len(classes))


def score_mahalanobis(model, features):
    """Negated squared distance to the nearest class mean, (..., D) -> (...)."""
    x = np.asarray(features, dtype=np.float64)
    diff = x[..., None, :] - model.means            # (..., K, D)
    d2 = np.einsum("...kd,de,...ke->...k", diff, model.inv_cov, diff)
    return -np.min(d2, axis=-1)


# ---------------------------------------------------------------------------
# image-level aggregation

@dataclass(frozen=True)
class ScoreReport:
    """One image's slot scores and its aggregated decision score."""

    per_slot: np.ndarray   # (N,)
    scheme: str            # "all" | "selective"
    fg_mask: np.ndarray    # (N,) bool; None under the "all" scheme
    decision: float


def aggregate(per_slot_scores, scheme, nz_logits=None, gamma=DEFAULT_GAMMA):
    """Combine per-slot scores into one decision score.

    "all" sums every slot.  "selective" min-max normalizes the noise-head
    logits across the image's slots and sums only slots with normalized
    value < gamma; if that excludes every slot the decision is -inf.
    """
    scores = np.asarray(per_slot_scores, dtype=np.float64)
    if scores.ndim != 1 or len(scores) == 0:
        raise ValueError(f"aggregate: per_slot_scores must be a nonempty vector, got {scores.shape}")
    if scheme == "all":
        return ScoreReport(per_slot=scores, scheme="all", fg_mask=None,
                           decision=float(scores.sum()))
    if scheme != "selective":
        raise ValueError(f"aggregate: unknown scheme {scheme!r}")
    if nz_logits is None:
        raise ValueError("aggregate: selective scheme needs noise-head logits")
    nz = np.asarray(nz_logits, dtype=np.float64)
    if nz.shape != scores.shape:
        raise ValueError(f"aggregate: nz_logits shape {nz.shape} != scores shape {scores.shape}")
    lo, hi = nz.min(), nz.max()
    normed = np.zeros_like(nz) if hi <= lo else (nz - lo) / (hi - lo)
    fg = normed < gamma
    if not fg.any():
        log.warning("aggregate: every slot excluded at gamma=%g, decision pinned to -inf", gamma)
        return ScoreReport(per_slot=scores, scheme="selective", fg_mask=fg, decision=float("-inf"))
    return ScoreReport(per_slot=scores, scheme="selective", fg_mask=fg,
                       decision=float(scores[fg].sum()))


def score_record(image_id, report):
    """Flatten one report into an ordered dict for delimited export."""
    rec = {"image_id": image_id, "scheme": report.scheme}
    for k, s in enumerate(report.per_slot):
        rec[f"slot{k}"] = float(s)
    rec["decision"] = float(report.decision)
    return rec
