"""Open-set benchmark splits, ranking metrics, and slot diagnostics.

Known test images are the positives everywhere: higher score = more known,
AUROC/FPR@95 measure how well decision scores separate them from unknown
negatives (homogeneous = unknown-only images, mixed = images holding both
known and unknown objects).
"""

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# split construction

@dataclass(frozen=True)
class OsrSplit:
    """Benchmark partition with label-space guarantees per image."""

    train: list        # known-class images only
    test_known: list   # known-class test images (positives)
    test_h: list       # unknown-only negatives
    test_m: list       # mixed negatives: >=1 known and >=1 unknown object
    kkc: frozenset
    uuc: frozenset


def build_osr_splits(train_rows, test_rows, kkc, uuc, mode):
    """Partition test rows by label content and validate every membership.

    ``mode`` "single" keeps only one-label training rows (the single-label
    task trains on isolated objects); "multi" keeps all. Rows are manifest
    entries whose "label_ids" field lists class ids.
    """
    kkc, uuc = frozenset(kkc), frozenset(uuc)
    if kkc & uuc:
        raise ValueError(f"build_osr_splits: known/unknown classes overlap: {sorted(kkc & uuc)}")
    if mode not in ("single", "multi"):
        raise ValueError(f"build_osr_splits: unknown mode {mode!r}")

    train = []
    for row in train_rows:
        labels = set(row["label_ids"])
        if not labels <= kkc:
            raise ValueError(
                f"build_osr_splits: training row {row.get('file')} carries "
                f"non-known labels {sorted(labels - kkc)}"
            )
        if mode == "single" and len(row["label_ids"]) != 1:
            continue
        train.append(row)

    test_known, test_h, test_m = [], [], []
    for row in test_rows:
        labels = set(row["label_ids"])
        stray = labels - kkc - uuc
        if stray:
            raise ValueError(
                f"build_osr_splits: row {row.get('file')} has labels {sorted(stray)} "
                f"outside both class sets"
            )
        has_k, has_u = bool(labels & kkc), bool(labels & uuc)
        if has_k and has_u:
            test_m.append(row)
        elif has_u:
            test_h.append(row)
        elif has_k:
            test_known.append(row)
        else:
            raise ValueError(f"build_osr_splits: row {row.get('file')} has no labels")

    for name, rows in (("train", train), ("test_known", test_known),
                       ("test_h", test_h), ("test_m", test_m)):
        if not rows:
            raise ValueError(f"build_osr_splits: split {name!r} is empty")
    return OsrSplit(train=train, test_known=test_known, test_h=test_h, test_m=test_m,
                    kkc=kkc, uuc=uuc)


# ---------------------------------------------------------------------------
# ranking metrics

@dataclass(frozen=True)
class MetricResult:
    auroc: float
    fpr95: float
    n_pos: int
    n_neg: int


def _check_scores(pos, neg, caller):
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError(f"{caller}: empty score list (n_pos={pos.size}, n_neg={neg.size})")
    if not (np.isfinite(pos).all() and np.isfinite(neg).all()):
        # -inf decisions (all slots excluded) still rank correctly, so allow
        # infinities but reject NaN outright
        if np.isnan(pos).any() or np.isnan(neg).any():
            raise ValueError(f"{caller}: NaN score")
    return pos, neg


def auroc(pos_scores, neg_scores):
    """Mann-Whitney AUROC: P(pos > neg) + 0.5 P(pos = neg), via midranks."""
    pos, neg = _check_scores(pos_scores, neg_scores, "auroc")
    both = np.concatenate([pos, neg])
    order = np.argsort(both, kind="stable")
    ranks = np.empty(len(both), dtype=np.float64)
    sorted_vals = both[order]
    # midranks: tied values share the mean of the rank positions they span
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def fpr_at_95_tpr(pos_scores, neg_scores):
    """FPR at the largest threshold keeping true-positive rate >= 0.95."""
    pos, neg = _check_scores(pos_scores, neg_scores, "fpr_at_95_tpr")
    need = int(np.ceil(0.95 * len(pos)))
    tau = np.sort(pos)[::-1][need - 1]
    return float(np.mean(neg >= tau))


def osr_metrics(pos_scores, neg_scores):
    return MetricResult(auroc=auroc(pos_scores, neg_scores),
                        fpr95=fpr_at_95_tpr(pos_scores, neg_scores),
                        n_pos=len(pos_scores), n_neg=len(neg_scores))


def metric_rows(benchmark, result_h, result_m):
    """The four-row report the evaluation command emits."""
    rows = []
    for set_name, res in (("H", result_h), ("M", result_m)):
        rows.append({"benchmark": benchmark, "set": set_name, "metric": "auroc",
                     "value": res.auroc})
        rows.append({"benchmark": benchmark, "set": set_name, "metric": "fpr95",
                     "value": res.fpr95})
    return rows


# ---------------------------------------------------------------------------
# slot-level diagnostics

def _slot_regions(attn, canvas):
    """Binarized (min-max > 0.5) per-slot attention, upsampled to the canvas."""
    n, positions = attn.shape
    side = int(round(positions ** 0.5))
    scale = canvas // side
    regions = np.zeros((n, canvas, canvas), dtype=bool)
    for k in range(n):
        m = attn[k]
        lo, hi = m.min(), m.max()
        if hi <= lo:
            continue
        binary = ((m - lo) / (hi - lo) > 0.5).reshape(side, side)
        regions[k] = np.kron(binary, np.ones((scale, scale), dtype=bool))
    return regions


def label_slots_fg_noise(attn, gt_masks):
    """Split slots into one foreground slot and the rest (noise).

    The foreground slot is the one whose binarized attention region has the
    highest IoU with the union of ground-truth object masks; ties go to the
    lowest slot index. Returns (fg_index, noise_indices), or (None, None)
    when every slot region is empty (the caller drops such images).
    """
    attn = np.asarray(attn, dtype=np.float64)
    gt = np.zeros_like(gt_masks[0], dtype=bool)
    for m in gt_masks:
        gt |= m.astype(bool)
    regions = _slot_regions(attn, gt.shape[0])
    if not regions.any():
        log.warning("label_slots_fg_noise: all slot regions empty, image excluded")
        return None, None
    ious = np.zeros(len(regions))
    for k, region in enumerate(regions):
        union = (region | gt).sum()
        ious[k] = (region & gt).sum() / union if union else 0.0
    fg = int(np.argmax(ious))  # argmax takes the lowest index on ties
    noise = [k for k in range(len(regions)) if k != fg]
    return fg, noise


def misalignment_report(slot_attns, fg_class_logits, gt_masks_per_image):
    """How often the most confident slot is the true foreground slot.

    Per image: label slots FG/noise from attention vs ground truth, find the
    slot holding the globally largest class logit, and collect per-slot logit
    L2 norms. Norms are min-max normalized over every slot in the dataset
    before group means are taken, so both means land in [0, 1].
    """
    hits, total = 0, 0
    fg_norms, noise_norms = [], []
    for attn, logits, gt_masks in zip(slot_attns, fg_class_logits, gt_masks_per_image):
        fg, noise = label_slots_fg_noise(attn, gt_masks)
        if fg is None:
            continue
        logits = np.asarray(logits, dtype=np.float64)
        maxlogit_slot = int(np.argmax(logits.max(axis=-1)))
        hits += int(maxlogit_slot == fg)
        total += 1
        norms = np.linalg.norm(logits, axis=-1)
        fg_norms.append(norms[fg])
        noise_norms.extend(norms[noise])
    if total == 0:
        raise ValueError("misalignment_report: every image was excluded")
    pooled = np.array(fg_norms + noise_norms)
    lo, hi = pooled.min(), pooled.max()
    span = hi - lo if hi > lo else 1.0
    return {
        "fg_rate_of_maxlogit_slot": hits / total,
        "mean_logit_norm_fg": float(np.mean([(v - lo) / span for v in fg_norms])),
        "mean_logit_norm_noise": float(np.mean([(v - lo) / span for v in noise_norms])),
    }


def closed_set_accuracy(predictions, labels, mode):
    """Exact-match accuracy: single = the one class, multi = the whole set."""
    if len(predictions) != len(labels):
        raise ValueError(f"closed_set_accuracy: {len(predictions)} predictions vs {len(labels)} labels")
    if mode not in ("single", "multi"):
        raise ValueError(f"closed_set_accuracy: unknown mode {mode!r}")
    hits = 0
    for pred, lab in zip(predictions, labels):
        pred, lab = set(pred), set(lab)
        if mode == "single" and len(lab) != 1:
            raise ValueError(f"closed_set_accuracy: single mode needs one label, got {sorted(lab)}")
        hits += int(pred == lab)
    return hits / len(predictions)
