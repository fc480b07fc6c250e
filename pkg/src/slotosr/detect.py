"""Open-set detection from slot attention maps.

Slots the noise head clears become object proposals: each one's attention
map is binarized, upsampled to image resolution, and reduced to the tight
box of its largest connected component. The class head's energy score then
labels the box with its best known class or UNKNOWN.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .classifier import fg_logits, nz_logits
from .scoring import score_energy
from .slots import compute_slot_set

UNKNOWN_LABEL = "UNKNOWN"


@dataclass(frozen=True)
class Detection:
    """One labeled box; coordinates are inclusive pixel bounds."""

    box: tuple          # (x0, y0, x1, y1), x0 < x1, y0 < y1
    label: object       # class id, or UNKNOWN_LABEL
    score: float
    slot_index: int

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"Detection: degenerate box {self.box}")


def minmax_normalize(values):
    """Map to [0, 1] over the slot axis; an all-equal vector maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def select_fg_slots(normed_nz_logits, threshold=0.75):
    """Indices the noise head keeps; expects min-max normalized logits.

    Non-strict so threshold 1.0 keeps every slot (the normalized maximum is
    exactly 1.0). Empty result just means zero detections.
    """
    v = np.asarray(normed_nz_logits, dtype=np.float64)
    return [k for k in range(len(v)) if v[k] <= threshold]


def _largest_component(mask):
    """Largest 4-connected true region, or None if the mask is empty."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    best = None
    for sy, sx in zip(*np.nonzero(mask)):
        if seen[sy, sx]:
            continue
        stack = [(sy, sx)]
        seen[sy, sx] = True
        comp = []
        while stack:
            y, x = stack.pop()
            comp.append((y, x))
            for ny, nx in ((y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)):
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
        if best is None or len(comp) > len(best):
            best = comp
    return best


def mask_to_box(attn_map, grid, image_size, binarize=0.5, min_pixels=40):
    """Tight box of the map's largest connected region, or None.

    ``attn_map`` is one slot's min-max normalized attention over grid cells.
    Cells strictly above ``binarize`` are kept, upsampled nearest-neighbor to
    ``image_size``, and the largest 4-connected component must cover at least
    ``min_pixels`` image pixels to yield a box.
    """
    gh, gw = (grid, grid) if np.isscalar(grid) else grid
    ih, iw = (image_size, image_size) if np.isscalar(image_size) else image_size
    if ih % gh or iw % gw:
        raise ValueError(f"mask_to_box: image size {(ih, iw)} not a multiple of grid {(gh, gw)}")
    binary = np.asarray(attn_map, dtype=np.float64).reshape(gh, gw) > binarize
    up = np.kron(binary, np.ones((ih // gh, iw // gw), dtype=bool))
    comp = _largest_component(up)
    if comp is None or len(comp) < min_pixels:
        return None
    ys = [p[0] for p in comp]
    xs = [p[1] for p in comp]
    return (int(min(xs)), int(min(ys)), int(max(xs)), int(max(ys)))


def detect(image, model, heads, energy_threshold=5.0, fg_threshold=0.75,
           binarize=0.5, min_pixels=40, rng_seed=0):
    """Run the full proposal + labeling path on one image.

    ``model`` is the (params, cfg) slot model pair, ``heads`` the trained
    classifier heads. Slots the noise head rejects are never emitted; each
    kept slot with a valid box gets energy over the class logits as its
    score and UNKNOWN whenever that score fails the threshold.
    """
    params, cfg = model
    slot_set = compute_slot_set(params, cfg, image, rng_seed=rng_seed)
    with ad.no_grad():
        class_logits = fg_logits(heads, slot_set.slots).values
        noise = nz_logits(heads, slot_set.slots).values
    keep = select_fg_slots(minmax_normalize(noise), threshold=fg_threshold)
    h, w = np.asarray(image).shape[:2]
    detections = []
    for k in keep:
        box = mask_to_box(minmax_normalize(slot_set.attn[k]), slot_set.grid, (h, w),
                          binarize=binarize, min_pixels=min_pixels)
        if box is None or box[0] == box[2] or box[1] == box[3]:
            continue
        score = float(score_energy(class_logits[k]))
        label = int(np.argmax(class_logits[k])) if score > energy_threshold else UNKNOWN_LABEL
        detections.append(Detection(box=box, label=label, score=score, slot_index=k))
    return detections


def _box_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix = max(0, min(ax1, bx1) - max(ax0, bx0) + 1)
    iy = max(0, min(ay1, by1) - max(ay0, by0) + 1)
    inter = ix * iy
    area_a = (ax1 - ax0 + 1) * (ay1 - ay0 + 1)
    area_b = (bx1 - bx0 + 1) * (by1 - by0 + 1)
    return inter / (area_a + area_b - inter)


def detection_eval(detections_per_image, gt_boxes_per_image, gt_known_per_image,
                   iou_thresh=0.5):
    """Greedy matching and open-set detection metrics over a dataset.

    Per image, detections are taken highest score first and each claims the
    unmatched ground-truth box it overlaps best (IoU >= ``iou_thresh``).
    Returns unknown_recall (unknown GT boxes matched by an UNKNOWN-labeled
    detection), known_precision (known-labeled detections matched to a known
    GT box), and AUROC of detection scores split by matched GT kind.
    """
    from .evaluation import auroc

    n_unknown_gt = 0
    unknown_hits = 0
    known_labeled = 0
    known_correct = 0
    known_scores, unknown_scores = [], []
    for dets, boxes, known_flags in zip(detections_per_image, gt_boxes_per_image,
                                        gt_known_per_image):
        if len(boxes) != len(known_flags):
            raise ValueError("detection_eval: gt boxes and flags disagree in length")
        n_unknown_gt += sum(1 for f in known_flags if not f)
        taken = [False] * len(boxes)
        for det in sorted(dets, key=lambda d: d.score, reverse=True):
            if det.label != UNKNOWN_LABEL:
                known_labeled += 1
            cand = [(ind, _box_iou(det.box, b)) for ind, b in enumerate(boxes) if not taken[ind]]
            cand = [(ind, v) for ind, v in cand if v >= iou_thresh]
            if not cand:
                continue
            ind = max(cand, key=lambda t: t[1])[0]
            taken[ind] = True
            if known_flags[ind]:
                known_scores.append(det.score)
                if det.label != UNKNOWN_LABEL:
                    known_correct += 1
            else:
                unknown_scores.append(det.score)
                if det.label == UNKNOWN_LABEL:
                    unknown_hits += 1
    out = {
        "unknown_recall": unknown_hits / n_unknown_gt if n_unknown_gt else 0.0,
        "known_precision": known_correct / known_labeled if known_labeled else 0.0,
        "auroc_over_boxscores": (auroc(known_scores, unknown_scores)
                                 if known_scores and unknown_scores else float("nan")),
    }
    return out


def detection_records(image_id, detections):
    """Flatten detections into ordered dicts for delimited export."""
    rows = []
    for det in detections:
        x0, y0, x1, y1 = det.box
        rows.append({"image_id": image_id, "x0": x0, "y0": y0, "x1": x1, "y1": y1,
                     "label": det.label, "score": det.score})
    return rows
