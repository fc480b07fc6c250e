"""Deterministic synthetic multi-object scenes: images, label sets, masks, boxes.

Classes are (shape, color) pairs on a dark canvas.  All randomness flows
through ``numpy.random.SeedSequence([base_seed, split, index])`` so any image
can be regenerated in isolation, byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_SCHEMA = "slotosr/manifest/1"

SHAPES = ("circle", "square", "triangle", "cross", "ring", "star")

COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.10),
    "blue": (0.15, 0.25, 0.92),
    "yellow": (0.92, 0.86, 0.12),
    "magenta": (0.88, 0.14, 0.88),
    "cyan": (0.14, 0.86, 0.86),
    "orange": (0.94, 0.59, 0.08),
    "purple": (0.59, 0.16, 0.86),
}

SPLITS = ("train", "test_known", "test_h", "test_m", "diag")


@dataclass(frozen=True)
class ClassDef:
    class_id: int
    shape: str
    color: str


def default_classes(n_classes=12):
    """Class universe of unique (shape, color) pairs.

    The first half cycles three shapes over {red, green}, the second half the
    other three shapes over {blue, yellow}, so the default 6/6 known/unknown
    split shares no shape and no color across the boundary.
    """
    if n_classes < 12:
        raise ValueError(f"class universe must have >= 12 entries, got {n_classes}")
    known_shapes = ("circle", "square", "triangle")
    novel_shapes = ("cross", "ring", "star")
    known_colors = ("red", "green")
    novel_colors = ("blue", "yellow")
    defs = []
    for i in range(n_classes):
        if i < n_classes // 2:
            shape = known_shapes[i % 3]
            color = known_colors[(i // 3) % 2]
        else:
            j = i - n_classes // 2
            shape = novel_shapes[j % 3]
            color = novel_colors[(j // 3) % 2]
        defs.append(ClassDef(i, shape, color))
    pairs = {(d.shape, d.color) for d in defs}
    if len(pairs) != len(defs):
        raise ValueError("class universe has duplicate (shape, color) pairs")
    return defs


@dataclass
class SceneSpec:
    classes: list
    class_pool: list          # class ids eligible for this scene
    n_objects: int = 1
    canvas: int = 64
    size_range: tuple = (9.0, 14.0)
    overlap_iou: float = 0.2
    background: str = "solid"  # or noise-texture
    min_mask_pixels: int = 40
    forced_pool: list = field(default=None)  # ids that must appear at least once


def _shape_mask(shape, cx, cy, r, hw):
    yy, xx = np.mgrid[0:hw, 0:hw]
    dx = xx - cx
    dy = yy - cy
    d2 = dx * dx + dy * dy
    if shape == "circle":
        return d2 <= r * r
    if shape == "square":
        return (np.abs(dx) <= 0.82 * r) & (np.abs(dy) <= 0.82 * r)
    if shape == "triangle":
        top = cy - r
        height = 1.6 * r
        width = (yy - top) / height * (0.95 * r)
        return (yy >= top) & (yy <= cy + 0.6 * r) & (np.abs(dx) <= width)
    if shape == "cross":
        arm = 0.34 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "ring":
        inner = 0.55 * r
        return (d2 <= r * r) & (d2 >= inner * inner)
    if shape == "star":
        theta = np.arctan2(dy, dx)
        spikes = 0.5 * (1.0 + np.cos(5.0 * (theta - np.pi / 2.0)))
        rad = r * (0.44 + 0.56 * spikes)
        return d2 <= rad * rad
    raise ValueError(f"unknown shape {shape!r}")


def mask_box(mask):
    """Tight inclusive [x0, y0, x1, y1] around the true pixels of a mask."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return [int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())]


def box_iou(a, b):
    """IoU of two inclusive integer boxes."""
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = ix1 - ix0 + 1, iy1 - iy0 + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / float(area_a + area_b - inter)


def generate_scene(spec, seed):
    """Render one scene. Returns image, per-object labels, visible masks, boxes.

    Placement is rejection-sampled: each object gets up to 100 tries to land
    with pairwise box IoU <= spec.overlap_iou and every visible mask still at
    least spec.min_mask_pixels after occlusion; exhausting the tries raises.
    """
    rng = np.random.default_rng(seed)
    hw = spec.canvas
    class_by_id = {c.class_id: c for c in spec.classes}
    if spec.n_objects > len(spec.class_pool):
        raise ValueError("n_objects exceeds the class pool (classes are unique per scene)")
    if spec.forced_pool:
        forced = list(spec.forced_pool)
        rest = [c for c in spec.class_pool if c not in forced]
        extra = rng.choice(len(rest), size=spec.n_objects - len(forced), replace=False) if spec.n_objects > len(forced) else []
        chosen = forced + [rest[i] for i in np.atleast_1d(extra)]
        chosen = [chosen[i] for i in rng.permutation(len(chosen))]
    else:
        idx = rng.choice(len(spec.class_pool), size=spec.n_objects, replace=False)
        chosen = [spec.class_pool[i] for i in np.atleast_1d(idx)]

    visible = []   # masks after occlusion by every later (on-top) object
    boxes = []     # raw placement boxes, for the overlap policy
    for cid in chosen:
        cdef = class_by_id[cid]
        placed = False
        for _ in range(100):
            r = rng.uniform(*spec.size_range)
            cx = rng.uniform(r + 1.0, hw - r - 2.0)
            cy = rng.uniform(r + 1.0, hw - r - 2.0)
            mask = _shape_mask(cdef.shape, cx, cy, r, hw)
            box = mask_box(mask)
            if box is None or mask.sum() < spec.min_mask_pixels:
                continue
            if any(box_iou(box, b) > spec.overlap_iou for b in boxes):
                continue
            # this object is drawn on top; earlier ones must stay visible enough
            if any((v & ~mask).sum() < spec.min_mask_pixels for v in visible):
                continue
            visible = [v & ~mask for v in visible] + [mask]
            boxes.append(box)
            placed = True
            break
        if not placed:
            raise RuntimeError(
                f"scene placement failed after 100 tries "
                f"(overlap_iou<={spec.overlap_iou}, min {spec.min_mask_pixels} visible pixels, "
                f"{len(boxes)} of {spec.n_objects} objects placed)"
            )

    if spec.background == "noise-texture":
        image = rng.uniform(0.0, 0.08, size=(hw, hw, 3))
    elif spec.background == "solid":
        image = np.zeros((hw, hw, 3))
    else:
        raise ValueError(f"unknown background {spec.background!r}")

    # visible masks are pairwise disjoint, so draw order no longer matters
    for mask, cid in zip(visible, chosen):
        image[mask] = COLORS[class_by_id[cid].color]
    boxes = [mask_box(m) for m in visible]
    return {
        "image": image,
        "label_set": list(chosen),
        "gt_masks": visible,
        "gt_boxes": boxes,
    }


def _split_plan(split, rng, kkc, uuc, train_objects, test_objects):
    """Draw (n_objects, pool, forced) for one image of the given split.

    The three test splits share the test-time object counts so their score
    distributions differ only in label content, not in how much is on the
    canvas; diag holds known images at training-time counts for closed-set
    checks and slot diagnostics.  test_m additionally forces at least one
    known and one novel object.
    """
    if split in ("train", "diag"):
        n = int(rng.integers(train_objects[0], train_objects[1] + 1))
        return n, kkc, None
    n = int(rng.integers(test_objects[0], test_objects[1] + 1))
    if split == "test_known":
        return n, kkc, None
    if split == "test_h":
        return n, uuc, None
    if split == "test_m":
        n = max(n, 2)
        n_known = int(rng.integers(1, n))
        k_ids = [kkc[i] for i in np.atleast_1d(rng.choice(len(kkc), size=n_known, replace=False))]
        u_ids = [uuc[i] for i in np.atleast_1d(rng.choice(len(uuc), size=n - n_known, replace=False))]
        return n, kkc + uuc, k_ids + u_ids
    raise ValueError(f"unknown split {split!r}")


def generate_benchmark(
    out_dir,
    seed=0,
    n_classes=12,
    n_known=6,
    sizes=(2000, 500, 500, 500, 500),
    train_objects=(1, 1),
    test_objects=(2, 3),
    size_range=(9.0, 14.0),
    overlap_iou=0.2,
    background="solid",
    canvas=64,
):
    """Write the benchmark directory tree: images, per-object masks, manifest.

    Splits: train / diag hold known-class images at training-time object
    counts; test_known is all-known, test_h all-novel, and every test_m image
    mixes at least one known and one novel object.
    """
    classes = default_classes(n_classes)
    if not 1 <= n_known < n_classes:
        raise ValueError(f"n_known={n_known} must leave both sides of the split nonempty")
    kkc = [c.class_id for c in classes[:n_known]]
    uuc = [c.class_id for c in classes[n_known:]]

    out_dir = Path(out_dir)
    rows = []
    counts = {}
    for split_idx, (split, count) in enumerate(zip(SPLITS, sizes)):
        counts[split] = count
        (out_dir / "images" / split).mkdir(parents=True, exist_ok=True)
        (out_dir / "masks" / split).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            ss = np.random.SeedSequence([seed, split_idx, i])
            plan_rng = np.random.default_rng(ss)
            n, pool, forced = _split_plan(split, plan_rng, kkc, uuc, train_objects, test_objects)
            spec = SceneSpec(
                classes=classes,
                class_pool=list(pool),
                n_objects=n,
                canvas=canvas,
                size_range=size_range,
                overlap_iou=overlap_iou,
                background=background,
                forced_pool=forced,
            )
            scene = generate_scene(spec, np.random.SeedSequence([seed, split_idx, i, 1]))
            name = f"img_{i:05d}"
            img_file = f"images/{split}/{name}.png"
            arr = np.clip(np.round(scene["image"] * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(out_dir / img_file)
            mask_files = []
            for k, mask in enumerate(scene["gt_masks"]):
                mf = f"masks/{split}/{name}_obj{k}.png"
                Image.fromarray(mask.astype(np.uint8) * 255).save(out_dir / mf)
                mask_files.append(mf)
            rows.append(
                {
                    "file": img_file,
                    "split": split,
                    "index": i,
                    "label_ids": scene["label_set"],
                    "boxes": scene["gt_boxes"],
                    "mask_files": mask_files,
                }
            )

    header = {
        "schema": MANIFEST_SCHEMA,
        "seed": seed,
        "canvas": canvas,
        "classes": [{"class_id": c.class_id, "shape": c.shape, "color": c.color} for c in classes],
        "kkc": kkc,
        "uuc": uuc,
        "counts": counts,
    }
    with open(out_dir / "manifest.jsonl", "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return header


def load_manifest(data_dir):
    """Read the manifest and re-assert per-split label-space invariants."""
    data_dir = Path(data_dir)
    path = data_dir / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"manifest {path}: missing or unsupported schema tag")
    header = lines[0]
    kkc, uuc = set(header["kkc"]), set(header["uuc"])
    if kkc & uuc:
        raise ValueError("manifest: known and novel class sets overlap")
    splits = {s: [] for s in SPLITS}
    for row in lines[1:]:
        labels = set(row["label_ids"])
        split = row["split"]
        if split in ("train", "diag", "test_known") and not labels <= kkc:
            raise ValueError(f"{row['file']}: {split} image carries novel labels {sorted(labels - kkc)}")
        if split == "test_h" and labels & kkc:
            raise ValueError(f"{row['file']}: test_h image carries known labels {sorted(labels & kkc)}")
        if split == "test_m" and not (labels & kkc and labels & uuc):
            raise ValueError(f"{row['file']}: test_m image must mix known and novel labels")
        splits[split].append(row)
    return {"header": header, "splits": splits, "dir": data_dir}


def load_image(data_dir, row):
    """Load one manifest row's image as float64 in [0, 1]."""
    arr = np.asarray(Image.open(Path(data_dir) / row["file"]), dtype=np.float64)
    return arr / 255.0


def load_masks(data_dir, row):
    """Load one manifest row's per-object boolean masks."""
    out = []
    for mf in row["mask_files"]:
        out.append(np.asarray(Image.open(Path(data_dir) / mf)) > 127)
    return out
