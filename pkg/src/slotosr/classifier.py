"""Slot classification with anti-noise-slot (ANS) training.

Two small MLP heads run on frozen slot features: a main classifier that
scores each slot against the known classes, and a noise classifier that
learns which slots carry no class content (background or degenerate
attention).  During training the noise verdicts inflate the assignment
cost of noise slots, so Hungarian matching routes the true labels to
foreground slots.  The pure-slot baseline trains the same main head with
plain Hungarian matching and no noise machinery.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .matching import hungarian
from .optim import Adam, halved_lr

log = logging.getLogger(__name__)


@dataclass
class PaddedLabelSet:
    """Ground-truth labels padded with null rows to match the slot count.

    ``onehot`` is N x num_classes; real labels occupy one-hot rows, the
    padding rows are all-zero and flagged in ``null_rows``.
    """

    onehot: np.ndarray
    null_rows: np.ndarray

    def __post_init__(self):
        self.onehot = np.asarray(self.onehot, dtype=np.float64)
        self.null_rows = np.asarray(self.null_rows, dtype=bool)
        n, k = self.onehot.shape
        if self.null_rows.shape != (n,):
            raise ValueError(f"null_rows length {self.null_rows.shape} != {n} rows")
        for i in range(n):
            row = self.onehot[i]
            if self.null_rows[i]:
                if row.any():
                    raise ValueError(f"null row {i} is not all-zero")
            elif not (np.isclose(row.sum(), 1.0) and np.isin(row, (0.0, 1.0)).all()):
                raise ValueError(f"row {i} is not one-hot")

    @property
    def num_labels(self):
        return int((~self.null_rows).sum())


def pad_labels(label_ids, num_slots, num_classes):
    """One-hot the label list and pad with null rows up to num_slots."""
    if len(label_ids) > num_slots:
        raise ValueError(f"{len(label_ids)} labels exceed {num_slots} slots")
    onehot = np.zeros((num_slots, num_classes))
    for i, cid in enumerate(label_ids):
        if not 0 <= cid < num_classes:
            raise ValueError(f"label id {cid} outside 0..{num_classes - 1}")
        onehot[i, cid] = 1.0
    null = np.arange(num_slots) >= len(label_ids)
    return PaddedLabelSet(onehot, null)


@dataclass
class AnsConfig:
    alpha: float = 0.5        # attention threshold for the invalid-slot test
    beta: float = 0.75        # confidence threshold on normalized noise logits
    lambda_match: float = 1e4  # cost multiplier for confident noise slots
    w_nz: float = 0.01        # weight of the noise loss in the total
    warmup_epochs: int = 5    # epochs relying on the invalid mask only

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0,1), got {self.alpha}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0,1), got {self.beta}")
        if self.lambda_match < 1.0:
            raise ValueError(f"lambda_match must be >= 1, got {self.lambda_match}")
        if self.w_nz < 0.0:
            raise ValueError(f"w_nz must be >= 0, got {self.w_nz}")


def init_heads(num_classes, slot_dim=64, hidden=64, seed=0):
    """Fresh main (fg.*) and noise (nz.*) head parameters."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))

    def glorot(fan_in, fan_out):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        return rng.normal(0.0, std, size=(fan_in, fan_out))

    def param(v):
        return Tensor(v, requires_grad=True)

    return {
        "fg.w1": param(glorot(slot_dim, hidden)),
        "fg.b1": param(np.zeros(hidden)),
        "fg.w2": param(glorot(hidden, num_classes)),
        "fg.b2": param(np.zeros(num_classes)),
        "nz.w1": param(glorot(slot_dim, hidden)),
        "nz.b1": param(np.zeros(hidden)),
        "nz.w2": param(glorot(hidden, 1)),
        "nz.b2": param(np.zeros(1)),
    }


def fg_logits(heads, slot_features):
    """Main-head logits for ... x D slot features -> ... x num_classes."""
    h = ad.relu(ad.linear(_lift_features(slot_features), heads["fg.w1"], heads["fg.b1"]))
    return ad.linear(h, heads["fg.w2"], heads["fg.b2"])


def nz_logits(heads, slot_features):
    """Noise-head logit per slot: ... x D -> ... (last axis squeezed)."""
    x = _lift_features(slot_features)
    h = ad.relu(ad.linear(x, heads["nz.w1"], heads["nz.b1"]))
    out = ad.linear(h, heads["nz.w2"], heads["nz.b2"])
    return ad.reshape(out, out.shape[:-1])


def _lift_features(slot_features):
    if isinstance(slot_features, Tensor):
        return slot_features
    return Tensor(np.asarray(slot_features, dtype=np.float64))


def detect_invalid_slots(attn, grid, alpha=0.5):
    """Flag slots whose attention mask has no coherent region.

    A slot is valid iff its per-slot min-max-normalized map contains at
    least two 4-adjacent grid cells both above alpha; a flat map ranks
    invalid outright.  Returns a {0,1} vector of length N.
    """
    attn = np.asarray(attn, dtype=np.float64)
    n, p = attn.shape
    h, w = grid
    if h * w != p:
        raise ValueError(f"grid {grid} incompatible with {p} positions")
    invalid = np.ones(n)
    for i in range(n):
        lo, hi = attn[i].min(), attn[i].max()
        if hi <= lo:
            continue
        cells = ((attn[i] - lo) / (hi - lo) > alpha).reshape(h, w)
        horiz = cells[:, :-1] & cells[:, 1:]
        vert = cells[:-1, :] & cells[1:, :]
        if horiz.any() or vert.any():
            invalid[i] = 0.0
    return invalid


def noise_confidence_mask(logits, beta=0.75):
    """High-confidence noise verdicts from the noise head's raw logits.

    Logits are min-max normalized over the slot axis; slots above beta are
    flagged.  All-equal logits normalize degenerately and yield no flags.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ValueError(f"expected >= 2 slot logits, got shape {logits.shape}")
    lo, hi = logits.min(), logits.max()
    if hi <= lo:
        log.warning("noise logits all equal; no confident noise slots")
        return np.zeros_like(logits)
    return ((logits - lo) / (hi - lo) > beta).astype(np.float64)


def pairwise_cost(logits, labels):
    """Cross-entropy of every slot's logits against every padded label row.

    Null rows are scored against the uniform distribution over classes, so
    matching a slot to padding penalizes confident class predictions.
    Differentiable in the logits; cost[i][j] = lse(z_i) - z_i . t_j.
    """
    targets = labels.onehot.copy()
    k = targets.shape[1]
    targets[labels.null_rows] = 1.0 / k
    lse = ad.logsumexp(logits, axis=-1, keepdims=True)    # N x 1
    dots = ad.matmul(logits, Tensor(targets.T))           # N x N
    return ad.sub(lse, dots)


def recalibrate_cost(cost, noise_mask, lambda_match):
    """Scale the rows of confident noise slots by lambda_match."""
    if lambda_match <= 0:
        raise ValueError(f"lambda_match must be positive, got {lambda_match}")
    noise_mask = np.asarray(noise_mask, dtype=np.float64)
    weights = (1.0 - noise_mask) + lambda_match * noise_mask
    return ad.mul(cost, Tensor(weights[:, None]))


def build_noise_pseudolabel(assignment, null_rows, invalid_mask):
    """Noise pseudo-label: null-assigned slots united with invalid slots."""
    null_rows = np.asarray(null_rows, dtype=bool)
    invalid = np.asarray(invalid_mask, dtype=np.float64)
    assigned_null = null_rows[np.asarray(assignment.perm)]
    return np.maximum(assigned_null.astype(np.float64), invalid)


def closed_set_predict(logits, mode, tau_multi=0.0):
    """Label prediction from N x num_classes slot logits.

    single: the class argmax of the slot holding the overall max logit.
    multi: per-class max over slots, predict every class above tau_multi.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if mode == "single":
        slot = np.unravel_index(np.argmax(logits), logits.shape)[0]
        return [int(np.argmax(logits[slot]))]
    if mode == "multi":
        per_class = logits.max(axis=0)
        return [int(c) for c in np.flatnonzero(per_class > tau_multi)]
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class TrainBatch:
    """Frozen slot features with padded labels and precomputed invalid masks."""

    features: np.ndarray            # B x N x D
    labels: list                    # B PaddedLabelSets
    invalid: np.ndarray             # B x N {0,1}


def train_step(batch, heads, config, use_ans=True, warm=False):
    """One recalibrated-matching step; returns the loss graph and parts.

    Order per image: noise verdicts from the current noise head (or the
    invalid mask alone while warm), row-reweighted cost, Hungarian
    assignment, matched-pair loss, then the noise head's BCE against the
    pseudo-label derived from that same assignment.
    """
    b, n, _ = batch.features.shape
    noise_out = nz_logits(heads, Tensor(batch.features))     # B x N

    kept, skipped = [], []
    for bi, labels in enumerate(batch.labels):
        (kept if labels.num_labels else skipped).append(bi)
    if skipped:
        log.warning("skipping %d images with empty label sets", len(skipped))
    if not kept:
        raise ValueError("train_step: every image in the batch has zero labels")

    nz_targets = np.zeros((b, n))
    nz_weight = np.zeros((b, n))
    per_image = []
    for bi in kept:
        labels = batch.labels[bi]
        cost = pairwise_cost(fg_logits(heads, batch.features[bi]), labels)
        if use_ans:
            if warm:
                mask = batch.invalid[bi]
            else:
                mask = noise_confidence_mask(noise_out.values[bi], config.beta)
            weighted = recalibrate_cost(cost, mask, config.lambda_match)
        else:
            weighted = cost
        assignment = hungarian(weighted.values)
        chosen = np.zeros((n, n))
        chosen[np.arange(n), assignment.perm] = 1.0
        per_image.append(ad.tsum(ad.mul(weighted, Tensor(chosen))))
        nz_targets[bi] = build_noise_pseudolabel(assignment, labels.null_rows, batch.invalid[bi])
        nz_weight[bi] = 1.0

    hun = per_image[0]
    for t in per_image[1:]:
        hun = ad.add(hun, t)
    hun = ad.div(hun, float(len(kept)))

    if use_ans:
        eps = 1e-7
        clipped = ad.clip(ad.sigmoid(noise_out), eps, 1.0 - eps)
        t = Tensor(nz_targets)
        ll = ad.add(ad.mul(t, ad.log(clipped)),
                    ad.mul(ad.sub(1.0, t), ad.log(ad.sub(1.0, clipped))))
        nz = ad.div(ad.neg(ad.tsum(ad.mul(ll, Tensor(nz_weight)))), float(len(kept) * n))
        total = ad.add(hun, ad.mul(nz, config.w_nz))
    else:
        nz = Tensor(np.zeros(()))
        total = hun
    return {"match_loss": hun, "noise_loss": nz, "loss": total}


def train_classifier(slot_sets, label_sets, num_classes, config=None, mode="ans",
                     seed=0, epochs=40, batch_size=32, lr=4e-4, halve_every=40,
                     hidden=64, logger=None):
    """Train the heads on frozen slot features.

    mode "ans" enables noise detection, cost recalibration, and the noise
    head; mode "plain" is the pure-slot baseline (plain Hungarian matching,
    main head only).  Returns (heads, history).
    """
    if mode not in ("ans", "plain"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(slot_sets) != len(label_sets):
        raise ValueError("slot_sets and label_sets length mismatch")
    if len(slot_sets) == 0:
        raise ValueError("empty training set")
    config = config or AnsConfig()

    features = np.stack([s.slots for s in slot_sets])
    n_img, n_slots, slot_dim = features.shape
    invalid = np.stack([
        detect_invalid_slots(s.attn, s.grid, config.alpha) for s in slot_sets])

    heads = init_heads(num_classes, slot_dim=slot_dim, hidden=hidden, seed=seed)
    trainable = heads if mode == "ans" else {k: v for k, v in heads.items() if k.startswith("fg.")}
    opt = Adam(trainable, learning_rate=lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 505]))

    history = []
    for epoch in range(epochs):
        opt.learning_rate = halved_lr(lr, epoch, halve_every)
        order = shuffle_rng.permutation(n_img)
        sums = {"match_loss": 0.0, "noise_loss": 0.0, "loss": 0.0}
        n_batches = 0
        for start in range(0, n_img, batch_size):
            idx = order[start:start + batch_size]
            batch = TrainBatch(features[idx], [label_sets[i] for i in idx],
                               invalid[idx])
            losses = train_step(batch, heads, config, use_ans=(mode == "ans"),
                                warm=(epoch < config.warmup_epochs))
            opt.zero_grad()
            ad.backward(losses["loss"])
            opt.step()
            for k in sums:
                sums[k] += float(losses[k].values)
            n_batches += 1
        entry = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        history.append(entry)
        if logger is not None:
            logger(entry)
    return heads, history


# ---------------------------------------------------------------------------
# persistence

def save_heads(path, heads):
    return ckpt.save(path, heads)


def load_heads(path):
    return {name: Tensor(arr, requires_grad=True) for name, arr in ckpt.load(path).items()}
