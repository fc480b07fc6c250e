"""Slot-attention encoder/decoder pretrained by patch reconstruction.

The encoder embeds 8x8 image patches with a learned positional code; slot
attention competes N slot vectors over the patch grid for a fixed number of
iterations; a spatial-broadcast decoder mixes per-slot reconstructions with
alpha weights.  After pretraining the whole module is frozen and only read
out by the classifier heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .optim import Adam

ATTN_EPS = 1e-8


@dataclass(frozen=True)
class SlotModelConfig:
    num_slots: int = 6
    slot_dim: int = 64
    iters: int = 3
    patch: int = 8
    canvas: int = 64
    enc_hidden: int = 128
    dec_hidden: int = 128
    feature_target: str = "pixel"  # or frozen_extractor

    def __post_init__(self):
        if self.num_slots < 2:
            raise ValueError(f"num_slots must be >= 2, got {self.num_slots}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.canvas % self.patch != 0:
            raise ValueError(f"canvas {self.canvas} not divisible by patch {self.patch}")
        if self.feature_target not in ("pixel", "frozen_extractor"):
            raise ValueError(f"unknown feature_target {self.feature_target!r}")

    @property
    def grid(self):
        side = self.canvas // self.patch
        return (side, side)

    @property
    def num_positions(self):
        side = self.canvas // self.patch
        return side * side

    @property
    def patch_dim(self):
        return self.patch * self.patch * 3

    @property
    def target_dim(self):
        return self.patch_dim if self.feature_target == "pixel" else self.slot_dim


@dataclass
class SlotSet:
    """Final slot vectors and the final-iteration attention for one image."""

    slots: np.ndarray   # N x D
    attn: np.ndarray    # N x P, sums to 1 over slots at every position
    grid: tuple


def _glorot(rng, fan_in, fan_out):
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def _param(values):
    return Tensor(values, requires_grad=True)


def init_slot_model(cfg, seed):
    """Fresh parameter dict; names prefixed by submodule for checkpointing."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    d = cfg.slot_dim
    pd = cfg.patch_dim
    p = {}
    p["enc.we"] = _param(_glorot(rng, pd, d))
    p["enc.be"] = _param(np.zeros(d))
    p["enc.pos_w"] = _param(_glorot(rng, 4, d))
    p["enc.pos_b"] = _param(np.zeros(d))
    p["enc.ln_g"] = _param(np.ones(d))
    p["enc.ln_b"] = _param(np.zeros(d))
    p["enc.h1w"] = _param(_glorot(rng, d, cfg.enc_hidden))
    p["enc.h1b"] = _param(np.zeros(cfg.enc_hidden))
    p["enc.h2w"] = _param(_glorot(rng, cfg.enc_hidden, d))
    p["enc.h2b"] = _param(np.zeros(d))

    p["slot.mu"] = _param(rng.normal(0.0, 0.5, size=(1, d)))
    p["slot.logsigma"] = _param(np.full((1, d), math.log(0.5)))

    p["attn.ln_in_g"] = _param(np.ones(d))
    p["attn.ln_in_b"] = _param(np.zeros(d))
    p["attn.wq"] = _param(_glorot(rng, d, d))
    p["attn.wk"] = _param(_glorot(rng, d, d))
    p["attn.wv"] = _param(_glorot(rng, d, d))
    p["attn.ln_slot_g"] = _param(np.ones(d))
    p["attn.ln_slot_b"] = _param(np.zeros(d))
    for gate in ("r", "z", "n"):
        p[f"gru.wi{gate}"] = _param(_glorot(rng, d, d))
        p[f"gru.wh{gate}"] = _param(_glorot(rng, d, d))
        p[f"gru.bi{gate}"] = _param(np.zeros(d))
        p[f"gru.bh{gate}"] = _param(np.zeros(d))
    p["attn.ln_ff_g"] = _param(np.ones(d))
    p["attn.ln_ff_b"] = _param(np.zeros(d))
    p["attn.ff1w"] = _param(_glorot(rng, d, 2 * d))
    p["attn.ff1b"] = _param(np.zeros(2 * d))
    p["attn.ff2w"] = _param(_glorot(rng, 2 * d, d))
    p["attn.ff2b"] = _param(np.zeros(d))

    p["dec.pos_w"] = _param(_glorot(rng, 4, d))
    p["dec.pos_b"] = _param(np.zeros(d))
    p["dec.h1w"] = _param(_glorot(rng, d, cfg.dec_hidden))
    p["dec.h1b"] = _param(np.zeros(cfg.dec_hidden))
    p["dec.h2w"] = _param(_glorot(rng, cfg.dec_hidden, cfg.dec_hidden))
    p["dec.h2b"] = _param(np.zeros(cfg.dec_hidden))
    p["dec.ow"] = _param(_glorot(rng, cfg.dec_hidden, cfg.target_dim))
    p["dec.ob"] = _param(np.zeros(cfg.target_dim))
    p["dec.aw"] = _param(_glorot(rng, cfg.dec_hidden, 1))
    p["dec.ab"] = _param(np.zeros(1))

    if cfg.feature_target == "frozen_extractor":
        # fixed random feature map standing in for a pretrained extractor
        p["frozen.wf"] = Tensor(_glorot(rng, pd, d))
        p["frozen.bf"] = Tensor(np.zeros(d))
    return p


def trainable(params):
    return {k: v for k, v in params.items() if not k.startswith("frozen.")}


def patchify(images, patch):
    """B x H x W x 3 -> B x P x (patch*patch*3), row-major over the patch grid."""
    b, h, w, c = images.shape
    hp, wp = h // patch, w // patch
    x = images.reshape(b, hp, patch, wp, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, hp * wp, patch * patch * c)


def _coord_grid(side):
    """P x 4 grid of (x, y, 1-x, 1-y) patch-center coordinates in [0, 1]."""
    centers = (np.arange(side) + 0.5) / side
    ys, xs = np.meshgrid(centers, centers, indexing="ij")
    flat_x = xs.reshape(-1)
    flat_y = ys.reshape(-1)
    return np.stack([flat_x, flat_y, 1.0 - flat_x, 1.0 - flat_y], axis=1)


def _check_images(images):
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"encode: expected H x W x 3 images, got shape {images.shape}")
    if not np.all(np.isfinite(images)):
        raise ValueError("encode: non-finite pixel values")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("encode: pixel values must lie in [0, 1]")
    return images, single


def encode(params, cfg, images):
    """Patch-embed images into B x P x D features with positional code added."""
    images, _ = _check_images(images)
    return _encode_patches(params, cfg, patchify(images, cfg.patch))


def slot_noise(cfg, batch, rng_seed):
    rng = np.random.default_rng(rng_seed)
    return rng.standard_normal((batch, cfg.num_slots, cfg.slot_dim))


def slot_attention(params, cfg, features, rng_seed=None, noise=None):
    """Iteratively bind N slots to the feature grid.

    Returns (slots B x N x D, attn B x N x P) as graph tensors; attn is the
    attention of the final iteration, softmax-normalized over slots, so each
    grid position distributes exactly one unit of mass across slots.
    """
    b = features.shape[0]
    if noise is None:
        noise = slot_noise(cfg, b, 0 if rng_seed is None else rng_seed)
    d = cfg.slot_dim
    scale = d ** -0.5
    # slots0 = mu + exp(logsigma) * eps, broadcast over batch and slot index
    slots = ad.add(params["slot.mu"], ad.mul(ad.exp(params["slot.logsigma"]), Tensor(noise)))

    feats = ad.layer_norm(features, params["attn.ln_in_g"], params["attn.ln_in_b"])
    k = ad.matmul(feats, params["attn.wk"])
    v = ad.matmul(feats, params["attn.wv"])
    kt = ad.transpose(k, (0, 2, 1))

    gru_p = {f"w{io}{gate}": params[f"gru.w{io}{gate}"] for io in "ih" for gate in "rzn"}
    gru_p.update({f"b{io}{gate}": params[f"gru.b{io}{gate}"] for io in "ih" for gate in "rzn"})

    attn = None
    for _ in range(cfg.iters):
        prev = slots
        q = ad.matmul(ad.layer_norm(slots, params["attn.ln_slot_g"], params["attn.ln_slot_b"]), params["attn.wq"])
        dots = ad.mul(ad.matmul(q, kt), scale)          # B x N x P
        attn = ad.softmax(dots, axis=1)                  # compete over slots
        weights = ad.div(attn, ad.add(ad.tsum(attn, axis=2, keepdims=True), ATTN_EPS))
        updates = ad.matmul(weights, v)                  # B x N x D
        flat_prev = ad.reshape(prev, (b * cfg.num_slots, d))
        flat_upd = ad.reshape(updates, (b * cfg.num_slots, d))
        slots = ad.reshape(ad.gru_cell(flat_prev, flat_upd, gru_p), (b, cfg.num_slots, d))
        ff = ad.layer_norm(slots, params["attn.ln_ff_g"], params["attn.ln_ff_b"])
        ff = ad.relu(ad.linear(ff, params["attn.ff1w"], params["attn.ff1b"]))
        slots = ad.add(slots, ad.linear(ff, params["attn.ff2w"], params["attn.ff2b"]))
    return slots, attn


def decode(params, cfg, slots):
    """Spatial-broadcast decode: per-slot patch reconstructions mixed by alpha.

    Returns (recon B x P x target_dim, alpha B x N x P); alpha sums to one
    over slots at every position.
    """
    b, n, d = slots.shape
    pos = ad.linear(Tensor(_coord_grid(cfg.grid[0])), params["dec.pos_w"], params["dec.pos_b"])
    z = ad.add(ad.reshape(slots, (b, n, 1, d)), ad.reshape(pos, (1, 1, cfg.num_positions, d)))
    flat = ad.reshape(z, (b * n * cfg.num_positions, d))
    h = ad.relu(ad.linear(flat, params["dec.h1w"], params["dec.h1b"]))
    h = ad.relu(ad.linear(h, params["dec.h2w"], params["dec.h2b"]))
    out = ad.linear(h, params["dec.ow"], params["dec.ob"])
    alpha_logit = ad.linear(h, params["dec.aw"], params["dec.ab"])
    out = ad.reshape(out, (b, n, cfg.num_positions, cfg.target_dim))
    alpha = ad.softmax(ad.reshape(alpha_logit, (b, n, cfg.num_positions)), axis=1)
    recon = ad.tsum(ad.mul(out, ad.reshape(alpha, (b, n, cfg.num_positions, 1))), axis=1)
    return recon, alpha


def reconstruction_target(params, cfg, images):
    """What the decoder should reproduce: raw patches, or frozen features."""
    images, _ = _check_images(images)
    patches = patchify(images, cfg.patch)
    if cfg.feature_target == "pixel":
        return patches
    h = patches @ params["frozen.wf"].values + params["frozen.bf"].values
    return np.maximum(h, 0.0)


def compute_slot_set(params, cfg, image, rng_seed):
    """Inference path: one image -> SlotSet of plain arrays."""
    with ad.no_grad():
        feats = encode(params, cfg, image)
        slots, attn = slot_attention(params, cfg, feats, rng_seed=rng_seed)
    return SlotSet(slots.values[0], attn.values[0], cfg.grid)


def pretrain(rows, images, cfg, seed, epochs, batch_size, lr, log=None):
    """Train encoder/decoder by reconstruction on known-class training images.

    ``rows`` is the manifest row list (used only for its length / identity),
    ``images`` the matching B x H x W x 3 array.  Returns (params, history)
    where history holds one mean-loss entry per epoch.

    Each image gets one fixed slot-noise draw, reused every epoch.  Resampling
    the noise per step keeps shuffling which slot sees which object, and at
    this model scale that is enough to stop slots from ever specialising.
    """
    if len(rows) == 0:
        raise ValueError("pretrain: empty dataset")
    params = init_slot_model(cfg, seed)
    opt = Adam(trainable(params), learning_rate=lr)
    targets_all = reconstruction_target(params, cfg, images)
    patches_all = patchify(np.asarray(images, dtype=np.float64), cfg.patch)

    n = len(rows)
    noise_all = np.stack(
        [slot_noise(cfg, 1, np.random.SeedSequence([seed, 303, i]))[0] for i in range(n)]
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    history = []
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        nb = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            feats = _encode_patches(params, cfg, patches_all[idx])
            slots, _ = slot_attention(params, cfg, feats, noise=noise_all[idx])
            recon, _ = decode(params, cfg, slots)
            diff = ad.sub(recon, Tensor(targets_all[idx]))
            loss = ad.tmean(ad.mul(diff, diff))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += float(loss.values)
            nb += 1
        history.append({"epoch": epoch, "loss": total / nb})
        if log is not None:
            log(history[-1])
    return params, history


def build_pretrain_mosaics(images, masks, count, seed, objects_per_scene=(2, 3), max_tries=8):
    """Composite multi-object reconstruction scenes out of single-object rows.

    An autoencoder pretrained on one-object images can park every slot on the
    global feature mean and still reconstruct almost perfectly, so attention
    never partitions anything.  Scenes holding several objects make that
    shortcut unprofitable.  Each mosaic pastes 2..3 source objects (mask
    cut-outs at random non-overlapping shifts) onto a fresh canvas, so every
    pixel still originates from the provided training images.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if len(images) == 0:
        raise ValueError("build_pretrain_mosaics: no source images")
    if len(images) != len(masks):
        raise ValueError("build_pretrain_mosaics: images/masks length mismatch")
    pool = [(i, k) for i, ms in enumerate(masks) for k in range(len(ms)) if ms[k].any()]
    if not pool:
        raise ValueError("build_pretrain_mosaics: every source mask is empty")
    lo, hi = objects_per_scene
    if not 1 <= lo <= hi:
        raise ValueError(f"build_pretrain_mosaics: bad objects_per_scene {objects_per_scene}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 606]))
    h, w = images[0].shape[:2]
    out = np.zeros((count, h, w, 3), dtype=np.float64)
    for c in range(count):
        occupied = np.zeros((h, w), dtype=bool)
        take = min(int(rng.integers(lo, hi + 1)), len(pool))
        for j in rng.choice(len(pool), size=take, replace=False):
            i, k = pool[j]
            ys, xs = np.nonzero(masks[i][k])
            for _ in range(max_tries):
                dy = int(rng.integers(-ys.min(), h - ys.max()))
                dx = int(rng.integers(-xs.min(), w - xs.max()))
                if not occupied[ys + dy, xs + dx].any():
                    out[c, ys + dy, xs + dx] = images[i][ys, xs]
                    occupied[ys + dy, xs + dx] = True
                    break
    return out


def _encode_patches(params, cfg, patches):
    base = ad.linear(Tensor(patches), params["enc.we"], params["enc.be"])
    pos = ad.linear(Tensor(_coord_grid(cfg.grid[0])), params["enc.pos_w"], params["enc.pos_b"])
    x = ad.add(base, pos)
    h = ad.layer_norm(x, params["enc.ln_g"], params["enc.ln_b"])
    h = ad.relu(ad.linear(h, params["enc.h1w"], params["enc.h1b"]))
    return ad.linear(h, params["enc.h2w"], params["enc.h2b"])


# ---------------------------------------------------------------------------
# persistence

_CFG_KEYS = ("num_slots", "slot_dim", "iters", "patch", "canvas", "enc_hidden", "dec_hidden")


def save_model(path, params, cfg):
    blob = {k: v for k, v in params.items()}
    for key in _CFG_KEYS:
        blob[f"cfg.{key}"] = np.asarray(float(getattr(cfg, key)))
    blob["cfg.feature_target"] = np.asarray(0.0 if cfg.feature_target == "pixel" else 1.0)
    return ckpt.save(path, blob)


def load_model(path):
    blob = ckpt.load(path)
    kwargs = {key: int(blob[f"cfg.{key}"]) for key in _CFG_KEYS}
    kwargs["feature_target"] = "pixel" if float(blob["cfg.feature_target"]) == 0.0 else "frozen_extractor"
    cfg = SlotModelConfig(**kwargs)
    params = {}
    for name, arr in blob.items():
        if name.startswith("cfg."):
            continue
        params[name] = Tensor(arr, requires_grad=not name.startswith("frozen."))
    return params, cfg


def backbone_hash(params):
    """Hash of every encoder/decoder/attention parameter (heads excluded)."""
    sub = {k: v for k, v in params.items() if not (k.startswith("fg.") or k.startswith("nz."))}
    return ckpt.weights_hash(sub)
