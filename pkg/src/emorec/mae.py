"""Toy-scale masked-autoencoder pre-training and the frame feature extractor.

Images are cut into square patches, a random 75% of patches is masked, a
transformer encoder sees only the visible patches, and a lighter decoder
reconstructs the full patch grid from encoded tokens plus a learned mask
token. The loss is mean squared pixel error over the masked patches only.
After pre-training the decoder is dropped and replaced with fully connected
layers for expression classification; the fine-tuned encoder then serves as
the per-frame feature extractor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as A
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DegenerateMaskError
from .training import AdamW, OptimConfig


# -- patch grid --------------------------------------------------------------


@dataclass
class PatchGrid:
    """Row-major grid of flattened patches from one image."""

    patches: np.ndarray      # [p, patch_size^2 * channels]
    image_shape: tuple       # (h, w, c)
    patch_size: int

    @property
    def num_patches(self):
        return len(self.patches)


def _as_hwc(image):
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ContractError(f"expected [h, w] or [h, w, c] image, got {image.shape}")
    return image


def patchify(image, patch_size=16):
    """Split an image into non-overlapping ``patch_size`` squares.

    Height and width must be divisible by ``patch_size``; each patch is
    flattened in (row, col, channel) order so ``unpatchify`` is an exact
    inverse.
    """
    image = _as_hwc(image)
    h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(
            f"image {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    patches = (
        image.reshape(gh, patch_size, gw, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch_size * patch_size * c)
    )
    return PatchGrid(patches, (h, w, c), patch_size)


def unpatchify(grid: PatchGrid):
    h, w, c = grid.image_shape
    ps = grid.patch_size
    gh, gw = h // ps, w // ps
    return (
        grid.patches.reshape(gh, gw, ps, ps, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(h, w, c)
    )


def patchify_batch(images, patch_size):
    """[b, h, w, c] -> [b, p, patch_size^2 * c] with the patchify layout."""
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"images {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    return (
        images.reshape(b, gh, patch_size, gw, patch_size, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, gh * gw, patch_size * patch_size * c)
    )


# -- masking -----------------------------------------------------------------


@dataclass
class MaskPlan:
    """Partition of patch indices into masked and visible sets."""

    masked: np.ndarray
    visible: np.ndarray
    ratio: float

    @property
    def num_patches(self):
        return len(self.masked) + len(self.visible)


def sample_mask(num_patches, ratio, rng):
    """Uniformly sample ``round(ratio * p)`` patches to mask, without
    replacement. ``rng`` is a seed or a numpy Generator; the plan is
    deterministic per seed."""
    if not 0.0 < ratio < 1.0:
        raise DegenerateMaskError(f"mask ratio must be in (0, 1), got {ratio}")
    count = int(round(ratio * num_patches))
    if count == 0 or count == num_patches:
        raise DegenerateMaskError(
            f"ratio {ratio} of {num_patches} patches rounds to masking {count}"
        )
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    perm = rng.permutation(num_patches)
    return MaskPlan(np.sort(perm[:count]), np.sort(perm[count:]), ratio)


def reconstruction_loss(model_out, target_patches, plan: MaskPlan):
    """Mean squared pixel error over the masked patches only."""
    pred = model_out if isinstance(model_out, Tensor) else Tensor(model_out)
    target = np.asarray(target_patches)
    if pred.shape != target.shape:
        raise ContractError(f"reconstruction shapes differ: {pred.shape} vs {target.shape}")
    diff = A.sub(A.take(pred, plan.masked, axis=0), target[plan.masked])
    return A.mean(A.mul(diff, diff))


# -- model -------------------------------------------------------------------


@dataclass(frozen=True)
class MaeConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 16
    enc_width: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_width: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    mask_ratio: float = 0.75
    dropout: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}"
            )

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size ** 2 * self.channels


class MaeModel(nn.Module):
    """Masked-autoencoder: visible-patch encoder plus mask-token decoder."""

    def __init__(self, cfg: MaeConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.enc_width, rng)
        self.encoder = nn.TransformerEncoder(
            cfg.enc_width, cfg.enc_depth, cfg.enc_heads, 4 * cfg.enc_width, cfg.dropout, rng
        )
        self.decoder_embed = nn.Linear(cfg.enc_width, cfg.dec_width, rng)
        self.mask_token = Tensor(rng.normal(0.0, 0.02, (1, cfg.dec_width)), requires_grad=True)
        self.decoder = nn.TransformerEncoder(
            cfg.dec_width, cfg.dec_depth, cfg.dec_heads, 4 * cfg.dec_width, cfg.dropout, rng
        )
        self.pixel_head = nn.Linear(cfg.dec_width, cfg.patch_dim, rng)
        self.enc_pos = nn.sinusoidal_positions(cfg.num_patches, cfg.enc_width)
        self.dec_pos = nn.sinusoidal_positions(cfg.num_patches, cfg.dec_width)

    def forward_pretrain(self, images, rng):
        """Mask, encode, reconstruct a batch; returns (loss, pred, plans)."""
        images = prepare_images(images, self.cfg)
        b = len(images)
        p = self.cfg.num_patches
        target = patchify_batch(images, self.cfg.patch_size)
        plans = [sample_mask(p, self.cfg.mask_ratio, rng) for _ in range(b)]
        n_vis = len(plans[0].visible)
        n_mask = len(plans[0].masked)
        vis_flat = np.concatenate([i * p + plan.visible for i, plan in enumerate(plans)])
        mask_flat = np.concatenate([i * p + plan.masked for i, plan in enumerate(plans)])

        tokens = self.patch_embed(Tensor(target.reshape(b * p, -1)))
        vis_tokens = A.reshape(A.take(tokens, vis_flat, axis=0), (b, n_vis, self.cfg.enc_width))
        pos_vis = np.stack([self.enc_pos[plan.visible] for plan in plans])
        encoded = self.encoder(A.add(vis_tokens, pos_vis))

        dec_vis = A.reshape(self.decoder_embed(encoded), (b * n_vis, self.cfg.dec_width))
        mask_rows = A.take(self.mask_token, np.zeros(b * n_mask, dtype=np.intp), axis=0)
        stacked = A.concatenate([dec_vis, mask_rows], axis=0)
        # slot of (image i, position j): visible tokens first, mask tokens after
        slots = np.empty(b * p, dtype=np.intp)
        for i, plan in enumerate(plans):
            slots[i * p + plan.visible] = i * n_vis + np.arange(n_vis)
            slots[i * p + plan.masked] = b * n_vis + i * n_mask + np.arange(n_mask)
        full = A.reshape(A.take(stacked, slots, axis=0), (b, p, self.cfg.dec_width))
        decoded = self.decoder(A.add(full, self.dec_pos))
        pred = self.pixel_head(decoded)

        pred_flat = A.reshape(pred, (b * p, -1))
        diff = A.sub(A.take(pred_flat, mask_flat, axis=0), target.reshape(b * p, -1)[mask_flat])
        loss = A.mean(A.mul(diff, diff))
        return loss, pred, plans

    def encode(self, images):
        """Encoder tokens for full (unmasked) images: [b, p, enc_width]."""
        images = prepare_images(images, self.cfg)
        b = len(images)
        p = self.cfg.num_patches
        patches = patchify_batch(images, self.cfg.patch_size)
        tokens = self.patch_embed(Tensor(patches.reshape(b * p, -1)))
        tokens = A.add(A.reshape(tokens, (b, p, self.cfg.enc_width)), self.enc_pos)
        return self.encoder(tokens)


def prepare_images(images, cfg: MaeConfig):
    """Normalize a [b,h,w] or [b,h,w,c] batch to float in [0, 1]."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    if images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ContractError(
            f"expected {cfg.image_size}x{cfg.image_size}x{cfg.channels} images, "
            f"got {images.shape[1:]}"
        )
    if np.issubdtype(images.dtype, np.integer):
        images = images.astype(np.float64) / 255.0
    return images.astype(np.float64, copy=False)


class FrameClassifier(nn.Module):
    """Pre-trained encoder + mean-pooled tokens + fully connected head.

    Shares the encoder tensors with the source model, so fine-tuning this
    classifier updates them in place; decoder parameters are not referenced
    anywhere here.
    """

    def __init__(self, mae_model: MaeModel, num_classes, hidden, dropout_p, rng):
        super().__init__()
        self.cfg = mae_model.cfg
        self.patch_embed = mae_model.patch_embed
        self.encoder = mae_model.encoder
        self.enc_pos = mae_model.enc_pos
        self.hidden = nn.Linear(self.cfg.enc_width, hidden, rng)
        self.drop = nn.Dropout(dropout_p, rng)
        self.out = nn.Linear(hidden, num_classes, rng)
        self.num_classes = num_classes
        self._encode = mae_model.encode

    def features(self, images):
        """Mean over patch tokens: one vector of size enc_width per image."""
        return A.mean(self._encode(images), axis=1)

    def forward(self, images):
        return self.out(self.drop(A.relu(self.hidden(self.features(images)))))


def finetune_head_swap(model: MaeModel, num_classes=8, hidden=None, dropout_p=0.1, rng=None):
    """Drop the decoder and attach a classification head to the encoder."""
    rng = rng if rng is not None else np.random.default_rng(0)
    hidden = hidden or model.cfg.enc_width
    return FrameClassifier(model, num_classes, hidden, dropout_p, rng)


def extract_features(model, frames, batch_size=256):
    """Per-frame pooled encoder features, ``[n, enc_width]``.

    ``model`` may be a FrameClassifier or a bare MaeModel.
    """
    pool = model.features if isinstance(model, FrameClassifier) else (
        lambda imgs: A.mean(model.encode(imgs), axis=1)
    )
    was_training = model.training
    model.eval()
    chunks = []
    with A.no_grad():
        for lo in range(0, len(frames), batch_size):
            chunks.append(pool(frames[lo:lo + batch_size]).data)
    model.train(was_training)
    return np.concatenate(chunks) if chunks else np.zeros((0, model.cfg.enc_width))


# -- toy training loops --------------------------------------------------


def pretrain(model: MaeModel, images, steps, batch_size, lr, seed=0, log_cb=None):
    """Toy-scale MAE pre-training; returns the per-step loss history."""
    rng = np.random.default_rng(seed)
    opt = AdamW(model.named_parameters(), OptimConfig(lr_peak=lr, weight_decay=0.0, epochs=1))
    history = []
    n = len(images)
    model.train()
    for step in range(1, steps + 1):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        loss, _, _ = model.forward_pretrain(images[idx], rng)
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        history.append({"step": step, "lr": lr, "loss": loss.item()})
        if log_cb:
            log_cb(step, loss.item())
    model.eval()
    return history


def finetune_classifier(classifier: FrameClassifier, images, class_ids, epochs,
                        batch_size, lr, seed=0, log_cb=None):
    """Cross-entropy fine-tuning of the encoder + classification head."""
    from . import metrics as M

    rng = np.random.default_rng(seed)
    opt = AdamW(classifier.named_parameters(), OptimConfig(lr_peak=lr, weight_decay=0.0, epochs=1))
    ids = np.asarray(class_ids)
    history = []
    n = len(images)
    classifier.train()
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            step += 1
            batch = order[lo:lo + batch_size]
            logits = classifier(images[batch])
            loss = M.expr_loss(logits, ids[batch])
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            history.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss.item()})
            if log_cb:
                log_cb(step, loss.item())
    classifier.eval()
    return history


def synthetic_images(count, size, rng, channels=1):
    """Smooth random sinusoid mixtures in [0, 1]; stand-in pre-training data."""
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    images = np.zeros((count, size, size, channels))
    for i in range(count):
        for c in range(channels):
            img = np.zeros((size, size))
            for _ in range(3):
                fx, fy = rng.uniform(0.5, 3.0, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                img += rng.uniform(0.1, 0.35) * np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
            images[i, :, :, c] = img
    return np.clip(images + 0.5, 0.0, 1.0)
