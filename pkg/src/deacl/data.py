"""Dataset ingestion and augmentation.

Two sources: the standard CIFAR-10 binary record layout and a synthetic
shapes benchmark (bars / crosses / discs / rings on noisy backgrounds)
sized for desk-scale runs. Labels are carried alongside the images but
access can be locked, which is how the pretraining and distillation
stages are kept label-free.

Augmentation policies:
  strong: random resized crop, horizontal flip, color jitter, random
          grayscale, gaussian blur, solarize (SimCLR-style magnitudes)
  weak:   reflect pad 4 + random crop, horizontal flip
  none:   identity
All outputs stay in [0,1] at the input shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixel bytes

SHAPE_KINDS = ("bar", "cross", "disc", "ring")


class DataError(Exception):
    pass


class LabelAccessError(Exception):
    pass


@dataclass
class Dataset:
    images: np.ndarray            # [N,C,H,W] float32 in [0,1]
    label_array: np.ndarray       # [N] int64
    split: str = "train"
    indices: np.ndarray = None    # permanent per-sample identity
    labels_locked: bool = False

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(len(self.images), dtype=np.int64)
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("image values must lie in [0,1]")

    def __len__(self):
        return len(self.images)

    @property
    def labels(self):
        if self.labels_locked:
            raise LabelAccessError(f"labels are locked for split {self.split!r}")
        return self.label_array

    def without_labels(self):
        """View of the dataset whose labels cannot be read (stages 1-2)."""
        return replace(self, labels_locked=True)

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.dtype.kind not in "bi":  # empty lists arrive as float64
            idx = idx.astype(np.int64)
        return replace(self, images=self.images[idx], label_array=self.label_array[idx],
                       indices=self.indices[idx])

    @property
    def num_classes(self):
        return int(self.label_array.max()) + 1 if len(self.label_array) else 0


@dataclass
class AugmentationPolicy:
    kind: str = "none"            # strong | weak | none
    crop_scale: tuple = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    solarize_prob: float = 0.1
    solarize_threshold: float = 0.5
    pad: int = 4

    def __post_init__(self):
        if self.kind not in ("strong", "weak", "none"):
            raise ValueError(f"unknown augmentation kind {self.kind!r}")


# -- CIFAR-10 binary layout ------------------------------------------------


def load_records(path, shape=(3, 32, 32), split="train"):
    """Parse label-byte + pixel-plane records (CIFAR-10 layout for 3x32x32)."""
    c, h, w = shape
    rec = 1 + c * h * w
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % rec != 0:
        raise DataError(f"file size {raw.size} is not a multiple of record size {rec}")
    n = raw.size // rec
    raw = raw.reshape(n, rec)
    labels = raw[:, 0].astype(np.int64)
    if n and labels.max() > 9:
        raise DataError(f"label byte out of range: {labels.max()}")
    images = raw[:, 1:].reshape(n, c, h, w).astype(np.float32) / 255.0
    return Dataset(images=images, label_array=labels, split=split)


def load_cifar_binary(path, split="train"):
    return load_records(path, shape=(3, 32, 32), split=split)


def save_records(dataset, path):
    """Write the dataset in the CIFAR-style record layout (label + planes)."""
    n = len(dataset)
    imgs = np.round(dataset.images * 255.0).astype(np.uint8).reshape(n, -1)
    labels = dataset.label_array.astype(np.uint8).reshape(n, 1)
    np.concatenate([labels, imgs], axis=1).tofile(path)


# -- synthetic shapes ------------------------------------------------------


def _draw_shape(img, kind, cy, cx, intensity):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "bar":
        mask = (np.abs(xx - cx) <= 1) & (np.abs(yy - cy) <= 5)
    elif kind == "cross":
        mask = ((np.abs(xx - cx) <= 1) & (np.abs(yy - cy) <= 4)) | \
               ((np.abs(yy - cy) <= 1) & (np.abs(xx - cx) <= 4))
    elif kind == "disc":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= 9
    elif kind == "ring":
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (r2 <= 25) & (r2 >= 12)
    else:
        raise DataError(f"unknown shape kind {kind!r}")
    img[mask] = intensity


def gen_synthetic(n_per_class, num_classes, seed, channels=1, size=16, split="train",
                  noise_level=0.4, intensity_range=(0.55, 0.75)):
    """Shape-class benchmark: one shape kind per class at jittered positions.

    Contrast between shape and background noise is deliberately modest so
    that non-robust encoders are actually attackable at small budgets.
    """
    if num_classes > len(SHAPE_KINDS):
        raise DataError(f"at most {len(SHAPE_KINDS)} classes available")
    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    images = np.empty((n, channels, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    margin = 6
    k = 0
    for cls in range(num_classes):
        kind = SHAPE_KINDS[cls]
        for _ in range(n_per_class):
            base = rng.uniform(0.0, noise_level, size=(size, size)).astype(np.float32)
            cy = rng.integers(margin, size - margin + 1)
            cx = rng.integers(margin, size - margin + 1)
            intensity = rng.uniform(*intensity_range)
            _draw_shape(base, kind, cy, cx, intensity)
            images[k] = base[None, :, :] if channels == 1 else np.repeat(base[None], channels, axis=0)
            labels[k] = cls
            k += 1
    return Dataset(images=images, label_array=labels, split=split)


# -- augmentation primitives ----------------------------------------------


def _bilinear_resize(img, out_h, out_w):
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0, 1)[None, :, None]
    wx = np.clip(xs - x0, 0, 1)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def _random_resized_crop(img, rng, scale):
    c, h, w = img.shape
    area = h * w
    for _ in range(10):
        target = rng.uniform(scale[0], scale[1]) * area
        aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
        ch = int(round(np.sqrt(target / aspect)))
        cw = int(round(np.sqrt(target * aspect)))
        if 0 < ch <= h and 0 < cw <= w:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img[:, top : top + ch, left : left + cw]
            return _bilinear_resize(crop, h, w)
    return img.copy()


def _color_jitter(img, rng, strength):
    out = img.copy()
    for transform in rng.permutation(3):
        if transform == 0:  # brightness
            out = out * rng.uniform(1 - strength, 1 + strength)
        elif transform == 1:  # contrast
            out = (out - out.mean()) * rng.uniform(1 - strength, 1 + strength) + out.mean()
        else:  # saturation (no-op for single-channel images)
            if img.shape[0] == 3:
                gray = out.mean(axis=0, keepdims=True)
                out = gray + (out - gray) * rng.uniform(1 - strength, 1 + strength)
    return out


def _gaussian_blur(img, sigma):
    radius = max(1, int(np.ceil(3 * sigma)))
    xs = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        tmp = np.apply_along_axis(lambda r: np.convolve(np.pad(r, radius, mode="reflect"), kernel, mode="valid"), 1, img[c])
        out[c] = np.apply_along_axis(lambda r: np.convolve(np.pad(r, radius, mode="reflect"), kernel, mode="valid"), 0, tmp)
    return out


def _solarize(img, threshold):
    return np.where(img >= threshold, 1.0 - img, img)


def _pad_crop(img, rng, pad):
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    return padded[:, top : top + h, left : left + w]


def augment(policy, image, rng):
    """Apply one augmentation draw to a single [C,H,W] image."""
    if policy.kind == "none":
        return image.copy()
    img = image.astype(np.float32, copy=True)
    if policy.kind == "weak":
        img = _pad_crop(img, rng, policy.pad)
        if rng.random() < policy.flip_prob:
            img = img[:, :, ::-1].copy()
        return np.clip(img, 0.0, 1.0)
    # strong
    img = _random_resized_crop(img, rng, policy.crop_scale)
    if rng.random() < policy.flip_prob:
        img = img[:, :, ::-1].copy()
    if rng.random() < policy.jitter_prob:
        img = _color_jitter(img, rng, policy.jitter_strength)
    if rng.random() < policy.grayscale_prob and img.shape[0] == 3:
        img = np.repeat(img.mean(axis=0, keepdims=True), 3, axis=0)
    if rng.random() < policy.blur_prob:
        sigma = rng.uniform(*policy.blur_sigma)
        img = _gaussian_blur(img, sigma)
    if rng.random() < policy.solarize_prob:
        img = _solarize(img, policy.solarize_threshold)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment_batch(policy, batch, rngs):
    """Augment a [B,C,H,W] batch, one rng substream per sample."""
    if policy.kind == "none":
        return batch.copy()
    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        out[i] = augment(policy, batch[i], rngs[i])
    return out


def make_views(policy, batch, rng_factory):
    """Two independent augmentation draws per sample.

    rng_factory(sample_pos, view) must yield disjoint deterministic
    substreams; see config.SeedStreams.view_rng.
    """
    if policy.kind == "none":
        return batch.copy(), batch.copy()
    b = batch.shape[0]
    view_a = augment_batch(policy, batch, [rng_factory(i, 0) for i in range(b)])
    view_b = augment_batch(policy, batch, [rng_factory(i, 1) for i in range(b)])
    return view_a, view_b
