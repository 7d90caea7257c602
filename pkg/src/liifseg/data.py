"""Synthetic face-like samples, on-disk datasets, resizing, and augmentation.

Dataset layout: ``root/images/<id>.png`` (8-bit RGB), ``root/masks/<id>.png``
(8-bit single channel, pixel value = class id, 0 = background), and
``root/<split>.txt`` with one id per line. Samples load in lexicographic id
order.

All randomness flows through explicitly passed seeds or numpy generators.
"""

import dataclasses
import os

import numpy as np
from PIL import Image, ImageFilter

from .errors import DataError, ParameterError

# synthetic class ids
BACKGROUND, SKIN, HAIR, EYE_L, EYE_R, BROWS, NOSE, MOUTH = range(8)
SYNTH_CLASSES = 8

_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclasses.dataclass
class SegSample:
    """One image/label pair: image 3 x H x W in [0, 1], labels H x W ints."""

    image: np.ndarray
    labels: np.ndarray
    num_classes: int

    def validate(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"image must be 3 x H x W, got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise DataError(
                f"labels shape {self.labels.shape} does not match image {self.image.shape}"
            )
        if not np.isfinite(self.image).all():
            raise DataError("image contains non-finite values")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(
                f"labels outside [0, {self.num_classes}): "
                f"min {self.labels.min()}, max {self.labels.max()}"
            )


@dataclasses.dataclass
class AugmentPolicy:
    """Sampling ranges for one affine + crop + color-jitter draw."""

    rotation_deg: tuple = (-30.0, 30.0)
    shear_deg: tuple = (0.0, 20.0)
    scale: tuple = (0.5, 3.0)
    crop: int | None = None
    brightness: tuple = (0.5, 1.5)
    contrast: tuple = (0.0, 2.0)
    saturation: tuple = (0.5, 1.5)
    hue: tuple = (-0.3, 0.3)

    @classmethod
    def neutral(cls):
        """Ranges collapsed so augment() is the identity (up to resampling)."""
        return cls(
            rotation_deg=(0.0, 0.0),
            shear_deg=(0.0, 0.0),
            scale=(1.0, 1.0),
            crop=None,
            brightness=(1.0, 1.0),
            contrast=(1.0, 1.0),
            saturation=(1.0, 1.0),
            hue=(0.0, 0.0),
        )


# ---------------------------------------------------------------------------
# synthetic faces


@dataclasses.dataclass
class _FaceGeometry:
    cx: float
    cy: float
    a: float  # skin semi-axis along the face's u axis
    b: float  # skin semi-axis along the face's v axis
    phi: float  # tilt, radians
    hair_scale: float
    hair_lift: float
    hair_cut: float  # crescent truncation line in face-frame v
    eye_x: float
    eye_y: float
    eye_rx: float
    eye_ry: float
    brow_gap: float
    brow_rx: float
    brow_ry: float
    nose_apex: float
    nose_base: float
    nose_half: float
    mouth_y: float
    mouth_rx: float
    mouth_ry: float

    def face_frame(self, xs, ys):
        """Map unit-square points into the face's normalized (u, v) frame."""
        dx = xs - self.cx
        dy = ys - self.cy
        c, s = np.cos(self.phi), np.sin(self.phi)
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        return u, v


def _sample_face_geometry(rng):
    # close-up face crops: the skin ellipse fills most of the frame and every
    # feature is sized so a couple of pixels of boundary error stay cheap.
    # Containment bounds keep all features strictly inside the skin ellipse
    # for any jitter draw; the brow band sits a margin above the eye so the
    # two never overlap.
    eye_ry = rng.uniform(0.15, 0.19)
    brow_ry = rng.uniform(0.13, 0.17)
    return _FaceGeometry(
        cx=rng.uniform(0.45, 0.55),
        cy=rng.uniform(0.50, 0.56),
        a=rng.uniform(0.30, 0.36),
        b=rng.uniform(0.38, 0.44),
        phi=rng.uniform(-0.25, 0.25),
        hair_scale=rng.uniform(1.18, 1.32),
        hair_lift=rng.uniform(0.16, 0.24),
        hair_cut=rng.uniform(0.10, 0.30),
        eye_x=rng.uniform(0.36, 0.44),
        eye_y=rng.uniform(0.14, 0.18),
        eye_rx=rng.uniform(0.20, 0.26),
        eye_ry=eye_ry,
        brow_gap=eye_ry + brow_ry + rng.uniform(0.03, 0.08),
        brow_rx=rng.uniform(0.13, 0.16),
        brow_ry=brow_ry,
        nose_apex=rng.uniform(-0.08, 0.00),
        nose_base=rng.uniform(0.28, 0.34),
        nose_half=rng.uniform(0.14, 0.19),
        mouth_y=rng.uniform(0.50, 0.56),
        mouth_rx=rng.uniform(0.24, 0.32),
        mouth_ry=rng.uniform(0.14, 0.18),
    )


def _ellipse(u, v, u0, v0, ru, rv):
    return ((u - u0) / ru) ** 2 + ((v - v0) / rv) ** 2 <= 1.0


def _convex_polygon(u, v, points):
    """Inside test for a convex polygon given as a consistent vertex cycle."""
    neg = np.zeros(u.shape, dtype=bool)
    pos = np.zeros(u.shape, dtype=bool)
    n = len(points)
    for i in range(n):
        p, q = points[i], points[(i + 1) % n]
        d = (q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0])
        neg |= d < 0
        pos |= d > 0
    return ~(neg & pos)


def _rasterize_labels(geom, res, num_classes):
    centers = (np.arange(res) + 0.5) / res
    xs, ys = np.meshgrid(centers, centers, indexing="xy")
    u, v = geom.face_frame(xs, ys)

    labels = np.zeros((res, res), dtype=np.int64)
    skin = u**2 + v**2 <= 1.0
    # crescent cap: a larger lifted ellipse minus the skin, truncated below
    # hair_cut so the tapering tips never thin out to slivers
    hair = (u / geom.hair_scale) ** 2 + ((v + geom.hair_lift) / geom.hair_scale) ** 2 <= 1.0
    hair &= v <= geom.hair_cut

    def paint(mask, cls):
        if cls < num_classes:
            labels[mask] = cls

    paint(hair, HAIR)
    paint(skin, SKIN)
    paint(_ellipse(u, v, -geom.eye_x, -geom.eye_y, geom.eye_rx, geom.eye_ry), EYE_L)
    paint(_ellipse(u, v, geom.eye_x, -geom.eye_y, geom.eye_rx, geom.eye_ry), EYE_R)
    brow_v = -(geom.eye_y + geom.brow_gap)
    paint(_ellipse(u, v, -geom.eye_x, brow_v, geom.brow_rx, geom.brow_ry), BROWS)
    paint(_ellipse(u, v, geom.eye_x, brow_v, geom.brow_rx, geom.brow_ry), BROWS)
    # blunt-topped trapezoid: a sharp apex would vanish at coarse rasters
    top = 0.4 * geom.nose_half
    paint(
        _convex_polygon(
            u,
            v,
            [
                (-top, geom.nose_apex),
                (top, geom.nose_apex),
                (geom.nose_half, geom.nose_base),
                (-geom.nose_half, geom.nose_base),
            ],
        ),
        NOSE,
    )
    paint(_ellipse(u, v, 0.0, geom.mouth_y, geom.mouth_rx, geom.mouth_ry), MOUTH)
    return labels


def _sample_colors(rng):
    def jitter(base, amt):
        return np.clip(np.asarray(base) + rng.uniform(-amt, amt, size=3), 0.0, 1.0)

    skin = jitter((0.85, 0.68, 0.54), 0.10)
    hair_tone = rng.uniform(0.14, 0.60)
    colors = np.zeros((SYNTH_CLASSES, 3))
    colors[BACKGROUND] = jitter((0.40, 0.48, 0.62), 0.15)
    colors[SKIN] = skin
    colors[HAIR] = jitter((hair_tone, hair_tone * 0.72, hair_tone * 0.5), 0.06)
    eye = jitter((0.91, 0.91, 0.94), 0.08)
    colors[EYE_L] = eye
    colors[EYE_R] = eye
    colors[BROWS] = jitter((0.14, 0.10, 0.08), 0.06)
    colors[NOSE] = np.clip(skin * rng.uniform(0.70, 0.80) + np.array([0.06, 0.0, 0.0]), 0.0, 1.0)
    colors[MOUTH] = jitter((0.70, 0.28, 0.30), 0.10)
    return colors


def synth_face(seed, res, num_classes=SYNTH_CLASSES):
    """Procedurally draw one face-like sample.

    The label map is the exact rasterization; the image gets smooth shading,
    a mild blur, and light sensor noise. Identical seeds yield identical
    samples.
    """
    if res < 32:
        raise ParameterError(f"synth_face: res must be >= 32, got {res}")
    if num_classes < 2:
        raise ParameterError(f"synth_face: num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    geom = _sample_face_geometry(rng)
    colors = _sample_colors(rng)
    labels = _rasterize_labels(geom, res, num_classes)

    img = colors[np.minimum(labels, SYNTH_CLASSES - 1)]  # H x W x 3
    centers = (np.arange(res) + 0.5) / res
    xs, ys = np.meshgrid(centers, centers, indexing="xy")
    gx = rng.uniform(-0.35, 0.35)
    gy = rng.uniform(-0.35, 0.35)
    vig = rng.uniform(0.0, 0.40)
    shade = 1.0 + gx * (xs - 0.5) + gy * (ys - 0.5)
    shade -= vig * ((xs - 0.5) ** 2 + (ys - 0.5) ** 2)
    img = img * np.clip(shade, 0.45, 1.35)[:, :, None]

    pil = Image.fromarray((np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8))
    pil = pil.filter(ImageFilter.GaussianBlur(radius=res / 72.0))
    img = np.asarray(pil, dtype=np.float64) / 255.0
    img = img + rng.normal(0.0, 0.04, size=img.shape)

    sample = SegSample(
        image=np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32),
        labels=labels,
        num_classes=num_classes,
    )
    sample.validate()
    return sample


# ---------------------------------------------------------------------------
# disk layout


def write_dataset(samples, ids, root, split):
    """Materialize samples to the documented PNG layout and write the split file."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    for sample, sid in zip(samples, ids):
        img = (np.clip(sample.image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        Image.fromarray(img.transpose(1, 2, 0)).save(os.path.join(root, "images", f"{sid}.png"))
        Image.fromarray(sample.labels.astype(np.uint8), mode="L").save(
            os.path.join(root, "masks", f"{sid}.png")
        )
    with open(os.path.join(root, f"{split}.txt"), "w", encoding="utf-8") as f:
        for sid in ids:
            f.write(f"{sid}\n")


def load_dataset(root, split, num_classes=None):
    """Load a split in lexicographic id order, validating image/mask pairing."""
    split_path = os.path.join(root, f"{split}.txt")
    if not os.path.exists(split_path):
        raise DataError(f"split file not found: {split_path}")
    with open(split_path, encoding="utf-8") as f:
        ids = sorted(line.strip() for line in f if line.strip())
    samples = []
    for sid in ids:
        img_path = os.path.join(root, "images", f"{sid}.png")
        mask_path = os.path.join(root, "masks", f"{sid}.png")
        if not os.path.exists(img_path):
            raise DataError(f"missing image for id {sid!r}: {img_path}")
        if not os.path.exists(mask_path):
            raise DataError(f"missing mask for id {sid!r}: {mask_path}")
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        labels = np.asarray(Image.open(mask_path), dtype=np.int64)
        if labels.ndim != 2:
            raise DataError(f"mask for id {sid!r} is not single-channel")
        if labels.shape != img.shape[:2]:
            raise DataError(
                f"image/mask size mismatch for id {sid!r}: {img.shape[:2]} vs {labels.shape}"
            )
        samples.append((sid, img.transpose(2, 0, 1), labels))
    if num_classes is None:
        num_classes = max((int(s[2].max()) for s in samples), default=0) + 1
    out = []
    for sid, img, labels in samples:
        if labels.max() >= num_classes:
            raise DataError(
                f"mask value {int(labels.max())} for id {sid!r} exceeds declared classes {num_classes}"
            )
        sample = SegSample(image=img, labels=labels, num_classes=num_classes)
        sample.validate()
        out.append(sample)
    return out


# ---------------------------------------------------------------------------
# resizing


def _nearest_index(n_in, n_out):
    # source index of each output cell center under the cell-center grid mapping
    return np.clip(
        np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64), 0, n_in - 1
    )


def resize_labels_nearest(labels, out_h, out_w):
    iy = _nearest_index(labels.shape[0], out_h)
    ix = _nearest_index(labels.shape[1], out_w)
    return labels[iy][:, ix]


def resize_image_bicubic(image, out_h, out_w):
    """Bicubic per-channel resize of a 3 x H x W float image, clipped to [0, 1]."""
    chans = []
    for ch in image:
        pil = Image.fromarray(np.ascontiguousarray(ch, dtype=np.float32), mode="F")
        chans.append(np.asarray(pil.resize((out_w, out_h), Image.BICUBIC), dtype=np.float32))
    return np.clip(np.stack(chans, axis=0), 0.0, 1.0)


def resize_sample(sample, res):
    """Bicubic image resize; nearest-neighbor label resize (labels stay valid ids)."""
    if res < 1:
        raise ParameterError(f"resize_sample: res must be >= 1, got {res}")
    if sample.labels.shape == (res, res):
        return SegSample(sample.image.copy(), sample.labels.copy(), sample.num_classes)
    return SegSample(
        image=resize_image_bicubic(sample.image, res, res),
        labels=resize_labels_nearest(sample.labels, res, res),
        num_classes=sample.num_classes,
    )


# ---------------------------------------------------------------------------
# augmentation


def _affine_matrix(rot_deg, shear_deg, scale):
    r = np.deg2rad(rot_deg)
    s = np.deg2rad(shear_deg)
    rot = np.array([[np.cos(r), -np.sin(r)], [np.sin(r), np.cos(r)]])
    shear = np.array([[1.0, np.tan(s)], [0.0, 1.0]])
    return rot @ shear @ np.diag([scale, scale])


def _warp(image, labels, mat):
    """Apply the inverse of ``mat`` (about the center) to sample the source.

    Image is sampled bilinearly with zero fill; labels nearest with background
    fill.
    """
    h, w = labels.shape
    inv = np.linalg.inv(mat)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    sx = inv[0, 0] * (xs - cx) + inv[0, 1] * (ys - cy) + cx
    sy = inv[1, 0] * (xs - cx) + inv[1, 1] * (ys - cy) + cy

    # nearest for labels
    nyi = np.round(sy).astype(np.int64)
    nxi = np.round(sx).astype(np.int64)
    inside_n = (nyi >= 0) & (nyi < h) & (nxi >= 0) & (nxi < w)
    new_labels = np.zeros_like(labels)
    new_labels[inside_n] = labels[nyi[inside_n], nxi[inside_n]]

    # bilinear with zero fill for the image
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    new_image = np.zeros_like(image, dtype=np.float64)
    for dy_c in (0, 1):
        for dx_c in (0, 1):
            yi = y0 + dy_c
            xi = x0 + dx_c
            wgt = (fy if dy_c else 1.0 - fy) * (fx if dx_c else 1.0 - fx)
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            yc = np.clip(yi, 0, h - 1)
            xc = np.clip(xi, 0, w - 1)
            new_image += image[:, yc, xc] * (wgt * ok)
    return new_image.astype(image.dtype), new_labels


def _rgb_to_hsv(rgb):
    # rgb: H x W x 3 in [0, 1]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(span, 1e-12)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    h = np.where(
        maxc == r,
        ((g - b) / safe) % 6.0,
        np.where(maxc == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(span == 0, 0.0, h / 6.0)
    return h, s, v


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices = [
        np.stack([v, t, p], axis=-1),
        np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1),
        np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1),
        np.stack([v, p, q], axis=-1),
    ]
    out = np.zeros(h.shape + (3,), dtype=np.float64)
    for k, c in enumerate(choices):
        out[i == k] = c[i == k]
    return out


def _color_jitter(image, rng, policy):
    """brightness -> contrast -> saturation -> hue, in that fixed order."""
    hwc = image.transpose(1, 2, 0).astype(np.float64)
    b = rng.uniform(*policy.brightness)
    hwc = np.clip(hwc * b, 0.0, 1.0)
    c = rng.uniform(*policy.contrast)
    gray_mean = (hwc @ _GRAY_WEIGHTS).mean()
    hwc = np.clip((hwc - gray_mean) * c + gray_mean, 0.0, 1.0)
    s = rng.uniform(*policy.saturation)
    gray = (hwc @ _GRAY_WEIGHTS)[:, :, None]
    hwc = np.clip(gray + (hwc - gray) * s, 0.0, 1.0)
    dh = rng.uniform(*policy.hue)
    if dh != 0.0:
        h, sat, val = _rgb_to_hsv(hwc)
        hwc = np.clip(_hsv_to_rgb((h + dh) % 1.0, sat, val), 0.0, 1.0)
    return hwc.transpose(2, 0, 1).astype(image.dtype)


def augment(sample, policy, rng):
    """One affine draw (image bilinear, labels nearest), crop, then color jitter.

    Labels are never jittered; pixels mapped from outside the source become
    background.
    """
    rot = rng.uniform(*policy.rotation_deg)
    shear = rng.uniform(*policy.shear_deg)
    scl = rng.uniform(*policy.scale)
    image, labels = _warp(sample.image, sample.labels, _affine_matrix(rot, shear, scl))
    if policy.crop is not None:
        ch = cw = int(policy.crop)
        h, w = labels.shape
        if ch > h or cw > w:
            raise ParameterError(f"augment: crop {ch} exceeds sample size {h}x{w}")
        oy = int(rng.integers(0, h - ch + 1))
        ox = int(rng.integers(0, w - cw + 1))
        image = image[:, oy : oy + ch, ox : ox + cw]
        labels = labels[oy : oy + ch, ox : ox + cw]
    image = _color_jitter(image, rng, policy)
    return SegSample(image=image, labels=labels, num_classes=sample.num_classes)


def batches(samples, batch_size, shuffle_seed):
    """Yield (images N x 3 x H x W, labels N x H x W) with a seeded shuffle.

    The final partial batch is kept; every sample appears exactly once.
    """
    if batch_size < 1:
        raise ParameterError(f"batches: batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(shuffle_seed)
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        images = np.stack([s.image for s in chunk], axis=0)
        labels = np.stack([s.labels for s in chunk], axis=0)
        yield images, labels
