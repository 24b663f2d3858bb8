"""Stochastic augmentation pipeline producing paired views for pretraining.

Images are numpy float32 arrays of shape (3, H, W) with values in [0, 1].
Every transform is gated by its probability ``p`` and draws all randomness
from a caller-supplied ``numpy.random.Generator``, so a fixed seed yields
byte-identical outputs.  Geometric warps use reflective padding and bilinear
interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class AugmentationConfigError(ValueError):
    """Raised for unknown transform names or invalid parameters."""


def _check_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise AugmentationConfigError(f"expected (3, H, W) image, got shape {arr.shape}")
    return arr


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Deterministic bilinear resize of a (3, H, W) image to (3, *size*)."""
    img = _check_image(img)
    out_h, out_w = size
    in_h, in_w = img.shape[1], img.shape[2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    # Half-pixel-center sampling grid.
    rows = (np.arange(out_h, dtype=np.float64) + 0.5) * in_h / out_h - 0.5
    cols = (np.arange(out_w, dtype=np.float64) + 0.5) * in_w / out_w - 0.5
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    coords = np.stack([grid_r.ravel(), grid_c.ravel()])
    out = np.empty((3, out_h, out_w), dtype=np.float32)
    for c in range(3):
        out[c] = ndimage.map_coordinates(
            img[c], coords, order=1, mode="nearest"
        ).reshape(out_h, out_w)
    return out


# --- individual transforms -------------------------------------------------


def _horizontal_flip(img, rng, params):
    return img[:, :, ::-1].copy()


def _gaussian_blur(img, rng, params):
    lo, hi = params.get("sigma_range", (0.1, 2.0))
    sigma = float(rng.uniform(lo, hi))
    out = np.empty_like(img)
    for c in range(3):
        out[c] = ndimage.gaussian_filter(img[c], sigma=sigma, mode="reflect")
    return out


def _affine_channelwise(img, matrix, offset):
    out = np.empty_like(img)
    for c in range(3):
        out[c] = ndimage.affine_transform(
            img[c], matrix, offset=offset, order=1, mode="reflect"
        )
    return out


def _random_affine(img, rng, params):
    max_translate = params.get("translate", 0.1)
    scale_lo, scale_hi = params.get("scale_range", (0.9, 1.1))
    max_shear = math.radians(params.get("shear_degrees", 5.0))
    h, w = img.shape[1], img.shape[2]
    ty = float(rng.uniform(-max_translate, max_translate)) * h
    tx = float(rng.uniform(-max_translate, max_translate)) * w
    s = float(rng.uniform(scale_lo, scale_hi))
    shear = float(rng.uniform(-max_shear, max_shear))
    # Output->input map about the image center: inverse scale then shear.
    m = np.array([[1.0 / s, math.tan(shear) / s], [0.0, 1.0 / s]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - m @ (center + np.array([ty, tx]))
    return _affine_channelwise(img, m, offset)


def _random_rotation(img, rng, params):
    max_deg = params.get("degrees", 30.0)
    angle = float(rng.uniform(-max_deg, max_deg))
    out = np.empty_like(img)
    for c in range(3):
        out[c] = ndimage.rotate(
            img[c], angle, reshape=False, order=1, mode="reflect"
        )
    return out


def _random_crop(img, rng, params):
    lo, hi = params.get("scale_range", (0.6, 1.0))
    h, w = img.shape[1], img.shape[2]
    area = float(rng.uniform(lo, hi))
    side = math.sqrt(area)
    ch, cw = max(1, int(round(h * side))), max(1, int(round(w * side)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = img[:, top : top + ch, left : left + cw]
    return resize_bilinear(crop, (h, w))


def _center_crop(img, rng, params):
    fraction = params.get("fraction", 0.875)
    h, w = img.shape[1], img.shape[2]
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = img[:, top : top + ch, left : left + cw]
    return resize_bilinear(crop, (h, w))


def _luma(img):
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _random_grayscale(img, rng, params):
    gray = _luma(img)
    return np.repeat(gray[None], 3, axis=0).astype(np.float32)


def _rgb_to_hsv(img):
    r, g, b = img[0], img[1], img[2]
    maxc = np.max(img, axis=0)
    minc = np.min(img, axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    delta_safe = np.maximum(delta, 1e-12)
    rc = (maxc - r) / delta_safe
    gc = (maxc - g) / delta_safe
    bc = (maxc - b) / delta_safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return h, s, v


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b]).astype(np.float32)


def _color_jitter(img, rng, params):
    brightness = params.get("brightness", 0.4)
    contrast = params.get("contrast", 0.4)
    saturation = params.get("saturation", 0.4)
    hue = params.get("hue", 0.1)
    out = img
    if brightness > 0:
        out = out * float(rng.uniform(1 - brightness, 1 + brightness))
    if contrast > 0:
        mean = _luma(out).mean()
        out = mean + (out - mean) * float(rng.uniform(1 - contrast, 1 + contrast))
    if saturation > 0:
        gray = _luma(out)[None]
        out = gray + (out - gray) * float(rng.uniform(1 - saturation, 1 + saturation))
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    if hue > 0:
        shift = float(rng.uniform(-hue, hue))
        h, s, v = _rgb_to_hsv(out)
        out = _hsv_to_rgb((h + shift) % 1.0, s, v)
    return out


def _random_invert(img, rng, params):
    return (1.0 - img).astype(np.float32)


def _gaussian_noise(img, rng, params):
    sigma = params.get("sigma", 0.02)
    noise = rng.normal(0.0, sigma, size=img.shape).astype(np.float32)
    return img + noise


def _cutout(img, rng, params):
    hole_h, hole_w = params.get("size", (16, 16))
    holes = params.get("holes", 1)
    h, w = img.shape[1], img.shape[2]
    out = img.copy()
    for _ in range(holes):
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        top = max(0, cy - hole_h // 2)
        left = max(0, cx - hole_w // 2)
        out[:, top : top + hole_h, left : left + hole_w] = 0.0
    return out


# Listing order is fixed; it is also the application order in the pipeline.
TRANSFORMS = {
    "horizontal_flip": _horizontal_flip,
    "gaussian_blur": _gaussian_blur,
    "random_affine": _random_affine,
    "random_rotation": _random_rotation,
    "random_crop": _random_crop,
    "center_crop": _center_crop,
    "random_grayscale": _random_grayscale,
    "color_jitter": _color_jitter,
    "random_invert": _random_invert,
    "gaussian_noise": _gaussian_noise,
    "cutout": _cutout,
}

TRANSFORM_ORDER = tuple(TRANSFORMS)

# Transforms that do not move pixels; the only ones applied to eye patches,
# which must stay registered with their landmark-derived crop boxes.
PHOTOMETRIC_TRANSFORMS = frozenset(
    {
        "gaussian_blur",
        "random_grayscale",
        "color_jitter",
        "random_invert",
        "gaussian_noise",
    }
)


@dataclass
class TransformSpec:
    name: str
    p: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in TRANSFORMS:
            raise AugmentationConfigError(
                f"unknown transform {self.name!r}; known: {sorted(TRANSFORMS)}"
            )
        if not 0.0 <= self.p <= 1.0:
            raise AugmentationConfigError(f"probability {self.p} for {self.name} outside [0, 1]")


@dataclass
class AugmentationConfig:
    """Ordered, probability-gated transform stack plus the output resolution."""

    transforms: list[TransformSpec]
    output_size: tuple[int, int] = (112, 112)

    def __post_init__(self):
        order = [TRANSFORM_ORDER.index(t.name) for t in self.transforms]
        if order != sorted(order):
            raise AugmentationConfigError("transforms must follow the fixed listing order")


def default_transforms(
    flip_p=0.5,
    blur_p=0.2,
    affine_p=0.3,
    rotation_p=0.3,
    crop_p=0.5,
    center_crop_p=0.0,
    grayscale_p=0.2,
    jitter_p=0.4,
    invert_p=0.1,
    noise_p=0.2,
    cutout_p=0.3,
) -> list[TransformSpec]:
    """The default stack; center crop is left to the deterministic final resize."""
    return [
        TransformSpec("horizontal_flip", flip_p),
        TransformSpec("gaussian_blur", blur_p),
        TransformSpec("random_affine", affine_p),
        TransformSpec("random_rotation", rotation_p, {"degrees": 30.0}),
        TransformSpec("random_crop", crop_p, {"scale_range": (0.6, 1.0)}),
        TransformSpec("center_crop", center_crop_p),
        TransformSpec("random_grayscale", grayscale_p),
        TransformSpec(
            "color_jitter",
            jitter_p,
            {"brightness": 0.4, "contrast": 0.4, "saturation": 0.4, "hue": 0.1},
        ),
        TransformSpec("random_invert", invert_p),
        TransformSpec("gaussian_noise", noise_p, {"sigma": 0.02}),
        TransformSpec("cutout", cutout_p, {"size": (16, 16), "holes": 1}),
    ]


def default_config(output_size=(112, 112)) -> AugmentationConfig:
    return AugmentationConfig(default_transforms(), tuple(output_size))


@dataclass(frozen=True)
class ViewPair:
    v: np.ndarray
    v_prime: np.ndarray


class Pipeline:
    """Immutable sampler: applies the gated transform stack, then resizes."""

    def __init__(self, config: AugmentationConfig):
        self.config = config

    def apply(self, img, rng: np.random.Generator, log: list | None = None) -> np.ndarray:
        out = _check_image(img)
        for spec in self.config.transforms:
            # One gate draw per transform even when p is 0 or 1 keeps the
            # random stream layout independent of the probabilities.
            fired = rng.random() < spec.p
            if fired:
                out = TRANSFORMS[spec.name](out, rng, spec.params)
                if log is not None:
                    log.append(spec.name)
        out = resize_bilinear(out, self.config.output_size)
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    def photometric(self) -> "Pipeline":
        """A pipeline with only the pixel-value transforms, same probabilities."""
        kept = [t for t in self.config.transforms if t.name in PHOTOMETRIC_TRANSFORMS]
        return Pipeline(AugmentationConfig(kept, self.config.output_size))


def build_pipeline(cfg: AugmentationConfig) -> Pipeline:
    """Validate the config and return the deterministic-given-seed sampler."""
    return Pipeline(cfg)


def generate_views(img, pipeline: Pipeline, seed: int) -> ViewPair:
    """Two independently augmented views of one image, reproducible from seed."""
    img = _check_image(img)
    child_a, child_b = np.random.SeedSequence(seed).spawn(2)
    v = pipeline.apply(img, np.random.default_rng(child_a))
    v_prime = pipeline.apply(img, np.random.default_rng(child_b))
    return ViewPair(v=v, v_prime=v_prime)
