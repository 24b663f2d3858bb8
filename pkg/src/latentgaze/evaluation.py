"""Evaluation harnesses: range-sliced angular error reports, rotational
equivariance sweeps, appearance-corruption tests, and ablation comparisons.

A "model" here is anything exposing ``predict_angles(faces, lefts, rights)``
returning an (n, 2) tensor of (pitch, yaw) radians; the fine-tuned regressor
does, and :class:`SequencePredictor` replays cached predictions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .data import Sample, illumination_score
from .geometry import angles_to_vector, angular_error, rotate2d


class EvaluationError(ValueError):
    """Raised for inconsistent report structures or invalid parameters."""


class SequencePredictor:
    """Replays a fixed sequence of (pitch, yaw) rows in evaluation order.

    Useful for scoring cached/offline predictions through the same report
    machinery as live models.
    """

    def __init__(self, angles):
        self._angles = np.asarray(angles, dtype=np.float64).reshape(-1, 2)
        self._cursor = 0

    def predict_angles(self, faces, lefts, rights) -> torch.Tensor:
        n = faces.shape[0]
        if self._cursor + n > len(self._angles):
            raise EvaluationError("sequence predictor ran out of cached predictions")
        out = self._angles[self._cursor : self._cursor + n]
        self._cursor += n
        return torch.as_tensor(out)


def _batch_tensors(samples: list[Sample], lo: int, hi: int):
    faces = torch.as_tensor(np.stack([s.face for s in samples[lo:hi]]))
    lefts = torch.as_tensor(np.stack([s.left_patch for s in samples[lo:hi]]))
    rights = torch.as_tensor(np.stack([s.right_patch for s in samples[lo:hi]]))
    return faces, lefts, rights


def predict_angles_batched(model, samples: list[Sample], batch_size: int = 64) -> np.ndarray:
    """Run the model over samples in order; returns (n, 2) radians."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    outs = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            hi = min(lo + batch_size, len(samples))
            faces, lefts, rights = _batch_tensors(samples, lo, hi)
            outs.append(model.predict_angles(faces, lefts, rights).double().cpu().numpy())
    if was_training and hasattr(model, "train"):
        model.train()
    return np.concatenate(outs, axis=0)


@dataclass
class SliceResult:
    limit_deg: float | None  # None = all samples
    count: int
    mean_error: float | None  # None when the slice is empty

    def to_dict(self) -> dict:
        return {"limit_deg": self.limit_deg, "count": self.count, "mean_error": self.mean_error}


@dataclass
class EvalReport:
    mean_error: float
    count: int
    slices: list[SliceResult]
    per_sample: list[float]
    config_hash: str = ""
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean_error": self.mean_error,
            "count": self.count,
            "slices": [s.to_dict() for s in self.slices],
            "per_sample": self.per_sample,
            "config_hash": self.config_hash,
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalReport":
        return cls(
            mean_error=payload["mean_error"],
            count=payload["count"],
            slices=[SliceResult(**s) for s in payload["slices"]],
            per_sample=list(payload.get("per_sample", [])),
            config_hash=payload.get("config_hash", ""),
            extras=dict(payload.get("extras", {})),
        )

    def render_table(self) -> str:
        lines = [f"samples: {self.count}   mean angular error: {self.mean_error:.4f} deg"]
        for s in self.slices:
            label = "all yaw" if s.limit_deg is None else f"|yaw| <= {s.limit_deg:g} deg"
            err = "n/a" if s.mean_error is None else f"{s.mean_error:.4f} deg"
            lines.append(f"  {label:<18} n={s.count:<6} error={err}")
        return "\n".join(lines)


def evaluate(
    model,
    samples: list[Sample],
    ranges_deg: tuple[float, ...] = (180.0, 90.0, 20.0),
    batch_size: int = 64,
    config_hash: str = "",
) -> EvalReport:
    """Per-sample angular errors aggregated over nested label-yaw slices.

    Slice membership uses the ground-truth yaw magnitude; an empty slice
    reports count 0 and an undefined (None) error rather than zero.
    """
    if not samples:
        raise EvaluationError("evaluate requires a nonempty sample list")
    labels = np.stack([np.asarray(s.label, dtype=np.float64) for s in samples])
    preds = predict_angles_batched(model, samples, batch_size)
    errors = angular_error(angles_to_vector(labels), angles_to_vector(preds))
    slices = []
    for limit in sorted(ranges_deg, reverse=True):
        mask = np.abs(np.degrees(labels[:, 1])) <= limit
        count = int(mask.sum())
        mean = float(errors[mask].mean()) if count else None
        slices.append(SliceResult(limit_deg=float(limit), count=count, mean_error=mean))
    return EvalReport(
        mean_error=float(errors.mean()),
        count=len(samples),
        slices=slices,
        per_sample=[float(e) for e in errors],
        config_hash=config_hash,
    )


# --- rotational equivariance ---------------------------------------------------


def rotate_image(img: np.ndarray, theta: float) -> np.ndarray:
    """Rotate a (3, H, W) image by theta radians about its center, bilinear
    interpolation with reflective padding, output size unchanged."""
    if theta == 0.0:
        return img
    deg = math.degrees(theta)
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = ndimage.rotate(img[c], deg, reshape=False, order=1, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def rotate_points(points: np.ndarray, theta: float, size: tuple[int, int]) -> np.ndarray:
    """Pixel (x, y) coordinates after :func:`rotate_image` by the same theta.

    The image transform moves content by R(-theta) in x-right/y-down pixel
    coordinates, so points follow the same map about the image center.
    """
    h, w = size
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    pts = np.asarray(points, dtype=np.float64) - center
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, s], [-s, c]])
    return pts @ rot.T + center


def rotate_sample(sample: Sample, theta: float) -> Sample | None:
    """One sample with face, patches, and label rotated by theta.

    Returns None when the rotation moves an eye corner outside the frame
    (the sample is excluded from the rotated evaluation).
    """
    if theta == 0.0:
        return sample
    h, w = sample.face.shape[1], sample.face.shape[2]
    if sample.landmarks is not None:
        corners = np.array(sample.landmarks.flat(), dtype=np.float64).reshape(4, 2)
        rotated = rotate_points(corners, theta, (h, w))
        if np.any(rotated[:, 0] < 0) or np.any(rotated[:, 0] >= w) or np.any(
            rotated[:, 1] < 0
        ) or np.any(rotated[:, 1] >= h):
            return None
    label = rotate2d(np.asarray(sample.label, dtype=np.float64), theta)
    return Sample(
        face=rotate_image(sample.face, theta),
        left_patch=rotate_image(sample.left_patch, theta),
        right_patch=rotate_image(sample.right_patch, theta),
        label=label,
        subject_id=sample.subject_id,
        landmarks=sample.landmarks,
        illumination=sample.illumination,
    )


def rotate_samples(samples: list[Sample], theta: float) -> tuple[list[Sample], int]:
    """Rotated copies of the samples plus the count of excluded ones."""
    if theta == 0.0:
        return list(samples), 0
    rotated = [rotate_sample(s, theta) for s in samples]
    kept = [s for s in rotated if s is not None]
    return kept, len(samples) - len(kept)


@dataclass
class EquivariancePoint:
    theta_deg: float
    mean_error: float | None
    count: int
    excluded: int


@dataclass
class EquivarianceCurve:
    points: list[EquivariancePoint]
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "points": [
                {
                    "theta_deg": p.theta_deg,
                    "mean_error": p.mean_error,
                    "count": p.count,
                    "excluded": p.excluded,
                }
                for p in self.points
            ],
            "config_hash": self.config_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def equivariance_sweep(
    model,
    samples: list[Sample],
    thetas: list[float] | None = None,
    batch_size: int = 64,
    config_hash: str = "",
) -> EquivarianceCurve:
    """Mean angular error after rotating inputs and labels together by each
    theta (radians).  theta = 0 reproduces :func:`evaluate` exactly."""
    if thetas is None:
        thetas = [math.radians(d) for d in (0, 5, 10, 15, 20, 25, 30)]
    thetas = sorted(thetas)
    points = []
    for theta in thetas:
        rotated, excluded = rotate_samples(samples, theta)
        if rotated:
            report = evaluate(model, rotated, batch_size=batch_size, config_hash=config_hash)
            points.append(
                EquivariancePoint(
                    theta_deg=math.degrees(theta),
                    mean_error=report.mean_error,
                    count=report.count,
                    excluded=excluded,
                )
            )
        else:
            points.append(
                EquivariancePoint(
                    theta_deg=math.degrees(theta), mean_error=None, count=0, excluded=excluded
                )
            )
    return EquivarianceCurve(points=points, config_hash=config_hash)


# --- appearance corruption -------------------------------------------------------


def darken(img: np.ndarray, gamma: float) -> np.ndarray:
    """Scale pixel intensities by gamma in (0, 1]; gamma = 1 is the identity."""
    if not 0 < gamma <= 1:
        raise EvaluationError(f"darken factor {gamma} outside (0, 1]")
    if gamma == 1.0:
        return img
    return np.clip(img * gamma, 0.0, 1.0).astype(np.float32)


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur with the given sigma; sigma = 0 is the identity."""
    if sigma < 0:
        raise EvaluationError(f"blur sigma {sigma} must be nonnegative")
    if sigma == 0.0:
        return img
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = ndimage.gaussian_filter(img[c], sigma=sigma, mode="reflect")
    return out


_CORRUPTIONS = {"darken": darken, "blur": blur}


def corrupt_sample(sample: Sample, corruption: str, amount: float) -> Sample:
    if corruption not in _CORRUPTIONS:
        raise EvaluationError(f"unknown corruption {corruption!r}; known: {sorted(_CORRUPTIONS)}")
    fn = _CORRUPTIONS[corruption]
    face = fn(sample.face, amount)
    return Sample(
        face=face,
        left_patch=fn(sample.left_patch, amount),
        right_patch=fn(sample.right_patch, amount),
        label=sample.label,
        subject_id=sample.subject_id,
        landmarks=sample.landmarks,
        illumination=illumination_score(face),
    )


def select_low_illumination(samples: list[Sample], threshold: float) -> list[int]:
    """Indices of samples whose mean luma falls below the threshold."""
    return [i for i, s in enumerate(samples) if s.illumination < threshold]


def corruption_eval(
    model,
    samples: list[Sample],
    corruption: str,
    amount: float,
    illum_threshold: float | None = None,
    batch_size: int = 64,
    config_hash: str = "",
) -> dict:
    """Clean vs corrupted error report, optionally on a low-light subset only."""
    subset = samples
    selected = None
    if illum_threshold is not None:
        selected = select_low_illumination(samples, illum_threshold)
        subset = [samples[i] for i in selected]
        if not subset:
            raise EvaluationError(
                f"no samples below illumination threshold {illum_threshold}"
            )
    corrupted = [corrupt_sample(s, corruption, amount) for s in subset]
    clean_report = evaluate(model, subset, batch_size=batch_size, config_hash=config_hash)
    corrupt_report = evaluate(model, corrupted, batch_size=batch_size, config_hash=config_hash)
    return {
        "corruption": corruption,
        "amount": amount,
        "illum_threshold": illum_threshold,
        "selected_count": len(subset) if selected is not None else None,
        "clean": clean_report.to_dict(),
        "corrupted": corrupt_report.to_dict(),
        "config_hash": config_hash,
    }


# --- ablation comparison -----------------------------------------------------------


def ablation_report(reports: dict[str, EvalReport], reference: str) -> dict:
    """Per-variant slice errors and the mean percentage increase over the
    reference: mean over slices of 100 * (err_variant - err_ref) / err_ref."""
    if reference not in reports:
        raise EvaluationError(f"reference {reference!r} missing from reports")
    ref = reports[reference]
    ref_struct = [s.limit_deg for s in ref.slices]
    table = {}
    for name, report in reports.items():
        struct = [s.limit_deg for s in report.slices]
        if struct != ref_struct:
            raise EvaluationError(
                f"slice structure of {name!r} {struct} differs from reference {ref_struct}"
            )
        increases = []
        for s_var, s_ref in zip(report.slices, ref.slices):
            if s_var.mean_error is None or s_ref.mean_error is None:
                continue
            if s_ref.mean_error == 0:
                raise EvaluationError("reference slice error is zero; percentage undefined")
            increases.append(100.0 * (s_var.mean_error - s_ref.mean_error) / s_ref.mean_error)
        if not increases:
            raise EvaluationError(f"no comparable slices between {name!r} and reference")
        table[name] = {
            "slice_errors": {
                f"{s.limit_deg:g}": s.mean_error for s in report.slices
            },
            "mean_pct_increase": float(np.mean(increases)),
        }
    return {"reference": reference, "variants": table}
