"""Sample model, on-disk dataset layout, eye-patch extraction, the synthetic
face generator, and split schemes (random and leave-one-subject-out).

On-disk layout
--------------
    root/images/*.png
    root/labels.csv     columns: file,subject,pitch,yaw,unit   (gaze task)
                            or:  file,subject,class            (classification)
    root/landmarks.csv  columns: file,left_outer_x,left_outer_y,
                        left_inner_x,left_inner_y,right_outer_x,right_outer_y,
                        right_inner_x,right_inner_y

CSV files are UTF-8 with a mandatory header row.  ``unit`` is ``radians`` or
``degrees``; labels are converted to radians at load time.  Landmarks are
pixel coordinates of the eye corners in the image frame ("left" = the eye on
the left side of the image).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .augmentation import resize_bilinear

PATCH_SIZE = (36, 60)  # (H, W)
EYE_CROP_MARGIN = 0.4  # padding factor per side, relative to the corner span

SYNTH_PITCH_MAX = 0.5  # radians, ~28.6 degrees
SYNTH_YAW_MAX = 0.6  # radians, ~34.4 degrees


class DataError(ValueError):
    """Raised for malformed datasets or invalid generation parameters."""


class ExtractionError(ValueError):
    """Raised when eye patches cannot be cut from the provided landmarks."""


@dataclass(frozen=True)
class EyeLandmarks:
    """Outer/inner eye-corner points, pixel coordinates, image frame."""

    left_outer: tuple[float, float]
    left_inner: tuple[float, float]
    right_outer: tuple[float, float]
    right_inner: tuple[float, float]

    def flat(self) -> list[float]:
        return [*self.left_outer, *self.left_inner, *self.right_outer, *self.right_inner]


@dataclass
class GazeRecord:
    file: str
    subject: str
    pitch: float | None = None  # radians
    yaw: float | None = None
    class_id: int | None = None
    landmarks: EyeLandmarks | None = None
    extras: dict = field(default_factory=dict)

    @property
    def label(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw], dtype=np.float64)


@dataclass
class Sample:
    """One training/eval record with its extracted eye patches."""

    face: np.ndarray  # (3, H, W) float32 in [0, 1]
    left_patch: np.ndarray  # (3, 36, 60)
    right_patch: np.ndarray
    label: np.ndarray | int  # (pitch, yaw) radians, or class id
    subject_id: str
    landmarks: EyeLandmarks | None = None
    illumination: float = 0.0


@dataclass
class DatasetManifest:
    root: Path | None
    records: list[GazeRecord]
    task: str = "gaze"  # or "classification"

    def __len__(self) -> int:
        return len(self.records)

    def subjects(self) -> list[str]:
        seen = dict.fromkeys(r.subject for r in self.records)
        return list(seen)

    def load_image(self, record: GazeRecord) -> np.ndarray:
        if self.root is None:
            raise DataError("manifest has no root directory to load images from")
        return load_image(self.root / record.file)

    def load_sample(self, index: int, face_size: tuple[int, int] | None = None) -> Sample:
        record = self.records[index]
        img = self.load_image(record)
        if record.landmarks is None:
            raise ExtractionError(f"{record.file}: no landmarks; sample unusable for training")
        left, right = extract_eye_patches(img, record.landmarks)
        if face_size is not None:
            img = resize_bilinear(img, face_size)
        label = record.class_id if self.task == "classification" else record.label
        return Sample(
            face=img,
            left_patch=left,
            right_patch=right,
            label=label,
            subject_id=record.subject,
            landmarks=record.landmarks,
            illumination=illumination_score(img),
        )


def illumination_score(img: np.ndarray) -> float:
    """Mean luma of a (3, H, W) image; the low-light subsetting criterion."""
    return float(0.299 * img[0].mean() + 0.587 * img[1].mean() + 0.114 * img[2].mean())


def load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path, format="PNG")


# --- eye patches -----------------------------------------------------------------


def eye_crop_boxes(
    landmarks: EyeLandmarks, image_size: tuple[int, int]
) -> tuple[tuple[int, int, int, int], tuple[int, int, int, int]]:
    """Pixel crop boxes (x0, y0, x1, y1) for the left and right eye.

    Each box spans the eye corners padded by ``EYE_CROP_MARGIN`` of the span
    per side, with height following the 36:60 patch aspect ratio, clamped to
    the image bounds.  Degenerate or out-of-image landmarks raise
    ExtractionError.
    """
    h, w = image_size
    boxes = []
    for outer, inner in ((landmarks.left_outer, landmarks.left_inner),
                         (landmarks.right_outer, landmarks.right_inner)):
        for x, y in (outer, inner):
            if not (0 <= x < w and 0 <= y < h):
                raise ExtractionError(f"eye corner ({x}, {y}) outside {w}x{h} image")
        span = abs(inner[0] - outer[0])
        if span <= 0:
            raise ExtractionError("degenerate landmarks: zero horizontal corner span")
        cx = (outer[0] + inner[0]) / 2.0
        cy = (outer[1] + inner[1]) / 2.0
        half_w = span * (0.5 + EYE_CROP_MARGIN)
        half_h = half_w * PATCH_SIZE[0] / PATCH_SIZE[1]
        x0, x1 = int(math.floor(cx - half_w)), int(math.ceil(cx + half_w))
        y0, y1 = int(math.floor(cy - half_h)), int(math.ceil(cy + half_h))
        x0, y0 = max(0, x0), max(0, y0)
        x1, y1 = min(w, x1), min(h, y1)
        if x1 - x0 < 2 or y1 - y0 < 2:
            raise ExtractionError("eye crop collapsed to less than 2x2 pixels")
        boxes.append((x0, y0, x1, y1))
    return boxes[0], boxes[1]


def extract_eye_patches(face: np.ndarray, landmarks: EyeLandmarks) -> tuple[np.ndarray, np.ndarray]:
    """Crop both eye regions per :func:`eye_crop_boxes` and resize to 36x60."""
    left_box, right_box = eye_crop_boxes(landmarks, (face.shape[1], face.shape[2]))
    patches = []
    for x0, y0, x1, y1 in (left_box, right_box):
        patches.append(resize_bilinear(face[:, y0:y1, x0:x1], PATCH_SIZE))
    return patches[0], patches[1]


# --- synthetic face generator -------------------------------------------------------


@dataclass(frozen=True)
class SubjectTraits:
    face_rx: float
    face_ry: float
    eye_dx: float
    eye_y: float
    eye_rx: float
    eye_ry: float
    pupil_r: float
    skin: tuple[float, float, float]


def _sample_traits(rng: np.random.Generator) -> SubjectTraits:
    return SubjectTraits(
        face_rx=rng.uniform(0.30, 0.36),
        face_ry=rng.uniform(0.38, 0.44),
        eye_dx=rng.uniform(0.15, 0.19),
        eye_y=rng.uniform(0.40, 0.45),
        eye_rx=rng.uniform(0.075, 0.095),
        eye_ry=rng.uniform(0.042, 0.058),
        pupil_r=rng.uniform(0.020, 0.028),
        skin=(rng.uniform(0.55, 0.85), rng.uniform(0.42, 0.68), rng.uniform(0.32, 0.55)),
    )


def _ellipse_mask(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


@dataclass
class SynthSample:
    image: np.ndarray
    pitch: float
    yaw: float
    landmarks: EyeLandmarks
    pupil_boxes: tuple[tuple[float, float, float, float], tuple[float, float, float, float]]
    illumination: float


def render_synthetic_face(
    rng: np.random.Generator, traits: SubjectTraits, size: int = 112
) -> SynthSample:
    """Draw one parametric face whose pupils encode the sampled gaze label.

    Pupil centers are displaced inside each sclera proportionally to
    (yaw, -pitch), so larger yaw moves the pupils further right and larger
    pitch moves them up; the exact label, eye-corner landmarks, and pupil
    bounding boxes are returned alongside the image.
    """
    s = float(size)
    pitch = float(rng.uniform(-SYNTH_PITCH_MAX, SYNTH_PITCH_MAX))
    yaw = float(rng.uniform(-SYNTH_YAW_MAX, SYNTH_YAW_MAX))
    bg = float(rng.uniform(0.10, 0.90))
    # Bimodal lighting: a well-lit majority plus a low-illumination tail, so
    # the corpus carries genuine appearance heterogeneity.
    if rng.random() < 0.3:
        illum = float(rng.uniform(0.2, 0.4))
    else:
        illum = float(rng.uniform(0.55, 1.0))
    jx = float(rng.uniform(-0.02, 0.02)) * s
    jy = float(rng.uniform(-0.02, 0.02)) * s

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    img = np.empty((3, size, size), dtype=np.float32)
    noise = rng.normal(0.0, 0.015, size=(size, size)).astype(np.float32)
    for c in range(3):
        img[c] = bg + noise

    cx, cy = s / 2 + jx, s * 0.52 + jy
    face = _ellipse_mask(yy, xx, cy, cx, traits.face_ry * s, traits.face_rx * s)
    for c in range(3):
        img[c][face] = traits.skin[c]

    eye_cy = cy - (0.52 - traits.eye_y) * s
    eye_rx, eye_ry, pr = traits.eye_rx * s, traits.eye_ry * s, traits.pupil_r * s
    centers = [(cx - traits.eye_dx * s, eye_cy), (cx + traits.eye_dx * s, eye_cy)]
    pupil_boxes = []
    for ex, ey in centers:
        sclera = _ellipse_mask(yy, xx, ey, ex, eye_ry, eye_rx)
        for c, val in enumerate((0.93, 0.93, 0.91)):
            img[c][sclera] = val
        # Displacement proportional to the label, clamped inside the sclera.
        px = ex + (yaw / SYNTH_YAW_MAX) * (eye_rx - pr) * 0.85
        py = ey - (pitch / SYNTH_PITCH_MAX) * (eye_ry - pr) * 0.85
        pupil = _ellipse_mask(yy, xx, py, px, pr, pr)
        for c, val in enumerate((0.06, 0.05, 0.08)):
            img[c][pupil] = val
        pupil_boxes.append((px - pr, py - pr, px + pr, py + pr))
        # Brow: a dark bar above the eye.
        brow = (
            (np.abs(xx - ex) <= eye_rx * 1.1)
            & (yy >= ey - eye_ry - 0.05 * s)
            & (yy <= ey - eye_ry - 0.03 * s)
        )
        for c in range(3):
            img[c][brow] = 0.18

    mouth = _ellipse_mask(yy, xx, cy + traits.face_ry * s * 0.55, cx, 0.025 * s, 0.10 * s)
    for c, val in enumerate((0.45, 0.2, 0.2)):
        img[c][mouth] = val

    img = np.clip(img * illum, 0.0, 1.0)
    lm = EyeLandmarks(
        left_outer=(centers[0][0] - eye_rx, eye_cy),
        left_inner=(centers[0][0] + eye_rx, eye_cy),
        right_outer=(centers[1][0] - eye_rx, eye_cy),
        right_inner=(centers[1][0] + eye_rx, eye_cy),
    )
    return SynthSample(
        image=img,
        pitch=pitch,
        yaw=yaw,
        landmarks=lm,
        pupil_boxes=(pupil_boxes[0], pupil_boxes[1]),
        illumination=illumination_score(img),
    )


def synth_generate(
    root: Path | str,
    n: int,
    seed: int,
    subjects: int = 15,
    size: int = 112,
) -> DatasetManifest:
    """Render ``n`` synthetic faces into ``root`` and return the manifest.

    Sample i belongs to subject ``s{i % subjects}``; subject appearance traits
    and all per-sample randomness derive from ``seed``, so identical
    (n, seed, subjects, size) produce byte-identical datasets.
    """
    if n < 1:
        raise DataError("synth_generate requires n >= 1")
    if subjects < 1:
        raise DataError("synth_generate requires at least one subject")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)

    seq = np.random.SeedSequence(seed)
    subject_seeds, sample_seeds = seq.spawn(2)
    trait_rngs = [np.random.default_rng(s) for s in subject_seeds.spawn(subjects)]
    traits = [_sample_traits(r) for r in trait_rngs]
    per_sample = sample_seeds.spawn(n)

    records = []
    for i in range(n):
        subject = f"s{i % subjects:02d}"
        synth = render_synthetic_face(np.random.default_rng(per_sample[i]), traits[i % subjects], size)
        fname = f"images/{i:06d}.png"
        save_image(root / fname, synth.image)
        records.append(
            GazeRecord(
                file=fname,
                subject=subject,
                pitch=synth.pitch,
                yaw=synth.yaw,
                landmarks=synth.landmarks,
                extras={"pupil_boxes": synth.pupil_boxes},
            )
        )

    with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "subject", "pitch", "yaw", "unit"])
        for r in records:
            writer.writerow([r.file, r.subject, repr(r.pitch), repr(r.yaw), "radians"])
    with open(root / "landmarks.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "file",
                "left_outer_x", "left_outer_y", "left_inner_x", "left_inner_y",
                "right_outer_x", "right_outer_y", "right_inner_x", "right_inner_y",
            ]
        )
        for r in records:
            writer.writerow([r.file] + [repr(v) for v in r.landmarks.flat()])
    return DatasetManifest(root=root, records=records, task="gaze")


# --- loading ----------------------------------------------------------------------


def _parse_float(value: str, where: str, errors: list[str]) -> float | None:
    try:
        out = float(value)
    except ValueError:
        errors.append(f"{where}: not a number ({value!r})")
        return None
    if not math.isfinite(out):
        errors.append(f"{where}: non-finite value {value!r}")
        return None
    return out


def load_dataset(root: Path | str) -> DatasetManifest:
    """Load and validate a dataset directory; labels come back in radians.

    Every violation (missing file, malformed or out-of-range label) is
    collected and reported together, naming the offending row.
    """
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise DataError(f"{labels_path} does not exist")

    landmarks = {}
    lm_path = root / "landmarks.csv"
    errors: list[str] = []
    if lm_path.exists():
        with open(lm_path, newline="", encoding="utf-8") as fh:
            for row_no, row in enumerate(csv.DictReader(fh), start=2):
                vals = []
                for key in (
                    "left_outer_x", "left_outer_y", "left_inner_x", "left_inner_y",
                    "right_outer_x", "right_outer_y", "right_inner_x", "right_inner_y",
                ):
                    if key not in row:
                        errors.append(f"landmarks.csv row {row_no}: missing column {key}")
                        break
                    v = _parse_float(row[key], f"landmarks.csv row {row_no} ({key})", errors)
                    if v is None:
                        break
                    vals.append(v)
                else:
                    landmarks[row["file"]] = EyeLandmarks(
                        left_outer=(vals[0], vals[1]),
                        left_inner=(vals[2], vals[3]),
                        right_outer=(vals[4], vals[5]),
                        right_inner=(vals[6], vals[7]),
                    )

    records = []
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = set(reader.fieldnames or [])
        if {"file", "subject", "class"} <= header:
            task = "classification"
        elif {"file", "subject", "pitch", "yaw", "unit"} <= header:
            task = "gaze"
        else:
            raise DataError(
                f"labels.csv header {sorted(header)} matches neither the gaze nor "
                "the classification layout"
            )
        for row_no, row in enumerate(reader, start=2):
            fname = row["file"]
            where = f"labels.csv row {row_no} ({fname})"
            if not (root / fname).exists():
                errors.append(f"{where}: image file missing")
                continue
            if task == "classification":
                try:
                    class_id = int(row["class"])
                except ValueError:
                    errors.append(f"{where}: class {row['class']!r} is not an integer")
                    continue
                if class_id < 0:
                    errors.append(f"{where}: negative class id {class_id}")
                    continue
                records.append(
                    GazeRecord(
                        file=fname, subject=row["subject"], class_id=class_id,
                        landmarks=landmarks.get(fname),
                    )
                )
                continue
            pitch = _parse_float(row["pitch"], f"{where} pitch", errors)
            yaw = _parse_float(row["yaw"], f"{where} yaw", errors)
            if pitch is None or yaw is None:
                continue
            unit = row["unit"].strip().lower()
            if unit in ("degrees", "deg"):
                pitch, yaw = math.radians(pitch), math.radians(yaw)
            elif unit not in ("radians", "rad"):
                errors.append(f"{where}: unknown unit {row['unit']!r}")
                continue
            if not -math.pi / 2 < pitch < math.pi / 2:
                errors.append(f"{where}: pitch {pitch:.4f} rad outside (-pi/2, pi/2)")
                continue
            if not -math.pi < yaw <= math.pi:
                errors.append(f"{where}: yaw {yaw:.4f} rad outside (-pi, pi]")
                continue
            records.append(
                GazeRecord(
                    file=fname, subject=row["subject"], pitch=pitch, yaw=yaw,
                    landmarks=landmarks.get(fname),
                )
            )
    if errors:
        raise DataError("dataset validation failed:\n  " + "\n  ".join(errors))
    return DatasetManifest(root=root, records=records, task=task)


def usable_records(manifest: DatasetManifest) -> tuple[list[int], list[tuple[int, str]]]:
    """Indices of records with workable landmarks, plus itemized exclusions.

    Mirrors the protocol of dropping samples whose eye patches cannot be
    produced; the exclusion list supports coverage reporting.
    """
    kept, excluded = [], []
    for i, record in enumerate(manifest.records):
        if record.landmarks is None:
            excluded.append((i, "no landmarks"))
            continue
        try:
            img = manifest.load_image(record)
            extract_eye_patches(img, record.landmarks)
        except (ExtractionError, DataError) as exc:
            excluded.append((i, str(exc)))
            continue
        kept.append(i)
    return kept, excluded


# --- splits -----------------------------------------------------------------------

# Fraction of the training pool held out for validation under the
# leave-one-subject-out scheme (the protocol's 3000-of-42000 tail, scaled).
LOSO_VAL_FRACTION = 3000.0 / 42000.0


@dataclass
class SplitManifest:
    train: list[int]
    val: list[int]
    test: list[int]

    def all_indices(self) -> list[int]:
        return self.train + self.val + self.test


def split_random(
    manifest: DatasetManifest,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitManifest:
    """Disjoint, covering random split by the given (train, val, test) fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions {fractions} must sum to 1")
    n = len(manifest)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return SplitManifest(
        train=[int(i) for i in order[:n_train]],
        val=[int(i) for i in order[n_train : n_train + n_val]],
        test=[int(i) for i in order[n_train + n_val :]],
    )


def split_loso(
    manifest: DatasetManifest,
    subject: str,
    val_fraction: float = LOSO_VAL_FRACTION,
) -> SplitManifest:
    """Hold one subject out for test; the tail of the remaining pool validates."""
    subjects = set(manifest.subjects())
    if subject not in subjects:
        raise DataError(f"unknown subject {subject!r}; dataset has {sorted(subjects)}")
    test = [i for i, r in enumerate(manifest.records) if r.subject == subject]
    pool = [i for i, r in enumerate(manifest.records) if r.subject != subject]
    n_val = max(1, int(round(val_fraction * len(pool)))) if pool else 0
    return SplitManifest(train=pool[: len(pool) - n_val], val=pool[len(pool) - n_val :], test=test)
