"""Dataset pipeline tests: generation determinism, loading validation,
patch extraction, split schemes."""

import csv
import math
from pathlib import Path

import numpy as np
import pytest

from latentgaze.data import (
    DataError,
    EyeLandmarks,
    ExtractionError,
    SubjectTraits,
    extract_eye_patches,
    eye_crop_boxes,
    illumination_score,
    load_dataset,
    load_image,
    render_synthetic_face,
    save_image,
    split_loso,
    split_random,
    synth_generate,
    usable_records,
)
from latentgaze.geometry import angles_to_vector


def _dir_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSynthGenerate:
    def test_zero_count_rejected(self, tmp_path):
        with pytest.raises(DataError):
            synth_generate(tmp_path, 0, seed=1)

    def test_byte_identical_under_seed(self, tmp_path):
        a_root, b_root = tmp_path / "a", tmp_path / "b"
        synth_generate(a_root, 12, seed=7, subjects=3, size=64)
        synth_generate(b_root, 12, seed=7, subjects=3, size=64)
        assert _dir_bytes(a_root) == _dir_bytes(b_root)

    def test_different_seed_differs(self, tmp_path):
        a_root, b_root = tmp_path / "a", tmp_path / "b"
        synth_generate(a_root, 4, seed=1, subjects=2, size=64)
        synth_generate(b_root, 4, seed=2, subjects=2, size=64)
        assert _dir_bytes(a_root) != _dir_bytes(b_root)

    def test_manifest_contents(self, tmp_path):
        m = synth_generate(tmp_path, 10, seed=3, subjects=5, size=64)
        assert len(m) == 10
        assert sorted(m.subjects()) == [f"s{i:02d}" for i in range(5)]
        for r in m.records:
            assert r.landmarks is not None
            assert np.linalg.norm(angles_to_vector(r.label)) == pytest.approx(1.0, abs=1e-9)

    def test_pupil_offset_monotone_in_yaw(self):
        # Sorting renders by sampled yaw must sort the pupils' horizontal
        # offsets from the eye centers as well.
        traits = SubjectTraits(
            face_rx=0.33, face_ry=0.41, eye_dx=0.17, eye_y=0.42,
            eye_rx=0.085, eye_ry=0.05, pupil_r=0.024, skin=(0.7, 0.55, 0.45),
        )
        rng = np.random.default_rng(42)
        pts = []
        for _ in range(50):
            synth = render_synthetic_face(rng, traits, size=96)
            (lx0, _, lx1, _), _ = synth.pupil_boxes
            eye_cx = (synth.landmarks.left_outer[0] + synth.landmarks.left_inner[0]) / 2
            pts.append((synth.yaw, (lx0 + lx1) / 2 - eye_cx))
        pts.sort()
        xs = [p[1] for p in pts]
        assert all(b >= a - 1e-9 for a, b in zip(xs, xs[1:]))

    def test_crops_contain_pupils(self):
        rng = np.random.default_rng(5)
        traits = SubjectTraits(
            face_rx=0.33, face_ry=0.41, eye_dx=0.17, eye_y=0.42,
            eye_rx=0.085, eye_ry=0.05, pupil_r=0.024, skin=(0.7, 0.55, 0.45),
        )
        for _ in range(20):
            synth = render_synthetic_face(rng, traits, size=112)
            boxes = eye_crop_boxes(synth.landmarks, (112, 112))
            for (px0, py0, px1, py1), (cx0, cy0, cx1, cy1) in zip(synth.pupil_boxes, boxes):
                ix0, iy0 = max(px0, cx0), max(py0, cy0)
                ix1, iy1 = min(px1, cx1), min(py1, cy1)
                inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
                pupil_area = (px1 - px0) * (py1 - py0)
                assert inter / pupil_area > 0.8

    def test_patches_show_dark_pupil(self):
        rng = np.random.default_rng(6)
        traits = SubjectTraits(
            face_rx=0.33, face_ry=0.41, eye_dx=0.17, eye_y=0.42,
            eye_rx=0.085, eye_ry=0.05, pupil_r=0.024, skin=(0.7, 0.55, 0.45),
        )
        synth = render_synthetic_face(rng, traits, size=112)
        left, right = extract_eye_patches(synth.image, synth.landmarks)
        assert left.shape == (3, 36, 60)
        assert right.shape == (3, 36, 60)
        # The pupil is the darkest structure in each patch.
        assert left.mean(axis=0).min() < 0.3
        assert right.mean(axis=0).min() < 0.3


class TestExtractEyePatches:
    def test_output_shape(self):
        face = np.random.default_rng(0).uniform(0, 1, (3, 112, 112)).astype(np.float32)
        lm = EyeLandmarks((20, 50), (40, 50), (70, 50), (90, 50))
        left, right = extract_eye_patches(face, lm)
        assert left.shape == (3, 36, 60)
        assert right.shape == (3, 36, 60)

    def test_degenerate_landmarks_rejected(self):
        face = np.zeros((3, 112, 112), dtype=np.float32)
        lm = EyeLandmarks((30, 50), (30, 50), (70, 50), (90, 50))
        with pytest.raises(ExtractionError):
            extract_eye_patches(face, lm)

    def test_out_of_image_landmarks_rejected(self):
        face = np.zeros((3, 112, 112), dtype=np.float32)
        lm = EyeLandmarks((-5, 50), (40, 50), (70, 50), (90, 50))
        with pytest.raises(ExtractionError):
            extract_eye_patches(face, lm)


class TestLoadDataset:
    def _write_fixture(self, root: Path, n=10, unit="radians", scale=1.0):
        (root / "images").mkdir(parents=True)
        rng = np.random.default_rng(0)
        rows = []
        for i in range(n):
            img = rng.uniform(0, 1, (3, 64, 64)).astype(np.float32)
            fname = f"images/{i:03d}.png"
            save_image(root / fname, img)
            rows.append([fname, f"s{i % 3}", repr(0.1 * scale), repr(0.2 * scale), unit])
        with open(root / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "subject", "pitch", "yaw", "unit"])
            w.writerows(rows)
        return root

    def test_fixture_loads(self, tmp_path):
        self._write_fixture(tmp_path, n=10)
        m = load_dataset(tmp_path)
        assert len(m) == 10
        assert m.task == "gaze"

    def test_nan_row_reported_by_name(self, tmp_path):
        self._write_fixture(tmp_path, n=2)
        with open(tmp_path / "labels.csv", "a", newline="") as fh:
            csv.writer(fh).writerow(["images/000.png", "s0", "nan", "0.1", "radians"])
        with pytest.raises(DataError, match="row 4"):
            load_dataset(tmp_path)

    def test_degrees_convert_exactly(self, tmp_path):
        root = tmp_path
        (root / "images").mkdir()
        save_image(root / "images/a.png", np.zeros((3, 8, 8), dtype=np.float32))
        with open(root / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "subject", "pitch", "yaw", "unit"])
            w.writerow(["images/a.png", "s0", "89.999", "90", "degrees"])
        m = load_dataset(root)
        assert m.records[0].yaw == math.pi / 2
        assert m.records[0].pitch == math.radians(89.999)

    def test_out_of_range_pitch_rejected(self, tmp_path):
        root = tmp_path
        (root / "images").mkdir()
        save_image(root / "images/a.png", np.zeros((3, 8, 8), dtype=np.float32))
        with open(root / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "subject", "pitch", "yaw", "unit"])
            w.writerow(["images/a.png", "s0", "95", "0", "degrees"])
        with pytest.raises(DataError, match="pitch"):
            load_dataset(root)

    def test_missing_image_itemized(self, tmp_path):
        self._write_fixture(tmp_path, n=2)
        with open(tmp_path / "labels.csv", "a", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["images/zzz.png", "s0", "0", "0", "radians"])
            w.writerow(["images/yyy.png", "s0", "bad", "0", "radians"])
        with pytest.raises(DataError) as exc:
            load_dataset(tmp_path)
        msg = str(exc.value)
        assert "zzz.png" in msg  # both violations reported, not just the first
        assert "yyy.png" in msg

    def test_classification_layout(self, tmp_path):
        root = tmp_path
        (root / "images").mkdir()
        for i in range(4):
            save_image(root / f"images/{i}.png", np.zeros((3, 8, 8), dtype=np.float32))
        with open(root / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "subject", "class"])
            for i in range(4):
                w.writerow([f"images/{i}.png", "s0", str(i % 2)])
        m = load_dataset(root)
        assert m.task == "classification"
        assert [r.class_id for r in m.records] == [0, 1, 0, 1]

    def test_round_trip_through_disk(self, tmp_path):
        m = synth_generate(tmp_path, 6, seed=11, subjects=2, size=64)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == 6
        for a, b in zip(m.records, loaded.records):
            assert a.file == b.file
            assert a.subject == b.subject
            assert a.pitch == pytest.approx(b.pitch, abs=1e-15)
            assert a.landmarks.flat() == pytest.approx(b.landmarks.flat())

    def test_load_sample(self, tmp_path):
        synth_generate(tmp_path, 3, seed=2, subjects=2, size=96)
        m = load_dataset(tmp_path)
        s = m.load_sample(0, face_size=(64, 64))
        assert s.face.shape == (3, 64, 64)
        assert s.left_patch.shape == (3, 36, 60)
        assert 0.0 <= s.illumination <= 1.0
        assert s.subject_id == "s00"


class TestUsableRecords:
    def test_excludes_landmarkless(self, tmp_path):
        synth_generate(tmp_path, 5, seed=1, subjects=2, size=64)
        m = load_dataset(tmp_path)
        m.records[2].landmarks = None
        kept, excluded = usable_records(m)
        assert kept == [0, 1, 3, 4]
        assert excluded == [(2, "no landmarks")]


class TestSplits:
    def _manifest(self, tmp_path, n=30, subjects=5):
        return synth_generate(tmp_path, n, seed=9, subjects=subjects, size=64)

    def test_random_partitions_once(self, tmp_path):
        m = self._manifest(tmp_path)
        sp = split_random(m, (0.8, 0.1, 0.1), seed=0)
        combined = sorted(sp.all_indices())
        assert combined == list(range(30))
        assert not (set(sp.train) & set(sp.val))
        assert not (set(sp.train) & set(sp.test))

    def test_random_deterministic(self, tmp_path):
        m = self._manifest(tmp_path)
        a = split_random(m, seed=4)
        b = split_random(m, seed=4)
        assert a == b

    def test_bad_fractions_rejected(self, tmp_path):
        m = self._manifest(tmp_path)
        with pytest.raises(DataError):
            split_random(m, (0.5, 0.2, 0.2))

    def test_loso_folds(self, tmp_path):
        m = self._manifest(tmp_path, n=30, subjects=5)
        for subject in m.subjects():
            sp = split_loso(m, subject)
            assert sorted(sp.all_indices()) == list(range(30))
            test_subjects = {m.records[i].subject for i in sp.test}
            assert test_subjects == {subject}
            train_subjects = {m.records[i].subject for i in sp.train + sp.val}
            assert subject not in train_subjects

    def test_loso_val_fraction(self, tmp_path):
        m = self._manifest(tmp_path, n=30, subjects=5)
        sp = split_loso(m, "s00", val_fraction=3000 / 42000)
        pool = 30 - len(sp.test)
        assert len(sp.val) == max(1, round(pool * 3000 / 42000))

    def test_unknown_subject_rejected(self, tmp_path):
        m = self._manifest(tmp_path)
        with pytest.raises(DataError):
            split_loso(m, "nobody")


class TestIlluminationScore:
    def test_black_is_zero_white_is_one(self):
        assert illumination_score(np.zeros((3, 8, 8), dtype=np.float32)) == pytest.approx(0.0)
        assert illumination_score(np.ones((3, 8, 8), dtype=np.float32)) == pytest.approx(1.0)

    def test_image_io_round_trip(self, tmp_path):
        img = np.random.default_rng(0).uniform(0, 1, (3, 16, 16)).astype(np.float32)
        save_image(tmp_path / "x.png", img)
        back = load_image(tmp_path / "x.png")
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6
