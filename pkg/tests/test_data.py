import numpy as np
import pytest
import torch
from scipy import ndimage

from dico.data import (
    CaseRecord,
    CropStream,
    IngestionError,
    PhantomSpec,
    generate_phantom,
    load_case,
    make_split,
    normalize_intensity,
    read_manifest,
    sample_crop,
    write_manifest,
    write_phantom_dataset,
    _render_tube,
)
from dico.nifti import read_nifti, write_nifti


class TestNifti:
    def test_round_trip_values_and_affine(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.normal(size=(16, 16, 16)).astype(np.float32)
        affine = np.diag([2.0, 1.0, 1.5, 1.0])
        affine[:3, 3] = [1.0, -2.0, 3.0]
        path = tmp_path / "vol.nii.gz"
        write_nifti(path, arr, spacing=(2.0, 1.0, 1.5), affine=affine)
        back, spacing, aff = read_nifti(path)
        assert np.array_equal(back, arr)
        assert spacing == (2.0, 1.0, 1.5)
        assert np.allclose(aff, affine)

    def test_uncompressed_and_integer_dtypes(self, tmp_path):
        arr = np.arange(27, dtype=np.int16).reshape(3, 3, 3)
        path = tmp_path / "vol.nii"
        write_nifti(path, arr)
        back, _, _ = read_nifti(path)
        assert back.dtype == np.int16
        assert np.array_equal(back, arr)


class TestLoadCase:
    def _write_case(self, tmp_path, label_values=(0, 1)):
        rng = np.random.default_rng(1)
        img = rng.normal(size=(16, 16, 16)).astype(np.float32)
        lbl = rng.choice(label_values, size=(16, 16, 16)).astype(np.uint8)
        write_nifti(tmp_path / "img.nii.gz", img)
        write_nifti(tmp_path / "lbl.nii.gz", lbl)
        return CaseRecord("c0", str(tmp_path / "img.nii.gz"), str(tmp_path / "lbl.nii.gz"),
                          "labeled-train"), img

    def test_round_trip_without_normalization(self, tmp_path):
        rec, img = self._write_case(tmp_path)
        vol, mask = load_case(rec, normalize=False)
        assert np.array_equal(vol.data[0, 0].numpy(), img)
        assert mask is not None

    def test_constant_volume_normalizes_to_zero(self, tmp_path):
        write_nifti(tmp_path / "img.nii.gz", np.full((8, 8, 8), 7.0, np.float32))
        rec = CaseRecord("c1", str(tmp_path / "img.nii.gz"), None, "unlabeled-train")
        vol, _ = load_case(rec)
        assert torch.equal(vol.data, torch.zeros_like(vol.data))

    def test_nonbinary_label_rejected(self, tmp_path):
        rec, _ = self._write_case(tmp_path, label_values=(0, 2))
        with pytest.raises(IngestionError, match="2"):
            load_case(rec)

    def test_missing_image(self, tmp_path):
        rec = CaseRecord("c2", str(tmp_path / "nope.nii.gz"), None, "unlabeled-train")
        with pytest.raises(IngestionError, match="missing"):
            load_case(rec)

    def test_grid_mismatch(self, tmp_path):
        write_nifti(tmp_path / "img.nii.gz", np.zeros((8, 8, 8), np.float32))
        write_nifti(tmp_path / "lbl.nii.gz", np.zeros((8, 8, 6), np.uint8))
        rec = CaseRecord("c3", str(tmp_path / "img.nii.gz"), str(tmp_path / "lbl.nii.gz"),
                         "labeled-train")
        with pytest.raises(IngestionError, match="grid"):
            load_case(rec)


class TestNormalize:
    def test_zero_mean_unit_variance(self):
        rng = np.random.default_rng(2)
        img = rng.normal(3.0, 5.0, size=(12, 12, 12))
        out = normalize_intensity(img)
        assert abs(out.mean()) < 1e-4
        assert abs(out.std() - 1.0) < 1e-3
        assert out.min() >= -5.0 and out.max() <= 5.0


class TestSplit:
    def test_five_percent_of_90(self):
        assign = make_split([f"c{i}" for i in range(90)], 0.05, seed=0)
        counts = list(assign.values())
        assert counts.count("labeled-train") == 5
        assert counts.count("unlabeled-train") == 85

    def test_five_percent_of_900(self):
        assign = make_split([f"c{i}" for i in range(900)], 0.05, seed=0)
        assert list(assign.values()).count("labeled-train") == 45

    def test_fraction_one_all_labeled(self):
        assign = make_split(["a", "b", "c"], 1.0, seed=0)
        assert set(assign.values()) == {"labeled-train"}

    def test_deterministic_partition(self):
        ids = [f"c{i}" for i in range(40)]
        a = make_split(ids, 0.1, seed=3)
        b = make_split(ids, 0.1, seed=3)
        assert a == b
        assert set(a) == set(ids)  # every case in exactly one split

    def test_zero_labeled_rejected(self):
        with pytest.raises(ValueError):
            make_split(["a"] * 5, 0.001, seed=0)


class TestManifest:
    def test_round_trip(self, tmp_path):
        records = [
            CaseRecord("a", "/x/a.nii.gz", "/x/a_l.nii.gz", "labeled-train"),
            CaseRecord("b", "/x/b.nii.gz", None, "unlabeled-train"),
            CaseRecord("c", "/x/c.nii.gz", "/x/c_l.nii.gz", "val"),
        ]
        path = tmp_path / "manifest.txt"
        write_manifest(path, records)
        assert read_manifest(path) == records

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IngestionError, match="not found"):
            read_manifest(tmp_path / "nope.txt")

    def test_labeled_split_requires_label(self):
        with pytest.raises(IngestionError):
            CaseRecord("a", "/x/a.nii.gz", None, "labeled-train")


class TestSampleCrop:
    def test_center_mode_matches_center_crop(self):
        vol = torch.randn(1, 1, 8, 8, 8)
        out, _ = sample_crop(vol, None, (4, 4, 4), mode="center")
        assert torch.equal(out, vol[:, :, 2:6, 2:6, 2:6])

    def test_random_mode_is_subvolume(self):
        rng = np.random.default_rng(0)
        vol = torch.arange(512, dtype=torch.float32).reshape(1, 1, 8, 8, 8)
        mask = (vol > 256).long()
        for _ in range(5):
            v, m = sample_crop(vol, mask, (4, 4, 4), rng, mode="random")
            assert v.shape == (1, 1, 4, 4, 4)
            assert torch.equal((v > 256).long(), m)


class TestPhantom:
    def test_deterministic_per_seed(self):
        spec = PhantomSpec(grid=(24, 24, 24), seed=9)
        v1, m1 = generate_phantom(spec)
        v2, m2 = generate_phantom(spec)
        assert torch.equal(v1.data, v2.data)
        assert torch.equal(m1.data, m2.data)

    def test_noiseless_image_is_contrast_plus_background(self):
        spec = PhantomSpec(grid=(24, 24, 24), noise_sigma=0.0, contrast=1.0,
                           background=0.25, seed=3)
        vol, mask = generate_phantom(spec)
        fg = mask.data.bool()
        assert torch.allclose(vol.data[fg], torch.tensor(1.25))
        assert torch.allclose(vol.data[~fg], torch.tensor(0.25))

    def test_each_tube_connected(self):
        spec = PhantomSpec(grid=(32, 32, 32), seed=5)
        rng = np.random.default_rng(spec.seed)
        for _ in range(4):
            tube = _render_tube(np.zeros(spec.grid, bool), rng, spec)
            _, n = ndimage.label(tube, structure=np.ones((3, 3, 3)))
            assert n == 1

    def test_foreground_fraction_band(self):
        # Monte-Carlo check against an analytic swept-tube volume estimate:
        # num_tubes * mean_length * pi * E[r^2], within +/-50% over seeds.
        spec = PhantomSpec(grid=(32, 32, 32), num_tubes=2, radius_range=(1.5, 2.5))
        fracs = []
        for seed in range(20):
            _, mask = generate_phantom(PhantomSpec(**{**spec.__dict__, "seed": seed}))
            fracs.append(float(mask.data.float().mean()))
        # expected arc length: 4 spline segments, main-axis step span/4 plus
        # lateral wander of two N(0, curvature*grid) axes per control point
        span = 32 - 3.0  # control points run from 1 to grid-2
        sigma = spec.curvature * 32
        seg = np.sqrt((span / 4) ** 2 + 4 * sigma ** 2)
        mean_len = 4 * seg
        mean_r2 = (1.5 ** 2 + 1.5 * 2.5 + 2.5 ** 2) / 3  # E[r^2], r ~ U(1.5, 2.5)
        expected = spec.num_tubes * mean_len * np.pi * mean_r2 / (32 ** 3)
        assert 0.5 * expected < np.mean(fracs) < 1.5 * expected

    def test_dataset_writer(self, tmp_path):
        records = write_phantom_dataset(
            tmp_path, 5, PhantomSpec(grid=(16, 16, 16), seed=0),
            labeled_fraction=0.4, n_val=2,
        )
        assert len(records) == 7
        splits = [r.split for r in records]
        assert splits.count("labeled-train") == 2
        assert splits.count("unlabeled-train") == 3
        assert splits.count("val") == 2
        back = read_manifest(tmp_path / "manifest.txt")
        assert back == records
        vol, mask = load_case(back[0], normalize=False)
        assert vol.shape == (1, 1, 16, 16, 16)


class TestCropStream:
    def test_batches_and_determinism(self):
        cases = [generate_phantom(PhantomSpec(grid=(16, 16, 16), seed=i)) for i in range(3)]
        stream = CropStream([(v, m) for v, m in cases], (8, 8, 8), "random")
        a = stream.sample(np.random.default_rng(5), 4)
        b = stream.sample(np.random.default_rng(5), 4)
        assert a[0].shape == (4, 1, 8, 8, 8)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_unlabeled_stream_has_no_masks(self):
        cases = [generate_phantom(PhantomSpec(grid=(16, 16, 16), seed=0))]
        stream = CropStream([(v, None) for v, _ in cases], (8, 8, 8), "random")
        img, mask = stream.sample(np.random.default_rng(1), 2)
        assert mask is None
