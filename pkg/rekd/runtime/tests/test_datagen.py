import numpy as np
import pytest
from scipy import stats
from src.config import SynthConfig, runtime_settings
from src.datagen import (
    PairDataset,
    apply_jitter,
    edge_filter_accept,
    make_dataset,
    make_pair,
    pair_angles,
    photometric_jitter,
    read_manifest,
    read_transform,
    split_of,
    texture_image,
    to_gray,
    write_transform,
)
from src.errors import MissingFileError, OutputError
from src.geometry import RotTransform, warp_image
from src.imageio import read_pgm


class TestTexture:
    def test_same_seed_same_image(self):
        a = texture_image(np.random.default_rng(4), 48)
        b = texture_image(np.random.default_rng(4), 48)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (3, 48, 48)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_different_seeds_differ(self):
        a = texture_image(np.random.default_rng(1), 48)
        b = texture_image(np.random.default_rng(2), 48)
        assert np.abs(a - b).mean() > 0.01


class TestJitter:
    def test_neutral_parameters(self, rng):
        img = rng.uniform(size=(10, 10))
        np.testing.assert_allclose(apply_jitter(img, 1.0, 0.0, 0.0), img, atol=1e-12)

    def test_contrast_and_brightness(self):
        out = apply_jitter(np.full((4, 4), 0.5), 1.2, 0.1, 0.0)
        np.testing.assert_allclose(out, 0.7, atol=1e-9)

    def test_hue_rotation_keeps_gray_images_gray(self, rng):
        img = rng.uniform(size=(6, 6))
        np.testing.assert_allclose(apply_jitter(img, 1.0, 0.0, 25.0), img, atol=1e-12)

    def test_hue_rotation_changes_color_images(self, rng):
        img = rng.uniform(size=(3, 6, 6))
        assert np.abs(apply_jitter(img, 1.0, 0.0, 60.0) - to_gray(img)).max() > 0.01

    def test_random_jitter_stays_in_range(self):
        img = np.random.default_rng(1).uniform(size=(3, 12, 12))
        first = photometric_jitter(img, np.random.default_rng(4))
        again = photometric_jitter(img, np.random.default_rng(4))
        assert first.shape == (12, 12)
        assert first.min() >= 0.0 and first.max() <= 1.0
        np.testing.assert_array_equal(first, again)


class TestEdgeFilter:
    def test_constant_image_is_rejected(self):
        assert not edge_filter_accept(np.full((32, 32), 0.3))

    def test_checkerboard_is_accepted(self):
        board = ((np.indices((32, 32)) // 4).sum(axis=0) % 2).astype(float)
        assert edge_filter_accept(board)

    def test_most_textures_pass(self):
        accepted = [
            edge_filter_accept(texture_image(np.random.default_rng(seed), 64))
            for seed in range(200)
        ]
        assert np.mean(accepted) >= 0.95

    @pytest.mark.slow
    def test_most_full_size_textures_pass(self):
        config = SynthConfig()
        accepted = [
            edge_filter_accept(
                texture_image(np.random.default_rng(seed), 192, config), config.sobel_threshold
            )
            for seed in range(1000)
        ]
        assert np.mean(accepted) >= 0.95

    def test_threshold_sweep_is_monotone(self):
        corpus = [texture_image(np.random.default_rng(seed), 48) for seed in range(30)]
        corpus.append(np.full((48, 48), 0.5))
        counts = [
            sum(edge_filter_accept(img, threshold) for img in corpus)
            for threshold in np.linspace(0.0, 0.2, 41)
        ]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert counts[0] == len(corpus) and counts[-1] < counts[0]


def test_warp_before_jitter_matches_image_b():
    neutral = SynthConfig(
        image_size=48, contrast_range=(1.0, 1.0), brightness_range=(0.0, 0.0), hue_range=(0.0, 0.0)
    )
    for seed in range(5):
        pair = make_pair(np.random.default_rng(seed), 48, neutral)
        warped, _ = warp_image(pair.img_a, pair.transform)
        mae = np.abs(warped - pair.img_b)[pair.mask].mean()
        assert mae <= 2 / 255


def test_angles_are_uniform():
    angles = pair_angles(10000, 0)
    assert angles.min() >= -180.0 and angles.max() < 180.0
    assert stats.kstest(angles, "uniform", args=(-180.0, 360.0)).pvalue > 0.01


def test_pair_is_a_rotation():
    pair = make_pair(np.random.default_rng(7), 48, SynthConfig(image_size=48, hue_range=(0.0, 0.0)))
    assert pair.img_a.shape == pair.img_b.shape == (48, 48)
    assert -180.0 <= pair.transform.angle_deg < 180.0
    assert pair.mask.dtype == bool and pair.mask.any()


def test_transform_file_round_trip(tmp_path):
    transform = RotTransform(-123.456789012345, (40, 30), (40, 30))
    write_transform(tmp_path / "t.txt", transform)
    assert read_transform(tmp_path / "t.txt") == transform


def test_split():
    assert [split_of(i, 10) for i in range(10)] == ["train"] * 9 + ["val"]
    assert split_of(0, 5) == "train"


class TestDataset:
    @pytest.fixture
    def config(self):
        return SynthConfig(image_size=32)

    def test_writes_every_record(self, tmp_path, config):
        manifest = make_dataset(10, 32, 1, tmp_path / "d", config)
        assert len(manifest) == 10
        assert read_manifest(tmp_path / "d") == manifest
        for record, _ in manifest:
            for suffix in ("_a.pgm", "_b.pgm", "_m.pgm", "_t.txt"):
                assert (tmp_path / "d" / f"{record}{suffix}").is_file()
        assert set(np.unique(read_pgm(tmp_path / "d" / "0000_m.pgm"))) <= {0, 255}

    def test_same_seed_gives_identical_bytes(self, tmp_path, config):
        make_dataset(6, 32, 3, tmp_path / "a", config)
        make_dataset(6, 32, 3, tmp_path / "b", config)
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_worker_count_does_not_change_output(self, tmp_path, config):
        make_dataset(4, 32, 3, tmp_path / "pool", config)
        runtime_settings.deterministic = True
        try:
            make_dataset(4, 32, 3, tmp_path / "serial", config)
        finally:
            runtime_settings.deterministic = False
        for path in (tmp_path / "pool").iterdir():
            assert path.read_bytes() == (tmp_path / "serial" / path.name).read_bytes()

    def test_reads_back_pairs(self, tmp_path, config):
        make_dataset(10, 32, 9, tmp_path / "d", config)
        train, val = PairDataset(tmp_path / "d", "train"), PairDataset(tmp_path / "d", "val")
        assert (len(train), len(val)) == (9, 1)
        angles = pair_angles(10, 9)
        assert train.transform(3).angle_deg == angles[3]
        pair = val.pair(0)
        assert pair.transform.angle_deg == angles[9]
        assert pair.img_a.dtype == np.float32 and pair.img_a.max() <= 1.0
        _, mask = warp_image(np.ones((32, 32)), pair.transform)
        np.testing.assert_array_equal(pair.mask, mask)
        assert len(list(train)) == 9

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            PairDataset(tmp_path)

    def test_unwritable_folder(self, tmp_path, config):
        (tmp_path / "taken").write_text("a file, not a folder")
        with pytest.raises(OutputError) as err:
            make_dataset(1, 32, 0, tmp_path / "taken", config)
        assert err.value.exit_code == 6
        with pytest.raises(OutputError):
            make_dataset(1, 32, 0, tmp_path / "taken" / "d", config)
