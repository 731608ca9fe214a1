import numpy as np
import pytest
import torch

from binocular_dr.core import ConfigError, EyeImageRecord, PatientPair, pair_patients
from binocular_dr.pipeline import (
    DEFAULT_BATCH_SIZE,
    AugmentConfig,
    AugmentParams,
    ImageStore,
    augment,
    augment_pair,
    channel_stats,
    eval_transform,
    make_batches,
    make_image_batches,
    pair_params,
    transform_images,
)

IDENTITY = AugmentConfig(0.0, 0.0, 0.0, target_size=16)


def random_image(seed, size=16):
    return np.random.default_rng(seed).random((size, size, 3), dtype=np.float32)


def fake_pairs(n):
    pairs = []
    for i in range(n):
        left = EyeImageRecord(f"p{i:02d}", "left", i % 5, f"{i}l.png")
        right = EyeImageRecord(f"p{i:02d}", "right", (i + 1) % 5, f"{i}r.png")
        pairs.append(PatientPair(left, right))
    return pairs


def fake_load(record):
    seed = int(record.patient_id[1:]) * 2 + (record.side == "right")
    return random_image(seed)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs", [{"target_size": 0}, {"channel_std": (1, 0, 1)}, {"hflip_prob": 1.5}, {"rotation_deg": -1}]
    )
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            AugmentConfig(**kwargs)

    def test_defaults(self):
        cfg = AugmentConfig()
        assert (cfg.hflip_prob, cfg.vflip_prob, cfg.rotation_deg, cfg.target_size) == (0.5, 0.5, 10.0, 224)
        assert not cfg.synchronized_augment

    def test_for_eval_disables_randomness(self):
        cfg = AugmentConfig(channel_mean=(0.1, 0.2, 0.3)).for_eval()
        assert (cfg.hflip_prob, cfg.vflip_prob, cfg.rotation_deg) == (0, 0, 0)
        assert cfg.channel_mean == (0.1, 0.2, 0.3)


class TestAugment:
    def test_identity_configuration(self):
        im = random_image(0)
        out = augment(im, IDENTITY, np.random.default_rng(0))
        assert torch.equal(out, torch.from_numpy(im).permute(2, 0, 1))

    def test_constant_image(self):
        im = np.full((20, 20, 3), 0.7, dtype=np.float32)
        cfg = AugmentConfig(0, 0, 0, 10, channel_mean=(0.1, 0.2, 0.3), channel_std=(0.5, 2.0, 1.0))
        out = augment(im, cfg, np.random.default_rng(0))
        for c, (m, s) in enumerate(zip(cfg.channel_mean, cfg.channel_std)):
            assert torch.allclose(out[c], torch.tensor((0.7 - m) / s), atol=1e-6)

    def test_deterministic(self):
        im = random_image(1)
        cfg = AugmentConfig(target_size=12)
        a = augment(im, cfg, np.random.default_rng(42))
        b = augment(im, cfg, np.random.default_rng(42))
        assert torch.equal(a, b)

    @pytest.mark.parametrize("size", [8, 16, 33])
    def test_layout(self, size):
        out = augment(random_image(2, size), AugmentConfig(target_size=24), np.random.default_rng(0))
        assert out.shape == (3, 24, 24)

    def test_flips(self):
        im = random_image(3)
        out = transform_images([im], [AugmentParams(hflip=True, vflip=True)], IDENTITY)[0]
        assert torch.equal(out, torch.from_numpy(im[::-1, ::-1].copy()).permute(2, 0, 1))

    def test_rotation_zero_fill(self):
        im = np.ones((16, 16, 3), dtype=np.float32)
        out = transform_images([im], [AugmentParams(angle=45.0)], IDENTITY)[0]
        assert float(out[:, 0, 0].max()) < 0.5
        assert torch.allclose(out[:, 8, 8], torch.ones(3))

    def test_non_finite_rejected(self):
        im = random_image(4)
        im[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            eval_transform(im, IDENTITY)


class TestPairAugment:
    def test_deterministic_standardized_resize(self):
        left, right = random_image(5, 20), random_image(6, 20)
        cfg = AugmentConfig(0, 0, 0, 10, channel_mean=(0.5,) * 3, channel_std=(0.25,) * 3)
        a, b = augment_pair(left, right, cfg, np.random.default_rng(0))
        assert torch.equal(a, eval_transform(left, cfg))
        assert torch.equal(b, eval_transform(right, cfg))

    def test_seeded_repeat(self):
        left, right = random_image(5), random_image(6)
        cfg = AugmentConfig(target_size=16)
        a = augment_pair(left, right, cfg, np.random.default_rng(9))
        b = augment_pair(left, right, cfg, np.random.default_rng(9))
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_hflip_fraction(self):
        rng = np.random.default_rng(0)
        cfg = AugmentConfig(hflip_prob=0.5)
        flips = sum(pair_params(cfg, rng)[0].hflip for _ in range(10_000))
        assert 0.48 <= flips / 10_000 <= 0.52

    def test_independent_unless_synchronized(self):
        rng = np.random.default_rng(1)
        independent = [pair_params(AugmentConfig(), rng) for _ in range(200)]
        assert any(l != r for l, r in independent)
        synced = [pair_params(AugmentConfig(synchronized_augment=True), rng) for _ in range(50)]
        assert all(l == r for l, r in synced)


class TestBatches:
    def test_sizes(self):
        sizes = [len(b) for b in make_batches(fake_pairs(10), 4, 0, IDENTITY, fake_load)]
        assert sizes == [4, 4, 2]

    def test_default_batch_size(self):
        assert DEFAULT_BATCH_SIZE == 32

    def test_same_seed_same_order(self):
        pairs = fake_pairs(10)
        a = [b.patient_ids for b in make_batches(pairs, 3, 7, IDENTITY, fake_load)]
        b = [b.patient_ids for b in make_batches(pairs, 3, 7, IDENTITY, fake_load)]
        c = [b.patient_ids for b in make_batches(pairs, 3, 8, IDENTITY, fake_load)]
        assert a == b and a != c

    def test_grades_follow_patients(self):
        pairs = {p.patient_id: p for p in fake_pairs(10)}
        for batch in make_batches(list(pairs.values()), 4, 1, AugmentConfig(target_size=16), fake_load):
            for pid, gl, gr in zip(batch.patient_ids, batch.left_grades, batch.right_grades):
                assert (int(gl), int(gr)) == pairs[pid].grades
            assert batch.left_images.shape[1:] == (3, 16, 16)

    def test_workers_do_not_change_output(self):
        pairs = fake_pairs(9)
        cfg = AugmentConfig(target_size=16)
        one = list(make_batches(pairs, 4, 3, cfg, fake_load, workers=1))
        three = list(make_batches(pairs, 4, 3, cfg, fake_load, workers=3))
        for a, b in zip(one, three):
            assert torch.equal(a.left_images, b.left_images) and torch.equal(a.right_images, b.right_images)

    def test_eval_is_ordered_and_unaugmented(self):
        pairs = fake_pairs(5)
        (batch,) = make_batches(pairs, 8, 0, AugmentConfig(target_size=16), fake_load, train=False)
        assert batch.patient_ids == [p.patient_id for p in pairs]
        assert torch.equal(batch.left_images[0], torch.from_numpy(fake_load(pairs[0].left)).permute(2, 0, 1))

    def test_image_batches(self):
        records = [p.left for p in fake_pairs(7)]
        sizes = [len(b) for b in make_image_batches(records, 3, 0, IDENTITY, fake_load)]
        assert sizes == [3, 3, 1]

    @pytest.mark.parametrize("n, bs", [(0, 4), (3, 0)])
    def test_errors(self, n, bs):
        with pytest.raises(ValueError):
            make_batches(fake_pairs(n), bs, 0, IDENTITY, fake_load)


class TestStandardization:
    def test_dataset_stats_give_zero_mean_unit_std(self, small_dataset):
        store = ImageStore(small_dataset.root)
        records = small_dataset.split_records("train")
        mean, std = channel_stats(store(r) for r in records)
        cfg = AugmentConfig(0, 0, 0, 32, channel_mean=mean, channel_std=std)
        x = torch.stack([eval_transform(store(r), cfg) for r in records])
        assert torch.allclose(x.mean(dim=(0, 2, 3)), torch.zeros(3), atol=0.05)
        assert torch.allclose(x.std(dim=(0, 2, 3)), torch.ones(3), atol=0.05)

    def test_per_image(self):
        cfg = AugmentConfig(0, 0, 0, 16, per_image_standardization=True)
        out = eval_transform(random_image(8) * 3 + 1, cfg)
        assert torch.allclose(out.mean(dim=(1, 2)), torch.zeros(3), atol=1e-5)

    def test_real_pairs_load(self, small_dataset):
        pairs = pair_patients(small_dataset, "test")
        batch = next(iter(make_batches(pairs, 4, 0, AugmentConfig(target_size=32), ImageStore(small_dataset.root))))
        assert batch.left_images.shape == (4, 3, 32, 32)
