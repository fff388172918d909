import dataclasses
from collections import Counter

import numpy as np
import pytest

from irk.config import DataConfig
from irk.errors import ContractError
from irk.synth import (Manifest, augment, build_world, clothes_box, clothes_crop, clothes_mask,
                       clothes_template, dataset_checksum, generate_dataset, load_dataset,
                       pk_batch_sampler, read_image, render, write_image)

from conftest import SMALL_DATA


@pytest.fixture(scope="module")
def world():
    return build_world(DataConfig())


def test_default_counts():
    ds = generate_dataset(DataConfig(tasks=("trad", "ctcc")))
    assert len(ds.manifest.select("train", "trad")) == 160
    assert len(ds.manifest.select("query", "trad")) == 20
    assert len(ds.manifest.select("gallery", "trad")) == 40
    assert len({r.uid for r in ds.manifest.records}) == len(ds.manifest)


def test_render_deterministic_and_shaped(world):
    a = render(world, 3, 1, 0, "visible", 42)
    b = render(build_world(DataConfig()), 3, 1, 0, "visible", 42)
    assert a.dtype == np.float32 and a.shape == (3, 64, 32)
    np.testing.assert_array_equal(a, b)


def test_clothes_change_only_touches_clothes_region(world):
    a = render(world, 2, 0, 1, "visible", 5)
    b = render(world, 2, 1, 1, "visible", 5)
    mask = clothes_mask(64, 32)
    diff = np.any(a != b, axis=0)
    assert not diff[~mask].any()
    assert diff[mask].any()
    assert diff.mean() < 0.6


def test_identity_change_touches_biometric_region(world):
    a = render(world, 2, 0, 0, "visible", 5)
    b = render(world, 3, 0, 0, "visible", 5)
    rows, cols = clothes_box(64, 32)
    assert np.any(a[:, :rows.start, cols] != b[:, :rows.start, cols])
    assert np.any(a[:, rows.stop:, cols] != b[:, rows.stop:, cols])


def test_infrared_collapses_color(world):
    ir = render(world, 0, 0, 0, "infrared", 9)
    np.testing.assert_array_equal(ir[0], ir[1])
    np.testing.assert_array_equal(ir[1], ir[2])
    with pytest.raises(ContractError):
        render(world, 0, 0, 0, "thermal", 9)


def test_identities_separable_by_nearest_centroid(world):
    cfg = world.config
    rows, cols = clothes_box(cfg.image_height, cfg.image_width)

    def biometric(img):
        return np.concatenate([img[:, :rows.start, cols].ravel(), img[:, rows.stop:, cols].ravel()])

    ids = range(cfg.train_identities)
    cent = np.stack([np.mean([biometric(render(world, i, j % 3, j % 2, "visible", 1000 + 10 * i + j))
                              for j in range(6)], axis=0) for i in ids])
    correct, total = 0, 0
    for i in ids:
        for j in range(5):
            x = biometric(render(world, i, j % 3, (j + 1) % 2, "visible", 50_000 + 10 * i + j))
            correct += int(np.argmin(((cent - x) ** 2).sum(1)) == i)
            total += 1
    assert correct / total >= 0.95


def test_attributes_follow_clothes(world):
    ds = generate_dataset(DataConfig(tasks=("cc",)))
    for r in ds.manifest.records[:30]:
        spec = world.identities[r.identity]
        assert list(r.attributes) == spec.attributes(r.clothes)
        assert r.description


def test_wardrobe_of_one_rejected_for_clothes_changing():
    with pytest.raises(ContractError):
        DataConfig(wardrobe_size=1, tasks=("cc",)).validate()
    DataConfig(wardrobe_size=1, tasks=("trad",)).validate()


def test_ctcc_and_li_layouts():
    ds = generate_dataset(DataConfig(**SMALL_DATA, tasks=("ctcc", "li")))
    for q in ds.manifest.select("query", "ctcc"):
        gal = [g for g in ds.manifest.select("gallery", "ctcc") if g.identity == q.identity]
        assert any(g.clothes == q.template_clothes for g in gal)
        assert any(g.clothes != q.template_clothes for g in gal)
    for q in ds.manifest.select("query", "li"):
        target = ds.record(q.instruction_uid)
        assert target.identity == q.identity and target.split == "gallery"


def test_manifest_round_trip():
    m = generate_dataset(DataConfig(**SMALL_DATA)).manifest
    assert Manifest.parse(m.serialize()) == m


def test_dataset_on_disk_is_reproducible(tmp_path):
    cfg = DataConfig(**dict(SMALL_DATA, seed=7), tasks=("trad", "vi"))
    a, b = tmp_path / "a", tmp_path / "b"
    da = generate_dataset(cfg, a)
    generate_dataset(cfg, b)
    assert dataset_checksum(a) == dataset_checksum(b)
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
    loaded = load_dataset(a)
    r = loaded.manifest.records[3]
    np.testing.assert_array_equal(loaded.image(r), da.image(da.manifest.records[3]))
    with pytest.raises(ContractError):
        load_dataset(tmp_path / "missing")


def test_image_file_round_trip(tmp_path, rng):
    img = rng.normal(size=(3, 8, 4)).astype(np.float32)
    write_image(tmp_path / "x.bin", img)
    np.testing.assert_array_equal(read_image(tmp_path / "x.bin"), img)
    (tmp_path / "bad.bin").write_bytes((tmp_path / "x.bin").read_bytes()[:-4])
    with pytest.raises(ContractError):
        read_image(tmp_path / "bad.bin")


def test_templates_and_crops(world):
    t = clothes_template(world, 0, 1, 16)
    assert t.shape == (3, 16, 16)
    img = render(world, 0, 1, 0, "visible", 3)
    crop = clothes_crop(img, 16)
    # the crop of a noisy render tracks its clean template
    assert np.corrcoef(t.ravel(), crop.ravel())[0, 1] > 0.5


def test_sampler_default_batch_size():
    ds = generate_dataset(DataConfig(train_identities=32, samples_per_identity=4, tasks=("trad",)))
    recs = ds.manifest.select("train", "trad")
    batch = next(pk_batch_sampler(recs, 32, 4, np.random.default_rng(0)))
    assert len(batch) == 128


def test_sampler_exact_cover():
    ds = generate_dataset(DataConfig(**dict(SMALL_DATA, train_identities=2, samples_per_identity=2),
                                     tasks=("trad",)))
    recs = ds.manifest.select("train", "trad")
    batch = next(pk_batch_sampler(recs, 2, 2, np.random.default_rng(0)))
    assert sorted(batch) == [0, 1, 2, 3]


def test_sampler_histogram(small_ds):
    recs = small_ds.manifest.select("train", "trad")
    it = pk_batch_sampler(recs, 3, 2, np.random.default_rng(1))
    for _ in range(100):
        batch = next(it)
        counts = Counter(recs[i].identity for i in batch)
        assert len(counts) == 3 and set(counts.values()) == {2}
        assert len(set(batch)) == 6
    with pytest.raises(ContractError):
        next(pk_batch_sampler(recs, 7, 2, np.random.default_rng(0)))


def test_augment_properties(rng):
    img = rng.normal(size=(3, 16, 8)).astype(np.float32)
    np.testing.assert_array_equal(augment(img, rng, ()), img)
    once = augment(img, rng, ("flip",), flip_p=1.0)
    np.testing.assert_array_equal(once, img[:, :, ::-1])
    np.testing.assert_array_equal(augment(once, rng, ("flip",), flip_p=1.0), img)
    for _ in range(20):
        out = augment(img, rng, ("erase",), erase_p=1.0)
        changed = np.any(out != img, axis=0)
        ys, xs = np.nonzero(changed)
        box = np.zeros_like(changed)
        box[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = True
        assert (changed == box).all()
        assert 0.02 * 128 <= box.sum() <= 0.2 * 128
        np.testing.assert_allclose(out[:, changed][:, 0], img.mean(axis=(1, 2)), rtol=1e-6)
    assert augment(img, rng).shape == img.shape
    with pytest.raises(ContractError):
        augment(img, rng, ("rotate",))


def test_train_clothes_policy():
    ds = generate_dataset(DataConfig(**SMALL_DATA, tasks=("trad", "cc", "vi")))
    assert {r.clothes for r in ds.manifest.select("train", "trad")} == {0}
    assert {r.clothes for r in ds.manifest.select("train", "cc")} == {0, 1, 2}
    mods = Counter(r.modality for r in ds.manifest.select("train", "vi"))
    assert mods["visible"] == mods["infrared"]


def test_config_changes_data(world):
    other = build_world(dataclasses.replace(DataConfig(), seed=1))
    assert not np.array_equal(other.identities[0].biometric, world.identities[0].biometric)
