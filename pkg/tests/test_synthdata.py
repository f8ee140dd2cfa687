import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recalnet.imageio import ImageParseError, read_image, read_sample, write_image, write_sample
from recalnet.synthdata import (AUGMENTATIONS, CLASSES, AugmentConfig, PhantomSpec, _stream, augment, generate,
                                load_dataset, sample_geometry, write_dataset)
from recalnet.tensor import ConfigError


def test_pupil_disk_area_matches_raster_recount():
    spec = PhantomSpec(image_size=(48, 48), eccentricity=(0.0, 0.0))
    batch = generate(spec, 5)
    for i in range(5):
        geo = sample_geometry(spec, _stream(spec.seed, "train", i))
        (cy, cx), (r, _) = geo["center"], geo["pupil"]
        count = sum(1 for y in range(48) for x in range(48) if (y - cy) ** 2 + (x - cx) ** 2 <= r * r)
        assert int(batch.masks[i].sum()) == count


def test_same_seed_identical_and_different_seed_differs():
    spec = PhantomSpec(image_size=(32, 32), seed=5)
    a, b = generate(spec, 4), generate(spec, 4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.masks, b.masks) and a.ids == b.ids
    c = generate(PhantomSpec(image_size=(32, 32), seed=6), 4)
    assert not np.array_equal(a.images, c.images)


def test_per_id_determinism_independent_of_batching():
    spec = PhantomSpec(image_size=(32, 32))
    whole = generate(spec, 6)
    tail = generate(spec, 3, start=3)
    assert np.array_equal(whole.images[3:], tail.images) and whole.ids[3:] == tail.ids


def test_iris_and_pupil_disjoint():
    iris = generate(PhantomSpec(image_size=(48, 48), cls="iris"), 8).masks
    pupil = generate(PhantomSpec(image_size=(48, 48), cls="pupil"), 8).masks
    assert not np.any((iris > 0) & (pupil > 0))
    assert iris.sum() > 0


@pytest.mark.parametrize("cls", CLASSES)
def test_shapes_ranges_and_binary_masks(cls):
    batch = generate(PhantomSpec(image_size=(32, 48), cls=cls), 3)
    assert batch.images.shape == (3, 3, 32, 48) and batch.masks.shape == (3, 1, 32, 48)
    assert batch.images.min() >= 0 and batch.images.max() <= 1
    assert set(np.unique(batch.masks)) <= {0.0, 1.0}


def test_split_disjoint_and_seed_stable():
    spec = PhantomSpec(image_size=(32, 32))
    train, test = generate(spec, 4, "train"), generate(spec, 4, "test")
    assert not set(train.ids) & set(test.ids)
    assert not np.array_equal(train.images, test.images)
    assert generate(spec, 4, "test").ids == test.ids


def test_infeasible_geometry_rejected():
    with pytest.raises(ConfigError):
        PhantomSpec(cornea_radius=(0.3, 0.6))
    with pytest.raises(ConfigError):
        PhantomSpec(image_size=(16, 16), cornea_radius=(0.05, 0.1))
    with pytest.raises(ConfigError):
        generate(PhantomSpec(), 0)


def test_augment_identity():
    batch = generate(PhantomSpec(image_size=(32, 32)), 3)
    cfg = AugmentConfig(rotate_deg=(0, 0), shift_frac=(0, 0), scale=(1, 1))
    out = augment(batch, ["rotate", "shift", "scale"], seed=1, config=cfg)
    assert np.array_equal(out.images, batch.images) and np.array_equal(out.masks, batch.masks)


def test_rot90_preserves_mask_area():
    batch = generate(PhantomSpec(image_size=(40, 40)), 3)
    out = augment(batch, ["rotate"], seed=0, config=AugmentConfig(rotate_deg=(90, 90)))
    np.testing.assert_array_equal(out.masks.sum(axis=(1, 2, 3)), batch.masks.sum(axis=(1, 2, 3)))
    np.testing.assert_array_equal(out.masks[:, 0], np.rot90(batch.masks[:, 0], 1, axes=(1, 2)))


@pytest.mark.parametrize("op", ["brightness_contrast", "motion_blur", "median_blur"])
def test_photometric_ops_leave_mask(op):
    batch = generate(PhantomSpec(image_size=(32, 32)), 2)
    out = augment(batch, [op], seed=3)
    assert np.array_equal(out.masks, batch.masks)
    assert not np.array_equal(out.images, batch.images)


@given(ops=st.lists(st.sampled_from(AUGMENTATIONS), min_size=1, max_size=6, unique=True), seed=st.integers(0, 99))
@settings(max_examples=15, deadline=None)
def test_augment_keeps_masks_binary_and_is_deterministic(ops, seed):
    batch = generate(PhantomSpec(image_size=(32, 32)), 2)
    a, b = augment(batch, ops, seed), augment(batch, ops, seed)
    assert set(np.unique(a.masks)) <= {0.0, 1.0}
    assert np.array_equal(a.images, b.images) and np.array_equal(a.masks, b.masks)


def test_augment_rejects_unknown_or_empty():
    batch = generate(PhantomSpec(image_size=(32, 32)), 1)
    with pytest.raises(ConfigError):
        augment(batch, [], 0)
    with pytest.raises(ConfigError):
        augment(batch, ["cutout"], 0)


@pytest.mark.parametrize("ext", [".png", ".pgm"])
def test_sample_round_trip(tmp_path, ext):
    batch = generate(PhantomSpec(image_size=(24, 32)), 1)
    if ext == ".pgm":
        # netpbm: RGB goes to .ppm, the mask to .pgm
        write_image(tmp_path / "m.pgm", (batch.masks[0, 0] * 255).astype(np.uint8))
        write_image(tmp_path / "i.ppm", np.round(batch.images[0].transpose(1, 2, 0) * 255).astype(np.uint8))
        img, mask = read_sample(tmp_path / "i.ppm", tmp_path / "m.pgm")
    else:
        img_path, mask_path = write_sample(tmp_path, "s0", batch.images[0], batch.masks[0])
        assert set(np.unique(read_image(mask_path))) <= {0, 255}
        img, mask = read_sample(img_path, mask_path)
    assert np.array_equal(mask, batch.masks[0, 0])
    assert np.abs(img - batch.images[0]).max() <= 0.5 / 255 + 1e-12


def _png(tmp_path):
    path = tmp_path / "x.png"
    write_image(path, np.zeros((4, 4), np.uint8))
    return path, path.read_bytes()


def test_png_parse_errors_carry_offsets(tmp_path):
    path, blob = _png(tmp_path)
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"GIF89a" + blob[6:])
    with pytest.raises(ImageParseError) as e:
        read_image(bad)
    assert e.value.offset == 0
    # corrupt the IHDR payload: its CRC check fails at the chunk start, byte 8
    corrupt = bytearray(blob)
    corrupt[16] ^= 0xFF
    bad.write_bytes(bytes(corrupt))
    with pytest.raises(ImageParseError) as e:
        read_image(bad)
    assert e.value.offset == 8 and "CRC" in e.value.reason
    bad.write_bytes(blob[:20])
    with pytest.raises(ImageParseError) as e:
        read_image(bad)
    assert e.value.offset == 8
    # drop IEND: walk ends at the last chunk boundary
    (ihdr_len,) = struct.unpack(">I", blob[8:12])
    bad.write_bytes(blob[:-12])
    with pytest.raises(ImageParseError, match="IEND") as e:
        read_image(bad)
    assert e.value.offset == len(blob) - 12 and ihdr_len == 13


def test_pgm_parse_errors(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(ImageParseError, match="truncated") as e:
        read_image(bad)
    assert e.value.offset == 11 + 10  # end of file: header plus the bytes present
    bad.write_bytes(b"P2\n4 4\n255\n")
    with pytest.raises(ImageParseError) as e:
        read_image(bad)
    assert e.value.offset == 0


def test_dataset_layout_and_manifest(tmp_path):
    spec = PhantomSpec(image_size=(32, 32), cls="iris", seed=2)
    manifest = write_dataset(tmp_path, spec, {"train": 3, "val": 2})
    write_dataset(tmp_path, PhantomSpec(image_size=(32, 32), cls="pupil", seed=2), {"train": 1})
    lines = manifest.read_text().splitlines()
    assert lines[0] == "id,class,split,seed" and len(lines) == 1 + 3 + 2 + 1
    assert (tmp_path / "iris" / "train" / "iris-train-00000_img.png").exists()
    loaded = load_dataset(tmp_path, "iris", "val")
    ref = generate(spec, 2, "val")
    assert loaded.ids == ref.ids and np.array_equal(loaded.masks, ref.masks)
    with pytest.raises(ConfigError):
        load_dataset(tmp_path, "lens", "train")
