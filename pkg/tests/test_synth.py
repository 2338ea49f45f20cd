"""Scene generator determinism, label consistency, adversity, and dataset io."""

import numpy as np
import pytest

from skiff.radar import project_points
from skiff.synth import (
    ADVERSITY_MODES,
    Box,
    Scene,
    SynthConfig,
    apply_adversity,
    generate_dataset,
    generate_scene,
    read_dataset,
    read_pgm,
    read_ppm,
    read_scene,
    write_dataset,
    write_pgm,
    write_ppm,
)


def _mask_pixels(box: Box, size: int) -> tuple[slice, slice]:
    x1, y1, x2, y2 = box.to_xyxy(size, size)
    return slice(int(round(y1)), int(round(y2))), slice(int(round(x1)), int(round(x2)))


def test_generate_scene_deterministic():
    cfg = SynthConfig()
    a = generate_scene(123, cfg)
    b = generate_scene(123, cfg)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.sem_mask, b.sem_mask)
    assert a.boxes == b.boxes
    assert a.radar_frames == b.radar_frames
    c = generate_scene(124, cfg)
    assert not np.array_equal(a.image, c.image)


def test_scene_shapes_and_ranges(tiny_scene):
    s = tiny_scene
    assert s.image.shape == (3, 64, 64)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert s.sem_mask.shape == (64, 64)
    assert s.sem_mask.dtype == np.uint8
    assert set(np.unique(s.sem_mask)) <= {0, 1, 2, 3, 4}
    assert len(s.radar_frames) == 3


def test_water_fills_lower_half(tiny_scene):
    mask = tiny_scene.sem_mask
    horizon = 32
    # below the horizon every pixel is water or an object, never background
    assert set(np.unique(mask[horizon:])) <= {1, 2, 3, 4}
    assert (mask[horizon:] == 4).any()
    # drivable water never appears above the horizon
    assert not (mask[:horizon] == 4).any()


def test_boxes_straddle_horizon(tiny_scene):
    for b in tiny_scene.boxes:
        _, y1, _, y2 = b.to_xyxy(64, 64)
        assert y1 < 32 < y2


def test_box_count_and_classes():
    cfg = SynthConfig(min_objects=2, max_objects=3)
    for seed in range(6):
        s = generate_scene(seed, cfg)
        assert 2 <= len(s.boxes) <= 3
        assert all(1 <= b.class_id <= 3 for b in s.boxes)


def test_mask_matches_boxes(tiny_scene):
    s = tiny_scene
    for b in s.boxes:
        ys, xs = _mask_pixels(b, 64)
        region = s.sem_mask[ys, xs]
        # the box footprint contains its own class and nothing from other objects
        assert (region == b.class_id).any()
        other = {1, 2, 3} - {b.class_id}
        assert not np.isin(region, list(other)).any()
    # every object class painted into the mask is claimed by some box
    box_classes = {b.class_id for b in s.boxes}
    mask_classes = set(np.unique(s.sem_mask)) & {1, 2, 3}
    assert mask_classes == box_classes


def test_anchor_return_lands_in_box(tiny_scene):
    s = tiny_scene
    for frame in s.radar_frames:
        proj = project_points(frame, s.extrinsic, s.camera)
        for b in s.boxes:
            x1, y1, x2, y2 = b.to_xyxy(64, 64)
            hits = [p for p in proj if x1 <= p.u <= x2 and y1 <= p.v <= y2]
            assert hits, f"no return inside box {b} in one frame"


def test_box_to_xyxy():
    b = Box(1, 0.5, 0.25, 0.2, 0.1)
    assert b.to_xyxy(100, 200) == (40.0, 40.0, 60.0, 60.0)


def test_config_validation():
    with pytest.raises(ValueError, match="power of two"):
        SynthConfig(image_size=48)
    with pytest.raises(ValueError, match="num_classes"):
        SynthConfig(num_classes=9)
    with pytest.raises(ValueError, match="adversity"):
        SynthConfig(adversity="rain")
    assert SynthConfig(num_classes=2).drivable_id == 3


# ---------------------------------------------------------------------------
# adversity
# ---------------------------------------------------------------------------


def test_dark_is_exact_scale(tiny_scene):
    dark = apply_adversity(tiny_scene, "dark")
    np.testing.assert_array_equal(dark.image, tiny_scene.image * 0.1)
    assert dark.meta["adversity"] == "dark"


def test_adversity_preserves_labels(tiny_scene):
    for mode in ADVERSITY_MODES:
        out = apply_adversity(tiny_scene, mode)
        assert out.boxes == tiny_scene.boxes
        np.testing.assert_array_equal(out.sem_mask, tiny_scene.sem_mask)
        assert out.radar_frames == tiny_scene.radar_frames
        assert out.image is not tiny_scene.image


def test_fog_blends_toward_white(tiny_scene):
    fog = apply_adversity(tiny_scene, "fog")
    assert np.all(fog.image >= tiny_scene.image - 1e-12)
    # at the horizon row the blend weight is the full 0.7
    expected = 0.3 * tiny_scene.image[:, 32, :] + 0.7
    np.testing.assert_allclose(fog.image[:, 32, :], np.clip(expected, 0, 1))


def test_droplet_deterministic_and_local(tiny_scene):
    a = apply_adversity(tiny_scene, "droplet")
    b = apply_adversity(tiny_scene, "droplet")
    np.testing.assert_array_equal(a.image, b.image)
    changed = np.any(a.image != tiny_scene.image, axis=0)
    assert 0 < changed.sum() < changed.size


def test_adversity_rejects_unknown_mode(tiny_scene):
    with pytest.raises(ValueError):
        apply_adversity(tiny_scene, "blizzard")


def test_generation_applies_configured_adversity():
    plain = generate_scene(7, SynthConfig())
    dark = generate_scene(7, SynthConfig(adversity="dark"))
    np.testing.assert_array_equal(dark.image, np.clip(plain.image * 0.1, 0, 1))
    assert dark.meta["adversity"] == "dark"


# ---------------------------------------------------------------------------
# netpbm io
# ---------------------------------------------------------------------------


def test_ppm_roundtrip_exact_on_grid(tmp_path):
    # values on the k/255 grid survive the 8-bit quantization bit-for-bit
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(3, 5, 7)).astype(np.float64) / 255.0
    path = str(tmp_path / "img.ppm")
    write_ppm(path, img)
    np.testing.assert_array_equal(read_ppm(path), img)


def test_pgm_roundtrip_exact(tmp_path):
    mask = np.arange(30, dtype=np.uint8).reshape(5, 6) % 5
    path = str(tmp_path / "mask.pgm")
    write_pgm(path, mask)
    np.testing.assert_array_equal(read_pgm(path), mask)


def test_netpbm_header_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x01\x02\x03")
    np.testing.assert_array_equal(read_pgm(str(path)), [[0, 1], [2, 3]])


def test_netpbm_rejects_bad_files(tmp_path):
    missing = str(tmp_path / "nope.ppm")
    with pytest.raises(FileNotFoundError):
        read_ppm(missing)
    wrong_magic = tmp_path / "w.ppm"
    wrong_magic.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(ValueError, match="P6"):
        read_ppm(str(wrong_magic))
    bad_maxval = tmp_path / "m.pgm"
    bad_maxval.write_bytes(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(ValueError, match="maxval"):
        read_pgm(str(bad_maxval))
    truncated = tmp_path / "t.pgm"
    truncated.write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(ValueError, match="payload"):
        read_pgm(str(truncated))


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def test_dataset_roundtrip(tmp_path, tiny_dataset):
    root = str(tmp_path / "ds")
    write_dataset(tiny_dataset, root)
    loaded = read_dataset(root)
    assert len(loaded) == len(tiny_dataset)
    for orig, back in zip(tiny_dataset, loaded):
        assert back.boxes == orig.boxes
        np.testing.assert_array_equal(back.sem_mask, orig.sem_mask)
        assert back.camera == orig.camera
        assert back.meta == orig.meta
        # radar floats travel through JSON repr, which is lossless
        assert back.radar_frames == orig.radar_frames
        # image survives up to one 8-bit quantization
        assert np.abs(back.image - orig.image).max() <= 0.5 / 255.0 + 1e-12


def test_read_dataset_sorted_order(tmp_path, tiny_dataset):
    root = str(tmp_path / "ds")
    write_dataset(tiny_dataset, root)
    loaded = read_dataset(root)
    seeds = [s.meta["seed"] for s in loaded]
    assert seeds == [s.meta["seed"] for s in tiny_dataset]


def test_read_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(str(tmp_path / "absent"))
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ValueError, match="no scene"):
        read_dataset(str(empty))


def test_read_scene_errors(tmp_path, tiny_scene):
    root = str(tmp_path / "one")
    write_dataset([tiny_scene], root)
    scene_dir = f"{root}/00000"

    import os
    import shutil

    broken = str(tmp_path / "broken")
    shutil.copytree(scene_dir, broken)
    os.remove(f"{broken}/labels.json")
    with pytest.raises(FileNotFoundError):
        read_scene(broken)

    with open(f"{broken}/labels.json", "w") as f:
        f.write("{oops")
    with pytest.raises(ValueError, match="malformed"):
        read_scene(broken)

    with open(f"{broken}/labels.json", "w") as f:
        f.write('{"boxes": [{"class_id": 1, "cx": 0.5, "cy": 0.5, "w": 0.1}]}')
    with pytest.raises(ValueError, match="missing field 'h'"):
        read_scene(broken)


def test_generate_dataset_reproducible_and_distinct():
    cfg = SynthConfig()
    a = generate_dataset(5, 3, cfg)
    b = generate_dataset(5, 3, cfg)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
    assert not np.array_equal(a[0].image, a[1].image)
    assert not np.array_equal(a[1].image, a[2].image)
