import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from scanet.data import (
    NEGATIVE,
    POSITIVE,
    DataError,
    build_patch_set,
    export_dataset,
    flip,
    load_dataset,
    prepare,
    stack,
    swpt_extract,
    synth_generate,
    tile_cloud_counts,
)
from scanet.tensor import Tensor


def touch_layout(root, stems, gt_suffix=""):
    (root / "images").mkdir(parents=True)
    (root / "GTmaps").mkdir()
    for s in stems:
        (root / "images" / f"{s}.jpg").touch()
        (root / "GTmaps" / f"{s}{gt_suffix}.png").touch()
    return root


def write_pair(root, stem, rgb, mask):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "GTmaps").mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(root / "images" / f"{stem}.png")
    Image.fromarray(mask).save(root / "GTmaps" / f"{stem}.png")
    return root / "images" / f"{stem}.png", root / "GTmaps" / f"{stem}.png"


def test_split_100(tmp_path):
    idx = load_dataset(touch_layout(tmp_path, [f"d{i:03d}" for i in range(100)]), seed=42)
    assert (len(idx.train), len(idx.test)) == (90, 10)
    assert not set(idx.train) & set(idx.test)


def test_split_swinyseg_size(tmp_path):
    stems = [f"d{i:04d}" for i in range(6078)] + [f"n{i:04d}" for i in range(690)]
    idx = load_dataset(touch_layout(tmp_path, stems), seed=0)
    assert (len(idx.train), len(idx.test)) == (6092, 676)
    # partition: every pair exactly once
    assert sorted(p[0].stem for p in idx.train + idx.test) == sorted(stems)
    assert {idx.subset_of(p) for p in idx.test} <= {"day", "night"}
    assert idx.subset_of(next(p for p in idx.train if p[0].stem.startswith("n"))) == "night"


def test_split_deterministic(tmp_path):
    root = touch_layout(tmp_path, [f"x{i}" for i in range(37)])
    a, b = load_dataset(root, seed=3), load_dataset(root, seed=3)
    assert a.train == b.train and a.test == b.test
    assert load_dataset(root, seed=4).train != a.train


def test_gt_suffix_matches(tmp_path):
    idx = load_dataset(touch_layout(tmp_path, ["a", "b"], gt_suffix="_GT"), seed=0)
    assert len(idx.train) == 2


def test_missing_mask_names_stem(tmp_path):
    root = touch_layout(tmp_path, ["a", "b"])
    (root / "images" / "orphan.png").touch()
    with pytest.raises(DataError, match="orphan"):
        load_dataset(root)


def test_empty_and_missing_layout(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope")
    (tmp_path / "images").mkdir()
    (tmp_path / "GTmaps").mkdir()
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_flip_involution(rng):
    img = rng.uniform(size=(1, 3, 5, 6)).astype(np.float32)
    mask = (rng.uniform(size=(1, 1, 5, 6)) > 0.5).astype(np.float32)
    for h in (False, True):
        for v in (False, True):
            i2, m2 = flip(*flip(img, mask, h, v), h, v)
            np.testing.assert_array_equal(i2, img)
            np.testing.assert_array_equal(m2, mask)
    i1, m1 = flip(img, mask, True, False)
    np.testing.assert_array_equal(i1[..., 0], img[..., -1])
    np.testing.assert_array_equal(m1[..., 0], mask[..., -1])


def test_prepare_gray_normalization(tmp_path):
    pair = write_pair(tmp_path, "g", np.full((8, 8, 3), 128, np.uint8), np.zeros((8, 8), np.uint8))
    s = prepare(pair, 8)
    np.testing.assert_allclose(s.image.data, 128 / 255 - 0.5, atol=1e-7)
    assert abs(float(s.image.data.mean()) - 0.00196) < 1e-5
    assert s.image.shape == (1, 3, 8, 8) and s.mask.shape == (1, 1, 8, 8)


def test_prepare_mask_binary_after_resize(tmp_path, rng):
    for k in range(5):
        mask = rng.integers(0, 256, (37, 53)).astype(np.uint8)
        rgb = rng.integers(0, 256, (37, 53, 3)).astype(np.uint8)
        s = prepare(write_pair(tmp_path, f"r{k}", rgb, mask), 32)
        assert set(np.unique(s.mask.data)) <= {0.0, 1.0}
        assert -0.5 <= s.image.data.min() and s.image.data.max() <= 0.5


def test_prepare_threshold_128(tmp_path):
    mask = np.array([[127, 128], [0, 255]], np.uint8)
    s = prepare(write_pair(tmp_path, "t", np.zeros((2, 2, 3), np.uint8), mask), 2)
    np.testing.assert_array_equal(s.mask.data[0, 0], [[0, 1], [0, 1]])


def test_prepare_deterministic_without_augment(tmp_path, rng):
    pair = write_pair(tmp_path, "d", rng.integers(0, 256, (20, 20, 3)).astype(np.uint8), np.zeros((20, 20), np.uint8))
    a, b = prepare(pair, 16), prepare(pair, 16)
    np.testing.assert_array_equal(a.image.data, b.image.data)


def test_prepare_augment_flips_pair_together(tmp_path, rng):
    rgb = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
    mask = np.zeros((16, 16), np.uint8)
    mask[:, :4] = 255
    rgb[:, :4] = 255
    pair = write_pair(tmp_path, "f", rgb, mask)
    for seed in range(8):
        s = prepare(pair, 16, augment=True, rng=np.random.default_rng(seed))
        cloud = s.mask.data[0, 0] > 0.5
        assert np.all(s.image.data[0, :, cloud] == 0.5)


def test_prepare_undecodable(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(DataError, match="bad.png"):
        prepare((tmp_path / "bad.png", tmp_path / "bad.png"), 8)


def mask_tensor(m):
    return Tensor(m.astype(np.float32)[None, None])


def image_like(m):
    return Tensor(np.zeros((1, 3) + m.shape, np.float32))


def test_swpt_all_cloud():
    m = np.ones((64, 64))
    patches = swpt_extract(image_like(m), mask_tensor(m))
    assert len(patches) == 16
    assert all(p.label == POSITIVE and p.rate == 1.0 for p in patches)
    assert patches[0].patch.shape == (1, 3, 16, 16)


def test_swpt_half_omitted():
    m = np.zeros((64, 64))
    m[:, :8] = 1  # left half of each first-column patch
    patches = swpt_extract(image_like(m), mask_tensor(m))
    assert len(patches) == 12 and all(p.label == NEGATIVE for p in patches)


def test_swpt_quadrant_and_rows():
    m = np.zeros((64, 64))
    for r in range(4):
        for c in range(4):
            m[r * 16 : r * 16 + 8, c * 16 : c * 16 + 8] = 1  # 8x8 = 25% of a 16x16 patch
    assert swpt_extract(image_like(m), mask_tensor(m)) == []
    m = np.zeros((64, 64))
    m[:14, :16] = 1  # 14 of 16 rows in the first patch
    patches = swpt_extract(image_like(m), mask_tensor(m))
    first = [p for p in patches if p.label == POSITIVE]
    assert len(first) == 1 and first[0].rate == 0.875
    assert len(patches) == 16


def test_swpt_boundaries_are_strict():
    m = np.zeros((20, 20))
    m[:5, :4] = 1  # first patch is 5x5; 4 columns -> rate 0.8
    m[:5, 5:6] = 1  # second patch: one column -> rate 0.2
    patches = swpt_extract(image_like(m), mask_tensor(m))
    assert len(patches) == 14


def test_swpt_bad_size():
    m = np.zeros((10, 10))
    with pytest.raises(DataError):
        swpt_extract(image_like(m), mask_tensor(m))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([8, 16, 32]), st.floats(0.0, 1.0))
def test_swpt_label_bounds_and_conservation(seed, size, density):
    rng = np.random.default_rng(seed)
    m = rng.uniform(size=(size, size)) < density
    patches = swpt_extract(image_like(m), mask_tensor(m))
    assert len(patches) <= 16
    for p in patches:
        assert (p.label == POSITIVE and p.rate > 0.8) or (p.label == NEGATIVE and p.rate < 0.2)
    # all 16 tiles, kept or not, sum to the mask total
    ph = size // 4
    tiles = [int(m[r * ph : (r + 1) * ph, c * ph : (c + 1) * ph].sum()) for r in range(4) for c in range(4)]
    counts = tile_cloud_counts(mask_tensor(m))
    assert counts.ravel().tolist() == tiles
    assert int(counts.sum()) == int(m.sum())
    kept = {round(p.rate * ph * ph) for p in patches}
    assert kept <= set(tiles)


def test_build_patch_set_counts():
    samples = synth_generate(4, 64, seed=1)
    summary = build_patch_set(samples)
    assert summary.positive + summary.negative + summary.ignored == 64
    assert len(summary.patches) == summary.positive + summary.negative


def test_synth_deterministic_and_binary():
    a, b = synth_generate(8, 32, seed=5), synth_generate(8, 32, seed=5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image.data, y.image.data)
        np.testing.assert_array_equal(x.mask.data, y.mask.data)
        assert set(np.unique(x.mask.data)) <= {0.0, 1.0}
    c = synth_generate(8, 32, seed=6)
    assert not np.array_equal(a[0].image.data, c[0].image.data)


def test_synth_cover_range_and_both_classes():
    for s in synth_generate(24, 64, seed=0, night_fraction=0.25):
        cover = float(s.mask.data.mean())
        assert 0.2 <= cover <= 0.8
        assert -0.5 <= s.image.data.min() and s.image.data.max() <= 0.5
    night = [s for s in synth_generate(8, 32, seed=0, night_fraction=0.25) if s.subset == "night"]
    assert len(night) == 2 and all(s.source_id.startswith("n") for s in night)


def test_synth_errors():
    with pytest.raises(ValueError):
        synth_generate(0, 32, 0)
    with pytest.raises(ValueError):
        synth_generate(1, 30, 0)


def test_export_round_trip(tmp_path):
    samples = synth_generate(10, 32, seed=2)
    export_dataset(samples, tmp_path)
    idx = load_dataset(tmp_path, seed=0)
    assert len(idx.train) == 9 and len(idx.test) == 1
    by_id = {s.source_id: s for s in samples}
    for pair in idx.train + idx.test:
        s = prepare(pair, 32)
        ref = by_id[s.source_id]
        np.testing.assert_allclose(s.image.data, ref.image.data, atol=1e-6)
        np.testing.assert_array_equal(s.mask.data, ref.mask.data)


def test_stack_shapes():
    x, y = stack(synth_generate(3, 16, seed=0))
    assert x.shape == (3, 3, 16, 16) and y.shape == (3, 1, 16, 16)
