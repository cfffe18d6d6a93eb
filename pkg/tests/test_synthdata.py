import logging

import numpy as np
import pytest
from PIL import Image

from egoseg.datamodel import RasterError
from egoseg.synthdata import (
    EGOHOS_MEAN,
    EGOHOS_STD,
    SampleError,
    SceneError,
    SceneSpec,
    generate_dataset,
    generate_scene,
    load_egohos_dir,
    preprocess,
    write_dataset,
)


def touches_brute(a, b):
    """8-neighbourhood adjacency by direct scan."""
    h, w = a.shape
    ys, xs = np.nonzero(a)
    for y, x in zip(ys, xs):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and b[yy, xx]:
                    return True
    return False


def components(mask):
    """8-connected components by flood fill."""
    seen = np.zeros_like(mask)
    comps = []
    h, w = mask.shape
    for y0, x0 in zip(*np.nonzero(mask)):
        if seen[y0, x0]:
            continue
        comp = np.zeros_like(mask)
        stack = [(y0, x0)]
        seen[y0, x0] = True
        while stack:
            y, x = stack.pop()
            comp[y, x] = True
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                        seen[yy, xx] = True
                        stack.append((yy, xx))
        comps.append(comp)
    return comps


def test_both_config_classes():
    labels = generate_scene(SceneSpec(7, touch_config="both")).labels
    present = set(np.unique(labels).tolist())
    assert {1, 2, 5} <= present
    assert 3 not in present and 4 not in present


def test_none_config_classes():
    labels = generate_scene(SceneSpec(7, touch_config="none", n_distractors=3)).labels
    assert set(np.unique(labels).tolist()) <= {0, 1, 2}


def test_scene_is_deterministic():
    a, b = generate_scene(SceneSpec(7)), generate_scene(SceneSpec(7))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


@pytest.mark.parametrize("seed", range(12))
def test_touch_consistency_oracle(seed):
    s = generate_scene(SceneSpec(seed, n_distractors=2))
    labels = s.labels
    left, right = labels == 1, labels == 2
    objects = labels >= 3
    for comp in components(objects):
        classes = set(np.unique(labels[comp]).tolist())
        assert len(classes) == 1
        touch = (touches_brute(comp, left), touches_brute(comp, right))
        expected = {(True, False): 3, (False, True): 4, (True, True): 5}[touch]
        assert classes == {expected}


@pytest.mark.parametrize("seed", range(12))
def test_distractors_never_touch_hands(seed):
    s = generate_scene(SceneSpec(seed, n_distractors=3))
    hands = (s.labels == 1) | (s.labels == 2)
    for k, obj in enumerate(s.metadata["objects"], start=1):
        if obj["kind"] == "distractor":
            m = s.instances == k
            assert m.any()
            assert not touches_brute(m, hands)
            assert (s.labels[m] == 0).all()


def test_hands_anchored_to_bottom_corners():
    s = generate_scene(SceneSpec(3))
    h, w = s.labels.shape
    bottom = s.labels[-1]
    left_cols = np.nonzero(bottom == 1)[0]
    right_cols = np.nonzero(bottom == 2)[0]
    assert left_cols.size and right_cols.size
    assert left_cols.mean() < w / 2 < right_cols.mean()


def test_infeasible_scene_reports_seed():
    with pytest.raises(SceneError, match="seed=5"):
        generate_scene(SceneSpec(5, image_size=32, n_distractors=40, max_retries=2))


def test_generate_dataset_is_reproducible():
    a = generate_dataset(4, seed=3)
    b = generate_dataset(4, seed=3)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))


def test_preprocess_defaults_and_identity():
    image = np.tile(np.array(EGOHOS_MEAN), (8, 8, 1))
    out = preprocess(image, 8)
    assert out.shape == (8, 8, 3)
    assert np.allclose(out, 0.0, atol=1e-5)
    assert EGOHOS_MEAN == (106.011, 95.400, 87.429)
    assert EGOHOS_STD == (64.357, 60.889, 61.419)


def test_preprocess_full_crop_keeps_size(rng):
    image = rng.integers(0, 256, size=(16, 20, 3)).astype(np.uint8)
    out = preprocess(image, 16, mean=(0, 0, 0), std=(1, 1, 1))
    assert np.array_equal(out, image[:, 2:18].astype(np.float32))
    out = preprocess(image[:, :16], 16, mean=(0, 0, 0), std=(1, 1, 1))
    assert np.array_equal(out, image[:, :16].astype(np.float32))


def test_preprocess_crop_too_large(rng):
    with pytest.raises(RasterError):
        preprocess(np.zeros((8, 8, 3), np.uint8), 9)


def test_random_crop_stays_inside(rng):
    image = np.arange(32 * 32 * 3).reshape(32, 32, 3) % 251
    out = preprocess(image, 16, mean=(0, 0, 0), std=(1, 1, 1), mode="random", rng=rng)
    assert out.shape == (16, 16, 3)


def _write_pairs(root, n):
    samples = generate_dataset(n, seed=11, image_size=64)
    write_dataset(root, {"train": samples})
    return samples


def test_load_dir_roundtrip(tmp_path):
    samples = _write_pairs(tmp_path, 3)
    loaded = list(load_egohos_dir(tmp_path))
    assert len(loaded) == 3
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.labels, b.labels)


def test_load_dir_without_manifest(tmp_path):
    _write_pairs(tmp_path, 3)
    (tmp_path / "manifest.jsonl").unlink()
    assert len(list(load_egohos_dir(tmp_path))) == 3


def test_load_dir_split_filter(tmp_path):
    samples = generate_dataset(3, seed=1, image_size=64)
    write_dataset(tmp_path, {"train": samples[:2], "test": samples[2:]})
    assert len(list(load_egohos_dir(tmp_path, split="test"))) == 1


def test_load_dir_bad_label_value(tmp_path, caplog):
    _write_pairs(tmp_path, 2)
    bad = tmp_path / "labels" / "train_00001.png"
    arr = np.array(Image.open(bad))
    arr[0, 0] = 7
    Image.fromarray(arr).save(bad)
    with pytest.raises(SampleError, match="train_00001"):
        list(load_egohos_dir(tmp_path, fail_fast=True))
    with caplog.at_level(logging.WARNING):
        assert len(list(load_egohos_dir(tmp_path))) == 1
    assert "train_00001" in caplog.text


def test_load_dir_missing_pair_and_size_mismatch(tmp_path):
    _write_pairs(tmp_path, 3)
    (tmp_path / "images" / "train_00000.png").unlink()
    Image.fromarray(np.zeros((32, 32), np.uint8)).save(tmp_path / "labels" / "train_00001.png")
    assert len(list(load_egohos_dir(tmp_path))) == 1
    with pytest.raises(SampleError, match="missing image"):
        list(load_egohos_dir(tmp_path, fail_fast=True))


def test_load_empty_dir_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert list(load_egohos_dir(tmp_path)) == []
    assert "no samples" in caplog.text


def test_load_dir_with_remap(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "images" / "a.png")
    raw = np.array([[0, 10, 20, 30]] * 4, np.uint8)
    Image.fromarray(raw).save(tmp_path / "labels" / "a.png")
    (sample,) = load_egohos_dir(tmp_path, remap={0: 0, 10: 1, 20: 3, 30: 5})
    assert sample.labels[0].tolist() == [0, 1, 3, 5]
    with pytest.raises(SampleError):
        list(load_egohos_dir(tmp_path, remap={0: 0}, fail_fast=True))
