import numpy as np
import pytest

from ilens import datasets, imageio, resources
from ilens.errors import BadInputError


def test_png_and_ppm_roundtrip(tmp_path):
    px = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)) / 255.0
    imageio.write_image(tmp_path / "a.png", px)
    imageio.write_ppm(tmp_path / "a.ppm", px)
    np.testing.assert_array_equal(imageio.read_image(tmp_path / "a.png"), px)
    np.testing.assert_array_equal(imageio.read_image(tmp_path / "a.ppm"), px)
    assert [p.name for p in imageio.list_images(tmp_path)] == ["a.png", "a.ppm"]


def test_ppm_header_comments_and_errors(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# note\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
    np.testing.assert_array_equal(imageio.read_image(path), [[[1, 0, 0], [0, 0, 1]]])
    path.write_bytes(b"P6\n2 1\n255\n" + bytes([1, 2]))
    with pytest.raises(BadInputError):
        imageio.read_image(path)
    path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(BadInputError):
        imageio.read_image(path)
    with pytest.raises(BadInputError):
        imageio.read_image(tmp_path / "missing.png")


def test_toy_scene_stays_inside_unit_interval():
    for seed in range(20):
        img = datasets.toy_scene(seed)
        assert img.shape == (64, 64, 3)
        assert img.min() > 0 and img.max() < 1
    np.testing.assert_array_equal(datasets.toy_scene(3), datasets.toy_scene(3))


def test_foreground_box_covers_the_object():
    for seed in range(5):
        img = datasets.toy_scene(seed)
        x0, y0, x1, y1 = datasets.foreground_box(seed)
        inside = img[y0:y1, x0:x1].reshape(-1, 3).mean(0)
        corner = img[:3, :3].reshape(-1, 3).mean(0)
        assert np.abs(inside - corner).sum() > 0.2


def test_shapes_dataset_labels_alternate():
    images, labels = datasets.shapes_dataset(6, size=32, seed=0)
    assert images.shape == (6, 32, 32, 3)
    assert labels.tolist() == [0, 1, 0, 1, 0, 1]
    assert images.min() >= 0 and images.max() <= 1


def test_bundled_resources_match_generator():
    boxes = resources.toy_boxes().read_text().split("\n")
    for k in range(resources.TOY_SCENES):
        stored = imageio.read_image(resources.toy_scene_path(k))
        np.testing.assert_array_equal(stored, np.round(datasets.toy_scene(k) * 255) / 255)
        assert tuple(map(int, boxes[k].split())) == datasets.foreground_box(k)
    with pytest.raises(IndexError):
        resources.toy_scene_path(3)
