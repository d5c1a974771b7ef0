import numpy as np
import pytest

from instaformer.aggregator import BoundingBox
from instaformer.data import SceneSpec, gen_scene
from instaformer.metrics import SsimConfig, instance_ssim, palette_distance, ssim


def _loop_ssim(a, b, k=8, L=2.0):
    """Literal windowed SSIM: every valid k×k window, every channel."""
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for ch in range(a.shape[0]):
        per = []
        for i in range(a.shape[1] - k + 1):
            for j in range(a.shape[2] - k + 1):
                wa, wb = a[ch, i:i + k, j:j + k], b[ch, i:i + k, j:j + k]
                ma, mb = wa.mean(), wb.mean()
                va, vb = wa.var(), wb.var()
                cov = ((wa - ma) * (wb - mb)).mean()
                per.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
        vals.append(np.mean(per))
    return float(np.mean(vals))


def test_ssim_identical_is_one():
    x = np.random.default_rng(0).uniform(-1, 1, (3, 16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    a, b = np.zeros((3, 12, 12)), np.full((3, 12, 12), 0.5)
    expected = 0.0004 / 0.2504
    assert round(expected, 6) == 0.001597
    assert abs(ssim(a, b) - expected) < 1e-12


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 1, (3, 14, 13))
    b = np.clip(a + 0.3 * rng.standard_normal(a.shape), -1, 1)
    assert abs(ssim(a, b) - _loop_ssim(a, b)) < 1e-12


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    for _ in range(5):
        a, b = rng.uniform(-1, 1, (3, 10, 10)), rng.uniform(-1, 1, (3, 10, 10))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
        assert -1 <= ssim(a, b) <= 1


def test_ssim_errors():
    with pytest.raises(ValueError, match="shape mismatch"):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))
    with pytest.raises(ValueError, match="smaller than window"):
        ssim(np.zeros((3, 7, 9)), np.zeros((3, 7, 9)))


def test_ssim_window_is_configurable():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(-1, 1, (1, 9, 9)), rng.uniform(-1, 1, (1, 9, 9))
    assert abs(ssim(a, b, SsimConfig(window=4)) - _loop_ssim(a, b, k=4)) < 1e-12


def test_instance_ssim_identical():
    s = gen_scene(SceneSpec(4, n_instances=3))
    assert instance_ssim(s.image, s.image, s.boxes) == pytest.approx(1.0, abs=1e-12)


def test_instance_ssim_ignores_outside_pixels():
    rng = np.random.default_rng(5)
    a = rng.uniform(-1, 1, (3, 64, 64))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), -1, 1)
    box = BoundingBox(20, 24, 16, 12)
    before = instance_ssim(a, b, [box])
    b2 = b.copy()
    b2[:, 40:, :] = 0.0
    b2[:, :, 30:] = -1.0
    assert instance_ssim(a, b2, [box]) == before


def test_full_box_equals_plain_ssim():
    rng = np.random.default_rng(6)
    a, b = rng.uniform(-1, 1, (3, 32, 32)), rng.uniform(-1, 1, (3, 32, 32))
    assert instance_ssim(a, b, [BoundingBox(16, 16, 32, 32)]) == ssim(a, b)


def test_instance_ssim_mean_over_disjoint_boxes():
    rng = np.random.default_rng(7)
    a, b = rng.uniform(-1, 1, (3, 64, 64)), rng.uniform(-1, 1, (3, 64, 64))
    boxes = [BoundingBox(10, 10, 12, 12), BoundingBox(40, 44, 20, 16)]
    each = [instance_ssim(a, b, [bx]) for bx in boxes]
    assert instance_ssim(a, b, boxes) == pytest.approx(np.mean(each), abs=1e-15)


def test_instance_ssim_skips_small_boxes_and_errors_when_none_fit():
    rng = np.random.default_rng(8)
    a, b = rng.uniform(-1, 1, (3, 64, 64)), rng.uniform(-1, 1, (3, 64, 64))
    big, small = BoundingBox(30, 30, 16, 16), BoundingBox(5, 5, 4, 4)
    assert instance_ssim(a, b, [big, small]) == instance_ssim(a, b, [big])
    with pytest.raises(ValueError, match="no box"):
        instance_ssim(a, b, [small])


def test_palette_distance_separates_domains():
    for seed in range(5):
        b = gen_scene(SceneSpec(seed, n_instances=2, domain="B")).image
        a = gen_scene(SceneSpec(seed, n_instances=2, domain="A")).image
        assert palette_distance(b, "B") < palette_distance(b, "A")
        assert palette_distance(a, "A") < palette_distance(a, "B")


def test_palette_distance_flip_invariant_and_deterministic():
    img = gen_scene(SceneSpec(3, n_instances=3)).image
    assert palette_distance(img, "B") == palette_distance(img.copy(), "B")
    assert palette_distance(img[:, :, ::-1], "B") == pytest.approx(palette_distance(img, "B"), abs=1e-12)
    with pytest.raises(ValueError, match="unknown domain"):
        palette_distance(img, "C")
