import json

import numpy as np
import pytest

from instaformer.data import (BACKGROUND, MAX_AREA, MIN_AREA, SceneSpec, gen_scene, load_batch,
                              make_domain, read_dataset, read_ppm, write_dataset, write_ppm)


def test_gen_scene_deterministic():
    a, b = gen_scene(SceneSpec(17, n_instances=3)), gen_scene(SceneSpec(17, n_instances=3))
    np.testing.assert_array_equal(a.image, b.image)
    assert a.boxes == b.boxes and a.id == b.id


def test_no_instances_is_pure_background():
    s = gen_scene(SceneSpec(5, n_instances=0, domain="B"))
    assert s.boxes == []
    assert np.all(s.image == s.image[:, :, :1])
    top, bottom = BACKGROUND["B"]
    assert np.all(np.diff(s.image[2, :, 0]) > 0) == (bottom[2] > top[2])


def test_domains_share_geometry_not_palette():
    a = gen_scene(SceneSpec(9, n_instances=3, domain="A"))
    b = gen_scene(SceneSpec(9, n_instances=3, domain="B"))
    assert a.boxes == b.boxes and a.kinds == b.kinds
    assert np.abs(a.image - b.image).mean() > 0.5


def test_box_invariants_fuzz():
    for seed in range(1000):
        spec = SceneSpec(seed, n_instances=seed % 7, kinds=("rectangle", "disc")[: 1 + seed % 2])
        s = gen_scene(spec)
        assert np.all(np.isfinite(s.image)) and np.all(np.abs(s.image) <= 1.0)
        for box in s.boxes:
            assert box.is_valid(64)
            assert MIN_AREA <= box.w * box.h / 64 ** 2 <= MAX_AREA


def test_spec_validation():
    with pytest.raises(ValueError, match="domain"):
        SceneSpec(0, domain="C")
    with pytest.raises(ValueError, match="n_instances"):
        SceneSpec(0, n_instances=7)
    with pytest.raises(ValueError, match="image_size"):
        SceneSpec(0, image_size=30)
    with pytest.raises(ValueError, match="shape kinds"):
        SceneSpec(0, kinds=("triangle",))


def test_unsatisfiable_placement_warns(caplog):
    with caplog.at_level("WARNING"):
        s = gen_scene(SceneSpec(2, n_instances=6))
    assert len(s.boxes) == 4
    assert "placed 4 of 6" in caplog.text


def test_make_domain_deterministic_and_sized():
    a, b = make_domain("A", 6, 3), make_domain("A", 6, 3)
    assert len(a) == 6
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
    assert all(1 <= len(s.boxes) <= 4 for s in a)
    # unpaired by construction: the two domains use different scene seeds
    assert [s.boxes for s in make_domain("B", 6, 3)] != [s.boxes for s in a]


def test_ppm_round_trip(tmp_path):
    img = gen_scene(SceneSpec(2, n_instances=2)).image
    write_ppm(tmp_path / "x.ppm", img)
    back = read_ppm(tmp_path / "x.ppm")
    assert np.max(np.abs(back - img)) <= 1 / 255 + 1e-12
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n64 64\n255\n")


def test_ppm_rounding_half_up(tmp_path):
    # 127.5 / 255 maps back to 128
    img = np.full((3, 1, 1), 127.5 / 255 * 2 - 1)
    write_ppm(tmp_path / "h.ppm", img)
    assert (tmp_path / "h.ppm").read_bytes()[-3:] == bytes([128] * 3)


def test_ppm_with_comment(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([0, 255, 0]))
    np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm")[:, 0, 0], [-1, 1, -1])


def test_ppm_errors(tmp_path):
    (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(ValueError, match="not a binary PPM"):
        read_ppm(tmp_path / "a.ppm")
    (tmp_path / "b.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(ValueError, match="expected 12 bytes"):
        read_ppm(tmp_path / "b.ppm")


def test_dataset_round_trip(tmp_path):
    samples = make_domain("A", 3, 0) + make_domain("B", 2, 0)
    write_dataset(samples, tmp_path)
    back = read_dataset(tmp_path)
    assert [s.id for s in back] == [s.id for s in samples]
    for s, r in zip(samples, back):
        assert r.boxes == s.boxes and r.domain == s.domain
        assert np.max(np.abs(r.image - s.image)) <= 1 / 255 + 1e-12
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest == {"count": 5, "image_size": 64, "domains": ["A", "B"]}


def test_empty_directory_reads_as_empty(tmp_path):
    assert read_dataset(tmp_path) == []


def test_missing_annotations(tmp_path):
    (tmp_path / "stray.txt").write_text("x")
    with pytest.raises(FileNotFoundError, match="annotation"):
        read_dataset(tmp_path)


def test_malformed_annotation_line_reports_line(tmp_path):
    write_dataset(make_domain("A", 2, 0), tmp_path)
    ann = tmp_path / "annotations.jsonl"
    ann.write_text(ann.read_text() + "{not json\n")
    with pytest.raises(ValueError, match=r"annotations.jsonl:3"):
        read_dataset(tmp_path)


def test_missing_image_reported(tmp_path):
    samples = make_domain("A", 2, 0)
    write_dataset(samples, tmp_path)
    (tmp_path / "images" / f"{samples[1].id}.ppm").unlink()
    with pytest.raises(FileNotFoundError, match=":2: missing image"):
        read_dataset(tmp_path)


def test_load_batch():
    samples = make_domain("A", 4, 1)
    x, boxes = load_batch(samples, [2, 0])
    assert x.shape == (2, 3, 64, 64)
    np.testing.assert_array_equal(x.data[0], samples[2].image)
    assert boxes == [samples[2].boxes, samples[0].boxes]
    assert load_batch(samples, [1], np.float32)[0].dtype == np.float32


def test_load_batch_rejects_mixed_sizes():
    mixed = make_domain("A", 1, 0) + make_domain("A", 1, 0, image_size=32)
    with pytest.raises(ValueError, match="heterogeneous"):
        load_batch(mixed, [0, 1])
