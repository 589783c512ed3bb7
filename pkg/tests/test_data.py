import json

import numpy as np
import pytest

import gzoom as gz
from gzoom import data as dm
from gzoom.errors import (BadMagicError, ConfigError, TruncatedError,
                          VersionError)
from gzoom.viz import write_pgm, write_ppm


def tiny_spec(**kw):
    base = dict(num_classes=4, train_per_class=6, test_per_class=3,
                image_size=48, seed=7)
    base.update(kw)
    return dm.SyntheticSpec(**base)


# -- rendering ---------------------------------------------------------------


def test_generation_deterministic():
    tr1, te1 = dm.generate(tiny_spec())
    tr2, te2 = dm.generate(tiny_spec())
    assert np.array_equal(tr1.images, tr2.images)
    assert np.array_equal(te1.images, te2.images)
    assert np.array_equal(tr1.labels, tr2.labels)
    assert np.array_equal(tr1.boxes, tr2.boxes)


def test_default_counts_and_balance():
    spec = dm.SyntheticSpec()
    assert spec.num_classes == 10
    tr, te = dm.generate(dm.SyntheticSpec(train_per_class=3, test_per_class=2))
    assert len(tr) == 30 and len(te) == 20
    assert np.bincount(tr.labels, minlength=10).tolist() == [3] * 10
    assert np.bincount(te.labels, minlength=10).tolist() == [2] * 10


def test_train_and_test_do_not_overlap():
    tr, te = dm.generate(tiny_spec())
    # per-image seeds differ by global index, so no rendered image repeats
    seen = {im.tobytes() for im in tr.images}
    assert all(im.tobytes() not in seen for im in te.images)


def test_images_are_quantized_unit_range():
    tr, _ = dm.generate(tiny_spec())
    assert tr.images.dtype == np.float32
    assert tr.images.min() >= 0 and tr.images.max() <= 1
    scaled = tr.images * 255.0
    assert np.allclose(scaled, np.rint(scaled), atol=1e-4)


def test_boxes_inside_image_and_glyph_sized():
    spec = tiny_spec()
    tr, te = dm.generate(spec)
    for ds in (tr, te):
        b = ds.boxes
        assert (b[:, 0] >= 0).all() and (b[:, 1] >= 0).all()
        assert (b[:, 0] + b[:, 2] <= spec.image_size).all()
        assert (b[:, 1] + b[:, 3] <= spec.image_size).all()
        assert (b[:, 2] == spec.glyph_size).all()
        assert (b[:, 3] == spec.glyph_size).all()


def test_label_changes_only_pixels_inside_box():
    # same per-image seed, different glyph: geometry, noise and box agree,
    # pixel differences stay inside the part box
    spec = tiny_spec()
    glyphs = dm.glyph_masks(spec.num_classes, spec.glyph_size, spec.seed)
    a, box_a = dm._render_image(spec, glyphs, label=0, global_index=11)
    b, box_b = dm._render_image(spec, glyphs, label=1, global_index=11)
    assert np.array_equal(box_a, box_b)
    diff = np.argwhere((a != b).any(axis=0))
    assert len(diff) > 0, "paired glyphs must not be identical"
    r, c, h, w = box_a
    assert (diff[:, 0] >= r).all() and (diff[:, 0] < r + h).all()
    assert (diff[:, 1] >= c).all() and (diff[:, 1] < c + w).all()


def test_part_is_brightest_region():
    spec = tiny_spec()
    tr, _ = dm.generate(spec)
    hits = 0
    for i in range(len(tr)):
        r, c, h, w = tr.boxes[i]
        inside = tr.images[i, :, r:r + h, c:c + w].max()
        if inside >= spec.part_value - 0.06:
            hits += 1
    assert hits == len(tr)


def test_glyph_masks_pairs_differ():
    masks = dm.glyph_masks(10, 9, seed=0)
    assert len(masks) == 10
    blobs = [m.tobytes() for m in masks]
    assert len(set(blobs)) == 10
    for a in range(0, 10, 2):
        assert (masks[a] != masks[a + 1]).sum() > 0


def test_glyph_masks_extra_classes_deterministic():
    m1 = dm.glyph_masks(13, 9, seed=3)
    m2 = dm.glyph_masks(13, 9, seed=3)
    assert len(m1) == 13
    for a, b in zip(m1, m2):
        assert np.array_equal(a, b)


def test_spec_validation():
    with pytest.raises(ConfigError):
        dm.SyntheticSpec(num_classes=1)
    with pytest.raises(ConfigError):
        dm.SyntheticSpec(glyph_size=40, image_size=64)
    with pytest.raises(ConfigError):
        dm.SyntheticSpec(noise_sigma=-0.1)


def test_erase_parts_blacks_out_box_only():
    tr, _ = dm.generate(tiny_spec())
    erased = dm.erase_parts(tr)
    for i in range(4):
        r, c, h, w = tr.boxes[i]
        assert (erased.images[i, :, r:r + h, c:c + w] == 0).all()
        mask = np.ones(tr.images[i].shape, dtype=bool)
        mask[:, r:r + h, c:c + w] = False
        assert np.array_equal(erased.images[i][mask], tr.images[i][mask])
    assert np.array_equal(erased.labels, tr.labels)


# -- localization ------------------------------------------------------------


def test_localization_score_counts_peaks():
    boxes = np.array([[2, 2, 3, 3], [0, 0, 2, 2]])
    hit = np.zeros((8, 8)); hit[3, 3] = 1.0
    miss = np.zeros((8, 8)); miss[7, 7] = 1.0
    assert dm.localization_score([hit, miss], boxes) == 0.5
    assert dm.localization_score([hit, hit[::-1].copy()], boxes) == 0.5


def test_localization_degenerate_map_is_a_miss():
    boxes = np.array([[0, 0, 8, 8]])
    assert dm.localization_score([np.zeros((8, 8))], boxes) == 0.0


def test_localization_validation():
    with pytest.raises(ValueError):
        dm.localization_score([], np.zeros((0, 4)))
    with pytest.raises(ValueError):
        dm.localization_score([np.ones((4, 4))], np.zeros((2, 4)))


# -- GZDS container ----------------------------------------------------------


def test_dataset_roundtrip(tmp_path):
    tr, _ = dm.generate(tiny_spec())
    path = tmp_path / "train.gzds"
    dm.save_dataset(tr, path)
    back = dm.load_dataset(path)
    assert np.array_equal(back.images, tr.images)
    assert np.array_equal(back.labels, tr.labels)
    assert np.array_equal(back.boxes, tr.boxes)
    assert back.num_classes == tr.num_classes


def test_dataset_save_deterministic(tmp_path):
    tr, _ = dm.generate(tiny_spec())
    p1, p2 = tmp_path / "a.gzds", tmp_path / "b.gzds"
    dm.save_dataset(tr, p1)
    dm.save_dataset(tr, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_error_trio(tmp_path):
    tr, _ = dm.generate(tiny_spec(train_per_class=1))
    path = tmp_path / "d.gzds"
    dm.save_dataset(tr, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.gzds"
    bad.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(BadMagicError):
        dm.load_dataset(bad)

    ver = tmp_path / "ver.gzds"
    ver.write_bytes(blob[:4] + b"\x2a\x00\x00\x00" + blob[8:])
    with pytest.raises(VersionError):
        dm.load_dataset(ver)

    trunc = tmp_path / "trunc.gzds"
    trunc.write_bytes(blob[:-5])
    with pytest.raises(TruncatedError) as exc:
        dm.load_dataset(trunc)
    assert "pixels" in str(exc.value)


def test_manifest_mentions_spec_and_counts():
    spec = tiny_spec()
    tr, te = dm.generate(spec)
    man = dm.dataset_manifest(spec, tr, te)
    assert man["spec"]["num_classes"] == spec.num_classes
    assert man["spec"]["seed"] == spec.seed
    assert man["splits"]["train"]["count"] == len(tr)
    assert man["splits"]["test"]["count"] == len(te)
    json.dumps(man)  # must be serializable as-is


# -- folder ingest -----------------------------------------------------------


def _make_class_tree(root, per_class=3):
    rng = np.random.default_rng(5)
    for name in ("finch", "wren"):
        d = root / name
        d.mkdir()
        for i in range(per_class):
            img = rng.random((3, 20, 24)).astype(np.float32)
            write_ppm(img, d / f"img{i}.ppm")


def test_ingest_folder_labels_by_directory(tmp_path):
    _make_class_tree(tmp_path)
    ds, man = dm.ingest_folder(tmp_path, image_size=16)
    assert len(ds) == 6
    assert ds.images.shape == (6, 3, 16, 16)
    assert sorted(set(ds.labels.tolist())) == [0, 1]
    assert man["classes"] == ["finch", "wren"]
    assert (ds.boxes == -1).all()
    assert (tmp_path / "manifest.json").exists()
    again, man2 = dm.ingest_folder(tmp_path, image_size=16, manifest_path=False)
    assert man2["entries"] == man["entries"]
    assert np.array_equal(ds.images, again.images)


def test_ingest_grayscale_becomes_three_channels(tmp_path):
    d = tmp_path / "only"
    d.mkdir()
    write_pgm(np.random.default_rng(0).random((18, 18)), d / "a.pgm")
    ds, _ = dm.ingest_folder(tmp_path, image_size=12, manifest_path=False)
    assert ds.images.shape == (1, 3, 12, 12)
    assert np.array_equal(ds.images[:, 0], ds.images[:, 1])


def test_ingest_bad_file_names_it(tmp_path):
    d = tmp_path / "cls"
    d.mkdir()
    bad = d / "notes.txt"
    bad.write_text("not pixels")
    with pytest.raises(gz.DataFormatError) as exc:
        dm.ingest_folder(tmp_path, manifest_path=False)
    assert "notes.txt" in str(exc.value)


def test_ingest_empty_class_rejected(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError) as exc:
        dm.ingest_folder(tmp_path, manifest_path=False)
    assert "empty" in str(exc.value)


def test_ingest_no_subdirs_rejected(tmp_path):
    with pytest.raises(ValueError):
        dm.ingest_folder(tmp_path, manifest_path=False)
