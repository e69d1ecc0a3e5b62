import json
import logging

import numpy as np
import pytest

from mmsplat.core import GaussianSet, Level, RasterGrid, Scene, logit
from mmsplat.dataio import (
    DEFAULT_IMPORT_OPACITY,
    FormatError,
    load_dataset,
    load_scene,
    read_labels,
    read_pfm,
    read_png,
    save_dataset,
    save_scene,
    write_labels,
    write_pfm,
    write_png,
)
from mmsplat.importance import PriorInputs, compute_scores
from mmsplat.synthetic import make_synthetic

PARAMS = ("mu", "scale", "rotation", "opacity_logit", "color", "level", "birth_iter")


def _random_scene(rng, nc=30, nf=20):
    c = GaussianSet.create(mu=rng.normal(size=(nc, 3)), scale=rng.uniform(0.01, 1, (nc, 3)),
                           rotation=rng.normal(size=(nc, 4)), opacity_logit=rng.normal(size=nc),
                           color=rng.uniform(size=(nc, 3)))
    f = GaussianSet.create(mu=rng.normal(size=(nf, 3)), scale=rng.uniform(0.01, 1, (nf, 3)),
                           rotation=rng.normal(size=(nf, 4)), opacity_logit=rng.normal(size=nf),
                           color=rng.uniform(size=(nf, 3)), level=Level.FINE,
                           birth_iter=rng.integers(500, 2500, nf), ids=np.arange(nc, nc + nf))
    return Scene(coarse=c, fine=f)


def _same(a, b):
    for part in ("coarse", "fine"):
        for name in PARAMS:
            x, y = getattr(getattr(a, part), name), getattr(getattr(b, part), name)
            assert x.dtype == y.dtype or name in ("level", "birth_iter")
            assert np.array_equal(x, y), (part, name)


def test_empty_scene_round_trip(tmp_path):
    p = tmp_path / "e.ply"
    save_scene(Scene(), p)
    assert b"element vertex 0" in p.read_bytes()
    s = load_scene(p)
    assert s.n_coarse == 0 and s.n_fine == 0


def test_random_scene_bitwise_round_trip(tmp_path):
    s = _random_scene(np.random.default_rng(0))
    save_scene(s, tmp_path / "a.ply")
    s2 = load_scene(tmp_path / "a.ply")
    _same(s, s2)
    save_scene(s2, tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
    assert b"binary_little_endian" in (tmp_path / "a.ply").read_bytes()[:40]


def test_point_cloud_import_binary_and_ascii(tmp_path):
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=np.float64)
    rgb = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255], [10, 20, 30], [255, 255, 255]], dtype=np.uint8)
    arr = np.zeros(5, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")])
    for k, n in enumerate("xyz"):
        arr[n] = pts[:, k]
    for k, n in enumerate("rgb"):
        arr[n] = rgb[:, k]
    head = "ply\nformat binary_little_endian 1.0\nelement vertex 5\n" + "".join(
        f"property {'float' if n in 'xyz' else 'uchar'} {n}\n" for n in "xyzrgb") + "end_header\n"
    (tmp_path / "pc.ply").write_bytes(head.encode() + arr.tobytes())
    s = load_scene(tmp_path / "pc.ply")
    assert s.n_coarse == 5 and s.n_fine == 0
    assert np.allclose(s.coarse.mu, pts)
    assert np.allclose(s.coarse.color, rgb / 255.0)
    assert np.allclose(s.coarse.opacity, DEFAULT_IMPORT_OPACITY)
    assert np.all(s.coarse.scale > 0) and np.allclose(s.coarse.scale[:, 0], s.coarse.scale[:, 1])
    ascii_ply = ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n1 2 3\n")
    (tmp_path / "a.ply").write_text(ascii_ply)
    s2 = load_scene(tmp_path / "a.ply")
    assert np.allclose(s2.coarse.mu, [[0, 0, 0], [1, 2, 3]])
    assert np.allclose(s2.coarse.color, 0.5)


def test_unknown_layout_lists_schema(tmp_path):
    (tmp_path / "bad.ply").write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float u\nend_header\n1\n")
    with pytest.raises(FormatError, match="opacity_logit"):
        load_scene(tmp_path / "bad.ply")
    (tmp_path / "no.ply").write_text("hello")
    with pytest.raises(FormatError):
        load_scene(tmp_path / "no.ply")


def test_pfm_png_label_round_trips(tmp_path):
    rng = np.random.default_rng(1)
    d = rng.uniform(0, 5, (7, 9)).astype(np.float32)
    write_pfm(tmp_path / "d.pfm", d)
    assert np.array_equal(read_pfm(tmp_path / "d.pfm"), d)
    img = rng.integers(0, 256, (7, 9, 3)) / 255.0
    write_png(tmp_path / "i.png", img)
    assert np.allclose(read_png(tmp_path / "i.png"), img, atol=1e-12)
    lab = rng.integers(0, 21, (7, 9)).astype(float)
    write_labels(tmp_path / "l.png", lab)
    assert np.array_equal(read_labels(tmp_path / "l.png"), lab)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    ds, _ = make_synthetic(2, n_gaussians=12, n_views=4, resolution=24)
    root = tmp_path_factory.mktemp("ds")
    save_dataset(ds, root)
    return root


def _edit(root, tmp_path, fn):
    m = json.loads((root / "manifest.json").read_text())
    fn(m)
    for e in m["views"]:
        for k in ("image", "depth", "labels"):
            if k in e:
                e[k] = str(root / e[k])
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps(m))
    return p


def test_well_formed_manifest(dataset_dir):
    ds = load_dataset(dataset_dir / "manifest.json")
    assert len(ds.views) == 4 and ds.train == [0, 2, 3] and ds.test == [1]
    assert all(0 <= v.image.data.min() and v.image.data.max() <= 1 for v in ds.views)


def test_reflection_rejected_with_view_name(dataset_dir, tmp_path):
    def flip(m):
        R = np.array(m["views"][2]["R"]).reshape(3, 3)
        R[2] *= -1
        m["views"][2]["R"] = R.reshape(-1).tolist()
    p = _edit(dataset_dir, tmp_path, flip)
    with pytest.raises(ValueError, match="view_002"):
        load_dataset(p)


def test_missing_depth_warns_and_zeroes_geometry(dataset_dir, tmp_path, caplog):
    p = _edit(dataset_dir, tmp_path, lambda m: m["views"][0].pop("depth"))
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(p)
    assert "view_000" in caplog.text
    v = ds.views[0]
    assert v.depth is None
    maps = compute_scores(v.image, np.zeros_like(v.image.data), PriorInputs(v.depth, v.labels), (0.4, 0.2, 0.4), 0.5)
    assert np.all(maps.s_geometry.plane == 0)


def test_manifest_order_independent(dataset_dir, tmp_path):
    a = load_dataset(dataset_dir / "manifest.json")
    p = _edit(dataset_dir, tmp_path, lambda m: m["views"].reverse())
    b = load_dataset(p)
    assert [v.name for v in a.views] == [v.name for v in b.views]
    assert a.train == b.train and a.test == b.test
    for va, vb in zip(a.views, b.views):
        assert np.array_equal(va.image.data, vb.image.data)
        assert np.array_equal(va.camera.R, vb.camera.R)


def test_missing_image_and_bad_split(dataset_dir, tmp_path):
    p = _edit(dataset_dir, tmp_path, lambda m: m["views"][1].update(image="nope.png"))
    with pytest.raises(FileNotFoundError, match="view_001"):
        load_dataset(p)
    p = _edit(dataset_dir, tmp_path, lambda m: m["split"].update(test=["ghost"]))
    with pytest.raises(ValueError, match="ghost"):
        load_dataset(p)
    p = _edit(dataset_dir, tmp_path, lambda m: m["views"][3].update(width=30))
    with pytest.raises(ValueError, match="view_003"):
        load_dataset(p)
