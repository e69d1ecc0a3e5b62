import numpy as np
import pytest

from mmsplat.renderer import render
from mmsplat.synthetic import evaluate, init_from_depth, make_synthetic, points_from_depth


@pytest.fixture(scope="module")
def synth():
    return make_synthetic(4, n_gaussians=16, n_views=4, resolution=32)


def test_same_seed_same_bytes(synth):
    ds, gt = synth
    ds2, gt2 = make_synthetic(4, n_gaussians=16, n_views=4, resolution=32)
    for a, b in zip(ds.views, ds2.views):
        assert a.image.data.tobytes() == b.image.data.tobytes()
        assert a.depth.data.tobytes() == b.depth.data.tobytes()
        assert a.labels.data.tobytes() == b.labels.data.tobytes()
    assert gt.coarse.mu.tobytes() == gt2.coarse.mu.tobytes()


def test_depth_valid_where_covered(synth):
    ds, gt = synth
    for v in ds.views:
        out = render(gt, v.camera)
        assert np.array_equal(v.depth.plane > 0, out.alpha_map.plane >= 1e-3)


def test_self_consistency(synth):
    ds, gt = synth
    for v in ds.views:
        assert np.abs(render(gt, v.camera, background=ds.background).image.data - v.image.data).max() <= 1e-6


def test_split_and_labels(synth):
    ds, _ = synth
    assert ds.test == [1] and ds.train == [0, 2, 3]
    for v in ds.views:
        lab = v.labels.plane
        assert lab.min() >= 0 and lab.max() <= 4
        assert np.all((lab > 0) <= (v.depth.plane > 0))


def test_evaluate_ground_truth_and_purity(synth):
    ds, gt = synth
    before = gt.coarse.mu.copy()
    r = evaluate(gt, ds)
    assert r.psnr == 100.0 and r.ssim == 1.0
    assert evaluate(gt, ds).per_view == r.per_view
    assert np.array_equal(gt.coarse.mu, before)


def test_init_points_lie_on_rendered_depth(synth):
    ds, _ = synth
    pts, cols = points_from_depth(ds.train_views, stride=4)
    assert len(pts) == len(cols) > 0
    v = ds.train_views[0]
    xc = pts @ v.camera.R.T + v.camera.t
    assert np.all(xc[:, 2] > 0)
    scene = init_from_depth(ds.train_views, stride=8)
    assert scene.n_coarse > 0 and scene.n_fine == 0


def test_argument_checks():
    with pytest.raises(ValueError):
        make_synthetic(0, n_views=2)
    with pytest.raises(ValueError):
        evaluate(None, type("D", (), {"test": []})())
