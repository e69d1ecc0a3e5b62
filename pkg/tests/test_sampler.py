import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from mmsplat.core import Camera, GaussianSet, Level, Scene, TrainConfig, covariance, logit, sigmoid
from mmsplat.sampler import (
    EmptySupportError,
    InvalidDepthError,
    RetentionLedger,
    back_project,
    build_distribution,
    draw_flat,
    draw_pixels,
    effective_opacity,
    make_fine_gaussian,
    project_point,
    prune,
    spawn_fine,
    top_k_pixels,
)


def test_uniform_masked_distribution():
    m = np.zeros((4, 4))
    m[0, :3] = 1
    d = build_distribution(np.ones((4, 4)), m)
    assert d.support_size == 3
    assert np.allclose(d.probs.plane[0, :3], 1 / 3)
    assert d.probs.plane.sum() == pytest.approx(1.0, abs=1e-12)


def test_empty_mask_and_direct_normalization():
    assert build_distribution(np.ones((2, 2)), np.zeros((2, 2))).support_size == 0
    d = build_distribution(np.array([[2.0, 1.0, 1.0, 0.0]]), np.ones((1, 4)))
    assert np.allclose(d.flat, [0.5, 0.25, 0.25, 0.0])
    with pytest.raises(EmptySupportError):
        draw_pixels(build_distribution(np.ones((2, 2)), np.zeros((2, 2))), 3, 0)


def test_point_mass_and_determinism():
    s = np.zeros((3, 5))
    s[2, 1] = 0.7
    d = build_distribution(s, np.ones((3, 5)))
    assert set(draw_pixels(d, 50, 0, dedupe=False)) == {(1, 2)}
    rng = np.random.default_rng(0)
    d2 = build_distribution(rng.uniform(size=(8, 8)), np.ones((8, 8)))
    assert draw_pixels(d2, 100, 123, dedupe=False) == draw_pixels(d2, 100, 123, dedupe=False)


def test_frequencies_match_probabilities():
    d = build_distribution(np.array([[2.0, 1.0, 1.0, 0.0]]), np.ones((1, 4)))
    idx = draw_flat(d, 1_000_000, 7)
    freq = np.bincount(idx, minlength=4) / len(idx)
    assert 0.5 * np.abs(freq - d.flat).sum() <= 0.01
    assert freq[3] == 0


def test_dedupe_keeps_first_occurrence():
    d = build_distribution(np.array([[1.0, 1.0]]), np.ones((1, 2)))
    px = draw_pixels(d, 20, 3)
    assert len(px) == len(set(px)) <= 2


def test_top_k():
    d = build_distribution(np.array([[2.0, 1.0, 1.0, 0.0]]), np.ones((1, 4)))
    assert top_k_pixels(d, 2) == [(0, 0), (1, 0)]
    assert top_k_pixels(d, 10) == [(0, 0), (1, 0), (2, 0)]


def test_back_project_examples():
    cam = Camera(np.eye(3), np.eye(3), np.zeros(3), 4, 4)
    assert np.allclose(back_project((0, 0), 2.0, cam), [0, 0, 2])
    cam_t = Camera(np.eye(3), np.eye(3), np.array([1.0, 0, 0]), 4, 4)
    assert np.allclose(back_project((0, 0), 1.0, cam_t), [-1, 0, 1])
    for bad in (0.0, -1.0, np.nan, np.inf):
        with pytest.raises(InvalidDepthError):
            back_project((0, 0), bad, cam)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_round_trip(seed):
    rng = np.random.default_rng(seed)
    R = Rotation.random(random_state=rng).as_matrix()
    cam = Camera.from_intrinsics(rng.uniform(20, 200), rng.uniform(20, 200), rng.uniform(0, 64),
                                 rng.uniform(0, 64), 64, 64, R=R, t=rng.normal(size=3))
    uv = rng.uniform(0, 64, 2)
    d = rng.uniform(0.1, 20)
    x = back_project(uv, d, cam)
    uv2, d2 = project_point(x, cam)
    assert np.allclose(uv2, uv, rtol=0, atol=1e-9)
    assert abs(d2 - d) <= 1e-9


def _fine_scene(n, alpha, birth=0, t_protect=200, coarse_alpha=0.5):
    scene = Scene.from_coarse(GaussianSet.create(mu=np.zeros((1, 3)), scale=0.1,
                                                 opacity_logit=logit(coarse_alpha)))
    ledger = RetentionLedger()
    cfg = TrainConfig(alpha_init=alpha, t_protect=t_protect)
    spawn_fine(scene, ledger, np.ones((n, 3)), np.full((n, 3), 0.5), cfg, birth)
    return scene, ledger, cfg


def test_spawn_isotropic_and_window():
    scene, ledger, cfg = _fine_scene(2, 0.1, birth=100, t_protect=500)
    g = scene.fine[0]
    assert np.allclose(covariance(g), cfg.fine_init_scale ** 2 * np.eye(3))
    assert g.level == Level.FINE and g.birth_iter == 100
    assert list(ledger.protected_until(scene.fine.ids)) == [600, 600]
    ledger.check(scene)


def test_make_fine_gaussian_samples_gt_color():
    img = np.zeros((4, 5, 3))
    img[3, 2] = [0.1, 0.2, 0.3]
    g = make_fine_gaussian([1, 2, 3], (2, 3), img, TrainConfig(), 700)
    assert np.allclose(g.color, [0.1, 0.2, 0.3])
    assert g.opacity == pytest.approx(0.1)


def test_effective_opacity_examples():
    scene, ledger, _ = _fine_scene(1, 0.001, birth=0, t_protect=100)
    g, gid = scene.fine[0], int(scene.fine.ids[0])
    assert effective_opacity(g, ledger, 50, 0.01, gid) == pytest.approx(0.01)
    assert effective_opacity(g, ledger, 100, 0.01, gid) == pytest.approx(0.001)
    scene2, ledger2, _ = _fine_scene(1, 0.5, birth=0, t_protect=100)
    assert effective_opacity(scene2.fine[0], ledger2, 50, 0.01, int(scene2.fine.ids[0])) == pytest.approx(0.5)


def test_prune_examples():
    scene, ledger, _ = _fine_scene(3, 1e-5, birth=0, t_protect=100)
    scene.coarse.opacity_logit[:] = -1e3  # sigmoid underflows to 0
    assert sigmoid(scene.coarse.opacity_logit[0]) == 0.0
    assert len(prune(scene, ledger, 50, 0.005, 0.05)) == 0
    assert scene.n_fine == 3
    removed = prune(scene, ledger, 100, 0.005, 0.05)
    assert len(removed) == 3 and scene.n_fine == 0 and scene.n_coarse == 1
    assert all(it >= until for _, it, until in ledger.pruned)
    ledger.check(scene)


def test_budget_truncates_or_evicts():
    scene, ledger, cfg = _fine_scene(3, 0.1, birth=0, t_protect=10)
    small = cfg.replace(max_fine=4)
    assert spawn_fine(scene, ledger, np.zeros((3, 3)), np.zeros((3, 3)), small, 20) == 1
    assert scene.n_fine == 4
    evicting = small.replace(evict_when_full=True)
    assert spawn_fine(scene, ledger, np.zeros((2, 3)), np.zeros((2, 3)), evicting, 40) == 2
    assert scene.n_fine == 4
    ledger.check(scene)
