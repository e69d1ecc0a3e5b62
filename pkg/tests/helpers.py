"""Random scenes and cameras shared by the test modules."""
import numpy as np
from scipy.spatial.transform import Rotation

from mmsplat.core import Camera, GaussianSet


def rand_set(rng, n, depth=(2.5, 4.0), scale=(0.08, 0.35)):
    return GaussianSet.create(
        mu=np.c_[rng.uniform(-0.6, 0.6, (n, 2)), rng.uniform(*depth, (n, 1))],
        scale=rng.uniform(*scale, (n, 3)),
        rotation=rng.normal(size=(n, 4)),
        opacity_logit=rng.uniform(-2.0, 1.0, n),
        color=rng.uniform(0.0, 1.0, (n, 3)),
    )


def rand_cam(rng, w, h, f=1.2):
    R = Rotation.from_rotvec(rng.normal(size=3) * 0.1).as_matrix()
    return Camera.from_intrinsics(w * f, h * f, (w - 1) / 2, (h - 1) / 2, w, h, R=R, t=rng.normal(size=3) * 0.1)


def fd_check(gs, cam, gt, lambda_ssim=0.2, h=1e-4, rel=1e-3, floor=1e-6):
    """Worst |analytic - central FD| / tolerance over every parameter entry."""
    from mmsplat.renderer import loss, render, render_backward

    def f(g):
        return loss(render(g, cam).image, gt, lambda_ssim)[0]

    _, dimg = loss(render(gs, cam).image, gt, lambda_ssim)
    grads = render_backward(gs, cam, dimg)
    worst = 0.0
    for name in ("mu", "scale", "rotation", "opacity_logit", "color"):
        arr, an = getattr(gs, name), getattr(grads, name)
        for idx in np.ndindex(arr.shape):
            gp = gs.copy()
            getattr(gp, name)[idx] += h
            gm = gs.copy()
            getattr(gm, name)[idx] -= h
            fd = (f(gp) - f(gm)) / (2 * h)
            tol = max(rel * max(abs(fd), abs(an[idx])), floor)
            worst = max(worst, abs(fd - an[idx]) / tol)
    return worst


def kink_free_target(rng, rendered):
    """Random target at least 0.02 from ``rendered`` in every channel, inside [0, 1].

    L1 is not differentiable where rendered == target; a central difference
    that straddles such a point measures the average of the two one-sided
    slopes, so the oracle keeps targets clear of it.
    """
    r = np.asarray(rendered)
    off = rng.uniform(0.02, 0.3, r.shape)
    return np.where(r < 0.5, r + off, r - off)
