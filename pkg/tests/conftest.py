import numpy as np
import pytest

from npbg import autodiff as ad
from npbg.geometry import Camera


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running pipeline fits")
    config.addinivalue_line("markers", "acceptance: acceptance criteria suite")


def central_difference(f, arr, index, h=1e-6):
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def relative_error(analytic, numeric, floor=1e-3):
    """``|a - n| / max(|n|, floor)``; the floor keeps near-zero entries meaningful."""
    return abs(analytic - numeric) / max(abs(numeric), floor)


def check_gradients(loss_fn, tensors, rng, probes=20, tol=1e-4, h=1e-6):
    """Compare tape gradients with central differences at random entries.

    ``loss_fn()`` must build its graph from ``tensors`` (64-bit) and return a
    scalar Tensor. Returns the worst relative error seen.
    """
    with ad.Tape():
        loss = loss_fn()
    ad.backward(loss)
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    value = lambda: loss_fn().item()  # noqa: E731
    for t, grad in zip(tensors, analytic):
        for _ in range(probes):
            idx = tuple(int(rng.integers(n)) for n in t.shape)
            numeric = central_difference(value, t.data, idx, h)
            err = relative_error(grad[idx], numeric)
            worst = max(worst, err)
            assert err <= tol, f"{t.name or t.shape} at {idx}: analytic {grad[idx]} vs numeric {numeric}"
    return worst


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng, width=32, height=32, target=(0.0, 0.0, 0.0), distance=(2.0, 4.0)):
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    eye = np.asarray(target) + direction * rng.uniform(*distance)
    up = rng.standard_normal(3)
    f = rng.uniform(0.6, 1.5) * width
    return Camera.look_at(eye, target, up, fx=f, fy=f * rng.uniform(0.9, 1.1), width=width, height=height,
                          cx=(width - 1) / 2 + rng.uniform(-2, 2), cy=(height - 1) / 2 + rng.uniform(-2, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


def brute_force_raster(cloud, values, cam):
    """Per-pixel scan over every point for the smallest ``(depth, index)``.

    Pixel coordinates come from an independent scalar evaluation of the
    projection formula.
    """
    import math

    from npbg.geometry import Z_NEAR

    h, w = cam.height, cam.width
    r, t = cam.R, cam.t
    pix = np.full(len(cloud), -1, dtype=np.int64)
    zs = np.zeros(len(cloud))
    for i, p in enumerate(cloud.positions):
        x = r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0]
        y = r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1]
        z = r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2]
        zs[i] = z
        if not z > Z_NEAR:
            continue
        u = math.floor(cam.fx * x / z + cam.cx + 0.5)
        v = math.floor(cam.fy * y / z + cam.cy + 0.5)
        if 0 <= u < w and 0 <= v < h:
            pix[i] = v * w + u
    winner = np.full(h * w, -1, dtype=np.int64)
    depth = np.full(h * w, np.inf)
    for q in range(h * w):
        candidates = np.flatnonzero(pix == q)
        if len(candidates):
            best = min((zs[i], i) for i in candidates)
            depth[q], winner[q] = best
    winner, depth = winner.reshape(h, w), depth.reshape(h, w)
    image = np.zeros((values.shape[1], h, w), dtype=values.dtype)
    for py, px in zip(*np.nonzero(winner >= 0)):
        image[:, py, px] = values[winner[py, px]]
    return image, winner, depth


def random_raster_instance(rng, max_points=500, max_size=64):
    """Random cloud, descriptors and camera with plenty of z-fights."""
    from npbg.geometry import PointCloud

    n = int(rng.integers(0, max_points + 1))
    size = int(rng.choice([8, 16, 32, max_size]))
    width = size
    height = size if rng.random() < 0.5 else max(8, size // 2)
    pts = rng.uniform(-1, 1, (n, 3))
    if n > 4:
        # duplicate positions and depths so ties are exercised
        k = n // 4
        pts[rng.integers(0, n, k)] = pts[rng.integers(0, n, k)]
    cam = random_camera(rng, width=width, height=height)
    values = rng.standard_normal((n, int(rng.integers(1, 9)))).astype(np.float32)
    return PointCloud(pts), values, cam
