"""Independent reference implementations used as test oracles."""

import numpy as np


def direct_conv3d(x, w, b, s=1, p=0, r=1):
    """Six nested loops over output voxels and kernel taps; channels contracted per tap."""
    n, ci, D, H, W = x.shape
    co, _, k, _, _ = w.shape
    xp = np.zeros((n, ci, D + 2 * p, H + 2 * p, W + 2 * p), dtype=np.float64)
    xp[:, :, p:p + D, p:p + H, p:p + W] = x
    kd = k + (k - 1) * (r - 1)
    od, oh, ow = ((e + 2 * p - kd) // s + 1 for e in (D, H, W))
    y = np.zeros((n, co, od, oh, ow))
    for i in range(od):
        for j in range(oh):
            for l in range(ow):
                for a in range(k):
                    for c in range(k):
                        for e in range(k):
                            v = xp[:, :, i * s + a * r, j * s + c * r, l * s + e * r]
                            y[:, :, i, j, l] += v @ w[:, :, a, c, e].T
    return y + np.asarray(b, dtype=np.float64)[None, :, None, None, None]


def zero_insert(w, r):
    """Spread kernel taps apart by r-1 zeros along each spatial axis."""
    co, ci, k = w.shape[:3]
    kd = k + (k - 1) * (r - 1)
    out = np.zeros((co, ci, kd, kd, kd), dtype=w.dtype)
    out[:, :, ::r, ::r, ::r] = w
    return out


def central_diff(f, x, index, eps=1e-6):
    """d f / d x[index] by central differences; x is perturbed and restored in place."""
    old = x[index]
    x[index] = old + eps
    up = f()
    x[index] = old - eps
    down = f()
    x[index] = old
    return (up - down) / (2 * eps)


def rel_err(a, n, floor=1e-8):
    return abs(a - n) / max(abs(a), abs(n), floor)


def sample_indices(rng, shape, count=20):
    return [tuple(int(rng.integers(0, m)) for m in shape) for _ in range(count)]


def check_grad(f, x, analytic, rng, count=20, eps=1e-6, floor=1e-8):
    """Worst relative error between analytic gradient entries and central differences."""
    worst = 0.0
    for idx in sample_indices(rng, x.shape, count):
        worst = max(worst, rel_err(analytic[idx], central_diff(f, x, idx, eps), floor))
    return worst


def dense_laplacian(mask):
    """Graph Laplacian of 6-connected voxels built by explicit neighbour enumeration."""
    coords = [tuple(c) for c in np.argwhere(mask)]
    index = {c: i for i, c in enumerate(coords)}
    L = np.zeros((len(coords), len(coords)))
    for c, i in index.items():
        for axis in range(3):
            for step in (-1, 1):
                nb = list(c)
                nb[axis] += step
                j = index.get(tuple(nb))
                if j is not None:
                    L[i, j] -= 1.0
                    L[i, i] += 1.0
    return L, coords


def brute_dice(pred, ref, c):
    p = [v == c for v in np.ravel(pred)]
    q = [v == c for v in np.ravel(ref)]
    inter = sum(1 for a, b in zip(p, q) if a and b)
    total = sum(p) + sum(q)
    return 1.0 if total == 0 else 2.0 * inter / total


def brute_iou(pred, ref, c):
    p = [v == c for v in np.ravel(pred)]
    q = [v == c for v in np.ravel(ref)]
    inter = sum(1 for a, b in zip(p, q) if a and b)
    union = sum(1 for a, b in zip(p, q) if a or b)
    return 1.0 if union == 0 else inter / union
