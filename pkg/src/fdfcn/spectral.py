"""Spectral and Cartesian brain coordinates.

Spectral coordinates are the eigenvectors of the smallest nonzero
eigenvalues of the graph Laplacian L = D - W over in-mask voxels
(6-neighborhood, unit weights).  The Laplacian is applied as a 7-point
stencil on the voxel grid and never stored as a matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .blocks import extract_block
from .errors import InsufficientMask, LengthMismatch, NoConvergence, ZeroVector

_SIX = ndimage.generate_binary_structure(3, 1)

# every eigenvalue of a 6-neighbor lattice Laplacian lies in [0, 12]
_CONSTANT_SHIFT = 13.0


def _neighbor_sum(vol: np.ndarray) -> np.ndarray:
    out = np.zeros_like(vol)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        out[tuple(lo)] += vol[tuple(hi)]
        out[tuple(hi)] += vol[tuple(lo)]
    return out


class LaplacianOperator:
    """Matrix-free L = D - W over the voxels of a boolean mask.

    In-mask voxels are indexed in lexicographic (C) order.
    """

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {mask.shape}")
        self.mask = mask
        self.n = int(mask.sum())
        self.degree = _neighbor_sum(mask.astype(np.float64))[mask]
        self.applications = 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n,):
            raise LengthMismatch(f"vector of length {x.shape} for {self.n} in-mask voxels")
        self.applications += 1
        vol = np.zeros(self.mask.shape)
        vol[self.mask] = x
        return self.degree * x - _neighbor_sum(vol)[self.mask]

    def to_volume(self, x: np.ndarray, fill: float = 0.0) -> np.ndarray:
        vol = np.full(self.mask.shape, fill, dtype=np.float64)
        vol[self.mask] = x
        return vol


def apply_laplacian(op: LaplacianOperator, x) -> np.ndarray:
    return op.apply(x)


def largest_component(mask: np.ndarray) -> tuple:
    """(largest 6-connected component, number of components)."""
    labels, count = ndimage.label(np.asarray(mask, dtype=bool), structure=_SIX)
    if count == 0:
        return np.zeros_like(mask, dtype=bool), 0
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes)), count


def canonicalize_sign(f: np.ndarray, threshold: float = 1e-9) -> np.ndarray:
    """Flip so that the first entry with magnitude above ``threshold`` is positive."""
    f = np.asarray(f)
    big = np.flatnonzero(np.abs(f) > threshold)
    if big.size == 0:
        raise ZeroVector("cannot fix the sign of a zero vector")
    return -f if f[big[0]] < 0 else f.copy()


def cartesian_coords(shape) -> np.ndarray:
    """Three volumes holding each voxel index divided by that axis length."""
    if any(int(s) < 1 for s in shape):
        raise ValueError(f"shape must be positive, got {shape}")
    grids = np.meshgrid(*[np.arange(s) / s for s in shape], indexing="ij")
    return np.stack(grids).astype(np.float32)


@dataclass
class SpectralCoordinates:
    spectral: np.ndarray             # (3, d, h, w), [0, 1] on mask, 0 elsewhere
    cartesian: np.ndarray            # (3, d, h, w)
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray         # (n_component, count), unit norm
    residuals: np.ndarray
    iterations: int
    component: np.ndarray = field(repr=False)
    method: str = "lanczos"
    downsample: int = 1

    def volumes(self) -> np.ndarray:
        """(6, d, h, w): spectral 1..3 then Cartesian x, y, z."""
        return np.concatenate([self.spectral, self.cartesian]).astype(np.float32)

    def report(self) -> str:
        lines = [f"method\t{self.method}", f"downsample\t{self.downsample}",
                 f"operator_applications\t{self.iterations}",
                 f"component_voxels\t{int(self.component.sum())}"]
        for i, (lam, res) in enumerate(zip(self.eigenvalues, self.residuals)):
            lines.append(f"eigenpair{i + 1}\t{lam:.12g}\t{res:.3e}")
        return "\n".join(lines) + "\n"


def _eigenpairs(op: LaplacianOperator, count: int, tol: float, max_iter, seed: int):
    n = op.n
    if n <= 2 * count + 2:
        # too small for a Krylov basis; apply the stencil to unit vectors
        dense = np.column_stack([op.apply(e) for e in np.eye(n)])
        vals, vecs = np.linalg.eigh(dense)
        return vals[1:count + 1], vecs[:, 1:count + 1], "dense"

    def matvec(v):
        v = np.ravel(v)
        return op.apply(v) + _CONSTANT_SHIFT * v.mean()

    A = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    v0 = np.random.default_rng(seed).standard_normal(n)
    try:
        vals, vecs = eigsh(A, k=count, which="SA", v0=v0, tol=min(tol * 1e-3, 1e-10),
                           maxiter=max_iter, ncv=min(n, max(4 * count + 1, 20)))
    except ArpackNoConvergence as exc:
        raise NoConvergence(f"Lanczos did not converge: {exc}") from None
    order = np.argsort(vals)
    return vals[order], vecs[:, order], "lanczos"


def _downsample_mask(mask, factor):
    pad = [(0, (-s) % factor) for s in mask.shape]
    m = np.pad(mask.astype(np.float32), pad)
    d, h, w = (s // factor for s in m.shape)
    return m.reshape(d, factor, h, factor, w, factor).mean(axis=(1, 3, 5)) >= 0.5


def solve_spectral(mask: np.ndarray, count: int = 3, tol: float = 1e-6, max_iter=None,
                   downsample: int = 1, seed: int = 0) -> SpectralCoordinates:
    """Spectral coordinates of a brain mask.

    The eigensolve runs on the largest 6-connected component.  Masked voxels
    outside it copy the value of their nearest in-component voxel.  With
    ``downsample > 1`` the solve runs on a block-reduced mask and the
    eigenvectors are trilinearly upsampled.
    """
    mask = np.asarray(mask, dtype=bool)
    lcc, _ = largest_component(mask)
    if lcc.sum() < count + 1:
        raise InsufficientMask(
            f"largest component has {int(lcc.sum())} voxels, need at least {count + 1}")
    work = lcc
    if downsample > 1:
        work, _ = largest_component(_downsample_mask(lcc, downsample))
        if work.sum() < count + 1:
            raise InsufficientMask("downsampled mask too small for the eigensolve")
    op = LaplacianOperator(work)
    vals, vecs, method = _eigenpairs(op, count, tol, max_iter, seed)
    ops_used = op.applications
    vecs = np.column_stack([canonicalize_sign(v / np.linalg.norm(v)) for v in vecs.T])
    lam = np.array([v @ op.apply(v) for v in vecs.T])
    res = np.array([np.linalg.norm(op.apply(v) - l * v) for v, l in zip(vecs.T, lam)])
    if np.any(res > tol):
        raise NoConvergence(f"eigenpair residuals {res} exceed {tol}", residuals=res)

    if downsample > 1:
        vols = []
        for v in vecs.T:
            coarse = op.to_volume(v)
            zoom = [t / s for t, s in zip(_padded(mask.shape, downsample), coarse.shape)]
            fine = ndimage.zoom(coarse, zoom, order=1, mode="nearest")
            vols.append(fine[tuple(slice(0, s) for s in mask.shape)])
        raw = np.stack(vols)
    else:
        raw = np.stack([op.to_volume(v) for v in vecs.T])

    stray = mask & ~lcc
    if stray.any():
        _, idx = ndimage.distance_transform_edt(~lcc, return_indices=True)
        for vol in raw:
            vol[stray] = vol[tuple(i[stray] for i in idx)]
    spectral = np.zeros_like(raw, dtype=np.float32)
    for i, vol in enumerate(raw):
        vals_on = vol[mask]
        lo, hi = vals_on.min(), vals_on.max()
        scaled = (vals_on - lo) / (hi - lo) if hi > lo else np.zeros_like(vals_on)
        spectral[i][mask] = scaled
    # pad with empty channels when fewer than three coordinates were requested
    if spectral.shape[0] < 3:
        spectral = np.concatenate(
            [spectral, np.zeros((3 - spectral.shape[0],) + mask.shape, np.float32)])
    return SpectralCoordinates(
        spectral=spectral, cartesian=cartesian_coords(mask.shape), eigenvalues=lam,
        eigenvectors=vecs, residuals=res, iterations=ops_used, component=lcc,
        method=method, downsample=downsample)


def _padded(shape, factor):
    return tuple(s + (-s) % factor for s in shape)


def extract_coord_patch(coords, center, edge: int = 9) -> np.ndarray:
    """(6, edge, edge, edge) coordinate block; out-of-volume voxels are 0."""
    vols = coords.volumes() if isinstance(coords, SpectralCoordinates) else coords
    return extract_block(vols, center, edge)
