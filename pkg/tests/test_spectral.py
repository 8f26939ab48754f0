import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from fdfcn.errors import InsufficientMask, LengthMismatch, ZeroVector
from fdfcn.spectral import (
    LaplacianOperator,
    apply_laplacian,
    canonicalize_sign,
    cartesian_coords,
    extract_coord_patch,
    largest_component,
    solve_spectral,
)
from oracles import dense_laplacian


def grow_mask(rng, voxels, box=10):
    """Connected mask grown one 6-neighbour at a time from the box centre."""
    mask = np.zeros((box,) * 3, bool)
    mask[(box // 2,) * 3] = True
    steps = np.vstack([np.eye(3, dtype=int), -np.eye(3, dtype=int)])
    while mask.sum() < voxels:
        pts = np.argwhere(mask)
        p = pts[rng.integers(len(pts))] + steps[rng.integers(6)]
        if np.all((p >= 0) & (p < box)):
            mask[tuple(p)] = True
    return mask


def path(n):
    m = np.zeros((1, 1, n), bool)
    m[..., :] = True
    return m


def subspace_angle(a, b):
    """Largest principal angle between the column spaces of a and b."""
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return float(np.arccos(np.clip(s.min(), -1.0, 1.0)))


def eigen_clusters(vals, rel=1e-6):
    groups, start = [], 0
    for i in range(1, len(vals) + 1):
        if i == len(vals) or vals[i] - vals[i - 1] > rel * max(1.0, abs(vals[i])):
            groups.append(list(range(start, i)))
            start = i
    return groups


# --- operator -----------------------------------------------------------------------

def test_two_voxel_stencil():
    op = LaplacianOperator(path(2))
    np.testing.assert_array_equal(apply_laplacian(op, np.array([1.0, 0.0])), [1.0, -1.0])
    np.testing.assert_array_equal(op.apply(np.ones(2)), [0.0, 0.0])


def test_three_voxel_matrix():
    op = LaplacianOperator(path(3))
    dense = np.column_stack([op.apply(e) for e in np.eye(3)])
    np.testing.assert_array_equal(dense, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        LaplacianOperator(path(3)).apply(np.ones(4))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 200))
def test_stencil_matches_dense(seed, voxels):
    rng = np.random.default_rng(seed)
    mask = grow_mask(rng, voxels, box=8)
    L, _ = dense_laplacian(mask)
    op = LaplacianOperator(mask)
    for _ in range(3):
        x = rng.normal(size=op.n)
        assert np.abs(op.apply(x) - L @ x).max() <= 1e-10
    np.testing.assert_array_equal(L, L.T)
    np.testing.assert_allclose(L.sum(axis=1), 0)
    xs = rng.normal(size=(100, op.n))
    assert np.min(np.einsum("ij,jk,ik->i", xs, L, xs)) >= -1e-10


@pytest.mark.parametrize("parts", [2, 3])
def test_zero_multiplicity_counts_components(parts):
    mask = np.zeros((3, 3, 4 * parts), bool)
    for i in range(parts):
        mask[:2, :2, 4 * i:4 * i + 2] = True
    L, _ = dense_laplacian(mask)
    vals = np.linalg.eigvalsh(L)
    assert int(np.sum(np.abs(vals) < 1e-9)) == parts
    assert ndimage.label(mask)[1] == parts


def test_largest_component():
    mask = np.zeros((5, 5, 5), bool)
    mask[0, 0, 0:2] = True
    mask[3:5, 3:5, 3:5] = True
    lcc, count = largest_component(mask)
    assert count == 2
    assert lcc.sum() == 8 and not lcc[0, 0, 0]


# --- eigensolve ----------------------------------------------------------------------------

def test_three_voxel_path():
    sc = solve_spectral(path(3), count=2)
    np.testing.assert_allclose(sc.eigenvalues, [1.0, 3.0], atol=1e-12)
    np.testing.assert_allclose(sc.eigenvectors[:, 0], np.array([1, 0, -1]) / np.sqrt(2), atol=1e-12)


def test_two_voxel_path():
    sc = solve_spectral(path(2), count=1)
    np.testing.assert_allclose(sc.eigenvalues, [2.0])
    np.testing.assert_allclose(sc.eigenvectors[:, 0], np.array([1, -1]) / np.sqrt(2))


def test_insufficient_mask():
    single = np.zeros((3, 3, 3), bool)
    single[1, 1, 1] = True
    with pytest.raises(InsufficientMask):
        solve_spectral(single)
    with pytest.raises(InsufficientMask):
        solve_spectral(path(3), count=3)


def test_box_fiedler_monotone_along_long_axis():
    mask = np.ones((6, 3, 3), bool)
    sc = solve_spectral(mask, count=1)
    f = sc.eigenvectors[:, 0].reshape(6, 3, 3)
    L, _ = dense_laplacian(mask)
    assert sc.eigenvalues[0] == pytest.approx(np.linalg.eigvalsh(L)[1], rel=1e-10)
    profile = f.mean(axis=(1, 2))
    d = np.diff(profile)
    assert np.all(d < 0) or np.all(d > 0)
    # constant across each cross-section
    assert np.allclose(f, profile[:, None, None])


@pytest.mark.parametrize("seed", range(10))
def test_random_masks_match_dense(seed):
    rng = np.random.default_rng(100 + seed)
    mask = grow_mask(rng, int(rng.integers(30, 301)))
    sc = solve_spectral(mask)
    L, _ = dense_laplacian(mask)
    vals, vecs = np.linalg.eigh(L)
    ref_vals, ref_vecs = vals[1:4], vecs[:, 1:4]
    assert np.max(np.abs(sc.eigenvalues - ref_vals) / ref_vals) <= 1e-5
    assert np.max(sc.residuals) <= 1e-6
    for f, lam in zip(sc.eigenvectors.T, sc.eigenvalues):
        assert np.linalg.norm(L @ f - lam * f) <= 1e-6
    # compare subspaces so that (near-)degenerate pairs are handled
    for group in eigen_clusters(vals[1:5]):
        group = [g for g in group if g < 3]
        if group:
            assert subspace_angle(sc.eigenvectors[:, group], ref_vecs[:, group]) <= 1e-4
    gram = sc.eigenvectors.T @ sc.eigenvectors
    assert np.abs(gram - np.eye(3)).max() <= 1e-6
    assert np.abs(sc.eigenvectors.sum(axis=0)).max() <= 1e-6


def test_volumes_normalized_and_masked():
    rng = np.random.default_rng(7)
    mask = grow_mask(rng, 150)
    stray = (0, 0, 0)
    mask[stray] = True  # an isolated voxel outside the main component
    sc = solve_spectral(mask)
    vols = sc.volumes()
    assert vols.shape == (6,) + mask.shape
    for v in vols[:3]:
        assert v[mask].min() == pytest.approx(0.0) and v[mask].max() == pytest.approx(1.0)
        assert np.all(v[~mask] == 0)
    # stray voxel copies its nearest component voxel
    lcc = sc.component
    _, idx = ndimage.distance_transform_edt(~lcc, return_indices=True)
    near = tuple(int(i[stray]) for i in idx)
    np.testing.assert_array_equal(vols[:3][(slice(None),) + stray], vols[:3][(slice(None),) + near])


def test_downsampled_solve_runs():
    g = np.indices((16, 16, 16)).astype(float) - 7.5
    mask = ((g / np.array([7.0, 6.0, 5.0])[:, None, None, None]) ** 2).sum(axis=0) < 1
    full = solve_spectral(mask)
    half = solve_spectral(mask, downsample=2)
    assert half.volumes().shape == full.volumes().shape
    assert half.downsample == 2
    # first coordinate should still correlate strongly with the full-resolution one
    a, b = full.spectral[0][mask], half.spectral[0][mask]
    assert abs(np.corrcoef(a, b)[0, 1]) > 0.9


# --- signs and Cartesian coordinates --------------------------------------------------------

def test_canonicalize_sign():
    np.testing.assert_array_equal(canonicalize_sign(np.array([-1.0, 0.0, 1.0])), [1.0, 0.0, -1.0])
    np.testing.assert_array_equal(canonicalize_sign(np.array([1.0, -1.0])), [1.0, -1.0])
    np.testing.assert_array_equal(canonicalize_sign(np.array([1e-12, -2.0])), [-1e-12, 2.0])
    with pytest.raises(ZeroVector):
        canonicalize_sign(np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20).filter(lambda v: max(map(abs, v)) > 1e-6))
def test_canonicalize_idempotent(values):
    f = np.array(values)
    once = canonicalize_sign(f)
    np.testing.assert_array_equal(canonicalize_sign(once), once)
    assert once[np.flatnonzero(np.abs(once) > 1e-9)[0]] > 0


def test_cartesian_coords():
    c = cartesian_coords((256, 256, 128))
    np.testing.assert_allclose(c[:, 128, 64, 64], [0.5, 0.25, 0.5])
    np.testing.assert_array_equal(c[:, 0, 0, 0], [0, 0, 0])
    assert c.min() >= 0 and c.max() < 1


def test_extract_coord_patch():
    mask = np.ones((12, 12, 12), bool)
    sc = solve_spectral(mask, count=3)
    vols = sc.volumes()
    inner = extract_coord_patch(sc, (6, 6, 6))
    np.testing.assert_array_equal(inner, vols[:, 2:11, 2:11, 2:11])
    np.testing.assert_array_equal(inner[3], sc.cartesian[0, 2:11, 2:11, 2:11])
    corner = extract_coord_patch(sc, (0, 0, 0))
    assert corner.shape == (6, 9, 9, 9)
    assert np.all(corner[:, :4] == 0) and np.all(corner[:, :, :4] == 0)
    np.testing.assert_array_equal(corner[:, 4:, 4:, 4:], vols[:, :5, :5, :5])
