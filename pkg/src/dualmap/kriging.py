"""Sparse local-kriging weights mapping the high-resolution mean field to
standard-resolution voxel centers.

Each standard-resolution voxel gets the kriging weights
``w = K_N^{-1} k_N`` over the masked high-resolution voxels within radius
``r`` of its center; voxels with empty neighborhoods get all-zero rows.
Weights are raw kriging weights and are not normalized.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve

from .kernel import KernelParams, k
from .volume import MaskedVolume


@dataclass(frozen=True)
class KrigingWeights:
    """Sparse |B_s| x |B_h| weight matrix in CSR layout."""

    W: sparse.csr_matrix = field(repr=False)
    radius: float = 0.0
    neighborhood_sizes: np.ndarray = field(default=None, repr=False)

    @property
    def shape(self):
        return self.W.shape


def neighborhood(high: MaskedVolume, center, r: float) -> np.ndarray:
    """Ordinals of masked high-res voxels within distance ``r`` (mm) of ``center``.

    A bounding-box index scan precedes the exact Euclidean filter.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    return _neighborhood(high, _ordinal_map(high), center, r)


def _ordinal_map(high: MaskedVolume) -> np.ndarray:
    """Masked voxel ordinals (column-major), -1 at unmasked voxels."""
    flat = -np.ones(high.grid.n_voxels, dtype=np.int64)
    flat[high.mask.ravel(order="F")] = np.arange(high.n_masked)
    return flat.reshape(high.grid.dims, order="F")


def _neighborhood(high, ordinal, center, r):
    grid = high.grid
    center = np.asarray(center, dtype=float)
    vox = np.asarray(grid.voxel_size)
    origin = np.asarray(grid.origin)
    lo = np.maximum(np.ceil((center - r - origin) / vox), 0).astype(int)
    hi = np.minimum(np.floor((center + r - origin) / vox), np.asarray(grid.dims) - 1).astype(int)
    if np.any(lo > hi):
        return np.array([], dtype=np.int64)
    ii, jj, kk = np.meshgrid(
        np.arange(lo[0], hi[0] + 1),
        np.arange(lo[1], hi[1] + 1),
        np.arange(lo[2], hi[2] + 1),
        indexing="ij",
    )
    ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
    keep = high.mask[ii, jj, kk]
    ii, jj, kk = ii[keep], jj[keep], kk[keep]
    coords = origin + np.stack([ii, jj, kk], axis=1) * vox
    dist = np.linalg.norm(coords - center, axis=1)
    ords = ordinal[ii, jj, kk][dist <= r]
    return np.sort(ords)


def local_weights(params: KernelParams, nbr_coords: np.ndarray, center) -> np.ndarray:
    """Solve K_N w = k_N for one target location.

    Uses a Cholesky factorization; on failure, retries once with jitter
    1e-8 * tau_sq on the diagonal.
    """
    nbr_coords = np.atleast_2d(nbr_coords)
    if nbr_coords.shape[0] == 0:
        raise ValueError("neighborhood is empty")
    center = np.asarray(center, dtype=float)
    diff = nbr_coords[:, None, :] - nbr_coords[None, :, :]
    K = k(params, np.linalg.norm(diff, axis=2))
    kv = k(params, np.linalg.norm(nbr_coords - center, axis=1))
    try:
        w = cho_solve(cho_factor(K), kv)
    except np.linalg.LinAlgError:
        K = K + 1e-8 * params.tau_sq * np.eye(K.shape[0])
        try:
            w = cho_solve(cho_factor(K), kv)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(
                f"singular kriging system at location {center} even after jitter"
            ) from exc
    resid = np.max(np.abs(K @ w - kv))
    if resid > 1e-8 * params.tau_sq:
        raise RuntimeError(
            f"kriging solve residual {resid:.3e} too large at location {center}"
        )
    return w


def build_W(
    high: MaskedVolume,
    std: MaskedVolume,
    params: KernelParams,
    r: float,
) -> KrigingWeights:
    """One local kriging solve per masked standard-resolution voxel."""
    if not r > 0:
        raise ValueError("radius must be positive")
    high_coords = high.masked_world_coords()
    std_coords = std.masked_world_coords()
    n_std = std_coords.shape[0]
    indptr = np.zeros(n_std + 1, dtype=np.int64)
    indices: list[np.ndarray] = []
    values: list[np.ndarray] = []
    sizes = np.zeros(n_std, dtype=np.int64)
    ordinal = _ordinal_map(high)
    for i, center in enumerate(std_coords):
        nbrs = _neighborhood(high, ordinal, center, r)
        sizes[i] = nbrs.size
        if nbrs.size:
            w = local_weights(params, high_coords[nbrs], center)
            indices.append(nbrs)
            values.append(w)
        indptr[i + 1] = indptr[i] + nbrs.size
    W = sparse.csr_matrix(
        (
            np.concatenate(values) if values else np.array([]),
            np.concatenate(indices) if indices else np.array([], dtype=np.int64),
            indptr,
        ),
        shape=(n_std, high_coords.shape[0]),
    )
    return KrigingWeights(W=W, radius=float(r), neighborhood_sizes=sizes)


def apply_W(wts: KrigingWeights, x: np.ndarray) -> np.ndarray:
    """Sparse product W @ x (high-res vector to standard-res vector)."""
    x = np.asarray(x)
    if x.shape[0] != wts.W.shape[1]:
        raise ValueError(f"expected length {wts.W.shape[1]}, got {x.shape[0]}")
    return wts.W @ x


def apply_Wt(wts: KrigingWeights, y: np.ndarray) -> np.ndarray:
    """Sparse product W.T @ y (standard-res vector to high-res vector)."""
    y = np.asarray(y)
    if y.shape[0] != wts.W.shape[0]:
        raise ValueError(f"expected length {wts.W.shape[0]}, got {y.shape[0]}")
    return wts.W.T @ y


def dump_triplets(wts: KrigingWeights, path) -> None:
    """Text triplet dump: '# rows cols nnz' header then 'row col value' lines."""
    coo = wts.W.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r_, c_, v_ in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r_} {c_} {v_:.17g}\n")
