"""Empirical covariogram extraction and minimum-contrast kernel estimation.

A dense 3D raster-perturbation scan visits each pair of voxels at a fixed
grid offset exactly once, accumulating sufficient statistics for the
empirical covariance at each offset distance. Kernel parameters are then
fit by weighted least squares against the empirical covariogram with a
derivative-free constrained optimizer.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .kernel import KernelParams, k
from .volume import MaskedVolume

DEFAULT_N0 = 18
DEFAULT_N1 = 25


@dataclass(frozen=True)
class PerturbationSet:
    """Unique grid index offsets scanned by the covariogram raster."""

    P: np.ndarray = field(repr=False)  # (M, 3) int
    n0: int = DEFAULT_N0
    n1: int = DEFAULT_N1


@dataclass(frozen=True)
class CovariogramSummary:
    """Per-offset distances, empirical covariances, fit weights, pair counts."""

    distances: np.ndarray
    cov: np.ndarray
    weights: np.ndarray
    pair_counts: np.ndarray

    def __len__(self):
        return self.distances.size

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("distance_mm,cov,weight,pairs\n")
            for d, c, w, r in zip(self.distances, self.cov, self.weights, self.pair_counts):
                fh.write(f"{d:.10g},{c:.10g},{w:.10g},{r}\n")


def _principal_directions() -> np.ndarray:
    """The 14 principal scan directions with entries in {-1, 0, 1}.

    One all-zero row plus the 13 nonzero directions whose polar and
    azimuthal angles both lie in [0, 180) degrees; exactly one of each
    antipodal pair {p, -p} is kept, so each voxel pair is visited once.
    """
    rows = [(0, 0, 0)]
    for x, y, z in itertools.product((-1, 0, 1), repeat=3):
        if (x, y, z) == (0, 0, 0):
            continue
        if y > 0 or (y == 0 and x > 0) or (x == 0 and y == 0 and z > 0):
            rows.append((x, y, z))
    U = np.array(rows, dtype=np.int64)
    assert U.shape == (14, 3)
    return U


def scan_perturbations(n0: int = DEFAULT_N0, n1: int = DEFAULT_N1) -> PerturbationSet:
    """Build the deduplicated perturbation matrix for the covariogram scan.

    Offsets are the elementwise products of every magnitude triple in
    {1..n0}^3 with each principal direction, extended by the axis-aligned
    offsets k*e_i for k in (n0, n1].
    """
    if not (1 <= n0 < n1):
        raise ValueError(f"require 1 <= n0 < n1, got n0={n0} n1={n1}")
    U = _principal_directions()
    Q = np.array(list(itertools.product(range(1, n0 + 1), repeat=3)), dtype=np.int64)
    # Column-wise Khatri-Rao: every row of Q scaled elementwise by every row of U.
    P = (Q[:, None, :] * U[None, :, :]).reshape(-1, 3)
    ext = [kk * np.eye(3, dtype=np.int64) for kk in range(n0 + 1, n1 + 1)]
    P = np.vstack([P] + ext)
    P = np.unique(P, axis=0)
    return PerturbationSet(P=P, n0=n0, n1=n1)


def _prune_for_grid(perts: PerturbationSet, dims) -> PerturbationSet:
    """Drop offsets that can never produce an in-grid voxel pair."""
    dims = np.asarray(dims)
    keep = np.all(np.abs(perts.P) < dims[None, :], axis=1)
    return PerturbationSet(P=perts.P[keep], n0=perts.n0, n1=perts.n1)


def extract_covariogram(vol: MaskedVolume, perts: PerturbationSet) -> CovariogramSummary:
    """Accumulate empirical covariances over masked voxel pairs per offset.

    Offsets that step outside the grid or onto unmasked voxels are skipped.
    """
    if vol.n_masked < 2:
        raise ValueError("need at least 2 masked voxels")
    Y = vol.data
    mask = vol.mask
    dims = vol.grid.dims
    full_mask = bool(mask.all())
    Ym = Y if full_mask else np.where(mask, Y, 0.0)
    maskf = mask.astype(np.float64)

    P = perts.P
    M = P.shape[0]
    s_ab = np.zeros(M)
    s_a = np.zeros(M)
    s_b = np.zeros(M)
    r = np.zeros(M, dtype=np.int64)
    for m in range(M):
        px, py, pz = (int(p) for p in P[m])
        sl_a, sl_b = _offset_slices(dims, (px, py, pz))
        if sl_a is None:
            continue
        A = Ym[sl_a]
        B = Ym[sl_b]
        if full_mask:
            r[m] = A.size
            s_ab[m] = np.einsum("ijk,ijk->", A, B)
            s_a[m] = A.sum()
            s_b[m] = B.sum()
        else:
            pm = maskf[sl_a] * maskf[sl_b]
            r[m] = int(round(pm.sum()))
            s_ab[m] = np.einsum("ijk,ijk,ijk->", A, B, pm)
            s_a[m] = np.einsum("ijk,ijk->", A, pm)
            s_b[m] = np.einsum("ijk,ijk->", B, pm)

    vox = np.asarray(vol.grid.voxel_size)
    d = np.linalg.norm(P * vox[None, :], axis=1)
    c = np.full(M, np.nan)
    ok = r > 1
    c[ok] = (s_ab[ok] - s_a[ok] * s_b[ok] / r[ok]) / (r[ok] - 1)
    # Weight = 1 / multiplicity of the offset distance, zero where undefined.
    d_key = np.round(d, 9)
    _, inv, counts = np.unique(d_key, return_inverse=True, return_counts=True)
    w = np.where(ok, 1.0 / counts[inv], 0.0)
    return CovariogramSummary(distances=d, cov=c, weights=w, pair_counts=r)


def _offset_slices(dims, p):
    """Slices selecting voxel v and v + p over the valid overlap region."""
    sl_a, sl_b = [], []
    for d_i, p_i in zip(dims, p):
        if abs(p_i) >= d_i:
            return None, None
        if p_i >= 0:
            sl_a.append(slice(0, d_i - p_i))
            sl_b.append(slice(p_i, d_i))
        else:
            sl_a.append(slice(-p_i, d_i))
            sl_b.append(slice(0, d_i + p_i))
    return tuple(sl_a), tuple(sl_b)


@dataclass(frozen=True)
class MceFit:
    params: KernelParams
    objective: float
    converged: bool
    nugget: float | None = None


def _objective(summary: CovariogramSummary, include_sill: bool):
    """Weighted-LS residual data: (d, c, w) rows entering the fit."""
    use = summary.weights > 0
    if not include_sill:
        use = use & (summary.distances > 0)
    return summary.distances[use], summary.cov[use], summary.weights[use]


def fit_mce(
    summary: CovariogramSummary,
    init: KernelParams,
    sill_cap: float,
    nu_bounds: tuple[float, float] = (0.05, 2.0),
    psi_le_nu: bool = True,
    fit_nugget: bool = False,
    max_evals: int = 500,
    ftol: float = 1e-10,
    n_starts: int = 5,
    fix_nu: float | None = None,
) -> MceFit:
    """Minimize the weighted least-squares contrast over the feasible region.

    ``sill_cap`` bounds tau_sq from above (empirical sill). With
    ``fit_nugget`` the d=0 entry is included and modeled as tau_sq + nugget;
    otherwise the sill entry is excluded from the residuals. ``fix_nu``
    freezes the shape exponent and optimizes the remaining coordinates.
    """
    if not 0 < nu_bounds[0] <= nu_bounds[1] <= 2:
        raise ValueError(f"invalid nu bounds {nu_bounds}")
    if fix_nu is not None and not 0 < fix_nu <= 2:
        raise ValueError(f"fix_nu must lie in (0, 2], got {fix_nu}")
    if not sill_cap > 0:
        raise ValueError(
            f"empirical sill {sill_cap:.3g} leaves no feasible tau_sq; "
            "the input may be degenerate (constant image?)"
        )
    d, c, w = _objective(summary, include_sill=fit_nugget)
    if d.size < 4:
        raise ValueError(f"need >= 4 weighted covariogram entries, got {d.size}")
    nu_lo, nu_hi = nu_bounds
    nz = d > 0

    def obj(x):
        tau_sq, psi = x[0], x[1]
        nu = fix_nu if fix_nu is not None else x[2]
        if tau_sq <= 0 or psi <= 0 or nu <= 0:
            return 1e30
        fit = np.empty_like(d)
        fit[nz] = tau_sq * np.exp(-psi * d[nz] ** nu)
        fit[~nz] = tau_sq + (x[-1] if fit_nugget else 0.0)
        return float(np.sum(w * (c - fit) ** 2))

    eps = 1e-10
    cons = [
        {"type": "ineq", "fun": lambda x: x[0] - eps},
        {"type": "ineq", "fun": lambda x: sill_cap - x[0]},
        {"type": "ineq", "fun": lambda x: x[1] - eps},
    ]
    if fix_nu is None:
        cons.append({"type": "ineq", "fun": lambda x: x[2] - nu_lo})
        cons.append({"type": "ineq", "fun": lambda x: nu_hi - x[2]})
        if psi_le_nu:
            cons.append({"type": "ineq", "fun": lambda x: x[2] - x[1]})
    elif psi_le_nu:
        cons.append({"type": "ineq", "fun": lambda x: fix_nu - x[1]})
    if fit_nugget:
        cons.append({"type": "ineq", "fun": lambda x: x[-1]})

    starts = _starts(init, sill_cap, nu_bounds, psi_le_nu, n_starts, fit_nugget,
                     fix_nu)
    best_x, best_f, any_ok = None, np.inf, False
    for x0 in starts:
        res = minimize(
            obj, x0, method="COBYQA", constraints=cons,
            options={"maxiter": max_evals, "final_tr_radius": ftol},
        )
        if res.fun < best_f:
            best_x, best_f = res.x, float(res.fun)
            any_ok = any_ok or bool(res.success)
    tau_sq = float(np.clip(best_x[0], eps, sill_cap))
    psi = max(float(best_x[1]), eps)
    if fix_nu is not None:
        nu = float(fix_nu)
    else:
        nu = float(np.clip(best_x[2], nu_lo, min(nu_hi, 2.0)))
    params = KernelParams(tau_sq=tau_sq, psi=psi, nu=nu)
    nugget = float(max(best_x[-1], 0.0)) if fit_nugget else None
    init_eff = init if fix_nu is None else KernelParams(init.tau_sq, init.psi, fix_nu)
    init_f = obj(_pack(init_eff, fit_nugget, fix_nu))
    if best_f > init_f:
        # A start at init is always included, so this cannot regress.
        params, best_f = init_eff, init_f
    return MceFit(params=params, objective=best_f, converged=any_ok, nugget=nugget)


def _pack(p: KernelParams, fit_nugget: bool, fix_nu: float | None = None):
    x = [p.tau_sq, p.psi] if fix_nu is not None else [p.tau_sq, p.psi, p.nu]
    return np.array(x + [0.0]) if fit_nugget else np.array(x)


def _starts(init, sill_cap, nu_bounds, psi_le_nu, n_starts, fit_nugget,
            fix_nu=None):
    nu_lo, nu_hi = nu_bounds
    if fix_nu is not None:
        init = KernelParams(init.tau_sq, init.psi, fix_nu)
    starts = [_pack(init, fit_nugget, fix_nu)]
    nus = np.linspace(max(nu_lo, 0.5), nu_hi, 4)
    fracs = (0.9, 0.6, 0.9, 0.5)
    psis = (0.1, 0.3, 0.6, 1.0)
    for frac, psi, nu in zip(fracs, psis, nus):
        if len(starts) >= n_starts:
            break
        nu_ = fix_nu if fix_nu is not None else nu
        psi_ = min(psi, nu_) if psi_le_nu else psi
        x = [frac * sill_cap, psi_] if fix_nu is not None else [frac * sill_cap, psi_, nu_]
        if fit_nugget:
            x.append(0.1 * sill_cap)
        starts.append(np.array(x))
    return starts[:n_starts]


def estimate_kernel(
    vol: MaskedVolume,
    n0: int = DEFAULT_N0,
    n1: int = DEFAULT_N1,
    nu_bounds: tuple[float, float] = (0.05, 2.0),
    psi_le_nu: bool = True,
    fit_nugget: bool = False,
    init: KernelParams | None = None,
    fix_nu: float | None = None,
) -> tuple[MceFit, CovariogramSummary]:
    """Full pipeline: scan offsets, extract the covariogram, fit the kernel.

    Grid axes of length 1 (2D slices) automatically prune offsets with a
    component on that axis.
    """
    perts = _prune_for_grid(scan_perturbations(n0, n1), vol.grid.dims)
    summary = extract_covariogram(vol, perts)
    sill_cap = float(np.var(vol.masked_values(), ddof=1))
    if init is None:
        mean_vox = float(np.mean(vol.grid.voxel_size))
        nu0 = fix_nu if fix_nu is not None else float(np.clip(1.0, nu_bounds[0], nu_bounds[1]))
        psi0 = min(np.log(2) / (2 * mean_vox), nu0) if psi_le_nu else np.log(2) / (2 * mean_vox)
        init = KernelParams(tau_sq=0.8 * sill_cap, psi=psi0, nu=nu0)
    fit = fit_mce(
        summary, init, sill_cap=sill_cap, nu_bounds=nu_bounds,
        psi_le_nu=psi_le_nu, fit_nugget=fit_nugget, fix_nu=fix_nu,
    )
    return fit, summary


def fitted_curve(params: KernelParams, d_max: float = 30.0, n: int = 300) -> np.ndarray:
    """Fitted kernel sampled on a dense distance grid: columns (distance_mm, k_fit)."""
    d = np.linspace(0.0, d_max, n)
    return np.column_stack([d, k(params, d)])
