"""End-to-end acceptance gates.

Each test pins one externally checkable property of the pipeline against an
independent oracle (dense linear algebra, closed-form posteriors, exhaustive
search, Monte Carlo error bands) or a published-scale target. Runtime-budget
assertions assume an otherwise idle machine; budgets quoted for 8 cores are
rescaled by the available CPU count.
"""
import itertools
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from dualmap import circulant as circ
from dualmap import posterior as post
from dualmap import simulation as sim
from dualmap.covariogram import (_prune_for_grid, extract_covariogram, fit_mce,
                                 scan_perturbations)
from dualmap.decision import DecisionParams, decide, risk
from dualmap.kernel import KernelParams, k, params_from_fwhm
from dualmap.kriging import build_W
from dualmap.posterior import FitData, HmcConfig, ModelState
from dualmap.volume import Grid3, MaskedVolume, read_nifti, write_nifti

CPUS = os.cpu_count() or 1


def scaled_budget(seconds_on_8_cores: float) -> float:
    """Rescale a parallel runtime budget to the CPUs actually available."""
    return seconds_on_8_cores * max(1.0, 8.0 / CPUS)


def dual_problem(seed=7):
    """Small two-resolution problem with a dense-oracle-sized embedding."""
    rng = np.random.default_rng(seed)
    params = params_from_fwhm(4.0, 1.0, 1.0)
    gh = Grid3((6, 6, 1), (1.8, 1.8, 1.8))
    gs = Grid3((3, 3, 1), (3.6, 3.6, 3.6), (0.9, 0.9, 0.0))
    mh = np.ones(gh.dims, bool)
    mh[0, 0, 0] = False
    emb = circ.circulant_base(gh, params, mh)
    high = MaskedVolume(gh, mh, rng.normal(size=gh.dims))
    std = MaskedVolume(gs, np.ones(gs.dims, bool), rng.normal(size=gs.dims))
    wts = build_W(high, std, params, 5.0)
    return FitData(emb, high.masked_values(), None, std.masked_values(), wts)


def dense_posterior(data, sigma_h_sq, sigma_s_sq):
    """Closed-form Gaussian posterior of the real field on the extended grid."""
    emb = data.emb
    C = circ.dense_matrix(emb)
    n = emb.n_extended
    ii, jj, kk = emb.brain_idx
    flat = ii + emb.extended_dims[0] * (jj + emb.extended_dims[1] * kk)
    A = np.zeros((data.y_h.size, n))
    A[np.arange(data.y_h.size), flat] = 1.0
    if data.obs_h is not None:
        A = A[data.obs_h]
        y_h = data.y_h[data.obs_h]
    else:
        y_h = data.y_h
    prec = np.linalg.inv(C) + A.T @ A / sigma_h_sq
    rhs = A.T @ y_h / sigma_h_sq
    if data.has_std:
        B = data.wts.W.toarray() @ (np.eye(n)[flat])
        prec += B.T @ B / sigma_s_sq
        rhs += B.T @ data.y_s / sigma_s_sq
    cov = np.linalg.inv(prec)
    mean = cov @ rhs
    return mean[flat], np.sqrt(np.diag(cov)[flat])


# 1. FFT circulant algebra against dense linear algebra.

def test_circulant_matches_dense_oracle():
    t0 = time.perf_counter()
    grid = Grid3((8, 8, 4), (1.3, 1.3, 1.3))
    params = KernelParams(1.3, 1.1, 1.0)
    emb = circ.circulant_base(grid, params, np.ones(grid.dims, bool))
    C = circ.dense_matrix(emb)
    lam_dense = np.sort(np.linalg.eigvalsh(C))
    assert np.allclose(np.sort(emb.eigvals.ravel()), lam_dense, rtol=1e-8)
    rng = np.random.default_rng(0)
    u = (rng.normal(size=emb.extended_dims)
         + 1j * rng.normal(size=emb.extended_dims))
    uf = u.ravel(order="F")
    cu = circ.cmul(emb, u).ravel(order="F")
    assert np.allclose(cu, C @ uf, rtol=1e-8)
    solve = np.linalg.solve(C, uf)
    ci = circ.cinv_mul(emb, u).ravel(order="F")
    assert np.allclose(ci, solve, rtol=1e-8)
    expect = float(np.real(uf.conj() @ solve))
    assert circ.quad_form(emb, u) == pytest.approx(expect, rel=1e-8)
    assert time.perf_counter() - t0 < 5.0


# 2. Prior sampling reproduces the wrapped kernel covariance.

def test_prior_sampling_covariance():
    t0 = time.perf_counter()
    grid = Grid3((8, 8, 1), (2.0, 2.0, 2.0))
    params = KernelParams(1.0, 0.5, 1.0)
    emb = circ.circulant_base(grid, params, np.ones(grid.dims, bool))
    rng = np.random.default_rng(1)
    n = 20_000
    X = np.empty((n, emb.n_extended))
    for i in range(n):
        X[i] = circ.sample_prior(emb, rng).real.ravel(order="F")
    # Independent oracle: the kernel at torus-wrapped distances.
    ext = emb.extended_dims
    idx = np.arange(emb.n_extended)
    ax = [idx % ext[0], (idx // ext[0]) % ext[1], idx // (ext[0] * ext[1])]
    dist = np.zeros(emb.n_extended)
    for a, d_a in enumerate(ext):
        wrapped = np.minimum(ax[a], d_a - ax[a]) * grid.voxel_size[a]
        dist += wrapped**2
    expect = k(params, np.sqrt(dist))
    Xc = X - X.mean(axis=0)
    c_hat = Xc[:, 0] @ Xc / (n - 1)
    se = np.sqrt((params.tau_sq**2 + expect**2) / n)
    assert np.all(np.abs(c_hat - expect) <= 4 * se)
    assert time.perf_counter() - t0 < 30.0


# 3. Analytic gradient against central finite differences.

def test_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    data = dual_problem()
    rng = np.random.default_rng(2)
    u = (rng.normal(size=data.emb.extended_dims)
         + 1j * rng.normal(size=data.emb.extended_dims))
    state = ModelState(u, 0.5, 0.25)
    g = post.grad_u(state, data)
    h = 1e-6
    flat = [(i, j, kk) for i in range(u.shape[0])
            for j in range(u.shape[1]) for kk in range(u.shape[2])]
    picks = rng.choice(len(flat), size=50, replace=False)
    for pick in picks:
        ijk = flat[pick]
        part = 1.0 if rng.uniform() < 0.5 else 1.0j
        up, dn = u.copy(), u.copy()
        up[ijk] += h * part
        dn[ijk] -= h * part
        fd = (post.log_posterior(replace(state, u=up), data)
              - post.log_posterior(replace(state, u=dn), data)) / (2 * h)
        an = g[ijk].real if part == 1.0 else g[ijk].imag
        assert abs(fd - an) <= 1e-5 * max(1.0, abs(an)), (ijk, part, fd, an)
    assert time.perf_counter() - t0 < 10.0


# 4. HMC draws against the closed-form dense Gaussian posterior.

def test_hmc_matches_dense_gaussian_posterior():
    t0 = time.perf_counter()
    data = dual_problem()
    sigma_h_sq, sigma_s_sq = 0.5, 0.25
    mean_d, sd_d = dense_posterior(data, sigma_h_sq, sigma_s_sq)
    cfg = HmcConfig(L=5, warmup=500, iterations=25_000, thin=1, chains=8,
                    seed=42, fix_sigmas=True)
    init = ModelState(circ.embed(data.emb, 0.5 * data.y_h),
                      sigma_h_sq, sigma_s_sq)
    draws = post.run_chains(data, cfg, init=init,
                            n_jobs=min(8, CPUS))
    mu = post.pooled_mu(draws)
    assert mu.shape[0] == 200_000
    es = post.ess(draws)
    mean, sd = mu.mean(axis=0), mu.std(axis=0, ddof=1)
    # The sd estimate mixes far slower than the mean (the field chains are
    # antithetic, the squared chains are not), so its standard error must use
    # the effective sample size of the centered-squared chains.
    es2 = sum(post._ess_single((d.mu - mean) ** 2) for d in draws)
    se_mean = sd / np.sqrt(es)
    se_sd = sd / np.sqrt(2 * es2)
    z_mean = np.abs(mean - mean_d) / se_mean
    z_sd = np.abs(sd - sd_d) / se_sd
    # Bound the max over 35 voxel z-scores; 4 sigma keeps the false-alarm
    # rate of the max statistic well under 1%.
    assert z_mean.max() <= 4.0, z_mean.max()
    assert z_sd.max() <= 4.0, z_sd.max()
    assert time.perf_counter() - t0 < 300.0


# 5. Decision rule equals exhaustive risk minimization; exact threshold.

def test_decision_rule_is_optimal_and_threshold_exact():
    t0 = time.perf_counter()
    assert DecisionParams(12, 1, 1).threshold == 0.2
    rng = np.random.default_rng(3)
    D = np.array(list(itertools.product([0, 1], repeat=12)), dtype=float)
    for _ in range(200):
        f = rng.uniform(size=12)
        params = DecisionParams(rng.uniform(0, 15), rng.uniform(0, 3),
                                rng.uniform(0, 2))
        s = decide(f, f, params)
        r_star = risk(f, s.delta, params)
        # Exhaustive oracle: the additive loss evaluated on all 2^12
        # decision vectors at once.
        terms = (-f * D - (1 - f) * (1 - D) + params.k1 * f * (1 - D)
                 + params.k2 * (1 - f) * D + params.t * D)
        best = terms.sum(axis=1).min()
        assert r_star <= best + 1e-12
    assert time.perf_counter() - t0 < 5.0


# 6. Method-comparison simulation (smoke gate + published-scale sweep).

SIM_DESIGN = sim.SimDesign(nu=1.0, snr_h=0.1, snr_ratio=2.0, replicate_seed=0)
SWEEP_CFG = HmcConfig(L=10, warmup=150, iterations=600, thin=3, chains=1)


@pytest.fixture(scope="module")
def sim_ctx():
    return sim.build_context(SIM_DESIGN)


@pytest.fixture(scope="module")
def smoke_mse(sim_ctx):
    t0 = time.perf_counter()
    results = []
    for rep in range(10):
        results.append((SIM_DESIGN,
                        sim.run_replicate(SIM_DESIGN, sim_ctx, SWEEP_CFG, rep)))
    rows = {r["model"]: r for r in sim.aggregate(results)}
    assert time.perf_counter() - t0 < scaled_budget(600.0)
    return {m: rows[m]["mse"] for m in sim.METHODS}


def test_simulation_smoke_dual_dominates(smoke_mse):
    # The dual fit must beat every single-source method.
    for method in ("high", "std", "naive"):
        assert smoke_mse["dual"] < smoke_mse[method], smoke_mse


def test_simulation_smoke_published_method_ordering(smoke_mse):
    """Reference ordering for the rough-kernel cells.

    KNOWN RED: with the pinned naive construction (Y_h + W^T Y_s)/2 and this
    geometry, naive averaging consistently edges out the high-only fit
    (paired across replicates, both noise ratios), so the high < naive leg
    of the reference ordering is not reproduced. The dual-fit advantage,
    its error bands, and naive < std all hold; see the smoke and full-sweep
    tests around this one.
    """
    m = smoke_mse
    assert m["dual"] < m["high"] < m["naive"] < m["std"], m


@pytest.mark.slow
def test_full_sweep_reproduces_published_tables():
    t0 = time.perf_counter()
    designs = [sim.SimDesign(nu=nu, snr_h=0.1, snr_ratio=r, replicate_seed=0)
               for nu in (1.0, 2.0) for r in (1.0, 2.0)]
    results, failures = sim.run_sweep(designs, SWEEP_CFG, replicates=100,
                                      n_jobs=-1)
    assert not failures, failures[:3]
    rows = sim.aggregate(results)
    cells = {(r["kernel"], r["snr_ratio"], r["model"]): r for r in rows}
    # Dual-fit MSE at published values.
    assert cells[("exponential", 1.0, "dual")]["mse"] == pytest.approx(0.20, abs=0.05)
    assert cells[("exponential", 2.0, "dual")]["mse"] == pytest.approx(0.18, abs=0.05)
    # MSE ordering in every exponential cell.
    for ratio in (1.0, 2.0):
        m = {meth: cells[("exponential", ratio, meth)]["mse"]
             for meth in sim.METHODS}
        assert m["dual"] < m["high"] < m["naive"] < m["std"], (ratio, m)
    # Dual false-negative rates with 450 fixed discoveries.
    assert cells[("exponential", 1.0, "dual")]["false_neg_mean"] == \
        pytest.approx(0.318, abs=0.03)
    assert cells[("exponential", 2.0, "dual")]["false_neg_mean"] == \
        pytest.approx(0.306, abs=0.03)
    # Smoother-kernel cells swap the single-source ordering.
    for ratio in (1.0, 2.0):
        m = {meth: cells[("gaussian", ratio, meth)]["mse"]
             for meth in sim.METHODS}
        assert m["dual"] < m["naive"] < m["high"] < m["std"], (ratio, m)
    assert time.perf_counter() - t0 < scaled_budget(7200.0)


# 7. Covariogram-based kernel recovery: bias/variance of the fitted
#    correlation curve over replicated noisy volumes.

def test_kernel_recovery_bias_and_variance():
    t0 = time.perf_counter()
    params = params_from_fwhm(6.0, 1.0, 1.0)
    grid = Grid3((32, 32, 16), (1.0, 1.0, 1.0))
    mask = np.ones(grid.dims, bool)
    emb = circ.circulant_base(grid, params, mask, expand_once=True)
    perts = _prune_for_grid(scan_perturbations(), grid.dims)
    d_grid = np.linspace(0.0, 15.0, 1000)
    rho_true = np.exp(-params.psi * d_grid**params.nu)
    snr = 0.2
    noise_sd = np.sqrt(params.tau_sq / snr)

    def one(rep):
        rng = np.random.default_rng(np.random.SeedSequence([777, rep]))
        field = circ.sample_prior(emb, rng).real[:32, :32, :16]
        y = field + rng.normal(scale=noise_sd, size=field.shape)
        summary = extract_covariogram(MaskedVolume(grid, mask, y), perts)
        sill = float(np.var(y, ddof=1))
        init = KernelParams(0.8 * sill, min(np.log(2) / 2, 1.0), 1.0)
        # The reference experiment fits with the shape exponent fixed at the
        # generating value 1; freeing it roughly cancels the downward
        # finite-domain bias this test pins.
        fit = fit_mce(summary, init, sill_cap=sill, n_starts=2, fix_nu=1.0)
        return np.exp(-fit.params.psi * d_grid**fit.params.nu)

    from joblib import Parallel, delayed
    curves = np.array(Parallel(n_jobs=-1)(delayed(one)(r) for r in range(100)))
    bias = float((curves.mean(axis=0) - rho_true).mean())
    variance = float(curves.var(axis=0, ddof=1).mean())
    assert bias == pytest.approx(-6.04e-2, abs=0.03)
    assert variance == pytest.approx(7.22e-3, rel=0.5)
    assert time.perf_counter() - t0 < scaled_budget(600.0)


# 8. Sampler health on the simulation problem: acceptance rate, chain
#    agreement, and the noise-variance ordering.

def test_hmc_health_on_simulation(sim_ctx):
    rng = np.random.default_rng(np.random.SeedSequence([99, 0]))
    truth, _ = sim.make_truth(SIM_DESIGN, rng)
    y_h, y_s, _, _ = sim.make_data(truth, SIM_DESIGN, sim_ctx.wts, rng)
    data = FitData(sim_ctx.emb_h, y_h, None, y_s, sim_ctx.wts)
    cfg = HmcConfig(L=10, warmup=300, iterations=600, thin=3, chains=3, seed=5)
    draws = post.run_chains(data, cfg)
    post_rows = [d.telemetry[cfg.warmup:] for d in draws]
    accept = float(np.mean([t[:, 2].mean() for t in post_rows]))
    assert 0.55 <= accept <= 0.75, accept
    gr = post.gelman_rubin(draws)
    good = np.isfinite(gr)
    assert np.mean(gr[good] <= 1.05) >= 0.99, np.nanmax(gr)
    restriction = float(np.mean([t[:, 6].mean() for t in post_rows]))
    assert restriction >= 0.99, restriction


# 9. NIfTI round trip.

def test_nifti_round_trip(tmp_path):
    t0 = time.perf_counter()
    grid = Grid3((7, 5, 3), (1.25, 2.5, 3.0), (-10.0, 4.5, 0.25))
    rng = np.random.default_rng(6)
    mask = rng.uniform(size=grid.dims) > 0.3
    mask.flat[0] = True
    data = np.where(mask, rng.normal(size=grid.dims), 0.0)
    vol = MaskedVolume(grid, mask, data)
    path = tmp_path / "vol.nii"
    mask_path = tmp_path / "mask.nii"
    write_nifti(vol, path, dtype="float64")
    write_nifti(MaskedVolume(grid, mask, mask.astype(float)), mask_path,
                dtype="float64")
    back = read_nifti(path, mask_path)
    assert np.array_equal(back.data, vol.data)       # bitwise
    assert np.array_equal(back.mask, vol.mask)
    assert back.grid.dims == grid.dims
    assert np.allclose(back.grid.voxel_size, grid.voxel_size, rtol=1e-6)
    assert np.allclose(back.grid.origin, grid.origin, rtol=1e-6, atol=1e-6)
    assert time.perf_counter() - t0 < 1.0


# 10. Signal-dropout recovery: voxels with no direct observation are still
#     reconstructed from the second image and spatial correlation.

def test_dropout_region_recovery(sim_ctx):
    rng = np.random.default_rng(np.random.SeedSequence([98, 0]))
    truth, _ = sim.make_truth(SIM_DESIGN, rng)
    y_h, y_s, _, _ = sim.make_data(truth, SIM_DESIGN, sim_ctx.wts, rng)
    # A 10x10 voxel block near the grid center: fully inside the ellipse.
    mask_flat = truth.mask.ravel(order="F")
    ordinal = np.cumsum(mask_flat) - 1
    region = []
    for j in range(27, 37):
        for i in range(48, 58):
            flat = i + truth.grid.dims[0] * j
            assert mask_flat[flat]
            region.append(ordinal[flat])
    region = np.asarray(region)
    assert region.size == 100
    obs = np.ones(y_h.size, bool)
    obs[region] = False
    data = FitData(sim_ctx.emb_h, y_h, obs, y_s, sim_ctx.wts)
    cfg = HmcConfig(L=10, warmup=150, iterations=600, thin=3, chains=1, seed=11)
    draws = post.run_chains(data, cfg)
    mean = post.pooled_mu(draws).mean(axis=0)
    truth_vals = truth.masked_values()
    corr = np.corrcoef(mean[region], truth_vals[region])[0, 1]
    assert corr > 0.5, corr
