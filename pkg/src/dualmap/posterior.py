"""Joint posterior over the embedded complex mean field and noise variances,
sampled with circulant-preconditioned Hamiltonian Monte Carlo.

The mean field lives on the extended torus as a complex field u; the data
likelihood touches only Re(u) at brain voxels (directly for the
high-resolution image, through the sparse kriging matrix W for the
standard-resolution image). Noise variances get inverse-gamma full
conditional (Gibbs) updates; u gets an HMC update whose mass matrix is the
circulant surrogate of the negative Hessian, diagonal in Fourier space
with eigenvalues 1/sigma_h_sq + 1/lambda_i. Step size is tuned by dual
averaging during warmup and jittered uniformly afterwards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import circulant as circ
from .circulant import CirculantEmbedding
from .kriging import KrigingWeights, apply_W, apply_Wt


@dataclass(frozen=True)
class FitData:
    """Observed data wired to one embedding.

    ``y_h`` holds observations at the embedding's brain voxels (column-major
    masked order); ``obs_h`` marks which brain voxels are observed (None =
    all), letting unobserved (signal-dropout) voxels stay in the inference
    field with no likelihood contribution. ``y_s``/``wts`` are the optional
    second data source.
    """

    emb: CirculantEmbedding
    y_h: np.ndarray = field(repr=False)
    obs_h: np.ndarray | None = field(default=None, repr=False)
    y_s: np.ndarray | None = field(default=None, repr=False)
    wts: KrigingWeights | None = None

    @property
    def n_h(self) -> int:
        return int(self.obs_h.sum()) if self.obs_h is not None else self.y_h.size

    @property
    def has_std(self) -> bool:
        return self.y_s is not None


@dataclass
class ModelState:
    u: np.ndarray               # complex field, extended dims
    sigma_h_sq: float
    sigma_s_sq: float = 1.0


@dataclass(frozen=True)
class HmcConfig:
    L: int = 25
    target_accept: float = 0.65
    warmup: int = 1000
    iterations: int = 3000
    thin: int = 3
    chains: int = 3
    seed: int = 0
    eps_init: float = 0.5
    jitter: tuple[float, float] = (0.9, 1.1)
    keep_fields: bool = False   # opt-in full-field snapshots
    fix_sigmas: bool = False    # skip Gibbs updates (Gaussian-oracle tests)

    def __post_init__(self):
        if self.warmup < 1 or self.iterations < 1 or self.thin < 1:
            raise ValueError("warmup, iterations, and thin must all be >= 1")


@dataclass
class PosteriorDraws:
    """Kept draws and telemetry for one chain."""

    mu: np.ndarray              # (kept, n_brain) Re(mu_h)
    sigma_h_sq: np.ndarray
    sigma_s_sq: np.ndarray
    restriction_ok: np.ndarray  # sigma_h_sq > sigma_s_sq per kept draw
    accept: np.ndarray          # per kept draw MH acceptance indicator
    telemetry: np.ndarray       # (all iters, 7): it, eps, accept, energy, s_h, s_s, ok
    eps0: float = float("nan")

    def telemetry_csv(self, path) -> None:
        header = "iteration,eps,accept,energy,sigma_h_sq,sigma_s_sq,restriction_ok"
        np.savetxt(path, self.telemetry, delimiter=",", header=header, comments="")


def _residuals(data: FitData, mu: np.ndarray):
    res_h = data.y_h - mu
    if data.obs_h is not None:
        res_h = res_h[data.obs_h]
    res_s = data.y_s - apply_W(data.wts, mu) if data.has_std else None
    return res_h, res_s


def log_posterior(state: ModelState, data: FitData) -> float:
    """Log posterior kernel of (u, sigmas); constant terms dropped."""
    mu = circ.restrict(data.emb, state.u)
    res_h, res_s = _residuals(data, mu)
    lp = -0.5 * data.n_h * math.log(state.sigma_h_sq)
    lp -= 0.5 * float(res_h @ res_h) / state.sigma_h_sq
    lp -= math.log(state.sigma_h_sq)
    if data.has_std:
        n_s = data.y_s.size
        lp -= 0.5 * n_s * math.log(state.sigma_s_sq)
        lp -= 0.5 * float(res_s @ res_s) / state.sigma_s_sq
        lp -= math.log(state.sigma_s_sq)
    lp -= 0.5 * circ.quad_form(data.emb, state.u)
    if not math.isfinite(lp):
        raise FloatingPointError("non-finite log posterior")
    return lp


def grad_u(state: ModelState, data: FitData) -> np.ndarray:
    """Gradient of the log posterior with respect to (Re u, Im u).

    Returned as a complex field: real part carries the Re-gradient, imaginary
    part the Im-gradient (prior-only, since the likelihood ignores Im).
    """
    mu = circ.restrict(data.emb, state.u)
    g_brain = np.zeros_like(mu)
    res_h = data.y_h - mu
    if data.obs_h is not None:
        g_brain[data.obs_h] = res_h[data.obs_h] / state.sigma_h_sq
    else:
        g_brain = res_h / state.sigma_h_sq
    if data.has_std:
        res_s = data.y_s - apply_W(data.wts, mu)
        g_brain = g_brain + apply_Wt(data.wts, res_s) / state.sigma_s_sq
    g = -circ.cinv_mul(data.emb, state.u)
    circ.scatter_add(data.emb, g, g_brain)
    return g


def update_sigmas(state: ModelState, data: FitData, rng: np.random.Generator):
    """Gibbs draws of the noise variances from inverse-gamma conditionals.

    The sigma_h_sq > sigma_s_sq restriction is not enforced here; violating
    draws are flagged downstream and discarded post hoc.
    """
    mu = circ.restrict(data.emb, state.u)
    res_h, res_s = _residuals(data, mu)
    ssr_h = float(res_h @ res_h)
    if ssr_h <= 0:
        raise ZeroDivisionError("zero high-resolution residual sum of squares")
    sigma_h_sq = 0.5 * ssr_h / rng.gamma(0.5 * data.n_h)
    sigma_s_sq = state.sigma_s_sq
    if data.has_std:
        ssr_s = float(res_s @ res_s)
        if ssr_s <= 0:
            raise ZeroDivisionError("zero standard-resolution residual sum of squares")
        sigma_s_sq = 0.5 * ssr_s / rng.gamma(0.5 * data.y_s.size)
    return sigma_h_sq, sigma_s_sq


def _mass_eigs(emb: CirculantEmbedding, sigma_h_sq: float) -> np.ndarray:
    return 1.0 / sigma_h_sq + 1.0 / emb.eigvals


def _fourier_quad(eigs: np.ndarray, x: np.ndarray, n: int) -> float:
    xf = np.fft.fftn(x)
    terms = (xf.real**2 + xf.imag**2) / eigs
    return math.fsum(terms.sum(axis=0).ravel()) / n


def leapfrog(state: ModelState, data: FitData, p: np.ndarray,
             lam_m: np.ndarray, eps: float, L: int):
    """L leapfrog steps of (u, p); returns (u, p, ok). Time-reversible:
    rerunning from (u, -p) recovers the start."""
    u = state.u.copy()
    trial = replace(state, u=u)
    try:
        g = grad_u(trial, data)
    except FloatingPointError:
        return u, p, False
    for _ in range(L):
        p = p + 0.5 * eps * g
        u = u + eps * np.fft.ifftn(np.fft.fftn(p) / lam_m)
        trial = replace(trial, u=u)
        try:
            g = grad_u(trial, data)
        except FloatingPointError:
            return u, p, False
        p = p + 0.5 * eps * g
    return u, p, True


def hmc_update(
    state: ModelState,
    data: FitData,
    eps: float,
    L: int,
    rng: np.random.Generator,
):
    """One preconditioned HMC update of u; returns (state, accepted, energies)."""
    emb = data.emb
    n = emb.n_extended
    lam_m = _mass_eigs(emb, state.sigma_h_sq)
    if lam_m.min() <= 0:
        raise FloatingPointError("mass matrix not positive definite")
    shape = emb.extended_dims
    w = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    p = np.fft.ifftn(np.sqrt(n * lam_m) * w)

    def kinetic(p_):
        return 0.5 * _fourier_quad(lam_m, p_, n)

    h0 = -log_posterior(state, data) + kinetic(p)
    u, p, ok = leapfrog(state, data, p, lam_m, eps, L)
    trial = replace(state, u=u)
    if ok:
        try:
            h1 = -log_posterior(trial, data) + kinetic(p)
        except FloatingPointError:
            ok, h1 = False, float("inf")
    else:
        h1 = float("inf")
    log_alpha = h0 - h1 if math.isfinite(h1) else -float("inf")
    accept_prob = min(1.0, math.exp(min(log_alpha, 0.0)))
    if ok and math.log(rng.uniform()) < log_alpha:
        return replace(state, u=trial.u), True, accept_prob, (h0, h1)
    return state, False, accept_prob, (h0, h1)


class DualAveraging:
    """Nesterov-style dual averaging of log step size toward a target
    acceptance rate (the warmup adaptation used by NUTS-family samplers)."""

    def __init__(self, eps0: float, target: float = 0.65,
                 gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.log_eps = math.log(eps0)
        self.log_eps_bar = math.log(eps0)
        self.h_bar = 0.0
        self.t = 0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        frac = 1.0 / (self.t + self.t0)
        self.h_bar = (1 - frac) * self.h_bar + frac * (self.target - accept_prob)
        self.log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        self.log_eps = min(max(self.log_eps, math.log(1e-8)), math.log(1e3))
        w_ = self.t ** (-self.kappa)
        self.log_eps_bar = w_ * self.log_eps + (1 - w_) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def eps(self) -> float:
        return math.exp(self.log_eps)

    @property
    def eps_frozen(self) -> float:
        return math.exp(self.log_eps_bar)


def initial_state(data: FitData) -> ModelState:
    """Data-scaled start: u seeded with half the observed image, variances
    at half the empirical data variances."""
    seed_vals = np.where(data.obs_h, data.y_h, 0.0) if data.obs_h is not None else data.y_h
    u = circ.embed(data.emb, 0.5 * seed_vals)
    sigma_h_sq = max(0.5 * float(np.var(data.y_h if data.obs_h is None
                                        else data.y_h[data.obs_h])), 1e-8)
    sigma_s_sq = (max(0.5 * float(np.var(data.y_s)), 1e-8)
                  if data.has_std else sigma_h_sq / 2)
    return ModelState(u=u, sigma_h_sq=sigma_h_sq, sigma_s_sq=sigma_s_sq)


def warmup_step_size(history, eps0: float = 0.5, target: float = 0.65) -> float:
    """Dual-averaged step size from a sequence of acceptance probabilities."""
    if len(history) < 10:
        raise ValueError("need >= 10 warmup acceptance probabilities")
    adapt = DualAveraging(eps0, target)
    for a in history:
        adapt.update(a)
    return adapt.eps_frozen


def run_chain(
    data: FitData,
    config: HmcConfig,
    rng: np.random.Generator,
    init: ModelState | None = None,
) -> PosteriorDraws:
    state = init if init is not None else initial_state(data)
    n_brain = data.y_h.size
    total = config.warmup + config.iterations
    kept = config.iterations // config.thin
    mu_draws = np.empty((kept, n_brain))
    s_h = np.empty(kept)
    s_s = np.empty(kept)
    ok_flags = np.empty(kept, dtype=bool)
    acc_flags = np.empty(kept, dtype=bool)
    telem = np.empty((total, 7))
    adapt = DualAveraging(config.eps_init, config.target_accept)
    eps = config.eps_init
    eps0 = config.eps_init
    row = 0
    for it in range(1, total + 1):
        if not config.fix_sigmas:
            sigma_h_sq, sigma_s_sq = update_sigmas(state, data, rng)
            state = replace(state, sigma_h_sq=sigma_h_sq, sigma_s_sq=sigma_s_sq)
        if it <= config.warmup:
            state, accepted, accept_prob, (h0, h1) = hmc_update(
                state, data, eps, config.L, rng)
            eps = adapt.update(accept_prob)
            if it == config.warmup:
                eps0 = adapt.eps_frozen
        else:
            eps = eps0 * rng.uniform(*config.jitter)
            state, accepted, accept_prob, (h0, h1) = hmc_update(
                state, data, eps, config.L, rng)
        restriction = state.sigma_h_sq > state.sigma_s_sq
        telem[it - 1] = (it, eps, accepted, h1 - h0 if math.isfinite(h1) else np.nan,
                         state.sigma_h_sq, state.sigma_s_sq, restriction)
        post_it = it - config.warmup
        if post_it >= 1 and post_it % config.thin == 0:
            mu_draws[row] = circ.restrict(data.emb, state.u)
            s_h[row] = state.sigma_h_sq
            s_s[row] = state.sigma_s_sq
            ok_flags[row] = restriction
            acc_flags[row] = accepted
            row += 1
    return PosteriorDraws(
        mu=mu_draws[:row], sigma_h_sq=s_h[:row], sigma_s_sq=s_s[:row],
        restriction_ok=ok_flags[:row], accept=acc_flags[:row],
        telemetry=telem, eps0=eps0,
    )


def run_chains(
    data: FitData, config: HmcConfig, init: ModelState | None = None,
    n_jobs: int = 1,
) -> list[PosteriorDraws]:
    """Independent chains with split RNG streams from the config seed.

    ``n_jobs`` > 1 runs chains in parallel processes; results are identical
    to the sequential path since each chain owns its RNG stream.
    """
    streams = np.random.SeedSequence(config.seed).spawn(config.chains)
    if n_jobs == 1 or config.chains == 1:
        return [run_chain(data, config, np.random.default_rng(s), init)
                for s in streams]
    from joblib import Parallel, delayed
    return Parallel(n_jobs=n_jobs)(
        delayed(run_chain)(data, config, np.random.default_rng(s), init)
        for s in streams)


def dump_draws(mu: np.ndarray, path) -> None:
    """Binary draw matrix: little-endian int64 header (n_draws, n_voxels)
    then row-major little-endian float64 data."""
    mu = np.ascontiguousarray(mu, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(np.array(mu.shape, dtype="<i8").tobytes())
        fh.write(mu.tobytes())


def load_draws(path) -> np.ndarray:
    with open(path, "rb") as fh:
        n_draws, n_vox = np.frombuffer(fh.read(16), dtype="<i8")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n_draws * n_vox:
        raise ValueError(f"{path}: truncated draw dump")
    return data.reshape(n_draws, n_vox)


def pooled_mu(draws: list[PosteriorDraws]) -> np.ndarray:
    """Kept Re(mu_h) draws pooled across chains, (total_kept, n_brain)."""
    return np.concatenate([d.mu for d in draws], axis=0)


def gelman_rubin(draws: list[PosteriorDraws]) -> np.ndarray:
    """Per-voxel potential scale reduction factor across chains."""
    if len(draws) < 2:
        raise ValueError("Gelman-Rubin needs >= 2 chains")
    chains = np.stack([d.mu for d in draws])  # (m, n, v)
    m, n, _ = chains.shape
    means = chains.mean(axis=1)
    w = chains.var(axis=1, ddof=1).mean(axis=0)
    b = n * means.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        var_hat = (n - 1) / n * w + b / n
        return np.where(w > 0, np.sqrt(var_hat / w), np.nan)


def ess(draws: list[PosteriorDraws]) -> np.ndarray:
    """Per-voxel effective sample size via initial-positive-sequence
    autocorrelation truncation, summed over chains."""
    out = None
    for d in draws:
        e = _ess_single(d.mu)
        out = e if out is None else out + e
    return out


def _ess_single(x: np.ndarray) -> np.ndarray:
    n, v = x.shape
    xc = x - x.mean(axis=0)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=nfft, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=nfft, axis=0)[:n].real / n
    var0 = acov[0]
    result = np.full(v, np.nan)
    good = var0 > 0
    rho = acov[:, good] / var0[good]
    # Sum consecutive-lag pairs while they stay positive (Geyer initial
    # positive sequence).
    pair_sums = rho[1:-1:2] + rho[2::2]
    tau = np.ones(pair_sums.shape[1])
    alive = np.ones(pair_sums.shape[1], dtype=bool)
    for row_ in pair_sums:
        alive &= row_ > 0
        tau[alive] += 2.0 * row_[alive]
    result[good] = n / tau
    return result
