"""Activation decisions from posterior draws.

Each draw of the high-resolution mean field is reduced to standardized
magnitudes m_i = |mu_i| / sd_i, rescaled by the draw's maximum to f in
[0, 1], and averaged over draws to f_bar. The additive loss

    L(f, delta) = sum_i [ -f_i d_i - (1-f_i)(1-d_i)
                          + k1 f_i (1-d_i) + k2 (1-f_i) d_i + t d_i ]

is minimized exactly by thresholding: delta_i = 1{f_bar_i >= (1+k2+t)/(2+k1+k2)}.
A count-matched threshold supports fixed-discovery-budget comparisons.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .posterior import PosteriorDraws, pooled_mu


@dataclass(frozen=True)
class DecisionParams:
    k1: float = 12.0   # false-negative penalty
    k2: float = 1.0    # false-positive penalty
    t: float = 1.0     # per-discovery penalty

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0 or self.t < 0:
            raise ValueError("penalties k1, k2, t must be >= 0")
        thr = self.threshold
        if not 0.0 <= thr <= 1.0:
            warnings.warn(
                f"decision threshold {thr:.3g} falls outside [0, 1]; "
                "the rule will report all or no voxels", stacklevel=2)

    @property
    def threshold(self) -> float:
        return (1.0 + self.k2 + self.t) / (2.0 + self.k1 + self.k2)


@dataclass(frozen=True)
class ActivationSummary:
    m: np.ndarray = field(repr=False)        # |posterior mean| / sd
    f_bar: np.ndarray = field(repr=False)
    delta: np.ndarray = field(repr=False)
    threshold: float = 0.0

    def to_csv(self, path) -> None:
        rows = np.column_stack([np.arange(self.m.size), self.f_bar, self.m,
                                self.delta.astype(float)])
        np.savetxt(path, rows, delimiter=",", header="voxel,f_bar,m,delta",
                   comments="", fmt=("%d", "%.17g", "%.17g", "%d"))


def posterior_m(draws: list[PosteriorDraws] | np.ndarray, plug_in: bool = False):
    """Per-voxel (m, f_bar) from kept draws.

    ``m`` standardizes the pooled posterior mean by the pooled posterior sd.
    ``f_bar`` averages the per-draw max-rescaled magnitudes over draws
    (default), or applies the rescaling once to the posterior-mean
    magnitudes when ``plug_in`` is set. Zero-sd voxels get f_bar = 0 with a
    warning.
    """
    mu = draws if isinstance(draws, np.ndarray) else pooled_mu(draws)
    if mu.shape[0] < 2:
        raise ValueError("need >= 2 kept draws")
    sd = mu.std(axis=0, ddof=1)
    ok = sd > 0
    if not ok.all():
        warnings.warn(f"{np.count_nonzero(~ok)} voxels have zero posterior sd; "
                      "their f_bar is set to 0", stacklevel=2)
    m = np.zeros(mu.shape[1])
    m[ok] = np.abs(mu.mean(axis=0)[ok]) / sd[ok]
    if plug_in:
        f_bar = m / m.max() if m.max() > 0 else m.copy()
        return m, f_bar
    mg = np.zeros_like(mu)
    mg[:, ok] = np.abs(mu[:, ok]) / sd[ok]
    big = mg.max(axis=1)
    f = np.zeros_like(mg)
    pos = big > 0
    f[pos] = mg[pos] / big[pos, None]
    return m, f.mean(axis=0)


def decide(m: np.ndarray, f_bar: np.ndarray, params: DecisionParams) -> ActivationSummary:
    thr = params.threshold
    return ActivationSummary(m=m, f_bar=f_bar, delta=f_bar >= thr, threshold=thr)


def threshold_for_count(f_bar: np.ndarray, n_discoveries: int):
    """Smallest threshold yielding n discoveries (ties included).

    Returns (threshold, achieved_count); the achieved count can exceed n
    when tied f_bar values straddle the boundary.
    """
    f_bar = np.asarray(f_bar)
    n_vox = f_bar.size
    if not 0 <= n_discoveries <= n_vox:
        raise ValueError(f"n_discoveries must be in [0, {n_vox}]")
    if n_discoveries == 0:
        return float(np.nextafter(f_bar.max(), np.inf)), 0
    if n_discoveries == n_vox:
        return 0.0, n_vox
    order = np.sort(f_bar)[::-1]
    thr = float(order[n_discoveries - 1])
    return thr, int(np.count_nonzero(f_bar >= thr))


def risk(f: np.ndarray, delta: np.ndarray, params: DecisionParams) -> float:
    """Posterior risk of a decision vector under the additive loss."""
    f = np.asarray(f, dtype=float)
    d = np.asarray(delta, dtype=float)
    if f.shape != d.shape:
        raise ValueError("f and delta must align")
    terms = (-f * d - (1 - f) * (1 - d)
             + params.k1 * f * (1 - d) + params.k2 * (1 - f) * d + params.t * d)
    return float(terms.sum())
