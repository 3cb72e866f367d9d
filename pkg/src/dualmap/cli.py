"""Command-line front end.

Subcommands: estimate-kernel (covariogram fit of the spatial kernel), fit
(posterior sampling of the high-resolution mean field), threshold
(activation decisions from a draws dump), and simulate (2D method-comparison
sweeps). A flat key=value config file can preset any option; explicit flags
win. Exit codes: 0 success, 1 model or numerical error, 2 usage or I/O error.
"""
from __future__ import annotations

import os
import sys
from pathlib import Path

import click
import numpy as np

from . import circulant as circ
from . import posterior as post
from . import simulation as sim
from .covariogram import estimate_kernel, fitted_curve
from .decision import DecisionParams, decide, posterior_m, threshold_for_count
from .kernel import KernelParams, correlation_radius, fwhm
from .kriging import build_W, dump_triplets
from .volume import MaskedVolume, read_nifti, write_nifti


def _default_threads() -> int:
    return int(os.environ.get("DUALMAP_THREADS", "1"))


def read_kv_file(path) -> dict:
    """Flat key = value file (strings, numbers, booleans); '#' comments."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise click.UsageError(f"{path}: bad config line {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        val = val.strip("\"'")
        if val.lower() in ("true", "false"):
            out[key] = val.lower() == "true"
        else:
            try:
                out[key] = int(val)
            except ValueError:
                try:
                    out[key] = float(val)
                except ValueError:
                    out[key] = val
        continue
    return out


def write_kv_file(path, entries: dict) -> None:
    with open(path, "w") as fh:
        for key, val in entries.items():
            fh.write(f"{key} = {val}\n")


def _theta_from_file(path) -> KernelParams:
    kv = read_kv_file(path)
    try:
        return KernelParams(float(kv["tau_sq"]), float(kv["psi"]), float(kv["nu"]))
    except KeyError as exc:
        raise click.UsageError(f"{path}: missing kernel entry {exc}")


def _apply_config(ctx: click.Context, config_path) -> None:
    """Config-file values become defaults; explicit flags still win."""
    if config_path is None:
        return
    kv = read_kv_file(config_path)
    for name in ctx.params:
        key = name.replace("_", "-")
        if name in ("config",) or (name not in kv and key not in kv):
            continue
        src = ctx.get_parameter_source(name)
        if src is not None and src.name != "COMMANDLINE":
            ctx.params[name] = kv.get(name, kv.get(key))


def _read_volume(path, mask):
    try:
        return read_nifti(path, mask)
    except FileNotFoundError as exc:
        raise click.UsageError(f"input volume not found: {exc}")


class ModelError(click.ClickException):
    exit_code = 1


@click.group()
def main():
    """Bayesian dual-resolution Gaussian-process mapping."""


@main.command("estimate-kernel")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--mask", type=click.Path(exists=True), default=None)
@click.option("--fix-nu", type=float, default=None,
              help="Fix the kernel shape exponent instead of fitting it.")
@click.option("--n0", type=int, default=18, show_default=True)
@click.option("--n1", type=int, default=25, show_default=True)
@click.option("--constraint", "constraints", multiple=True,
              help="Toggle fit constraints, e.g. 'psi-le-nu=off'.")
@click.option("--fit-nugget", is_flag=True, default=False)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--covariogram-csv", type=click.Path(), default=None)
@click.option("--curve-csv", type=click.Path(), default=None)
@click.pass_context
def cmd_estimate_kernel(ctx, config, in_path, mask, fix_nu, n0, n1, constraints,
                        fit_nugget, out_path, covariogram_csv, curve_csv):
    """Estimate the spatial kernel from one volume's empirical covariogram."""
    _apply_config(ctx, config)
    p = ctx.params
    vol = _read_volume(p["in_path"], p["mask"])
    psi_le_nu = True
    for item in p["constraints"]:
        key, _, val = item.partition("=")
        if key.strip() == "psi-le-nu":
            psi_le_nu = val.strip().lower() not in ("off", "false", "0")
        else:
            raise click.UsageError(f"unknown constraint {key!r}")
    try:
        fit, summary = estimate_kernel(
            vol, n0=p["n0"], n1=p["n1"], fix_nu=p["fix_nu"],
            psi_le_nu=psi_le_nu, fit_nugget=p["fit_nugget"])
    except Exception as exc:
        raise ModelError(f"kernel estimation failed: {exc}")
    theta = fit.params
    entries = {"tau_sq": repr(theta.tau_sq), "psi": repr(theta.psi),
               "nu": repr(theta.nu), "fwhm_mm": f"{fwhm(theta):.6g}",
               "objective": f"{fit.objective:.6g}",
               "converged": str(fit.converged).lower()}
    if fit.nugget is not None:
        entries["nugget"] = repr(fit.nugget)
    write_kv_file(p["out_path"], entries)
    if p["covariogram_csv"]:
        summary.to_csv(p["covariogram_csv"])
    if p["curve_csv"]:
        np.savetxt(p["curve_csv"], fitted_curve(theta), delimiter=",",
                   header="distance_mm,cov", comments="")
    click.echo(f"theta = ({theta.tau_sq:.6g}, {theta.psi:.6g}, {theta.nu:.6g})"
               f"  fwhm {fwhm(theta):.4g} mm  objective {fit.objective:.3g}")


@main.command("fit")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--mode", type=click.Choice(("dual", "high", "std", "naive")),
              default="dual", show_default=True)
@click.option("--high", "high_path", type=click.Path(), default=None)
@click.option("--std", "std_path", type=click.Path(), default=None)
@click.option("--high-mask", type=click.Path(exists=True), default=None)
@click.option("--std-mask", type=click.Path(exists=True), default=None)
@click.option("--theta", "theta_path", type=click.Path(), default=None)
@click.option("--estimate-theta-from", type=click.Path(), default=None,
              help="Estimate the kernel from this volume instead of --theta.")
@click.option("--r", "radius", type=float, default=None,
              help="Kriging radius (mm); defaults to the kernel FWHM.")
@click.option("--chains", type=int, default=3, show_default=True)
@click.option("--iters", type=int, default=3000, show_default=True,
              help="Post-warmup iterations per chain.")
@click.option("--warmup", type=int, default=1000, show_default=True)
@click.option("--thin", type=int, default=3, show_default=True)
@click.option("--leapfrog", "-L", "leapfrog", type=int, default=25, show_default=True)
@click.option("--target-accept", type=float, default=0.65, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=None)
@click.option("--expand-once", is_flag=True, default=False,
              help="Double the embedding torus if not positive definite.")
@click.option("--out-dir", required=True, type=click.Path())
@click.pass_context
def cmd_fit(ctx, config, **_):
    """Sample the posterior of the high-resolution mean field."""
    _apply_config(ctx, config)
    p = ctx.params
    if (p["theta_path"] is None) == (p["estimate_theta_from"] is None):
        raise click.UsageError(
            "provide exactly one of --theta or --estimate-theta-from")
    mode = p["mode"]
    if mode in ("dual", "high", "naive") and p["high_path"] is None:
        raise click.UsageError(f"--high is required for mode {mode}")
    if mode in ("dual", "std", "naive") and p["std_path"] is None:
        raise click.UsageError(f"--std is required for mode {mode}")
    out_dir = Path(p["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    high = _read_volume(p["high_path"], p["high_mask"]) if p["high_path"] else None
    std = _read_volume(p["std_path"], p["std_mask"]) if p["std_path"] else None
    if p["theta_path"]:
        theta = _theta_from_file(p["theta_path"])
    else:
        try:
            theta = estimate_kernel(_read_volume(p["estimate_theta_from"], None))[0].params
        except Exception as exc:
            raise ModelError(f"kernel estimation failed: {exc}")
    radius = p["radius"] if p["radius"] is not None else fwhm(theta)
    threads = p["threads"] if p["threads"] is not None else _default_threads()
    cfg = post.HmcConfig(
        L=p["leapfrog"], target_accept=p["target_accept"], warmup=p["warmup"],
        iterations=p["iters"], thin=p["thin"], chains=p["chains"], seed=p["seed"])
    try:
        primary = std if mode == "std" else high
        emb = circ.circulant_base(primary.grid, theta, primary.mask,
                                  expand_once=p["expand_once"])
        wts = None
        if mode in ("dual", "naive"):
            wts = build_W(high, std, theta, radius)
        if mode == "dual":
            data = post.FitData(emb, high.masked_values(), None,
                                std.masked_values(), wts)
        elif mode == "high":
            data = post.FitData(emb, high.masked_values())
        elif mode == "naive":
            from .kriging import apply_Wt
            y = 0.5 * (high.masked_values() + apply_Wt(wts, std.masked_values()))
            data = post.FitData(emb, y)
        else:
            data = post.FitData(emb, std.masked_values())
        draws = post.run_chains(data, cfg, n_jobs=threads)
    except circ.EmbeddingError as exc:
        raise ModelError(str(exc))
    except Exception as exc:
        raise ModelError(f"sampling failed: {exc}")
    mu = post.pooled_mu(draws)
    out_vol = primary
    if mode == "std":
        # Krige the standard-grid draws up to the high-resolution voxels.
        if high is None:
            raise click.UsageError("--high is required to report std-mode "
                                   "results on the high-resolution grid")
        wts_up = build_W(std, high, theta, radius)
        mu = mu @ wts_up.W.T
        out_vol = high
    mean, sd = mu.mean(axis=0), mu.std(axis=0, ddof=1)
    write_nifti(out_vol.with_values(mean), out_dir / "posterior_mean.nii")
    write_nifti(out_vol.with_values(sd), out_dir / "posterior_sd.nii")
    write_nifti(out_vol.with_values(np.ones(out_vol.n_masked)), out_dir / "mask.nii")
    post.dump_draws(mu, out_dir / "draws.bin")
    for i, d in enumerate(draws):
        d.telemetry_csv(out_dir / f"telemetry_chain{i}.csv")
    report = [f"mode = {mode}", f"kept_draws = {mu.shape[0]}",
              f"accept = {np.mean([d.accept.mean() for d in draws]):.4f}"]
    if mode == "dual":
        frac = np.mean([d.restriction_ok.mean() for d in draws])
        report.append(f"restriction_ok = {frac:.4f}")
    if len(draws) >= 2:
        gr = post.gelman_rubin(draws)
        good = np.isfinite(gr)
        report.append(f"gr_max = {np.nanmax(gr):.4f}")
        report.append(f"gr_frac_le_1.03 = {np.mean(gr[good] <= 1.03):.4f}")
        bad = np.nonzero(good & (gr > 1.03))[0]
        report.append(f"gr_voxels_gt_1.03 = {' '.join(map(str, bad[:200]))}")
    es = post.ess(draws)
    report.append(f"ess_median = {np.nanmedian(es):.1f}")
    (out_dir / "diagnostics.txt").write_text("\n".join(report) + "\n")
    if wts is not None:
        dump_triplets(wts, out_dir / "kriging_weights.txt")
    click.echo("\n".join(report))


@main.command("threshold")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--draws", "draws_path", required=True, type=click.Path())
@click.option("--mask", "mask_path", required=True, type=click.Path(),
              help="Mask NIfTI from the fit step (defines grid and voxel set).")
@click.option("--k1", type=float, default=None)
@click.option("--k2", type=float, default=None)
@click.option("--t", "t_", type=float, default=None)
@click.option("--n-discoveries", type=int, default=None)
@click.option("--plug-in", is_flag=True, default=False,
              help="Rescale the posterior-mean magnitudes once instead of "
                   "averaging per-draw rescalings.")
@click.option("--out-dir", required=True, type=click.Path())
@click.pass_context
def cmd_threshold(ctx, config, **_):
    """Turn a draws dump into activation decisions."""
    _apply_config(ctx, config)
    p = ctx.params
    loss_given = any(p[k] is not None for k in ("k1", "k2", "t_"))
    if loss_given and p["n_discoveries"] is not None:
        raise click.UsageError("--k1/--k2/--t and --n-discoveries are exclusive")
    if not Path(p["draws_path"]).exists():
        raise click.UsageError(f"draws file not found: {p['draws_path']}")
    mu = post.load_draws(p["draws_path"])
    ref = _read_volume(p["mask_path"], None)
    if ref.n_masked != mu.shape[1]:
        raise click.UsageError(
            f"mask has {ref.n_masked} voxels but draws have {mu.shape[1]}")
    out_dir = Path(p["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        m, f_bar = posterior_m(mu, plug_in=p["plug_in"])
        if p["n_discoveries"] is not None:
            thr, count = threshold_for_count(f_bar, p["n_discoveries"])
            delta = f_bar >= thr
            click.echo(f"threshold = {thr:.6g} achieved_count = {count}")
        else:
            params = DecisionParams(
                k1=p["k1"] if p["k1"] is not None else 12.0,
                k2=p["k2"] if p["k2"] is not None else 1.0,
                t=p["t_"] if p["t_"] is not None else 1.0)
            s = decide(m, f_bar, params)
            thr, delta = s.threshold, s.delta
            click.echo(f"threshold = {thr:.6g} discoveries = {int(delta.sum())}")
    except Exception as exc:
        raise ModelError(f"thresholding failed: {exc}")
    write_nifti(ref.with_values(f_bar), out_dir / "f_bar.nii")
    write_nifti(ref.with_values(m), out_dir / "m.nii")
    write_nifti(ref.with_values(delta.astype(float)), out_dir / "delta.nii")
    rows = np.column_stack([np.arange(m.size), f_bar, m, delta.astype(int)])
    np.savetxt(out_dir / "decisions.csv", rows, delimiter=",",
               header="voxel,f_bar,m,delta", comments="",
               fmt=("%d", "%.17g", "%.17g", "%d"))


@main.command("simulate")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--kernel", type=click.Choice(("exponential", "gaussian")),
              default="exponential", show_default=True)
@click.option("--snr-h", type=float, default=0.1, show_default=True)
@click.option("--ratio", "ratios", type=float, multiple=True, default=(1.0, 2.0),
              show_default=True)
@click.option("--replicates", type=int, default=100, show_default=True)
@click.option("--chains", type=int, default=1, show_default=True)
@click.option("--iters", type=int, default=600, show_default=True)
@click.option("--warmup", type=int, default=150, show_default=True)
@click.option("--thin", type=int, default=3, show_default=True)
@click.option("--leapfrog", "-L", "leapfrog", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=None)
@click.option("--roc", is_flag=True, default=False,
              help="Also write per-method ROC curves from replicate 0.")
@click.option("--out-dir", required=True, type=click.Path())
@click.pass_context
def cmd_simulate(ctx, config, **_):
    """Run the 2D dual-resolution method-comparison sweep."""
    _apply_config(ctx, config)
    p = ctx.params
    threads = p["threads"] if p["threads"] is not None else _default_threads()
    nu = 1.0 if p["kernel"] == "exponential" else 2.0
    designs = [sim.SimDesign(nu=nu, snr_h=p["snr_h"], snr_ratio=r,
                             replicate_seed=p["seed"]) for r in p["ratios"]]
    cfg = post.HmcConfig(L=p["leapfrog"], warmup=p["warmup"],
                         iterations=p["iters"], thin=p["thin"],
                         chains=p["chains"], seed=p["seed"])
    out_dir = Path(p["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        results, failures = sim.run_sweep(designs, cfg, p["replicates"],
                                          n_jobs=threads)
        rows = sim.aggregate(results)
        sim.write_table_csv(rows, out_dir / "table.csv")
        if p["roc"]:
            design = designs[0]
            ctx_ = sim.build_context(design)
            rng = np.random.default_rng(np.random.SeedSequence(
                [design.replicate_seed, 0]))
            truth, active = sim.make_truth(design, rng)
            y_h, y_s, _, _ = sim.make_data(truth, design, ctx_.wts, rng)
            fits = sim.run_methods(y_h, y_s, ctx_, cfg)
            for method, draws in fits.items():
                pts = sim.roc_points(draws, truth, active)
                sim.write_roc_csv(pts, out_dir / f"roc_{method}.csv")
    except Exception as exc:
        raise ModelError(f"simulation failed: {exc}")
    if failures:
        click.echo(f"{len(failures)} replicates failed and were excluded",
                   err=True)
    for row in rows:
        click.echo(f"{row['model']:6s} kernel={row['kernel']} "
                   f"ratio={row['snr_ratio']} mse={row['mse']:.4f} "
                   f"false_neg={row['false_neg_mean']:.4f}")


if __name__ == "__main__":
    sys.exit(main())
