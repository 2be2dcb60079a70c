"""Batch pipeline driver.

Subcommands: make-object, simulate, reconstruct, phase, evaluate, plot.
Every stage reads the shared TOML configuration and writes into the run
output directory, so the full experiment replays from one file.  Exit
codes: 0 success, 2 configuration error, 3 data/IO error, 4 numerical
failure.  Set HSPI_LOG to control logging verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import baseline as baseline_mod
from . import maxlp as maxlp_mod
from . import metrics as metrics_mod
from . import objects as objects_mod
from . import phasing as phasing_mod
from . import simulate as simulate_mod
from .config import ConfigError, RunConfig, dump_config, load_config
from .forward import ComplexModel
from .objects import DensityGrid, HeteroMode

log = logging.getLogger("hspi")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class DataError(Exception):
    """Missing, corrupt or colliding data files."""


class NumericalError(Exception):
    """A numerical procedure failed to produce a usable result."""


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _setup_logging():
    level = os.environ.get("HSPI_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _check_overwrite(paths, force: bool):
    existing = [p for p in paths if Path(p).exists()]
    if existing and not force:
        raise DataError(f"output exists (use --force to overwrite): {existing[0]}")


def _object_paths(out: Path) -> dict:
    return {
        "object": out / "object.bin",
        "subunit": out / "subunit.bin",
        "average": out / "average.bin",
    }


def _load_required_density(path: Path) -> DensityGrid:
    if not path.exists():
        raise DataError(f"missing input {path}; run the earlier pipeline stage first")
    return objects_mod.load_density(path)


def _hetero_params(cfg: RunConfig):
    o = cfg["object"]
    return {
        "offset_px": tuple(o["two_state_offset_px"]),
        "sigma_px": o["continuous_sigma_px"],
    }


def _arm_dir(cfg: RunConfig, arm: str) -> Path:
    return cfg.output_dir / arm


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_make_object(cfg: RunConfig, args) -> None:
    out = cfg.output_dir
    paths = _object_paths(out)
    _check_overwrite(paths.values(), args.force)
    mode = cfg["object"]["mode"]
    spec = cfg.target_spec()
    base = objects_mod.random_blob_object(spec)
    objects_mod.save_density(base, paths["object"], seed=cfg.seed, spec=spec.to_dict())
    if mode == "homogeneous":
        objects_mod.save_density(base, paths["average"], seed=cfg.seed, spec=spec.to_dict())
        log.info("wrote homogeneous object to %s", paths["object"])
        return
    o = cfg["object"]
    subunit = objects_mod.make_subunit(spec.side_px, o["subunit_radius_px"], o["subunit_density"])
    objects_mod.save_density(subunit, paths["subunit"], seed=cfg.seed)
    hmode = HeteroMode.TWO_STATE if mode == "two_state" else HeteroMode.CONTINUOUS
    avg = objects_mod.average_structure(base, subunit, hmode, **_hetero_params(cfg))
    objects_mod.save_density(avg, paths["average"], seed=cfg.seed)
    log.info("wrote %s object, sub-unit and ensemble average under %s", mode, out)


def cmd_simulate(cfg: RunConfig, args) -> None:
    out = cfg.output_dir
    ds_path = out / "dataset.hspi"
    latents_path = out / "latents.csv"
    _check_overwrite([ds_path, latents_path], args.force)

    geom = cfg.geometry()
    ref = cfg.reference()
    lc = cfg.latent_config()
    mode = cfg["object"]["mode"]
    paths = _object_paths(out)
    base = _load_required_density(paths["object"])

    if mode == "homogeneous":
        source = base
    else:
        subunit = _load_required_density(paths["subunit"])
        hmode = HeteroMode.TWO_STATE if mode == "two_state" else HeteroMode.CONTINUOUS
        params = _hetero_params(cfg)

        def source(rng):
            if hmode is HeteroMode.TWO_STATE:
                state = int(rng.integers(0, 2))
                dens = objects_mod.heterogeneous_variant(base, subunit, hmode, state, **params)
                return dens, "AB"[state]
            disp = rng.normal(0.0, params["sigma_px"], size=2)
            dens = objects_mod.heterogeneous_variant(base, subunit, hmode, tuple(disp), **params)
            return dens, f"{disp[0]:.4f};{disp[1]:.4f}"

    sim = cfg["simulate"]
    dataset, records = simulate_mod.generate_dataset(
        source, geom, ref, lc, n_frames=sim["n_frames"],
        target_photons=sim["target_photons"], seed=cfg.seed,
        with_reference=sim["with_reference"], n_probe=sim["n_probe"])
    simulate_mod.write_dataset(dataset, ds_path)
    simulate_mod.write_latents_csv(records, latents_path)
    log.info("wrote %d frames (%d photons) to %s", dataset.n_frames,
             dataset.total_photons(), ds_path)


def _load_dataset(cfg: RunConfig):
    ds_path = cfg.output_dir / "dataset.hspi"
    if not ds_path.exists():
        raise DataError(f"missing dataset {ds_path}; run 'simulate' first")
    return simulate_mod.read_dataset(ds_path)


def _checkpoint_stem(ck_dir: Path, iteration: int) -> Path:
    return ck_dir / f"iter_{iteration:04d}"


def _latest_checkpoint(ck_dir: Path) -> int | None:
    if not ck_dir.is_dir():
        return None
    its = [int(m.group(1)) for p in ck_dir.glob("iter_*.json")
           if (m := re.match(r"iter_(\d+)$", p.stem))]
    return max(its) if its else None


def _write_trace(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "total_log_likelihood", "rms_model_change"])
        for h in history:
            w.writerow([h["iteration"], repr(h["total_log_likelihood"]),
                        repr(h["rms_model_change"])])


def cmd_reconstruct(cfg: RunConfig, args) -> None:
    dataset = _load_dataset(cfg)
    geom = cfg.geometry()
    arm_dir = _arm_dir(cfg, args.arm)
    arm_dir.mkdir(parents=True, exist_ok=True)

    if args.arm == "baseline":
        out_stem = arm_dir / "intensity.bin"
        _check_overwrite([out_stem], args.force)
        theta_grid = cfg.latent_grid().thetas
        try:
            model = baseline_mod.emc_intensity(dataset, theta_grid, geom,
                                               n_iter=cfg["baseline"]["n_iter"], seed=cfg.seed)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        model.grid.astype("<f8").tofile(out_stem)
        meta = {"side_px": model.side_px, "thetas": model.thetas.tolist(),
                "log_likelihood": model.log_likelihood, "mutual_info": model.mutual_info}
        out_stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        log.info("wrote intensity model to %s", out_stem)
        return

    # maxlp arm
    model_stem = arm_dir / "model"
    trace_path = arm_dir / "trace.csv"
    ck_dir = arm_dir / "checkpoints"
    ref = cfg.reference()
    grid = cfg.latent_grid()
    mcfg = cfg.maxlp_config(threads=args.threads)
    n_iter = cfg["maxlp"]["n_iter"]

    initial_model = None
    history: list[dict] = []
    start = 0
    if args.resume:
        latest = _latest_checkpoint(ck_dir)
        if latest is not None:
            initial_model = maxlp_mod.load_model(_checkpoint_stem(ck_dir, latest))
            state = json.loads(_checkpoint_stem(ck_dir, latest).with_suffix(".state").read_text())
            history = state["history"]
            start = latest + 1
            log.info("resuming from checkpoint iteration %d", latest)
    else:
        _check_overwrite([model_stem.with_suffix(".cpx"), trace_path], args.force)
    if start >= n_iter:
        log.info("nothing to do: checkpoints already cover %d iterations", n_iter)
        return

    ck_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(it, model, assignment, hist):
        idx = start + it
        stem = _checkpoint_stem(ck_dir, idx)
        maxlp_mod.save_model(model, stem)
        maxlp_mod.write_assignment_csv(assignment, stem.with_suffix(".assignment.csv"))
        full = history + [dict(h, iteration=h["iteration"] + start) for h in hist]
        stem.with_suffix(".state").write_text(json.dumps({"history": full}, indent=2))

    result = maxlp_mod.maxlp_reconstruct(dataset, grid, geom, ref, n_iter - start,
                                         seed=cfg.seed, cfg=mcfg,
                                         initial_model=initial_model, callback=checkpoint)
    full_history = history + [dict(h, iteration=h["iteration"] + start) for h in result.history]
    maxlp_mod.save_model(result.model, model_stem, extra_meta={
        "iterations": n_iter, "latent_grid": grid.to_dict(),
        "likelihood_trace": [h["total_log_likelihood"] for h in full_history]})
    maxlp_mod.write_assignment_csv(result.assignment, arm_dir / "assignment.csv")
    _write_trace(trace_path, full_history)
    log.info("wrote model to %s", model_stem)


def _load_recon_model(cfg: RunConfig, arm: str) -> ComplexModel:
    arm_dir = _arm_dir(cfg, arm)
    if arm == "maxlp":
        stem = arm_dir / "model"
        if not stem.with_suffix(".cpx").exists():
            raise DataError(f"missing model {stem}.cpx; run 'reconstruct --arm maxlp' first")
        return maxlp_mod.load_model(stem)
    path = arm_dir / "intensity.bin"
    if not path.exists():
        raise DataError(f"missing intensity {path}; run 'reconstruct --arm baseline' first")
    meta = json.loads(path.with_suffix(".json").read_text())
    n = meta["side_px"]
    grid = np.fromfile(path, dtype="<f8").reshape(n, n)
    geom = cfg.geometry()
    return ComplexModel(np.sqrt(np.maximum(grid, 0.0)).astype(np.complex128),
                        geom.good.copy(), 1.0)


def cmd_phase(cfg: RunConfig, args) -> None:
    arm_dir = _arm_dir(cfg, args.arm)
    density_path = arm_dir / "density.bin"
    _check_overwrite([density_path], args.force)
    model = _load_recon_model(cfg, args.arm)
    p = cfg["phase"]
    try:
        support = phasing_mod.estimate_support(model, cfg.q_band(), p["threshold_frac"])
        result = phasing_mod.difference_map(model, support, beta=p["beta"],
                                            n_iter=p["n_iter"], seed=cfg.seed,
                                            mode="complex" if args.arm == "maxlp" else "magnitude")
    except ValueError as exc:
        raise NumericalError(str(exc)) from exc
    if result.diverged:
        log.warning("difference map flagged divergence; best iterate returned")
    objects_mod.save_density(result.density, density_path, seed=cfg.seed)
    support.save(arm_dir / "support.bin")
    maxlp_mod.save_model(result.model, arm_dir / "model_filled",
                         extra_meta={"best_iteration": result.best_iteration,
                                     "diverged": result.diverged})
    log.info("wrote real-space density to %s", density_path)


def cmd_evaluate(cfg: RunConfig, args) -> None:
    arm_dir = _arm_dir(cfg, args.arm)
    frc_path = arm_dir / "frc.csv"
    _check_overwrite([frc_path], args.force)
    geom = cfg.geometry()

    truth_path = Path(args.truth) if args.truth else _object_paths(cfg.output_dir)["average"]
    truth_density = _load_required_density(truth_path)
    truth_model = objects_mod.density_to_model(truth_density, geom)

    recon = _load_recon_model(cfg, args.arm) if args.recon is None else \
        maxlp_mod.load_model(Path(args.recon))
    align = metrics_mod.align_global(recon, truth_model,
                                     allow_inversion=(args.arm == "baseline"))
    curve = metrics_mod.frc(align.aligned, truth_model, cfg["metrics"]["ring_width_px"])
    res = metrics_mod.resolution_at_half(curve)

    with open(frc_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["radius_px", "q_inv_px", "correlation", "n_pixels", "valid"])
        for i in range(curve.radius_px.size):
            w.writerow([repr(float(curve.radius_px[i])), repr(float(curve.q_inv_px[i])),
                        repr(float(curve.correlation[i])), int(curve.n_pixels[i]),
                        int(curve.valid[i])])

    summary = {
        "arm": args.arm,
        "alignment_theta_rad": align.theta_offset,
        "alignment_inverted": align.inverted,
        "alignment_correlation": align.correlation,
        "resolution_at_half_px": res,
    }

    if args.arm == "maxlp":
        asg_path = arm_dir / "assignment.csv"
        latents_path = cfg.output_dir / "latents.csv"
        if asg_path.exists() and latents_path.exists():
            predicted = simulate_mod.read_latents_csv(asg_path)
            truth_rec = simulate_mod.read_latents_csv(latents_path)
            stats = metrics_mod.latent_errors(predicted, truth_rec, align.theta_offset)
            summary.update(stats.to_dict())
            with open(arm_dir / "latent_errors.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["frame", "theta_err_rad", "diameter_err_px", "tx_err_px", "ty_err_px"])
                for i in range(stats.theta_err.size):
                    w.writerow([i, repr(float(stats.theta_err[i])),
                                repr(float(stats.diameter_err[i])),
                                repr(float(stats.tx_err[i])), repr(float(stats.ty_err[i]))])
        else:
            log.warning("assignment or truth sidecar missing; skipping latent errors")

    (arm_dir / "sigmas.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


def cmd_plot(cfg: RunConfig, args) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots = cfg.output_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    made = []

    def save(fig, name):
        for ext in ("png", "svg"):
            fig.savefig(plots / f"{name}.{ext}", dpi=150, bbox_inches="tight")
        plt.close(fig)
        made.append(name)

    for arm in ("maxlp", "baseline"):
        arm_dir = _arm_dir(cfg, arm)
        frc_path = arm_dir / "frc.csv"
        if frc_path.exists():
            rows = list(csv.DictReader(open(frc_path)))
            if not rows:
                raise DataError(f"{frc_path} is empty")
            r = np.array([float(x["radius_px"]) for x in rows])
            c = np.array([float(x["correlation"]) for x in rows])
            v = np.array([int(x["valid"]) for x in rows], dtype=bool)
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot(r[v], c[v], lw=1.5)
            ax.axhline(0.5, color="k", ls="--", lw=0.8)
            ax.set(xlabel="ring radius (px)", ylabel="FRC", title=f"{arm} vs truth",
                   ylim=(-0.2, 1.05))
            save(fig, f"frc_{arm}")

        if arm == "maxlp":
            stem = arm_dir / "model"
            if stem.with_suffix(".cpx").exists():
                model = maxlp_mod.load_model(stem)
                fig, ax = plt.subplots(figsize=(4.5, 4))
                mag = np.abs(model.grid)
                im = ax.imshow(np.log10(np.maximum(mag, mag[mag > 0].min() if np.any(mag > 0) else 1e-12)),
                               cmap="magma")
                fig.colorbar(im, ax=ax, label="log10 |F|")
                ax.set_title("reconstructed model magnitude")
                save(fig, "model_magnitude")
        err_path = arm_dir / "latent_errors.csv"
        if err_path.exists():
            rows = list(csv.DictReader(open(err_path)))
            if not rows:
                raise DataError(f"{err_path} is empty")
            fig, axes = plt.subplots(2, 2, figsize=(8, 6))
            for ax, key, label in zip(
                    axes.ravel(),
                    ["theta_err_rad", "diameter_err_px", "tx_err_px", "ty_err_px"],
                    ["orientation error (deg)", "diameter error (px)",
                     "shift-x error (px)", "shift-y error (px)"]):
                vals = np.array([float(x[key]) for x in rows])
                if key == "theta_err_rad":
                    vals = np.rad2deg(vals)
                ax.hist(vals, bins=51)
                ax.set_xlabel(label)
            fig.tight_layout()
            save(fig, f"latent_errors_{arm}")

    density_paths = [(arm, _arm_dir(cfg, arm) / "density.bin") for arm in ("maxlp", "baseline")]
    avail = [(arm, p) for arm, p in density_paths if p.exists()]
    truth_path = _object_paths(cfg.output_dir)["average"]
    if avail and truth_path.exists():
        truth = objects_mod.load_density(truth_path)
        fig, axes = plt.subplots(1, len(avail) + 1, figsize=(4 * (len(avail) + 1), 4))
        axes = np.atleast_1d(axes)
        axes[0].imshow(truth.grid, cmap="viridis")
        axes[0].set_title("truth (average)")
        for ax, (arm, p) in zip(axes[1:], avail):
            ax.imshow(objects_mod.load_density(p).grid, cmap="viridis")
            ax.set_title(f"{arm} reconstruction")
        save(fig, "densities")

    if not made:
        raise DataError("nothing to plot: run 'evaluate' (and 'phase') first")
    log.info("wrote plots: %s", ", ".join(made))


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hspi", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--print-config", action="store_true",
                       help="print the resolved configuration and exit")

    common(sub.add_parser("make-object", help="generate the ground-truth target"))
    common(sub.add_parser("simulate", help="simulate a sparse photon dataset"))
    p = sub.add_parser("reconstruct", help="run a reconstruction arm")
    common(p)
    p.add_argument("--arm", choices=("maxlp", "baseline"), default="maxlp")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p = sub.add_parser("phase", help="support-constrained phase retrieval / fill-in")
    common(p)
    p.add_argument("--arm", choices=("maxlp", "baseline"), default="maxlp")
    p = sub.add_parser("evaluate", help="FRC, alignment and latent error statistics")
    common(p)
    p.add_argument("--arm", choices=("maxlp", "baseline"), default="maxlp")
    p.add_argument("--recon", default=None, help="explicit reconstruction model stem")
    p.add_argument("--truth", default=None, help="explicit truth density file")
    common(sub.add_parser("plot", help="render figures from evaluation outputs"))
    return parser


_COMMANDS = {
    "make-object": cmd_make_object,
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "phase": cmd_phase,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
        if args.print_config:
            print(dump_config(cfg))
            return EXIT_OK
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](cfg, args)
        return EXIT_OK
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
