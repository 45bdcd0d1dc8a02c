"""Command-line front end: ``seisoed <command> --config PATH``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .design import (_cell, _write_csv, check_config_cfl, condition_study,
                     design_from_receivers, load_config, per_parameter_sweep, provenance,
                     run_diagnostics, run_scenario, single_design_eig, write_condition_report)
from .elastic_solver import ReceiverSeries
from .errors import ConfigError, SeisOEDError
from .hessian import misfit_derivatives, write_matrix_csv
from .integrate import stream_generator
from .model import quiet_start

log = logging.getLogger("seisoed")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _config(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.out is not None:
        changes["output"] = args.out
    if args.estimator is not None:
        changes["estimator"] = args.estimator
    return cfg.replace(**changes) if changes else cfg


def cmd_simulate(cfg, out: Path):
    model = check_config_cfl(cfg)
    positions = design_from_receivers(cfg)
    series = model.simulate(np.array(cfg.theta), model.surface(positions))
    out.mkdir(parents=True, exist_ok=True)
    series.dump(out / "receivers.bin")
    times = model.time.times
    rows = []
    for r, x in enumerate(positions):
        for c in range(2):
            rows.extend([r, _cell(float(x)), c + 1, m, _cell(float(times[m])),
                         _cell(float(series.data[r, c, m]))] for m in range(len(times)))
    _write_csv(out / "simulate.csv", provenance(cfg, "simulate"),
               ["receiver", "x1", "component", "step", "t", "u"], rows)
    print(f"wrote {out / 'simulate.csv'} ({series.N_R} receivers, {series.N_t} steps)")


def cmd_hessian(cfg, out: Path):
    model = check_config_cfl(cfg)
    res = condition_study(cfg, model)
    write_condition_report(cfg, res, out)
    if cfg.estimator == "laplace2":
        # synthetic noisy data at theta; H_II uses the residual of that data
        theta = np.array(cfg.theta)
        rec = model.surface(design_from_receivers(cfg))
        with quiet_start():
            clean = model.simulate(theta, rec)
        eps = cfg.noise.sample(stream_generator(cfg.seed, 6), (clean.N_R, clean.N_t))
        data = ReceiverSeries(clean.data + eps, clean.dt, clean.positions)
        with quiet_start():
            der = misfit_derivatives(model.ops, theta, data, cfg.noise, model.time, rec,
                                     params=cfg.free)
        write_matrix_csv(out / "H2.csv", der.H_II)
    print(f"cond_unscaled={res.cond_unscaled:.6g} cond_scaled={res.cond_scaled:.6g}")


def cmd_eig(cfg, out: Path):
    est = single_design_eig(cfg)
    _write_csv(out / "eig.csv", provenance(cfg, "eig"),
               ["estimator", "eig", "stderr", "n_samples", "M_outer", "M_inner"],
               [[est.estimator, _cell(est.value), _cell(est.stderr), est.n_samples,
                 est.M_outer or "", est.M_inner or ""]])
    print(f"EIG={est.value:.6g} +/- {est.stderr:.3g} ({est.estimator})")


def cmd_sweep(cfg, out: Path):
    rows = run_scenario(cfg, out)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerows(rows)


def cmd_diagnose(cfg, out: Path):
    rep = run_diagnostics(cfg, out)
    if cfg.diagnostic == "condition":
        print(f"cond_unscaled={rep.cond_unscaled:.6g} cond_scaled={rep.cond_scaled:.6g}")
    elif cfg.diagnostic == "convergence":
        print(f"mc_rate={rep.mc_rate:.4f} sparse_rate={rep.sparse_rate:.4f}")
    else:
        print(f"laplace={rep.laplace:.6g} nested={rep.nested.value:.6g} "
              f"rel_gap={rep.rel_gap:.4f}")


def cmd_per_param(cfg, out: Path):
    rows = per_parameter_sweep(cfg, out)
    csv.writer(sys.stdout, lineterminator="\n").writerows(rows)


COMMANDS = {"simulate": cmd_simulate, "hessian": cmd_hessian, "eig": cmd_eig,
            "sweep": cmd_sweep, "diagnose": cmd_diagnose, "per-param": cmd_per_param}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seisoed", description=__doc__)
    p.add_argument("--version", action="version", version=f"seisoed {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out", type=str)
        sp.add_argument("--estimator", choices=("laplace", "laplace2", "nested"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, Path(cfg.output))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SeisOEDError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
