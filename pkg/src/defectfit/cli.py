"""Command-line driver: config in, reproducible artifacts out.

Every artifact embeds the config hash, the seed it was produced from, and
the package version.  Exit codes: 0 success, 1 stage failure (a pipeline
error, reported as JSON on stderr), 2 configuration errors.
"""

import os

_threads = os.environ.get("DEFECTFIT_THREADS")
if _threads:
    for _k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_k, _threads)

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import STUDY_COLUMNS, convergence_study
from .config import ConfigError, load_config
from .equilibrate import MinimizerConfig, check_stability, equilibrate
from .errors import DefectFitError
from .fit import LossWeights, fit
from .lattice import (DefectSet, DisplacementField, SupercellSpec, build_lattice,
                      min_separation, to_xyz)
from .potential import EnergyAssembler, fd_force_error, fd_hessian_error
from .surrogate import model_from_json, model_to_json
from .training import Observation, make_training_domain, matching_report, sample_configs

__all__ = ["main"]


def _meta(cfg, command, seed=None):
    return {"config_sha256": cfg.sha256, "seed": seed, "version": __version__,
            "command": command}


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _format_cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, columns, rows, meta):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for k in sorted(meta):
            if meta[k] is not None:
                fh.write(f"# {k}={meta[k]}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(row[c]) for c in columns) + "\n")


def _displacement_rows(lattice, u):
    return [{"index": i, "x": float(p[0]), "y": float(p[1]),
             "ux": float(d[0]), "uy": float(d[1])}
            for i, (p, d) in enumerate(zip(lattice.positions, u.values))]


def _config_lattice(cfg):
    defects = None
    if cfg.lattice.defects:
        kinds = [k for k, _ in cfg.lattice.defects]
        positions = []
        for kind, cell in cfg.lattice.defects:
            if kind == "interstitial":
                positions.append(cfg.bravais.triangle_center(cell))
            else:
                positions.append(cfg.bravais.site(cell))
        defects = DefectSet(kinds=kinds, positions=np.array(positions),
                            core_radius=1.5 * cfg.bravais.r0)
    return build_lattice(cfg.bravais, SupercellSpec(cfg.lattice.N), defects)


def _cmd_generate_lattice(cfg, args, out):
    lattice = _config_lattice(cfg)
    path = out / "lattice.xyz"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_xyz(lattice, comment=f"config_sha256={cfg.sha256}"))
    _write_json(out / "lattice.json", {
        "meta": _meta(cfg, "generate-lattice"),
        "n_sites": lattice.n_sites,
        "n_defects": lattice.n_defects,
        "min_separation": (min_separation(lattice) if lattice.n_defects else None),
    })
    return 0


def _cmd_equilibrate(cfg, args, out):
    lattice = _config_lattice(cfg)
    mini = MinimizerConfig(g_tol=cfg.minimizer_g_tol, max_iter=cfg.minimizer_max_iter)
    asm = EnergyAssembler(lattice, cfg.potential)
    result = equilibrate(lattice, cfg.potential, config=mini, assembler=asm)
    c_bar = check_stability(result, cfg.potential, assembler=asm)
    _write_json(out / "equilibrium.json", {
        "meta": _meta(cfg, "equilibrate"),
        "energy": result.energy,
        "residual_force_norm": result.residual_force_norm,
        "c_bar": c_bar,
        "converged": result.converged,
        "n_iterations": result.n_iterations,
    })
    _write_csv(out / "displacement.csv", ["index", "x", "y", "ux", "uy"],
               _displacement_rows(lattice, result.u_bar),
               {"config_sha256": cfg.sha256, "version": __version__})
    return 0


def _cmd_make_training_set(cfg, args, out):
    L = args.L if args.L is not None else cfg.training.L_values[0]
    seed = args.seed if args.seed is not None else cfg.training.seed
    n_train = args.n_train if args.n_train is not None else cfg.training.n_train
    n_test = args.n_test if args.n_test is not None else cfg.training.n_test
    delta = args.delta if args.delta is not None else cfg.training.delta
    mini = MinimizerConfig(g_tol=cfg.minimizer_g_tol, max_iter=cfg.minimizer_max_iter)
    domain = make_training_domain(L, args.defect, cfg.potential, cfg.bravais,
                                  minimizer=mini)
    observations = (sample_configs(domain, n_train, delta, seed, tag="train")
                    + sample_configs(domain, n_test, delta, seed + 499, tag="test"))
    set_dir = out / f"trainset_L{int(L)}_{args.defect}"
    set_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, obs in enumerate(observations):
        blob = f"obs_{i:04d}.csv"
        _write_csv(set_dir / blob, ["index", "x", "y", "ux", "uy"],
                   _displacement_rows(domain.lattice, obs.u),
                   {"config_sha256": cfg.sha256})
        records.append({"config_csv": blob, "energy": obs.energy,
                        "forces": obs.forces.ravel().tolist(), "tag": obs.tag,
                        "defect_kind": obs.defect_kind})
    with open(set_dir / "observations.jsonl", "w") as fh:
        fh.write(json.dumps({"meta": _meta(cfg, "make-training-set", seed),
                             "L": L, "defect": args.defect, "delta": delta}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return 0


def _load_training_set(cfg, set_dir):
    set_dir = Path(set_dir)
    with open(set_dir / "observations.jsonl") as fh:
        header = json.loads(fh.readline())
        records = [json.loads(line) for line in fh if line.strip()]
    L, kind = header["L"], header["defect"]
    if kind == "vacancy":
        defects = DefectSet.vacancies(cfg.bravais, [(0, 0)])
    else:
        defects = DefectSet.single_interstitial(cfg.bravais)
    lattice = build_lattice(cfg.bravais, SupercellSpec(int(round(L))), defects)
    observations = []
    for rec in records:
        data = []
        for line in (set_dir / rec["config_csv"]).read_text().splitlines():
            if line.startswith("#") or line.startswith("index"):
                continue
            parts = line.split(",")
            data.append((float(parts[3]), float(parts[4])))
        u = DisplacementField(lattice, np.array(data))
        observations.append(Observation(
            u=u, energy=float(rec["energy"]),
            forces=np.array(rec["forces"]).reshape(-1, 2),
            tag=rec["tag"], defect_kind=rec["defect_kind"]))
    return lattice, observations


def _cmd_fit(cfg, args, out):
    _, observations = _load_training_set(cfg, args.training_set)
    spec = cfg.basis_ladder[-1]
    if args.basis_order is not None or args.basis_degree is not None:
        from .surrogate import BasisSpec
        spec = BasisSpec(
            order=args.basis_order if args.basis_order is not None else spec.order,
            max_degree=args.basis_degree if args.basis_degree is not None else spec.max_degree,
            n_radial=spec.n_radial, r_cut=spec.r_cut, m_max=spec.m_max)
    weights = cfg.weights
    if args.we is not None or args.wf is not None:
        weights = LossWeights(
            energy=args.we if args.we is not None else weights.energy,
            force=args.wf if args.wf is not None else weights.force,
            per_kind=weights.per_kind)
    rtol = args.rtol if args.rtol is not None else cfg.fit_rtol
    result = fit(observations, spec, weights, rtol=rtol)
    (out / "model.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(model_to_json(result.model))
    _write_json(out / "fit.json", {
        "meta": _meta(cfg, "fit"),
        "n_basis": result.model.n_basis,
        "effective_rank": result.effective_rank,
        "residual_loss": result.residual_loss,
        "rmse_energy_train": result.rmse_energy_train,
        "rmse_force_train": result.rmse_force_train,
        "rmse_energy_test": result.rmse_energy_test,
        "rmse_force_test": result.rmse_force_test,
        "n_rows": result.n_rows,
        "wall_time": result.wall_time,
    })
    return 0


def _cmd_report_matching(cfg, args, out):
    model = model_from_json(Path(args.model).read_text())
    _, observations = _load_training_set(cfg, args.training_set)
    header = json.loads((Path(args.training_set) / "observations.jsonl")
                        .read_text().splitlines()[0])
    mini = MinimizerConfig(g_tol=cfg.minimizer_g_tol, max_iter=cfg.minimizer_max_iter)
    domain = make_training_domain(header["L"], header["defect"], cfg.potential,
                                  cfg.bravais, minimizer=mini)
    report = matching_report(domain, observations, model)
    _write_json(out / "matching.json", {
        "meta": _meta(cfg, "report-matching"),
        "eps_E": report.eps_E, "eps_F": report.eps_F,
        "eps_FC": report.eps_FC, "eps_FC_hom": report.eps_FC_hom,
        "rmse_E": report.rmse_E, "rmse_F": report.rmse_F,
        "hom_hessian_norm": report.hom_hessian_norm,
    })
    return 0


def _cmd_study(cfg, args, out):
    log = (lambda m: print(m, file=sys.stderr, flush=True)) if args.verbose else None
    rows, rates, timings = convergence_study(cfg, log=log)
    for row in rows:
        for col in STUDY_COLUMNS:
            row.setdefault(col, float("nan"))
    csv_cols = [c for c in STUDY_COLUMNS]
    _write_csv(out / "study.csv", csv_cols, rows,
               {"config_sha256": cfg.sha256, "version": __version__,
                "seed": cfg.training.seed})
    _write_csv(out / "timings.csv", ["row", "wall_time"],
               [{"row": i, "wall_time": t} for i, t in enumerate(timings)],
               {"config_sha256": cfg.sha256})
    _write_json(out / "rates.json", {"meta": _meta(cfg, "study", cfg.training.seed),
                                     "rates": rates})
    return 0


def _cmd_check_derivatives(cfg, args, out):
    rng = np.random.default_rng(cfg.training.seed)
    results = {}
    worst_f, worst_h = 0.0, 0.0
    for label, defects in (("homogeneous", None),
                           ("vacancy", DefectSet.vacancies(cfg.bravais, [(0, 0)]))):
        lattice = build_lattice(cfg.bravais, SupercellSpec(5), defects)
        asm = EnergyAssembler(lattice, cfg.potential)
        for rep in range(5):
            u = DisplacementField(
                lattice, 0.01 * cfg.bravais.r0 * rng.standard_normal((lattice.n_sites, 2)))
            worst_f = max(worst_f, fd_force_error(asm, u))
            worst_h = max(worst_h, fd_hessian_error(asm, u))
        results[label] = {"max_force_rel_err": worst_f, "max_hessian_rel_err": worst_h}
    print(f"force FD max rel err:   {worst_f:.3e} (threshold 1e-6)")
    print(f"hessian FD max rel err: {worst_h:.3e} (threshold 1e-5)")
    _write_json(out / "derivatives.json", {"meta": _meta(cfg, "check-derivatives"),
                                           "results": results})
    return 0 if (worst_f < 1e-6 and worst_h < 1e-5) else 1


_COMMANDS = {
    "generate-lattice": _cmd_generate_lattice,
    "equilibrate": _cmd_equilibrate,
    "make-training-set": _cmd_make_training_set,
    "fit": _cmd_fit,
    "report-matching": _cmd_report_matching,
    "study": _cmd_study,
    "check-derivatives": _cmd_check_derivatives,
}


def _build_parser():
    parser = argparse.ArgumentParser(prog="defectfit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", default=None, help="output directory (overrides config)")

    for name in ("generate-lattice", "equilibrate", "study", "check-derivatives"):
        p = sub.add_parser(name)
        common(p)
        if name == "study":
            p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("make-training-set")
    common(p)
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--defect", choices=["vacancy", "interstitial"], default="vacancy")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("fit")
    common(p)
    p.add_argument("--training-set", required=True)
    p.add_argument("--basis-order", type=int, default=None)
    p.add_argument("--basis-degree", type=int, default=None)
    p.add_argument("--we", type=float, default=None)
    p.add_argument("--wf", type=float, default=None)
    p.add_argument("--rtol", type=float, default=None)

    p = sub.add_parser("report-matching")
    common(p)
    p.add_argument("--training-set", required=True)
    p.add_argument("--model", required=True)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}),
              file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}),
              file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path(cfg.output_directory)
    try:
        return _COMMANDS[args.command](cfg, args, out)
    except DefectFitError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
