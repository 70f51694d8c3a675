"""Command-line entry point: simulate, train, evaluate, theory, reproduce.

Exit codes: 0 success, 2 bad input, 3 optimization failure, 4 consistency
failure (hash mismatch or a failed theory check), 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import dynamics
from .dynamics import Interaction, Order, ParticleSystemSpec, UniformInitial, force_from_dict
from .errors import ContractError, IpsgpError, InvalidInputError, OptimizationError
from .observations import ObservationSet
from .presets import PRESET_NAMES, Preset, alignment_kernel, get_preset
from .training import FitConfig, TrainedModel

log = logging.getLogger("ipsgp")

EXIT_OK, EXIT_OTHER, EXIT_INPUT, EXIT_OPT, EXIT_CONSISTENCY = 0, 1, 2, 3, 4


class InputError(Exception):
    """Bad command-line input; mapped to exit code 2."""


# ---------------------------------------------------------------------------
# configuration

_TOP_KEYS = {"preset", "system", "data", "fit", "evaluation", "trials"}
_DATA_KEYS = {"M", "L", "T", "sigma", "seed"}
_EVAL_KEYS = {"T_f", "n_rho", "bins", "n_grid"}
_SYSTEM_KEYS = {"d", "N", "order", "interaction", "force", "alpha", "kernel", "mu0", "masses"}
_FIT_KEYS = {f.name for f in dataclasses.fields(FitConfig)}

_KERNELS = {
    "opinion": lambda p: dynamics.opinion_kernel,
    "fish_milling": lambda p: dynamics.fish_milling_kernel(**p),
    "alignment": lambda p: alignment_kernel,
    "constant": lambda p: dynamics.constant_kernel(**p),
}


def _check_keys(section, allowed, where):
    if not isinstance(section, dict):
        raise InputError(f"{where} must be a JSON object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise InputError(f"unknown key(s) in {where}: {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")


def _inline_system(doc) -> ParticleSystemSpec:
    _check_keys(doc, _SYSTEM_KEYS, "system")
    kernel_doc = doc.get("kernel", {"name": "constant", "params": {"c": 1.0}})
    name = kernel_doc.get("name")
    if name not in _KERNELS:
        raise InputError(f"unknown kernel {name!r}; valid: {', '.join(sorted(_KERNELS))}")
    mu0 = doc.get("mu0", {"x_low": 0.0, "x_high": 1.0})
    return ParticleSystemSpec(
        d=int(doc["d"]),
        N=int(doc["N"]),
        order=Order(doc.get("order", "first")),
        kernel=_KERNELS[name](kernel_doc.get("params", {})),
        force=force_from_dict(doc.get("force", {"family": "zero"})),
        alpha=tuple(doc.get("alpha", ())),
        interaction=Interaction(doc.get("interaction", "position")),
        masses=doc.get("masses"),
        mu0=UniformInitial(**mu0),
    )


@dataclass(frozen=True)
class Experiment:
    """A fully resolved experiment configuration."""

    name: str
    spec: ParticleSystemSpec
    M: int
    L: int
    T: float
    sigma: float
    seed: int
    fit: FitConfig
    T_f: float
    n_rho: int
    bins: int
    n_grid: int
    trials: int

    def describe(self) -> dict:
        return {
            "name": self.name,
            "skeleton": self.spec.skeleton.to_dict(),
            "alpha_true": list(self.spec.alpha),
            "data": {"M": self.M, "L": self.L, "T": self.T, "sigma": self.sigma, "seed": self.seed},
            "fit": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self.fit).items()},
            "evaluation": {"T_f": self.T_f, "n_rho": self.n_rho, "bins": self.bins, "n_grid": self.n_grid},
            "trials": self.trials,
        }


def resolve_experiment(config: Optional[dict], preset: Optional[str], seed: Optional[int]) -> Experiment:
    """Merge a JSON config, a preset name and a seed override into an Experiment."""
    config = dict(config or {})
    _check_keys(config, _TOP_KEYS, "config")
    name = preset or config.get("preset")
    if name is None and "system" not in config:
        name = "od"
    if name is not None and name not in PRESET_NAMES:
        raise InputError(f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")
    base: Optional[Preset] = get_preset(name) if name is not None else None
    if "system" in config:
        spec = _inline_system(config["system"])
        name = name or "custom"
    else:
        spec = base.spec
    data = config.get("data", {})
    _check_keys(data, _DATA_KEYS, "data")
    ev = config.get("evaluation", {})
    _check_keys(ev, _EVAL_KEYS, "evaluation")
    fit_doc = config.get("fit", {})
    _check_keys(fit_doc, _FIT_KEYS, "fit")
    fit = base.fit if base is not None else FitConfig()
    if "alpha0" in fit_doc and fit_doc["alpha0"] is not None:
        fit_doc = dict(fit_doc, alpha0=tuple(fit_doc["alpha0"]))
    fit = dataclasses.replace(fit, **fit_doc)

    def pick(section, key, default):
        return section.get(key, default)

    exp = Experiment(
        name=name,
        spec=spec,
        M=int(pick(data, "M", base.M if base else 3)),
        L=int(pick(data, "L", base.L if base else 3)),
        T=float(pick(data, "T", base.T if base else 1.0)),
        sigma=float(pick(data, "sigma", base.sigma if base else 0.1)),
        seed=int(seed if seed is not None else pick(data, "seed", 0)),
        fit=fit,
        T_f=float(pick(ev, "T_f", base.T_f if base else 2.0)),
        n_rho=int(pick(ev, "n_rho", base.n_rho if base else 2000)),
        bins=int(pick(ev, "bins", 200)),
        n_grid=int(pick(ev, "n_grid", 1000)),
        trials=int(config.get("trials", base.trials if base else 10)),
    )
    if exp.fit.seed != exp.seed and "seed" not in fit_doc:
        exp = dataclasses.replace(exp, fit=dataclasses.replace(exp.fit, seed=exp.seed))
    return exp


# ---------------------------------------------------------------------------
# file helpers


def _read_json_text(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    text = raw.decode("utf-8", errors="replace")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise InputError(f"parse error in {path} at byte {offset}: {exc.msg}") from None


def _load_observations(path) -> ObservationSet:
    doc = _read_json_text(path)
    try:
        return ObservationSet.from_json(json.dumps(doc))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path} is not a valid observation file: {exc}") from None


class Outputs:
    """Collects output files and writes them with a manifest of SHA-256 hashes."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.files = {}

    def add(self, name, text: str):
        self.files[name] = text.encode("utf-8")

    def write(self, command: str, extra: Optional[dict] = None):
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
            for name, data in self.files.items():
                (self.dir / name).write_bytes(data)
            manifest = {
                "command": command,
                "files": {name: hashlib.sha256(data).hexdigest() for name, data in sorted(self.files.items())},
            }
            if extra:
                manifest.update(extra)
            (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise InputError(f"cannot write to {self.dir}: {exc.strerror} ({exc.filename})") from None


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _trace_csv(model: TrainedModel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "nll", "grad_inf", "n_evals"])
    for row in model.trace:
        w.writerow([row["iteration"], repr(row["nll"]), repr(row["grad_inf"]), row["n_evals"]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, exp: Experiment):
    obs = dynamics.generate_observations(exp.spec, exp.M, exp.L, exp.T, exp.sigma, exp.seed)
    out = Outputs(args.out)
    out.add("data.json", obs.to_json())
    out.add("data.csv", obs.to_csv())
    out.write("simulate", {"experiment": exp.describe(), "data_hash": obs.data_hash})
    print(f"data_hash {obs.data_hash}")
    return EXIT_OK


def _fit(exp: Experiment, obs: ObservationSet) -> TrainedModel:
    from .training import fit

    return fit(obs, exp.spec.skeleton, exp.fit)


def cmd_train(args, exp: Experiment):
    obs = _load_observations(args.data)
    model = _fit(exp, obs)
    out = Outputs(args.out)
    out.add("model.json", model.to_json() + "\n")
    out.add("trace.csv", _trace_csv(model))
    out.write("train", {"experiment": exp.describe(), "data_hash": obs.data_hash})
    names = exp.spec.force.param_names
    params = ", ".join(f"{n}={a:.6g}" for n, a in zip(names, model.alpha))
    print(f"nll {model.nll:.6f} status {model.status} sigma {model.sigma:.6g} {params}")
    return EXIT_OK


def _evaluation_report(exp: Experiment, model: TrainedModel, obs: ObservationSet):
    from .evaluation import empirical_rho, estimate_kernel_curve, predict_and_score

    rho = empirical_rho(exp.spec, exp.n_rho, exp.L, exp.T, exp.bins, seed=exp.seed)
    report = predict_and_score(model, obs, exp.spec, rho, exp.T, exp.T_f)
    grid = np.linspace(0.0, 1.5 * rho.R, exp.n_grid)
    estimate = estimate_kernel_curve(model, obs, grid)
    report.update(
        {
            "R": rho.R,
            "alpha_hat": list(model.alpha),
            "alpha_true": list(exp.spec.alpha),
            "sigma_hat": model.sigma,
            "kernel": model.kernel.to_dict(),
            "n_variance_clipped": estimate.n_clipped,
        }
    )
    if "flocking_score_final" in report:
        report["flocking_score_final"] = [float(x) for x in report["flocking_score_final"]]
    return report, estimate


def cmd_evaluate(args, exp: Experiment):
    obs = _load_observations(args.data)
    try:
        model = TrainedModel.from_json(Path(args.model).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {args.model}: {exc.strerror}") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"{args.model} is not a valid model file: {exc}") from None
    model.check_data(obs)
    model.cache = model.gp(obs).build_cache(model.alpha, model.kernel, model.sigma)
    report, estimate = _evaluation_report(exp, model, obs)
    out = Outputs(args.out)
    out.add("kernel.csv", estimate.to_csv())
    out.add("metrics.json", _dumps(report))
    out.write("evaluate", {"data_hash": obs.data_hash})
    keys = ("rel_Linf", "rel_L2_rho_tilde", "traj_err_train", "traj_err_future")
    print(" ".join(f"{k} {report[k]:.4g}" if report[k] is not None else f"{k} undefined" for k in keys))
    return EXIT_OK


def cmd_theory(args, exp: Experiment):
    from . import theory
    from .kernels import KernelHyperparams

    h = KernelHyperparams(1.5, 1.0, 0.5)
    out = Outputs(args.out)
    status = EXIT_OK
    if args.check == "gp-krr":
        spec = theory.rkhs_test_system(h)
        obs = dynamics.generate_observations(spec, 3, 3, 1.0, 0.1, exp.seed)
        grid = np.linspace(0.0, 1.5, 151)
        result = theory.check_gp_krr_equivalence(obs, h, args.lam, 0.1, grid)
        control = theory.check_gp_krr_equivalence(obs, h, args.lam, 0.1, grid, mis_scaled=True)
        result["negative_control"] = control["discrepancy"]
        result["passed"] = result["discrepancy"] <= 1e-8 * result["scale"]
        out.add("gp_krr.json", _dumps(result))
        print(f"discrepancy {result['discrepancy']:.3e} (negative control {control['discrepancy']:.3e})")
        if not result["passed"]:
            status = EXIT_CONSISTENCY
    elif args.check == "coercivity":
        spec = dynamics.ParticleSystemSpec(
            d=1, N=args.N, order=Order.FIRST, kernel=theory.rkhs_test_system(h).kernel, mu0=UniformInitial(-0.5, 0.5)
        )
        report = theory.estimate_coercivity(spec, n_mc=args.n_mc, L=3, T=1.0, seed=exp.seed, h=h)
        doc = report.to_dict()
        out.add("coercivity.json", _dumps(doc))
        print(f"min ratio {report.min_ratio:.6g} upper bound {report.upper_bound:.6g}")
    else:
        spec = theory.rkhs_test_system(h)
        table = theory.convergence_study(spec, h, seeds=range(exp.seed, exp.seed + 5))
        out.add("convergence.json", _dumps(table.to_dict()))
        print("median L2 errors " + " ".join(f"{m}:{e:.4g}" for m, e in zip(table.M_list, table.median_l2)))
        print(f"log-log slope {table.slope:.4g}")
    out.write(f"theory {args.check}")
    return status


def cmd_reproduce(args, exp: Experiment):
    from .evaluation import empirical_rho, predict_and_score
    from .training import fit

    trials = args.trials if args.trials is not None else exp.trials
    rho = empirical_rho(exp.spec, exp.n_rho, exp.L, exp.T, exp.bins, seed=exp.seed)
    rows = []
    for k in range(trials):
        seed = exp.seed + k
        obs = dynamics.generate_observations(exp.spec, exp.M, exp.L, exp.T, exp.sigma, seed)
        model = fit(obs, exp.spec.skeleton, dataclasses.replace(exp.fit, seed=seed))
        rep = predict_and_score(model, obs, exp.spec, rho, exp.T, exp.T_f)
        row = {"seed": seed, "sigma_hat": model.sigma, "status": model.status, "nll": model.nll}
        row.update({f"alpha_{n}": a for n, a in zip(exp.spec.force.param_names, model.alpha)})
        row.update({k2: v for k2, v in rep.items() if k2 != "flocking_score_final"})
        if "flocking_score_final" in rep:
            row["flocking_score_final"] = float(np.mean(rep["flocking_score_final"]))
        rows.append(row)
        print(" ".join(f"{key}={val:.4g}" if isinstance(val, float) else f"{key}={val}" for key, val in row.items()))
    keys = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in rows:
        w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])
    numeric = [k for k in keys if rows and isinstance(rows[0][k], float)]
    summary = {
        "experiment": exp.describe(),
        "R": rho.R,
        "mean": {k: float(np.mean([r[k] for r in rows])) for k in numeric},
        "std": {k: float(np.std([r[k] for r in rows])) for k in numeric},
    }
    out = Outputs(args.out)
    out.add("trials.csv", buf.getvalue())
    out.add("summary.json", _dumps(summary))
    out.write("reproduce")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--preset", help=f"named system: {', '.join(PRESET_NAMES)}")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, help="cap BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ipsgp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a noisy observation set")
    p = sub.add_parser("train", parents=[common], help="fit alpha, kernel hyperparameters and noise")
    p.add_argument("--data", required=True, help="observation JSON written by simulate")
    p = sub.add_parser("evaluate", parents=[common], help="kernel curve, error metrics and trajectory errors")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p = sub.add_parser("theory", parents=[common], help="GP/KRR, coercivity and convergence checks")
    p.add_argument("check", choices=("gp-krr", "coercivity", "convergence"))
    p.add_argument("--lam", type=float, default=0.1, help="ridge parameter for gp-krr")
    p.add_argument("--N", type=int, default=2, help="agent count for coercivity")
    p.add_argument("--n-mc", dest="n_mc", type=int, default=5000, help="Monte Carlo trajectories for coercivity")
    p = sub.add_parser("reproduce", parents=[common], help="repeat simulate/train/evaluate over seeded trials")
    p.add_argument("--trials", type=int)
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "theory": cmd_theory,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        config = _read_json_text(args.config) if args.config else None
        exp = resolve_experiment(config, args.preset, args.seed)
        return _COMMANDS[args.command](args, exp)
    except (InputError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TypeError, ValueError, KeyError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OptimizationError as exc:
        print(f"error: optimization failed: {exc}", file=sys.stderr)
        return EXIT_OPT
    except ContractError as exc:
        print(f"error: consistency check failed: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except IpsgpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
