"""Command-line entry point.

    tsnf experiment-joint  [--config PATH] [--seed N] [--out DIR]
    tsnf experiment-hier   [--variant J3-gaussian-prior|J6-flat-prior] ...
    tsnf run-two-stage     --config SPEC.json ...
    tsnf run-tsfb          [--pool CSV] [--tau T] [--A SD] [--iterations N] ...
    tsnf oracle-report     --y Y1 Y2 ... [--sigma S] [--tau T] ...
    tsnf gradcheck         [--draws N] ...

On failure the exit code is nonzero and stderr carries one JSON line
``{"error": <category>, "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, NonFiniteError, Tensor
from .checkpoint import CheckpointError
from .data import DataError, read_csv_matrix, write_csv_matrix
from .distributions import (
    DiagonalGaussian,
    GaussianLogDensity,
    make_rng,
    sample_software_posterior,
    simulate_hierarchical_data,
)
from .experiments import (
    Bundle,
    ConfigError,
    HierConfig,
    JointConfig,
    config_from_dict,
    load_run_spec,
    run_hier,
    run_joint,
    run_oracle_report,
    run_two_stage,
    sub_seed,
)
from .flows import ActNorm, AutoregressiveRQSpline, FlowModel, MaskedAffineCoupling, Permutation
from .training import TrainingDiverged, forward_kl_loss, reverse_kl_loss
from .tsfb import TsfbConfig, tsfb_run

logger = logging.getLogger("tsnf")

EXIT_CODES = {"config": 2, "data": 3, "numerical": 4, "io": 5, "check-failed": 6, "internal": 1}


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: invalid JSON: {exc.msg}") from None


def cmd_experiment_joint(args) -> int:
    cfg = config_from_dict(JointConfig, _load_config(args.config), seed=args.seed)
    res = run_joint(cfg, args.out)
    m = res["metrics"]
    print(f"E[X]={m['mean_x']:.4f} E[Y]={m['mean_y']:.4f} E[Z]={m['mean_z']:.4f} Var(X)={m['var_x']:.4f}")
    print(f"bundle written to {args.out}")
    return 0


def cmd_experiment_hier(args) -> int:
    doc = _load_config(args.config)
    if args.variant:
        doc["variant"] = args.variant
    doc.setdefault("variant", "J3-gaussian-prior")
    cfg = config_from_dict(HierConfig, doc, seed=args.seed)
    res = run_hier(cfg, args.out)
    for name, r in res["reports"].items():
        print(f"{name}: max|mean err|={r.max_abs_mean():.4f} max|sd err|={r.max_abs_sd():.4f} frobenius={r.frobenius:.4f}")
    print(f"bundle written to {args.out}")
    return 0


def cmd_run_two_stage(args) -> int:
    if args.config is None:
        raise ConfigError("run-two-stage needs --config SPEC.json")
    doc = _load_config(args.config)
    spec = load_run_spec(doc, Path(args.config).parent, seed=args.seed)
    res = run_two_stage(spec, args.out)
    if res["routes"] is not None:
        diff = np.abs(res["routes"][:, -1] - res["routes"][:, -2])
        print(f"density routes: max |composed - flow| = {diff.max():.4g} over {diff.size} query points")
    print(f"bundle written to {args.out}")
    return 0


def cmd_run_tsfb(args) -> int:
    doc = _load_config(args.config)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    tau = args.tau if args.tau is not None else doc.get("tau", 2.0)
    A = args.A if args.A is not None else doc.get("A")
    iterations = args.iterations or doc.get("iterations", 30000)
    bundle = Bundle(args.out)
    pool_path = args.pool or doc.get("pool")
    if pool_path:
        _, pool = read_csv_matrix(pool_path)
    else:
        # no pool given: simulate one exactly as experiment-hier does
        sigma = doc.get("sigma", 1.0)
        if "y" in doc:
            y = np.asarray(doc["y"], dtype=np.float64)
        else:
            _, y = simulate_hierarchical_data(doc.get("J", 3), doc.get("gamma", -5.0), sigma, tau, make_rng(sub_seed(seed, 1)))
        pool = sample_software_posterior(y, A, sigma, doc.get("n_software", 15000), make_rng(sub_seed(seed, 2)))
        write_csv_matrix(bundle.path("software_draws.csv"), [f"theta_{i + 1}" for i in range(y.size)], pool)
    chain = tsfb_run(pool, TsfbConfig(iterations=iterations, tau=tau, software_prior_sd=A, seed=seed))
    chain.to_csv(bundle.path("tsfb_chain.csv"))
    acc = chain.acceptance_rate()
    bundle.write_metrics("metrics.csv", {f"acceptance_theta_{i + 1}": a for i, a in enumerate(acc)})
    bundle.finish()
    print("acceptance rates: " + " ".join(f"{a:.3f}" for a in acc))
    return 0


def cmd_oracle_report(args) -> int:
    doc = _load_config(args.config)
    y = args.y or doc.get("y")
    if not y:
        raise ConfigError("oracle-report needs observations (--y or 'y' in the config)")
    sigma = args.sigma if args.sigma is not None else doc.get("sigma", 1.0)
    tau = args.tau if args.tau is not None else doc.get("tau", 2.0)
    m = run_oracle_report(y, sigma, tau, args.out)
    for k, v in m.items():
        print(f"{k} = {v:.3e}")
    return 0


def gradcheck_suite(draws: int, seed: int, eps: float = 1e-6, entries: int = 16):
    """Max relative finite-difference error per transform type and KL loss."""
    rng = make_rng(seed)
    results = {}

    def perturb(params):
        for p in params:
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)

    def check(name, build):
        worst = 0.0
        for _ in range(draws):
            f, params = build()
            worst = max(worst, ad.finite_diff_gradcheck(f, params, eps, entries=entries, rng=rng))
        results[name] = worst

    def layer_case(make):
        def build():
            dim = int(rng.integers(1, 4)) if make is not MaskedAffineCoupling else int(rng.integers(2, 4))
            if make is MaskedAffineCoupling:
                layer = MaskedAffineCoupling(dim, np.arange(dim) % 2 == 0, hidden=(8,), rng=rng)
            elif make is AutoregressiveRQSpline:
                layer = AutoregressiveRQSpline(dim, hidden=(8,), rng=rng)
            elif make is ActNorm:
                layer = ActNorm(dim)
                layer.mark_initialized()
            else:
                layer = Permutation(dim)
            perturb(layer.parameters())
            x = rng.standard_normal((5, dim))
            w = rng.standard_normal((5, dim))
            inp = Tensor(x, requires_grad=True)
            params = [*layer.parameters(), inp]

            def f():
                # both directions: density (inverse) and sampling (forward)
                out, lad = layer.inverse(inp)
                back, fld = layer.forward(inp)
                return ad.sum_(out * w) + ad.sum_(lad) + ad.sum_(back * w * 0.5) + ad.sum_(fld)

            return f, params

        return build

    check("actnorm", layer_case(ActNorm))
    check("permutation", layer_case(Permutation))
    check("affine_coupling", layer_case(MaskedAffineCoupling))
    check("ar_rq_spline", layer_case(AutoregressiveRQSpline))

    def model_for(dim):
        act = ActNorm(dim)
        act.mark_initialized()
        layers = [AutoregressiveRQSpline(dim, hidden=(8,), rng=rng), act]
        if dim > 1:
            layers.append(MaskedAffineCoupling(dim, np.arange(dim) % 2 == 0, hidden=(8,), rng=rng))
        model = FlowModel(dim, layers, DiagonalGaussian.standard(dim))
        perturb(model.parameters())
        return model

    def forward_case():
        dim = int(rng.integers(1, 4))
        model = model_for(dim)
        batch = rng.standard_normal((6, dim))
        return (lambda: forward_kl_loss(model, batch)), model.parameters()

    def reverse_case():
        dim = int(rng.integers(1, 4))
        model = model_for(dim)
        target = GaussianLogDensity(rng.standard_normal(dim), np.eye(dim) * 1.5)
        s = int(rng.integers(0, 2**31))
        return (lambda: reverse_kl_loss(model, target, 6, make_rng(s))), model.parameters()

    check("forward_kl", forward_case)
    check("reverse_kl", reverse_case)
    return results


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(args.draws, args.seed if args.seed is not None else 0)
    ok = True
    for name, err in results.items():
        passed = err <= args.tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: max relative error {err:.3e}")
    if args.out:
        bundle = Bundle(args.out)
        bundle.write_metrics("gradcheck.csv", results)
        bundle.finish()
    if not ok:
        raise _CheckFailed("gradient check exceeded tolerance")
    return 0


class _CheckFailed(RuntimeError):
    pass


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (DataError, CheckpointError)):
        return "data"
    if isinstance(exc, (NonFiniteError, DomainError, TrainingDiverged)):
        return "numerical"
    if isinstance(exc, _CheckFailed):
        return "check-failed"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, RuntimeError) and isinstance(exc.__cause__, (NonFiniteError, DomainError, TrainingDiverged)):
        return "numerical"
    if isinstance(exc, ValueError):
        return "config"
    return "internal"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON config / spec document")
    common.add_argument("--seed", type=int, default=None, help="top-level seed (overrides the config)")
    common.add_argument("--out", type=str, default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tsnf", description="Two-stage normalizing flows toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("experiment-joint", parents=[common], help="three-variable joint density reconstruction")
    p.set_defaults(func=cmd_experiment_joint)

    p = sub.add_parser("experiment-hier", parents=[common], help="Gaussian hierarchical model, TSNF vs TSFB")
    p.add_argument("--variant", choices=["J3-gaussian-prior", "J6-flat-prior"], default=None)
    p.set_defaults(func=cmd_experiment_hier)

    p = sub.add_parser("run-two-stage", parents=[common], help="generic two-stage fit from a spec document")
    p.set_defaults(func=cmd_run_two_stage)

    p = sub.add_parser("run-tsfb", parents=[common], help="TSFB sampler on a software-draw pool")
    p.add_argument("--pool", type=str, default=None, help="CSV of software draws, one column per group")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--A", type=float, default=None, help="software prior SD (omit for a flat prior)")
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_run_tsfb)

    p = sub.add_parser("oracle-report", parents=[common], help="exact posterior of the Gaussian hierarchical model")
    p.add_argument("--y", type=float, nargs="+", default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.set_defaults(func=cmd_oracle_report)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - top-level error boundary
        category = _categorize(exc)
        print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
        if args.verbose:
            logger.exception("command failed")
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
