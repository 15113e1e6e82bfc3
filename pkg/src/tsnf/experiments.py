"""End-to-end experiment runners that write plot-ready artifact bundles.

Every runner is a pure function of its config: sub-seeds are derived from the
top-level seed with ``SeedSequence``, nothing reads the clock, and each bundle
ends with a manifest listing every file and its SHA-256 digest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import integrate

from .checkpoint import save_checkpoint
from .data import DataError, SampleSet, SubvectorSpec, read_csv_matrix, write_csv_matrix
from .distributions import (
    make_rng,
    quartic_log_norm,
    quartic_log_prob,
    quartic_second_moment,
    sample_software_posterior,
    simulate_hierarchical_data,
    simulate_joint_subvectors,
    software_posterior_params,
)
from .oracle import (
    GaussianHierOracle,
    KdeEstimate,
    error_report,
    grid_cdf,
    ks_two_sample,
    normal_cdf,
    normal_pdf,
    write_error_table,
)
from .training import TrainConfig
from .tsfb import TsfbConfig, tsfb_run
from .twostage import (
    ANALYTIC_TERMS,
    QuarticReciprocal,
    compose_target,
    data_box,
    density_routes,
    fit_stage1,
    fit_stage2,
    hierarchical_composition,
    make_analytic_term,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` lists every issue found."""

    def __init__(self, problems: list[str] | str):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


def sub_seed(seed: int, *path: int) -> int:
    """Independent 32-bit seed for a named sub-stream of ``seed``."""
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


# --- configs -------------------------------------------------------------------


def _train_config(d: dict | TrainConfig | None, **defaults) -> TrainConfig:
    if isinstance(d, TrainConfig):
        return d
    merged = {**defaults, **(d or {})}
    try:
        return TrainConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None


SPLINE_STAGE1 = [{"kind": "ar_rq_spline"}, {"kind": "actnorm"}, {"kind": "ar_rq_spline"}, {"kind": "actnorm"}]
# Stage 2 is trained by sampling, so its splines condition on the base side
SPLINE_STAGE2 = [
    {"kind": "ar_rq_spline", "conditioning": "base"},
    {"kind": "actnorm"},
    {"kind": "permutation"},
    {"kind": "ar_rq_spline", "conditioning": "base"},
    {"kind": "actnorm"},
]
AFFINE_STAGE1 = [{"kind": "affine_coupling"}, {"kind": "actnorm"}, {"kind": "affine_coupling"}]
AFFINE_STAGE2 = [
    {"kind": "affine_coupling"},
    {"kind": "affine_coupling"},
    {"kind": "affine_coupling"},
    {"kind": "actnorm"},
]


@dataclass
class JointConfig:
    n1: int = 5000
    n2: int = 5000
    sigma: float = 0.1
    tau: float = 0.8
    omega: float = 5.0
    seed: int = 0
    stage1_layers: list = field(default_factory=lambda: [dict(d) for d in SPLINE_STAGE1])
    stage2_layers: list = field(default_factory=lambda: [dict(d) for d in SPLINE_STAGE2])
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=8000, batch_size=200, learning_rate=1e-3))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=25000, batch_size=200, learning_rate=1e-3))
    n_samples: int = 100_000
    grid_points: int = 201
    hist_bins: int = 80
    # Stage-1 fits are trusted only on the box spanned by their data (widened by
    # this fraction of the range); None trusts them everywhere
    support_margin: float | None = 0.0
    # Gaussian fall-off outside each component box, in units of the box width (0 = hard box)
    support_wall: float = 0.01

    def __post_init__(self):
        problems = [f"{k} must be a positive integer" for k in ("n1", "n2", "n_samples") if getattr(self, k) < 1]
        if self.support_margin is not None and self.support_margin < 0:
            problems.append(f"support_margin must be nonnegative or null, got {self.support_margin!r}")
        if self.support_wall < 0:
            problems.append(f"support_wall must be nonnegative, got {self.support_wall!r}")
        if problems:
            raise ConfigError(problems)


HIER_VARIANTS = {
    "J3-gaussian-prior": {"J": 3, "A": 0.5},
    "J6-flat-prior": {"J": 6, "A": None},
}


@dataclass
class HierConfig:
    variant: str = "J3-gaussian-prior"
    J: int = 3
    A: float | None = 0.5
    gamma: float = -5.0
    sigma: float = 1.0
    tau: float = 2.0
    n_software: int = 15000
    seed: int = 0
    stage1_layers: list = field(default_factory=lambda: [dict(d) for d in AFFINE_STAGE1])
    stage2_layers: list = field(default_factory=lambda: [dict(d) for d in AFFINE_STAGE2])
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=2000, batch_size=200, learning_rate=1e-4))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=5000, batch_size=200, learning_rate=5e-3))
    tsfb_iterations: int = 30000
    n_samples: int = 100_000
    grid_points: int = 201

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> HierConfig:
        if variant not in HIER_VARIANTS:
            raise ConfigError(f"unknown hierarchical variant {variant!r}; choose from {sorted(HIER_VARIANTS)}")
        return cls(variant=variant, **{**HIER_VARIANTS[variant], **overrides})


def config_from_dict(cls, doc: dict, **overrides):
    """Build a Joint/HierConfig from a JSON document; unknown keys are reported together."""
    doc = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names - {"kind"})
    if unknown:
        raise ConfigError([f"unknown config key {k!r}" for k in unknown])
    kw = {k: v for k, v in doc.items() if k != "kind"}
    seed = kw.get("seed", 0)
    for stage in ("stage1", "stage2"):
        if stage in kw:
            default = getattr(cls(), stage)
            base = dataclasses.asdict(default)
            base["seed"] = seed
            kw[stage] = _train_config(kw[stage], **base)
    if cls is HierConfig and "variant" in kw:
        variant = kw.pop("variant")
        return HierConfig.for_variant(variant, **kw)
    return cls(**kw)


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


# --- bundle helpers ------------------------------------------------------------


class Bundle:
    """Output directory that records the files it writes."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def write_json(self, name: str, doc) -> None:
        self.path(name).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def write_metrics(self, name: str, metrics: dict[str, float]) -> None:
        write_csv_matrix(self.path(name), ["metric", "value"], [])
        with (self.out / name).open("a") as fh:
            for k, v in metrics.items():
                fh.write(f"{k},{float(v):.17g}\n")

    def finish(self) -> dict[str, str]:
        digests = {}
        for name in sorted(set(self.files)):
            digests[name] = hashlib.sha256((self.out / name).read_bytes()).hexdigest()
        (self.out / MANIFEST).write_text(json.dumps({"files": digests}, indent=1, sort_keys=True) + "\n")
        return digests


def _kde_grid(bundle: Bundle, name: str, columns: dict[str, np.ndarray], grids: dict[str, np.ndarray], truth=None):
    """Long-form CSV: variable, x, one density column per sample source (+ truth)."""
    sources = list(columns)
    header = ["variable", "x", *sources] + (["truth"] if truth else [])
    rows = []
    for v, grid in grids.items():
        dens = [KdeEstimate(columns[s][v])(grid) for s in sources]
        tv = truth[v](grid) if truth else None
        for k, x in enumerate(grid):
            row = [v, f"{x:.17g}", *(f"{d[k]:.17g}" for d in dens)]
            if truth:
                row.append(f"{tv[k]:.17g}")
            rows.append(row)
    with bundle.path(name).open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


# --- joint-density experiment --------------------------------------------------


def joint_quadrature_moments(sigma: float, tau: float, omega: float) -> dict[str, float]:
    """E and Var of X, Y, Z under the true joint, by 1-D quadrature over the quartic marginal."""
    lognorm = quartic_log_norm()

    def expect(fn):
        val, _ = integrate.quad(lambda x: fn(x) * math.exp(lognorm - x**4), -np.inf, np.inf, epsabs=1e-13)
        return val

    ex2 = quartic_second_moment()
    ey = expect(lambda x: math.sin(2 * x) ** 3)
    ey2 = expect(lambda x: math.sin(2 * x) ** 6) + sigma**2
    ez = expect(lambda x: omega * math.sin(math.pi * x))
    ez2 = expect(lambda x: (omega * math.sin(math.pi * x)) ** 2) + tau**2
    return {
        "mean_x": 0.0,
        "var_x": ex2,
        "mean_y": ey,
        "var_y": ey2 - ey**2,
        "mean_z": ez,
        "var_z": ez2 - ez**2,
    }


def quartic_cdf(lo: float = -4.0, hi: float = 4.0):
    return grid_cdf(quartic_log_prob, lo, hi)


def _hist2d(bundle: Bundle, name: str, a: np.ndarray, b: np.ndarray, bins: int, labels: tuple[str, str]):
    lo_a, hi_a = np.quantile(a, [0.0005, 0.9995])
    lo_b, hi_b = np.quantile(b, [0.0005, 0.9995])
    h, ea, eb = np.histogram2d(a, b, bins=bins, range=[[lo_a, hi_a], [lo_b, hi_b]], density=True)
    ca, cb = 0.5 * (ea[1:] + ea[:-1]), 0.5 * (eb[1:] + eb[:-1])
    A, B = np.meshgrid(ca, cb, indexing="ij")
    write_csv_matrix(bundle.path(name), [*labels, "density"], np.column_stack([A.ravel(), B.ravel(), h.ravel()]))


def run_joint(cfg: JointConfig, out) -> dict[str, Any]:
    bundle = Bundle(out)
    bundle.write_json("config.json", config_to_dict(cfg))
    xy, xz = simulate_joint_subvectors(cfg.n1, cfg.n2, cfg.sigma, cfg.tau, cfg.omega, make_rng(sub_seed(cfg.seed, 1)))
    write_csv_matrix(bundle.path("data_xy.csv"), ["x", "y"], xy.rows)
    write_csv_matrix(bundle.path("data_xz.csv"), ["x", "z"], xz.rows)

    s1 = [dataclasses.replace(cfg.stage1, seed=sub_seed(cfg.seed, 2, k)) for k in range(2)]
    (g1, tr1), (g2, tr2) = fit_stage1([xy, xz], cfg.stage1_layers, s1)
    save_checkpoint(g1, bundle.path("stage1_xy.json"))
    save_checkpoint(g2, bundle.path("stage1_xz.json"))
    tr1.to_csv(bundle.path("stage1_xy_loss.csv"))
    tr2.to_csv(bundle.path("stage1_xz_loss.csv"))

    boxes = [None, None] if cfg.support_margin is None else [data_box(d.rows, cfg.support_margin) for d in (xy, xz)]
    parts = [(xy.spec, g1, boxes[0], cfg.support_wall), (xz.spec, g2, boxes[1], cfg.support_wall)]
    target = compose_target(QuarticReciprocal(1), (1,), parts, 3)
    model, tr = fit_stage2(target, cfg.stage2_layers, dataclasses.replace(cfg.stage2, seed=sub_seed(cfg.seed, 3)))
    save_checkpoint(model, bundle.path("stage2.json"))
    tr.to_csv(bundle.path("stage2_loss.csv"))

    samples = model.sample(cfg.n_samples, make_rng(sub_seed(cfg.seed, 4)))
    write_csv_matrix(bundle.path("samples.csv"), ["x", "y", "z"], samples)

    truth = joint_quadrature_moments(cfg.sigma, cfg.tau, cfg.omega)
    ks = ks_two_sample(samples[:, 0], quartic_cdf(), alpha=0.01)
    metrics = {}
    for k, v in enumerate("xyz"):
        metrics[f"mean_{v}"] = samples[:, k].mean()
        metrics[f"mean_{v}_truth"] = truth[f"mean_{v}"]
        metrics[f"var_{v}"] = samples[:, k].var(ddof=1)
        metrics[f"var_{v}_truth"] = truth[f"var_{v}"]
    metrics.update(
        ks_x_statistic=ks.statistic,
        ks_x_critical=ks.critical,
        ks_x_reject=float(ks.reject),
        stage2_final_loss=tr.losses[-1],
    )
    bundle.write_metrics("metrics.csv", metrics)

    cols = {"stage2": {v: samples[:, k] for k, v in enumerate("xyz")}}
    cols["data"] = {"x": np.concatenate([xy.rows[:, 0], xz.rows[:, 0]]), "y": xy.rows[:, 1], "z": xz.rows[:, 1]}
    grids = {v: np.linspace(*np.quantile(samples[:, k], [0.001, 0.999]), cfg.grid_points) for k, v in enumerate("xyz")}
    _kde_grid(bundle, "kde_grids.csv", cols, grids)
    _hist2d(bundle, "hist_xy.csv", samples[:, 0], samples[:, 1], cfg.hist_bins, ("x", "y"))
    _hist2d(bundle, "hist_xz.csv", samples[:, 0], samples[:, 2], cfg.hist_bins, ("x", "z"))
    _hist2d(bundle, "hist_yz.csv", samples[:, 1], samples[:, 2], cfg.hist_bins, ("y", "z"))
    bundle.finish()
    return {"metrics": metrics, "samples": samples, "model": model, "stage1": (g1, g2), "target": target}


# --- hierarchical experiment ---------------------------------------------------


def run_hier(cfg: HierConfig, out) -> dict[str, Any]:
    bundle = Bundle(out)
    bundle.write_json("config.json", config_to_dict(cfg))
    theta_true, y = simulate_hierarchical_data(cfg.J, cfg.gamma, cfg.sigma, cfg.tau, make_rng(sub_seed(cfg.seed, 1)))
    write_csv_matrix(
        bundle.path("data.csv"), ["group", "theta_true", "y"], np.column_stack([np.arange(1, cfg.J + 1), theta_true, y])
    )
    pool = sample_software_posterior(y, cfg.A, cfg.sigma, cfg.n_software, make_rng(sub_seed(cfg.seed, 2)))
    write_csv_matrix(bundle.path("software_draws.csv"), [f"theta_{i + 1}" for i in range(cfg.J)], pool)
    spec = SubvectorSpec("theta", tuple(range(1, cfg.J + 1)))

    # Stage 1
    s1 = dataclasses.replace(cfg.stage1, seed=sub_seed(cfg.seed, 3))
    [(g_hat, tr1)] = fit_stage1([SampleSet(spec, pool)], cfg.stage1_layers, s1)
    save_checkpoint(g_hat, bundle.path("stage1.json"))
    tr1.to_csv(bundle.path("stage1_loss.csv"))
    g_samples = g_hat.sample(cfg.n_samples, make_rng(sub_seed(cfg.seed, 4)))
    sm, sv = software_posterior_params(y, cfg.A, cfg.sigma)
    # The KS sample matches the pool size: a fit to n draws is only resolved to ~1/sqrt(n)
    ks_rows = g_samples[: cfg.n_software]
    stage1_ks = [
        ks_two_sample(ks_rows[:, i], lambda x, i=i: normal_cdf(x, sm[i], math.sqrt(sv[i])), alpha=0.01)
        for i in range(cfg.J)
    ]

    # Stage 2
    target = hierarchical_composition(g_hat, cfg.tau, cfg.A)
    model, tr2 = fit_stage2(target, cfg.stage2_layers, dataclasses.replace(cfg.stage2, seed=sub_seed(cfg.seed, 5)))
    save_checkpoint(model, bundle.path("stage2.json"))
    tr2.to_csv(bundle.path("stage2_loss.csv"))
    tsnf = model.sample(cfg.n_samples, make_rng(sub_seed(cfg.seed, 6)))
    names = [*(f"theta_{i + 1}" for i in range(cfg.J)), "gamma"]
    write_csv_matrix(bundle.path("tsnf_samples.csv"), names, tsnf)

    # TSFB on the same pool
    tcfg = TsfbConfig(
        iterations=cfg.tsfb_iterations, tau=cfg.tau, software_prior_sd=cfg.A, seed=sub_seed(cfg.seed, 7)
    )
    chain = tsfb_run(pool, tcfg)
    chain.to_csv(bundle.path("tsfb_chain.csv"))
    tsfb = chain.samples()

    oracle = GaussianHierOracle(tuple(y), cfg.sigma, cfg.tau)
    reports = {"tsnf": error_report(tsnf, oracle), "tsfb": error_report(tsfb, oracle)}
    write_error_table(bundle.path("error_table.csv"), reports, cfg.J)

    metrics = {}
    for name, r in reports.items():
        metrics[f"{name}_max_abs_mean_error"] = r.max_abs_mean()
        metrics[f"{name}_max_abs_sd_error"] = r.max_abs_sd()
        metrics[f"{name}_frobenius"] = r.frobenius
    acc = chain.acceptance_rate()
    for i in range(cfg.J):
        metrics[f"stage1_ks_theta_{i + 1}"] = stage1_ks[i].statistic
        metrics[f"tsfb_acceptance_theta_{i + 1}"] = acc[i]
    metrics["stage1_ks_critical"] = stage1_ks[0].critical
    metrics["stage2_final_loss"] = tr2.losses[-1]
    bundle.write_metrics("metrics.csv", metrics)

    means, sds = oracle.marginal_moments()
    grids = {v: np.linspace(means[k] - 5 * sds[k], means[k] + 5 * sds[k], cfg.grid_points) for k, v in enumerate(names)}
    cols = {
        "tsnf": {v: tsnf[:, k] for k, v in enumerate(names)},
        "tsfb": {v: tsfb[:, k] for k, v in enumerate(names)},
    }
    truth = {v: (lambda g, k=k: normal_pdf(g, means[k], sds[k] ** 2)) for k, v in enumerate(names)}
    _kde_grid(bundle, "kde_grids.csv", cols, grids, truth)
    bundle.finish()
    return {
        "metrics": metrics,
        "reports": reports,
        "oracle": oracle,
        "pool": pool,
        "stage1": g_hat,
        "stage1_ks": stage1_ks,
        "model": model,
        "tsnf": tsnf,
        "chain": chain,
        "target": target,
    }


# --- generic two-stage run from a spec document -------------------------------


@dataclass
class RunSpec:
    dim: int
    components: list[tuple[SubvectorSpec, np.ndarray]]
    analytic: Any
    analytic_indices: tuple[int, ...]
    mode: Any
    weights: list | None
    stage1_layers: list
    stage2_layers: list
    stage1: TrainConfig
    stage2: TrainConfig
    query: np.ndarray
    n_samples: int
    seed: int
    support_margin: float | None = None
    support_wall: float = 0.0


def load_run_spec(doc: dict, base_dir: Path = Path("."), seed: int | None = None) -> RunSpec:
    """Validate a two-stage spec document, collecting every problem before raising."""
    problems: list[str] = []
    base_dir = Path(base_dir)
    seed = int(doc.get("seed", 0) if seed is None else seed)

    dim = doc.get("dim")
    if not isinstance(dim, int) or dim < 1:
        problems.append(f"dim must be a positive integer, got {dim!r}")
        dim = None

    components = []
    for k, c in enumerate(doc.get("components", [])):
        where = f"components[{k}]"
        try:
            spec = SubvectorSpec(c.get("name", f"c{k}"), tuple(c["indices"]))
            if dim is not None:
                spec.check_within(dim)
        except (KeyError, TypeError, DataError) as exc:
            problems.append(f"{where}: bad index set: {exc}")
            continue
        if "data" not in c:
            problems.append(f"{where}: missing data file")
            continue
        path = base_dir / c["data"]
        if not path.exists():
            problems.append(f"{where}: data file {path} does not exist")
            continue
        try:
            _, rows = read_csv_matrix(path, spec.dim)
            SampleSet(spec, rows)
        except DataError as exc:
            problems.append(f"{where}: {exc}")
            continue
        components.append((spec, rows))

    a = doc.get("analytic", {"name": "flat"})
    analytic, a_idx = None, ()
    if a.get("name") not in ANALYTIC_TERMS:
        problems.append(f"analytic: unknown term {a.get('name')!r}; choose from {sorted(ANALYTIC_TERMS)}")
    else:
        a_idx = tuple(a.get("indices", ()))
        try:
            params = dict(a.get("params", {}))
            if a["name"] in ("flat", "quartic-reciprocal"):
                params.setdefault("dim", len(a_idx))
            analytic = make_analytic_term(a["name"], **params)
        except (TypeError, ValueError) as exc:
            problems.append(f"analytic: {exc}")

    combine = doc.get("combine", "product")
    mode, weights = combine, None
    if isinstance(combine, dict):
        mode, weights = combine.get("mode"), combine.get("weights")
    if mode not in ("product", "mixture"):
        problems.append(f"combine: mode must be 'product' or 'mixture', got {mode!r}")
    elif mode == "mixture":
        if weights is None or len(weights) != len(doc.get("components", [])):
            problems.append("combine: mixture mode needs one weight per component")
        elif abs(sum(weights) - 1.0) > 1e-12:
            problems.append(f"combine: mixture weights sum to {sum(weights)!r}, not 1")

    if dim is not None and not problems:
        covered = set(a_idx)
        for spec, _ in components:
            covered |= set(spec.indices)
        missing = sorted(set(range(1, dim + 1)) - covered)
        if missing:
            problems.append(f"index sets do not cover coordinates {missing}")
        if analytic is not None and analytic.dim != len(a_idx):
            problems.append(f"analytic: term has dim {analytic.dim} but {len(a_idx)} indices were given")

    stages = {}
    for name, layers_default in (("stage1", SPLINE_STAGE1), ("stage2", SPLINE_STAGE2)):
        st = doc.get(name, {})
        try:
            stages[name] = _train_config(st.get("train"), seed=seed)
        except ConfigError as exc:
            problems.append(f"{name}: {exc}")
        stages[name + "_layers"] = st.get("layers", [dict(d) for d in layers_default])
        for k, layer in enumerate(stages[name + "_layers"]):
            if layer.get("kind") not in ("actnorm", "permutation", "affine_coupling", "ar_rq_spline"):
                problems.append(f"{name}.layers[{k}]: unknown kind {layer.get('kind')!r}")

    query = np.zeros((0, dim or 1))
    q = doc.get("query")
    if isinstance(q, str):
        try:
            _, query = read_csv_matrix(base_dir / q, dim)
        except (OSError, DataError) as exc:
            problems.append(f"query: {exc}")
    elif isinstance(q, list):
        query = np.atleast_2d(np.asarray(q, dtype=np.float64))
        if dim is not None and query.shape[1] != dim:
            problems.append(f"query: points have {query.shape[1]} coordinates, expected {dim}")
    elif q is not None:
        problems.append("query: must be a CSV path or a list of points")

    margin = doc.get("support_margin")
    if margin is not None and (not isinstance(margin, (int, float)) or margin < 0):
        problems.append(f"support_margin must be a nonnegative number or null, got {margin!r}")
    wall = doc.get("support_wall", 0.0)
    if not isinstance(wall, (int, float)) or wall < 0:
        problems.append(f"support_wall must be a nonnegative number, got {wall!r}")

    if problems:
        raise ConfigError(problems)
    return RunSpec(
        dim=dim,
        components=components,
        analytic=analytic,
        analytic_indices=a_idx,
        mode=mode,
        weights=weights,
        stage1_layers=stages["stage1_layers"],
        stage2_layers=stages["stage2_layers"],
        stage1=stages["stage1"],
        stage2=stages["stage2"],
        query=query,
        n_samples=int(doc.get("n_samples", 10000)),
        seed=seed,
        support_margin=margin,
        support_wall=float(wall) if isinstance(wall, (int, float)) else 0.0,
    )


def run_two_stage(spec: RunSpec, out) -> dict[str, Any]:
    bundle = Bundle(out)
    sets = [SampleSet(s, rows) for s, rows in spec.components]
    configs = [dataclasses.replace(spec.stage1, seed=sub_seed(spec.seed, 2, k)) for k in range(len(sets))]
    fitted = fit_stage1(sets, spec.stage1_layers, configs)
    for (s, _), (g, tr) in zip(spec.components, fitted):
        save_checkpoint(g, bundle.path(f"stage1_{s.name}.json"))
        tr.to_csv(bundle.path(f"stage1_{s.name}_loss.csv"))
    def box(rows):
        return None if spec.support_margin is None else data_box(rows, spec.support_margin)

    target = compose_target(
        spec.analytic,
        spec.analytic_indices,
        [(s, g, box(rows), spec.support_wall) for (s, rows), (g, _) in zip(spec.components, fitted)],
        spec.dim,
        spec.mode,
        spec.weights,
    )
    model, tr = fit_stage2(target, spec.stage2_layers, dataclasses.replace(spec.stage2, seed=sub_seed(spec.seed, 3)))
    save_checkpoint(model, bundle.path("stage2.json"))
    tr.to_csv(bundle.path("stage2_loss.csv"))
    samples = model.sample(spec.n_samples, make_rng(sub_seed(spec.seed, 4)))
    cols = [f"x{i + 1}" for i in range(spec.dim)]
    write_csv_matrix(bundle.path("samples.csv"), cols, samples)
    routes = None
    if spec.query.shape[0]:
        composed, flow = density_routes(target, model, spec.query)
        routes = np.column_stack([spec.query, composed, flow])
        write_csv_matrix(bundle.path("density_routes.csv"), [*cols, "log_composed", "log_flow"], routes)
    bundle.finish()
    return {"model": model, "target": target, "stage1": [g for g, _ in fitted], "samples": samples, "routes": routes}


# --- oracle report -------------------------------------------------------------


def run_oracle_report(y, sigma: float, tau: float, out) -> dict[str, float]:
    from .oracle import quadrature_check

    bundle = Bundle(out)
    o = GaussianHierOracle(tuple(y), sigma, tau)
    means, sds = o.marginal_moments()
    names = [*(f"theta_{i + 1}" for i in range(o.J)), "gamma"]
    write_csv_matrix(bundle.path("marginals.csv"), ["parameter", "mean", "sd"], [])
    with (bundle.out / "marginals.csv").open("a") as fh:
        for n, m, s in zip(names, means, sds):
            fh.write(f"{n},{m:.17g},{s:.17g}\n")
    _, cov = o.theta_posterior()
    write_csv_matrix(bundle.path("theta_covariance.csv"), names[:-1], cov)
    quad = quadrature_check(o)
    metrics = {
        "quadrature_gamma_sup": quad["gamma_sup"],
        "quadrature_theta_sup": quad["theta_sup"],
        "inverse_identity_error": float(np.max(np.abs(cov @ o.theta_precision() - np.eye(o.J)))),
    }
    bundle.write_metrics("metrics.csv", metrics)
    bundle.finish()
    return metrics
