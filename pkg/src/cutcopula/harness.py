"""Experiment orchestration: configs, data simulation, replicate fitting and reports.

A run simulates ``S`` datasets, fits every enabled method to each, and
aggregates bias, RMSE, interval coverage and predictive KL divergences.
Replicate ``r`` draws its data from the stream ``SeedSequence(seed,
spawn_key=(r, 0))`` and method ``k`` (position in ``METHODS``) from
``spawn_key=(r, k + 1)``, so results do not depend on thread count or on
which other methods are enabled.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import platform
import time
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import repeat
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from cutcopula import evaluation as ev
from cutcopula import mcmc as _mcmc
from cutcopula import vi as _vi
from cutcopula.copulas import CopulaFamily, CopulaSpec, RankLikelihoodError, copula_sample
from cutcopula.marginals import MarginalSpec, marginal_quantile
from cutcopula.mcmc import MCMCSettings, OptimizationError, StuckChainError
from cutcopula.model import CopulaModel, Dataset, PriorSpec, PriorTerm
from cutcopula.vi import VISettings

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

__all__ = [
    "METHODS",
    "ConfigError",
    "ExperimentAborted",
    "ExperimentConfig",
    "ReplicateResult",
    "sim1_config",
    "sim2_config",
    "load_config",
    "simulate_dgp",
    "fit_replicate",
    "run_experiment",
    "metrics_from_draws",
]

log = logging.getLogger(__name__)

METHODS = ("uncut_mcmc", "cut_mcmc", "ifm", "uncut_vi", "cut_vi", "cut_vi_augmented")
METHOD_LABELS = {
    "uncut_mcmc": "Uncut/MCMC",
    "cut_mcmc": "Cut/MCMC",
    "ifm": "IFM",
    "uncut_vi": "Uncut/VI",
    "cut_vi": "Cut/VI",
    "cut_vi_augmented": "Cut/VI-aug",
}
FIT_ERRORS = (OptimizationError, StuckChainError, RankLikelihoodError, FloatingPointError)
MAX_FAILURE_FRACTION = 0.02


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class ExperimentAborted(RuntimeError):
    """Too many replicate fits failed."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a simulation run.

    Parameters
    ----------
    experiment : {"sim1", "sim2", "custom"}
    n : int
        Observations per dataset (>= 10).
    S : int
        Number of replicates (>= 1).
    seed : int
        Master seed.
    model : CopulaModel
        The fitted model.
    dgp_marginals : tuple of MarginalSpec
    dgp_copula : CopulaSpec
    methods : tuple of str
        Subset of ``METHODS``.
    cut_type : {"type1", "type2"}
    mcmc, vi : MCMCSettings, VISettings
    vi_draws : int
        Draws taken from fitted variational families for means and intervals.
    threads : int
        Replicates run in this many worker processes.
    out : str or None
        Output directory.
    save_draws : bool
        Also write constrained draws per replicate and method.
    """

    experiment: str
    n: int
    S: int
    seed: int
    model: CopulaModel
    dgp_marginals: tuple[MarginalSpec, ...]
    dgp_copula: CopulaSpec
    methods: tuple[str, ...] = METHODS[:5]
    cut_type: str = "type1"
    mcmc: MCMCSettings = field(default_factory=MCMCSettings)
    vi: VISettings = field(default_factory=VISettings)
    vi_draws: int = 10000
    threads: int = 1
    out: str | None = None
    save_draws: bool = False

    def __post_init__(self):
        if self.experiment not in ("sim1", "sim2", "custom"):
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.n < 10:
            raise ConfigError("n must be at least 10")
        if self.S < 1:
            raise ConfigError("S must be at least 1")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        methods = tuple(self.methods)
        unknown = set(methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {list(METHODS)}")
        if not methods:
            raise ConfigError("at least one method is required")
        object.__setattr__(self, "methods", tuple(m for m in METHODS if m in methods))
        if self.cut_type not in ("type1", "type2"):
            raise ConfigError("cut_type must be 'type1' or 'type2'")
        if len(self.dgp_marginals) != self.model.m:
            raise ConfigError("DGP and model need the same number of margins")
        if self.dgp_copula.dim != self.model.m:
            raise ConfigError("DGP copula dimension differs from the number of margins")
        if "cut_vi_augmented" in methods and self.cut_type != "type2":
            raise ConfigError("the augmented cut VI is a type-2 method")
        if self.mcmc.n_draws < 1 or self.mcmc.burn_in < 0:
            raise ConfigError("mcmc draws must be >= 1 and burn-in >= 0")
        if self.vi_draws < 2:
            raise ConfigError("vi_draws must be >= 2")

    # -- truth ---------------------------------------------------------------
    def truth(self) -> np.ndarray:
        """Constrained true values aligned with the model parameters (NaN if undefined)."""
        vals = []
        for fam, spec in zip(self.model.marginals, self.dgp_marginals):
            vals.extend(spec.params if spec.family is fam else (math.nan, math.nan))
        cop, dgp = self.model.copula, self.dgp_copula
        bivariate = (CopulaFamily.GAUSSIAN, CopulaFamily.GUMBEL, CopulaFamily.STUDENT_T)
        if cop is dgp.family:
            vals.extend(dgp.free_params())
        elif cop in bivariate and dgp.family in bivariate:
            # different families still share Kendall's tau as a target
            vals.append(dgp.tau)
        else:
            vals.extend([math.nan] * self.model.n_psi)
        return np.asarray(vals[: self.model.dim], dtype=float)

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "experiment": self.experiment,
            "n": self.n,
            "reps": self.S,
            "seed": self.seed,
            "methods": list(self.methods),
            "cut_type": self.cut_type,
            "threads": self.threads,
            "out": self.out,
            "save_draws": self.save_draws,
            "vi_draws": self.vi_draws,
            "mcmc": {k: v for k, v in asdict(self.mcmc).items() if v is not None},
            "vi": asdict(self.vi),
            "model": self.model.to_dict(),
            "dgp": {
                "marginals": [m.to_dict() for m in self.dgp_marginals],
                "copula": self.dgp_copula.to_dict(),
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        exp = d.get("experiment", "custom")
        base = {"sim1": sim1_config, "sim2": sim2_config}.get(exp)
        try:
            if "model" in d:
                model = CopulaModel.from_dict(d["model"])
            elif base is not None:
                model = base().model
            else:
                raise ConfigError("custom experiments need a [model] table")
            if "dgp" in d:
                dgp_m = tuple(MarginalSpec.from_dict(x) for x in d["dgp"]["marginals"])
                dgp_c = CopulaSpec.from_dict(d["dgp"]["copula"])
            elif base is not None:
                b = base()
                dgp_m, dgp_c = b.dgp_marginals, b.dgp_copula
            else:
                raise ConfigError("custom experiments need a [dgp] table")
            defaults = base() if base is not None else None
            mcmc = MCMCSettings(**d["mcmc"]) if "mcmc" in d else (
                defaults.mcmc if defaults else MCMCSettings()
            )
            vi = VISettings(**d["vi"]) if "vi" in d else (defaults.vi if defaults else VISettings())
            return cls(
                experiment=exp,
                n=int(d.get("n", defaults.n if defaults else 1000)),
                S=int(d.get("reps", d.get("S", defaults.S if defaults else 1))),
                seed=int(d.get("seed", 0)),
                model=model,
                dgp_marginals=dgp_m,
                dgp_copula=dgp_c,
                methods=tuple(d.get("methods", METHODS[:5])),
                cut_type=d.get("cut_type", defaults.cut_type if defaults else "type1"),
                mcmc=mcmc,
                vi=vi,
                vi_draws=int(d.get("vi_draws", 10000)),
                threads=int(d.get("threads", 1)),
                out=d.get("out"),
                save_draws=bool(d.get("save_draws", False)),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc


def sim1_config(**overrides) -> ExperimentConfig:
    """Correct lognormal/gamma margins, Gumbel copula fitted to Student-t (nu=1) data."""
    priors = PriorSpec({
        "mu_1": PriorTerm("normal", 0.0, 100.0),
        "sigma2_1": PriorTerm("half_normal", 0.0, 100.0),
        "alpha_2": PriorTerm("log_normal", 0.0, 3.0),
        "beta_2": PriorTerm("log_normal", 0.0, 3.0),
        "tau": PriorTerm.uniform_tau(0.0, 1.0),
    })
    cfg = ExperimentConfig(
        experiment="sim1",
        n=1000,
        S=200,
        seed=0,
        model=CopulaModel(("lognormal", "gamma"), "gumbel", priors),
        dgp_marginals=(MarginalSpec("lognormal", (1.0, 1.0)), MarginalSpec("gamma", (7.0, 3.0))),
        dgp_copula=CopulaSpec("student_t", tau=0.7, df=1.0),
        cut_type="type1",
    )
    return replace(cfg, **overrides) if overrides else cfg


def sim2_config(**overrides) -> ExperimentConfig:
    """Positive truncated-normal margins fitted to lognormal/gamma data, correct Gumbel copula."""
    priors = PriorSpec({
        "mu_1": PriorTerm("normal", 0.0, 100.0),
        "sigma2_1": PriorTerm("log_normal", 0.0, 1.5),
        "mu_2": PriorTerm("normal", 0.0, 100.0),
        "sigma2_2": PriorTerm("log_normal", 0.0, 1.5),
        "tau": PriorTerm("logit_tau_normal", 0.0, 1.5),
    })
    cfg = ExperimentConfig(
        experiment="sim2",
        n=1000,
        S=200,
        seed=0,
        model=CopulaModel(("truncated_normal_positive",) * 2, "gumbel", priors),
        dgp_marginals=(MarginalSpec("lognormal", (1.0, 1.0)), MarginalSpec("gamma", (7.0, 3.0))),
        dgp_copula=CopulaSpec("gumbel", tau=0.7),
        methods=("uncut_mcmc", "cut_mcmc", "uncut_vi", "cut_vi"),
        cut_type="type2",
    )
    return replace(cfg, **overrides) if overrides else cfg


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read a TOML config, or the JSON manifest written by a previous run."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    if path.suffix == ".json":
        d = json.loads(path.read_text())
        d = d.get("config", d)
    else:
        try:
            d = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_dict(d)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def simulate_dgp(config: ExperimentConfig, replicate_index: int) -> Dataset:
    """Dataset ``replicate_index``: copula draws mapped through the true quantiles."""
    rng = _stream(config.seed, replicate_index, 0)
    u = copula_sample(config.dgp_copula, config.n, rng)
    cols = [marginal_quantile(spec, u[:, j]) for j, spec in enumerate(config.dgp_marginals)]
    return Dataset(np.column_stack(cols))


@dataclass(frozen=True, eq=False)
class ReplicateResult:
    """Per-method output for one dataset.

    ``estimates`` and ``intervals`` are on the constrained scale; ``draws``
    is populated only when the config asks for saved draws.
    """

    index: int
    estimates: dict[str, np.ndarray]
    intervals: dict[str, np.ndarray]
    draws: dict[str, np.ndarray]
    failures: dict[str, str]
    seconds: dict[str, float]


def _fit_method(config: ExperimentConfig, method: str, data: Dataset, rng):
    """Constrained draws (or a single point for IFM) from one method."""
    model = config.model
    if method == "ifm":
        return model.to_constrained(_mcmc.ifm_fit(model, data).z)[None, :]
    if method in ("uncut_mcmc", "cut_mcmc"):
        cut = None if method == "uncut_mcmc" else config.cut_type
        s = _mcmc.fit_mcmc(model, data, cut, config.mcmc, rng=rng)
        return model.to_constrained(s.draws)
    if method == "uncut_vi":
        res = _vi.fit_vi(model, data, config.vi, rng=rng)
    elif method == "cut_vi":
        res = _vi.fit_cut_vi(model, data, config.cut_type, config.vi, rng=rng)
    else:
        res = _vi.fit_augmented_type2_vi(model, data, config.vi, rng=rng)
    return model.to_constrained(res.sample(rng, config.vi_draws))


def fit_replicate(config: ExperimentConfig, index: int) -> ReplicateResult:
    data = simulate_dgp(config, index)
    estimates, intervals, draws, failures, seconds = {}, {}, {}, {}, {}
    for method in config.methods:
        k = METHODS.index(method)
        rng = _stream(config.seed, index, k + 1)
        t0 = time.perf_counter()
        try:
            x = _fit_method(config, method, data, rng)
        except FIT_ERRORS as exc:
            failures[method] = f"{type(exc).__name__}: {exc}"
            log.warning("replicate %d, %s failed: %s", index, method, exc)
            continue
        finally:
            seconds[method] = time.perf_counter() - t0
        estimates[method] = x.mean(axis=0)
        intervals[method] = np.percentile(x, [2.5, 97.5], axis=0)
        if config.save_draws:
            draws[method] = x
    return ReplicateResult(index, estimates, intervals, draws, failures, seconds)


def _kl_components(config: ExperimentConfig, estimate: np.ndarray) -> dict[str, float]:
    model = config.model
    out = {}
    for j, (fam, true_spec) in enumerate(zip(model.marginals, config.dgp_marginals)):
        fitted = MarginalSpec(fam, tuple(estimate[2 * j: 2 * j + 2]))
        out[f"f{j + 1}"] = ev.predictive_kl_marginal(fitted, true_spec)
    if model.dim > model.n_theta and model.m == 2 and model.copula is not CopulaFamily.GAUSSIAN_M:
        fitted_c = CopulaSpec(model.copula, tau=float(estimate[model.n_theta]), df=model.df)
        out["c"] = ev.predictive_kl_copula(fitted_c, config.dgp_copula)
    return out


def _report(config: ExperimentConfig, method: str, results: Sequence[ReplicateResult]):
    ok = [r for r in results if method in r.estimates]
    truth = config.truth()
    keep = np.isfinite(truth)
    names = tuple(n for n, k in zip(config.model.param_names, keep) if k)
    est = np.array([r.estimates[method] for r in ok])
    if len(ok) >= 2:
        bias, rmse = ev.point_metrics(est[:, keep], truth[keep])
    else:
        err = est[:, keep] - truth[keep]
        bias, rmse = err.mean(axis=0), np.sqrt(np.mean(err * err, axis=0))
    coverage = None
    if method != "ifm":
        iv = np.array([r.intervals[method] for r in ok])[:, :, keep]
        coverage = np.mean((iv[:, 0] <= truth[keep]) & (truth[keep] <= iv[:, 1]), axis=0)
    kls = [_kl_components(config, e) for e in est]
    kl = {k: float(np.mean([d[k] for d in kls])) for k in kls[0]} if kls else {}
    return ev.MetricsReport(
        METHOD_LABELS[method], names, bias, rmse, coverage, kl, config.n, len(ok), config.seed
    )


def _csv_bytes(rows: list[dict]) -> bytes:
    buf = io.StringIO()
    fields = ["method", "parameter", "metric", "value", "n", "S", "seed"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({**row, "value": repr(float(row["value"]))})
    return buf.getvalue().encode()


def run_experiment(config: ExperimentConfig, progress: bool = False) -> dict[str, Any]:
    """Run all replicates and write ``metrics.csv``, ``metrics.json`` and ``manifest.json``.

    Returns a dict with the reports, rows, per-replicate results and output
    paths.

    Raises
    ------
    ExperimentAborted
        If any method fails on more than 2% of replicates.
    """
    t0 = time.time()
    indices = range(config.S)
    if config.threads == 1:
        results = []
        for i in indices:
            results.append(fit_replicate(config, i))
            if progress:
                log.info("replicate %d/%d done", i + 1, config.S)
    else:
        # Worker processes rather than threads: jax host callbacks can deadlock
        # when several Python threads dispatch computations at once.
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=config.threads, mp_context=ctx) as pool:
            results = list(pool.map(fit_replicate, repeat(config), indices))
    failures = {m: [(r.index, r.failures[m]) for r in results if m in r.failures] for m in config.methods}
    for m, f in failures.items():
        if len(f) > MAX_FAILURE_FRACTION * config.S:
            raise ExperimentAborted(
                f"{m} failed on {len(f)} of {config.S} replicates (first: replicate {f[0][0]}: {f[0][1]})"
            )
    reports = [_report(config, m, results) for m in config.methods]
    rows = [row for rep in reports for row in rep.rows()]
    manifest = {
        "config": config.to_dict(),
        "seed_scheme": "SeedSequence(seed, spawn_key=(replicate, 0)) for data, (replicate, k+1) for METHODS[k]",
        "methods_order": list(METHODS),
        "failures": {m: [list(x) for x in f] for m, f in failures.items()},
        "wall_clock_seconds": time.time() - t0,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    out = {"reports": reports, "rows": rows, "results": results, "manifest": manifest, "paths": {}}
    if config.out:
        odir = Path(config.out)
        odir.mkdir(parents=True, exist_ok=True)
        (odir / "metrics.csv").write_bytes(_csv_bytes(rows))
        (odir / "metrics.json").write_text(json.dumps({"rows": rows, "manifest": manifest}, indent=2))
        (odir / "manifest.json").write_text(json.dumps(manifest, indent=2))
        out["paths"] = {"csv": odir / "metrics.csv", "json": odir / "metrics.json",
                        "manifest": odir / "manifest.json"}
        if config.save_draws:
            ddir = odir / "draws"
            ddir.mkdir(exist_ok=True)
            for r in results:
                for m, x in r.draws.items():
                    np.save(ddir / f"rep{r.index:04d}_{m}.npy", x)
            out["paths"]["draws"] = ddir
    return out


def metrics_from_draws(draws_dir: str | os.PathLike) -> dict[str, Any]:
    """Recompute reports from a run directory containing ``manifest.json`` and ``draws/``."""
    root = Path(draws_dir)
    if root.name == "draws":
        root = root.parent
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    config = load_config(manifest_path)
    ddir = root / "draws"
    if not ddir.is_dir():
        raise FileNotFoundError(f"no draws directory in {root}")
    results = []
    for i in range(config.S):
        est, iv = {}, {}
        for m in config.methods:
            f = ddir / f"rep{i:04d}_{m}.npy"
            if f.is_file():
                x = np.load(f)
                est[m] = x.mean(axis=0)
                iv[m] = np.percentile(x, [2.5, 97.5], axis=0)
        results.append(ReplicateResult(i, est, iv, {}, {}, {}))
    methods = [m for m in config.methods if any(m in r.estimates for r in results)]
    reports = [_report(config, m, results) for m in methods]
    rows = [row for rep in reports for row in rep.rows()]
    (root / "metrics_recomputed.csv").write_bytes(_csv_bytes(rows))
    return {"reports": reports, "rows": rows, "path": root / "metrics_recomputed.csv"}


def summary_table(rows: list[dict]) -> str:
    """Plain-text pivot: one line per (parameter, metric), one column per method."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    keys = list(dict.fromkeys((r["parameter"], r["metric"]) for r in rows))
    val = {(r["method"], r["parameter"], r["metric"]): r["value"] for r in rows}
    width = max(12, *(len(m) + 2 for m in methods))
    lines = [f"{'parameter':<10}{'metric':<10}" + "".join(f"{m:>{width}}" for m in methods)]
    for p, metric in keys:
        cells = "".join(
            f"{val[(m, p, metric)]:>{width}.4f}" if (m, p, metric) in val else " " * width
            for m in methods
        )
        lines.append(f"{p:<10}{metric:<10}{cells}")
    return "\n".join(lines)
