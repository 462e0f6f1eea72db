"""Repetition harness: draw data, fit model variants, score, and report.

One repetition draws fresh quasi-random training sets for every source,
corrupts them with the study's noise level, fits each requested variant,
and scores mean squared error on per-source noisy test sets.  Calibration
estimates, latent distances to the high-fidelity source, and estimated
noise variances are recorded alongside.  Everything is keyed off the
master seed and the repetition index, so reports are reproducible row
for row regardless of execution order or parallelism.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .bench import BenchmarkProblem, add_noise, get_problem, mse, scale_to_bounds, sobol_points
from .data import EncodingStrategy, SourceDataset, assemble_fusion, single_source_dataset
from .koh import koh_fit
from .predict import LmgpModel
from .train import TrainConfig, fit_lmgp

__all__ = [
    "VariantSpec",
    "RepetitionConfig",
    "MetricReport",
    "run_repetitions",
    "latent_report",
    "parse_variant",
]

# salt offsets separating the independent random streams of one repetition
_SALT_TRAIN = 0
_SALT_TRAIN_NOISE = 100
_SALT_TEST = 200
_SALT_TEST_NOISE = 300
_SALT_FIT = 400


@dataclass(frozen=True)
class VariantSpec:
    """One model variant to run in a study.

    kind "lmgp" fuses the high-fidelity source with the listed low-fidelity
    sources (all of them when unset); "gp" fits the high-fidelity data
    alone; "koh" calibrates exactly one low-fidelity source against the
    high-fidelity data.
    """

    kind: str
    strategy: EncodingStrategy = EncodingStrategy.SINGLE
    sources: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("lmgp", "gp", "koh"):
            raise ValueError(f"unknown variant kind {self.kind!r}")
        object.__setattr__(self, "strategy", EncodingStrategy(self.strategy))
        if self.sources is not None:
            object.__setattr__(self, "sources", tuple(self.sources))
        if self.kind == "koh" and (self.sources is None or len(self.sources) != 1):
            raise ValueError("koh variants take exactly one low-fidelity source")

    @property
    def name(self) -> str:
        if self.kind == "gp":
            return "gp"
        subset = "all" if self.sources is None else "_".join(self.sources)
        if self.kind == "koh":
            return f"koh_{subset}"
        tag = "s" if self.strategy == EncodingStrategy.SINGLE else "m"
        return f"lmgp_{tag}_{subset}"


def parse_variant(name: str) -> VariantSpec:
    """Parse names like ``lmgp_s_all``, ``lmgp_m_l1``, ``gp``, ``koh_l2``."""
    parts = name.split("_")
    if parts[0] == "gp" and len(parts) == 1:
        return VariantSpec("gp")
    if parts[0] == "koh" and len(parts) == 2:
        return VariantSpec("koh", sources=(parts[1],))
    if parts[0] == "lmgp" and len(parts) >= 3:
        strategy = {"s": EncodingStrategy.SINGLE, "m": EncodingStrategy.PER_SOURCE}.get(parts[1])
        if strategy is not None:
            rest = parts[2:]
            sources = None if rest == ["all"] else tuple(rest)
            return VariantSpec("lmgp", strategy=strategy, sources=sources)
    raise ValueError(f"cannot parse variant name {name!r}")


@dataclass(frozen=True)
class RepetitionConfig:
    """Settings of one repeated-training study."""

    sample_sizes: dict
    variants: tuple
    n_reps: int = 30
    noise_variance: float = 0.0
    n_test: int = 10000
    master_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    n_jobs: int | None = None

    def __post_init__(self):
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")
        if any(v < 1 for v in self.sample_sizes.values()):
            raise ValueError("sample sizes must be at least 1")
        variants = tuple(
            v if isinstance(v, VariantSpec) else parse_variant(v) for v in self.variants
        )
        object.__setattr__(self, "variants", variants)

    def to_dict(self) -> dict:
        return {
            "sample_sizes": dict(self.sample_sizes),
            "variants": [v.name for v in self.variants],
            "n_reps": self.n_reps,
            "noise_variance": self.noise_variance,
            "n_test": self.n_test,
            "master_seed": self.master_seed,
            "train": self.train.to_dict(),
        }


class MetricReport:
    """Tidy per-repetition results: problem, variant, rep, metric, target, value."""

    COLUMNS = ("problem", "variant", "rep", "metric", "target", "value")

    def __init__(self, problem: str, rows=None, latent_rows=None):
        self.problem = problem
        self.rows = list(rows or [])
        self.latent_rows = list(latent_rows or [])  # (variant, rep, source, z1, z2)

    def add(self, variant, rep, metric, target, value):
        self.rows.append({
            "problem": self.problem, "variant": variant, "rep": rep,
            "metric": metric, "target": target, "value": float(value),
        })

    def values(self, variant, metric, target=None) -> np.ndarray:
        out = [
            r["value"] for r in self.rows
            if r["variant"] == variant and r["metric"] == metric
            and (target is None or r["target"] == target)
        ]
        return np.asarray(out, dtype=float)

    def summary(self) -> dict:
        """Median and quartiles per (variant, metric, target)."""
        keys = sorted({(r["variant"], r["metric"], r["target"]) for r in self.rows})
        out = {}
        for variant, metric, target in keys:
            vals = self.values(variant, metric, target)
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            out[f"{variant}|{metric}|{target}"] = {
                "n": int(vals.size), "median": float(med),
                "q1": float(q1), "q3": float(q3),
            }
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for r in self.rows:
                writer.writerow([r["problem"], r["variant"], r["rep"],
                                 r["metric"], r["target"], repr(r["value"])])

    def summary_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"problem": self.problem, "summary": self.summary()}, fh, indent=2)

    def latent_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "rep", "source", "z1", "z2"])
            for variant, rep, source, z1, z2 in self.latent_rows:
                writer.writerow([variant, rep, source, repr(z1), repr(z2)])


def latent_report(fit, labels):
    """Pairwise latent distances and correlation attenuation factors.

    Returns (distance matrix, exp(-d^2) factor matrix) over the canonical
    source positions.
    """
    P = np.asarray(fit.canonical_positions, dtype=float)
    if P.shape[0] != len(labels):
        raise ValueError("label count does not match the latent positions")
    diff = P[:, None, :] - P[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return dist, np.exp(-dist ** 2)


# ---------------------------------------------------------------------------
# One repetition
# ---------------------------------------------------------------------------

def _draw_training(problem: BenchmarkProblem, config: RepetitionConfig, rep: int) -> dict:
    """Per-source training draws with noise; calibration inputs are sampled
    jointly with x through one quasi-random stream per source."""
    out = {}
    for idx, label in enumerate(problem.labels):
        n = config.sample_sizes[label]
        with_theta = label in problem.parameterized
        d = problem.d_x + (problem.d_theta if with_theta else 0)
        unit = sobol_points(n, d, rep, config.master_seed, salt=_SALT_TRAIN + idx)
        x = scale_to_bounds(unit[:, : problem.d_x], problem.x_bounds)
        theta = None
        if with_theta:
            theta = scale_to_bounds(unit[:, problem.d_x:], problem.theta_bounds)
        y = problem.eval(label, x, theta)
        y = add_noise(y, config.noise_variance,
                      np.random.SeedSequence((config.master_seed, rep, _SALT_TRAIN_NOISE + idx)))
        out[label] = SourceDataset(label, x, y, calib_inputs=theta)
    return out


def _draw_tests(problem: BenchmarkProblem, config: RepetitionConfig, rep: int) -> dict:
    """Per-source noisy test sets of size n_test."""
    out = {}
    for idx, label in enumerate(problem.labels):
        with_theta = label in problem.parameterized
        d = problem.d_x + (problem.d_theta if with_theta else 0)
        unit = sobol_points(config.n_test, d, rep, config.master_seed, salt=_SALT_TEST + idx)
        x = scale_to_bounds(unit[:, : problem.d_x], problem.x_bounds)
        theta = None
        if with_theta:
            theta = scale_to_bounds(unit[:, problem.d_x:], problem.theta_bounds)
        y = problem.eval(label, x, theta)
        y = add_noise(y, config.noise_variance,
                      np.random.SeedSequence((config.master_seed, rep, _SALT_TEST_NOISE + idx)))
        out[label] = (x, theta, y)
    return out


def _variant_sources(problem, spec: VariantSpec):
    if spec.sources is None:
        return list(problem.low_fidelity)
    unknown = set(spec.sources) - set(problem.low_fidelity)
    if unknown:
        raise ValueError(f"variant {spec.name}: unknown sources {sorted(unknown)}")
    return list(spec.sources)


def _run_one_rep(problem, config, rep):
    rows = []
    latent_rows = []
    training = _draw_training(problem, config, rep)
    tests = _draw_tests(problem, config, rep)
    hf = problem.high_fidelity

    for vidx, spec in enumerate(config.variants):
        seed = int(np.random.SeedSequence(
            (config.master_seed, rep, _SALT_FIT + vidx)).generate_state(1)[0])
        train_cfg = replace(config.train, seed=seed)
        record = lambda metric, target, value: rows.append({
            "problem": problem.name, "variant": spec.name, "rep": rep,
            "metric": metric, "target": target, "value": float(value),
        })
        try:
            if spec.kind == "gp":
                dataset = single_source_dataset(training[hf])
                model = LmgpModel(dataset, fit_lmgp(dataset, train_cfg))
                x, _, y = tests[hf]
                record("mse", hf, mse(model.predict_mean(x, hf), y))
                record("noise_variance", "", model.noise_variance())
                record("objective", "", model.fit.objective)
            elif spec.kind == "lmgp":
                low = _variant_sources(problem, spec)
                sources = [training[hf]] + [training[l] for l in low]
                theta_bounds = None
                if problem.d_theta and any(l in problem.parameterized for l in low):
                    theta_bounds = (problem.theta_bounds[:, 0], problem.theta_bounds[:, 1])
                dataset = assemble_fusion(sources, hf, spec.strategy, theta_bounds=theta_bounds)
                fit = fit_lmgp(dataset, train_cfg)
                model = LmgpModel(dataset, fit)
                for label in [hf] + low:
                    x, theta, y = tests[label]
                    record("mse", label, mse(model.predict_mean(x, label, theta), y))
                if dataset.has_calibration:
                    theta_hat = dataset.scaler.unscale_theta(fit.params.theta_hat[None, :])[0]
                    for k, val in enumerate(theta_hat):
                        record("theta_hat", f"theta{k + 1}", val)
                for i, label in enumerate(low, start=1):
                    record("latent_distance", label,
                           float(np.hypot(*(fit.canonical_positions[0]
                                            - fit.canonical_positions[i]))))
                for i, label in enumerate([hf] + low):
                    z = fit.canonical_positions[i]
                    latent_rows.append((spec.name, rep, label, float(z[0]), float(z[1])))
                record("noise_variance", "", model.noise_variance())
                record("objective", "", fit.objective)
            else:  # koh
                label = spec.sources[0]
                theta_bounds = (problem.theta_bounds[:, 0], problem.theta_bounds[:, 1])
                model = koh_fit(training[label], training[hf], train_cfg,
                                theta_bounds=theta_bounds)
                x, _, y = tests[hf]
                pred, _ = model.predict_high(x)
                record("mse", hf, mse(pred, y))
                for k, val in enumerate(model.theta_star_hat):
                    record("theta_hat", f"theta{k + 1}", val)
                record("noise_variance", "", model.noise_variance())
                record("objective", "", model.objective)
        except Exception as exc:  # noqa: BLE001 - per-rep failures are recorded, not fatal
            record("fit_failed", type(exc).__name__, 1.0)
    return rows, latent_rows


def run_repetitions(problem, config: RepetitionConfig) -> MetricReport:
    """Run the full repeated study and collect a tidy report."""
    if isinstance(problem, str):
        problem = get_problem(problem)
    missing = set(problem.labels) - set(config.sample_sizes)
    if missing:
        raise ValueError(f"sample_sizes missing entries for {sorted(missing)}")
    for spec in config.variants:
        if spec.kind in ("lmgp", "koh"):
            _variant_sources(problem, spec)
        if spec.kind == "koh" and problem.d_theta == 0:
            raise ValueError("koh variants need a calibration problem")

    n_jobs = config.n_jobs
    if n_jobs is None:
        n_jobs = int(os.environ.get("LMGP_NUM_THREADS", "1"))
    reps = range(config.n_reps)
    if n_jobs != 1:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_one_rep)(problem, config, rep) for rep in reps
        )
    else:
        results = [_run_one_rep(problem, config, rep) for rep in reps]

    report = MetricReport(problem.name)
    for rows, latent_rows in results:
        report.rows.extend(rows)
        report.latent_rows.extend(latent_rows)
    return report
