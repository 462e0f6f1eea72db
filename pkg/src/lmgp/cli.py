"""Command-line interface: fit, predict, koh-fit, benchmark, latent.

Jobs are described by JSON manifests (schema-checked, unknown keys
rejected), tabular data moves through CSV, and models serialize to JSON.
Exit codes: 0 success, 1 numerical failure, 2 I/O failure, 3 validation
failure.  Errors are emitted as a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .bench import PROBLEMS, get_problem, source_accuracy
from .data import EncodingStrategy, read_source_csv, assemble_fusion
from .harness import MetricReport, RepetitionConfig, latent_report, run_repetitions
from .koh import koh_fit
from .predict import LmgpModel
from .train import TrainConfig, fit_lmgp

EXIT_NUMERIC = 1
EXIT_IO = 2
EXIT_SCHEMA = 3


class ManifestError(ValueError):
    """Raised when a job manifest fails validation."""


def _fail(kind, message, code):
    json.dump({"error": {"kind": kind, "message": str(message)}}, sys.stderr)
    sys.stderr.write("\n")
    return code


def _check_keys(doc, allowed, required, where):
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ManifestError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(doc)
    if missing:
        raise ManifestError(f"{where}: missing keys {sorted(missing)}")


def _load_manifest(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    return doc


def _train_config(doc, seed_override=None):
    allowed = {"n_starts", "max_iterations", "gradient_mode", "tol", "seed"}
    _check_keys(doc, allowed, (), "train")
    try:
        cfg = TrainConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"train: {exc}") from exc
    if seed_override is not None:
        cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed_override})
    return cfg


def _theta_bounds(doc):
    _check_keys(doc, {"min", "max"}, {"min", "max"}, "theta_bounds")
    lo = np.asarray(doc["min"], dtype=float)
    hi = np.asarray(doc["max"], dtype=float)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ManifestError("theta_bounds: max must exceed min elementwise")
    return lo, hi


def _read_sources(doc):
    if not isinstance(doc, list) or not doc:
        raise ManifestError("sources must be a non-empty list")
    out = []
    for entry in doc:
        _check_keys(entry, {"label", "path"}, {"label", "path"}, "sources[]")
        out.append(read_source_csv(entry["path"], label=entry["label"]))
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    doc = _load_manifest(args.manifest)
    _check_keys(doc, {"sources", "high_fidelity", "strategy", "theta_bounds", "train", "out"},
                {"sources", "high_fidelity"}, "manifest")
    sources = _read_sources(doc["sources"])
    strategy = EncodingStrategy(doc.get("strategy", args.strategy or "single"))
    bounds = _theta_bounds(doc["theta_bounds"]) if "theta_bounds" in doc else None
    cfg = _train_config(doc.get("train", {}), seed_override=args.seed)
    dataset = assemble_fusion(sources, doc["high_fidelity"], strategy, theta_bounds=bounds)
    model = LmgpModel(dataset, fit_lmgp(dataset, cfg))

    out_dir = args.out or doc.get("out", ".")
    os.makedirs(out_dir, exist_ok=True)
    model_path = os.path.join(out_dir, "model.json")
    latent_path = os.path.join(out_dir, "latent.csv")
    model.save(model_path)
    _write_latent_csv(latent_path, model)
    print(json.dumps({"model": model_path, "latent": latent_path,
                      "objective": model.fit.objective}))
    return 0


def _write_latent_csv(path, model):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "z1", "z2"])
        for (label, _), z in zip(model.dataset.source_registry, model.fit.canonical_positions):
            writer.writerow([label, repr(float(z[0])), repr(float(z[1]))])


def cmd_predict(args) -> int:
    model = LmgpModel.load(args.model)
    with open(args.queries, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [row for row in reader if row]
    out_path = args.out or "predictions.csv"
    if header is None:
        raise ManifestError("query file is empty (missing header)")
    header = [h.strip() for h in header]
    x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    th_cols = [i for i, h in enumerate(header) if h.startswith("th")]
    try:
        src_col = header.index("source")
    except ValueError:
        raise ManifestError("query file needs a 'source' column") from None
    if len(x_cols) != model.dataset.d_x:
        raise ManifestError(
            f"query file has {len(x_cols)} input columns, model expects {model.dataset.d_x}"
        )

    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header + ["mean", "variance"])
        for row in rows:
            x = np.asarray([float(row[i]) for i in x_cols])[None, :]
            theta = None
            if th_cols:
                vals = [float(row[i]) for i in th_cols]
                if not any(np.isnan(v) for v in vals):
                    theta = np.asarray(vals)[None, :]
            label = row[src_col]
            mean = model.predict_mean(x, label, theta)
            var = model.predict_var(x, label, theta)
            writer.writerow(row + [repr(float(mean)), repr(float(var))])
    print(json.dumps({"predictions": out_path, "rows": len(rows)}))
    return 0


def cmd_koh_fit(args) -> int:
    doc = _load_manifest(args.manifest)
    _check_keys(doc, {"sources", "high_fidelity", "theta_bounds", "train", "out"},
                {"sources", "high_fidelity"}, "manifest")
    sources = _read_sources(doc["sources"])
    if len(sources) != 2:
        raise ManifestError("koh-fit takes exactly two sources")
    by_label = {s.label: s for s in sources}
    if doc["high_fidelity"] not in by_label:
        raise ManifestError(f"unknown high-fidelity label {doc['high_fidelity']!r}")
    high = by_label.pop(doc["high_fidelity"])
    (low,) = by_label.values()
    bounds = _theta_bounds(doc["theta_bounds"]) if "theta_bounds" in doc else None
    cfg = _train_config(doc.get("train", {}), seed_override=args.seed)
    model = koh_fit(low, high, cfg, theta_bounds=bounds)

    out_dir = args.out or doc.get("out", ".")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "koh_model.json")
    payload = model.to_dict()
    payload["theta_star_natural"] = model.theta_star_hat.tolist()
    with open(path, "w") as fh:
        json.dump(payload, fh)
    print(json.dumps({"model": path, "theta_star": model.theta_star_hat.tolist(),
                      "objective": model.objective}))
    return 0


def cmd_latent(args) -> int:
    model = LmgpModel.load(args.model)
    labels = list(model.dataset.labels)
    dist, factors = latent_report(model.fit, labels)
    if args.out:
        _write_latent_csv(args.out, model)
    print(json.dumps({
        "sources": labels,
        "positions": model.fit.canonical_positions.tolist(),
        "distances": dist.tolist(),
        "correlation_factors": factors.tolist(),
    }))
    return 0


_TABLE_TARGETS = {
    "rational1d": (0.23364, 0.14626, 0.72549),
    "wingweight": (0.19912, 1.1423, 5.7484),
    "borehole": (3.6671, 1.3688, 0.36232),
    "rationalcalib": (0.22241, 0.1285),
    "boreholecalib": (0.049219, 0.19838),
}


def cmd_benchmark(args) -> int:
    if args.problem == "table-rrmse":
        out = {}
        for name, targets in _TABLE_TARGETS.items():
            acc = source_accuracy(name)
            out[name] = {
                label: {"rrmse": val, "reference": ref}
                for (label, val), ref in zip(acc.items(), targets)
            }
        print(json.dumps(out, indent=2))
        return 0

    problem = get_problem(args.problem)
    if args.manifest:
        doc = _load_manifest(args.manifest)
        allowed = {"problem", "sample_sizes", "variants", "n_reps", "noise_variance",
                   "n_test", "master_seed", "train", "out"}
        _check_keys(doc, allowed, (), "manifest")
        if "problem" in doc and doc["problem"] != args.problem:
            raise ManifestError("manifest problem differs from --problem")
        sizes = doc.get("sample_sizes", problem.default_sizes)
        variants = doc.get("variants", _default_variants(problem))
        config = RepetitionConfig(
            sample_sizes=sizes,
            variants=tuple(variants),
            n_reps=int(doc.get("n_reps", args.reps)),
            noise_variance=float(doc.get("noise_variance", problem.default_noise)),
            n_test=int(doc.get("n_test", 10000)),
            master_seed=int(doc.get("master_seed", args.seed)),
            train=_train_config(doc.get("train", {})),
        )
        out_dir = args.out or doc.get("out", ".")
    else:
        config = RepetitionConfig(
            sample_sizes=problem.default_sizes,
            variants=tuple(_default_variants(problem)),
            n_reps=args.reps,
            noise_variance=problem.default_noise,
            master_seed=args.seed,
        )
        out_dir = args.out or "."

    report = run_repetitions(problem, config)
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, f"{problem.name}")
    report.to_csv(base + "_report.csv")
    report.summary_json(base + "_summary.json")
    report.latent_csv(base + "_latent.csv")
    medians = {
        key: stats["median"]
        for key, stats in report.summary().items()
        if key.split("|")[1] == "mse" and key.split("|")[2] == problem.high_fidelity
    }
    print(json.dumps({"report": base + "_report.csv", "median_mse": medians}, indent=2))
    return 0


def _default_variants(problem):
    variants = ["lmgp_s_all", "gp"]
    if problem.d_theta:
        variants += [f"koh_{l}" for l in problem.low_fidelity]
    return variants


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmgp",
                                     description="Data fusion with latent-map GPs")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a fusion model from a job manifest")
    p_fit.add_argument("--manifest", required=True)
    p_fit.add_argument("--out")
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--strategy", choices=["single", "per-source"])
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict", help="predict from a saved model")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--queries", required=True)
    p_pred.add_argument("--out")
    p_pred.set_defaults(func=cmd_predict)

    p_koh = sub.add_parser("koh-fit", help="fit the two-source calibration baseline")
    p_koh.add_argument("--manifest", required=True)
    p_koh.add_argument("--out")
    p_koh.add_argument("--seed", type=int)
    p_koh.set_defaults(func=cmd_koh_fit)

    p_bench = sub.add_parser("benchmark", help="run a repeated study on a named problem")
    p_bench.add_argument("--problem", required=True,
                         choices=sorted(PROBLEMS) + ["table-rrmse"])
    p_bench.add_argument("--manifest")
    p_bench.add_argument("--reps", type=int, default=30)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out")
    p_bench.set_defaults(func=cmd_benchmark)

    p_lat = sub.add_parser("latent", help="report the latent positions of a saved model")
    p_lat.add_argument("--model", required=True)
    p_lat.add_argument("--out")
    p_lat.set_defaults(func=cmd_latent)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ManifestError as exc:
        return _fail("schema", exc, EXIT_SCHEMA)
    except (KeyError, ValueError) as exc:
        return _fail("schema", exc, EXIT_SCHEMA)
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as exc:
        return _fail("io", exc, EXIT_IO)
    except (np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
