"""Experiment runner: replicated SMC runs across methods and particle counts,
machine-readable results, and summary tables.

Config files are JSON mirroring RunConfig; results are a comma-separated file
with one row per run plus a metadata sidecar carrying the full config, a
config hash, and the oracle/reference values.  Reruns of the same config
produce identical bytes apart from the timestamp header line and the
wall-clock column.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gmrf as gmrf_mod
from . import lbp as lbp_mod
from . import lda as lda_mod
from . import models as models_mod
from .errors import TwistSmcError
from .graph import load_graph, partition_factors, reorder
from .oracle import enumerate_logZ
from .smc import SmcConfig, run_smc
from .twist import UnitTwisting, fully_adapt_discrete, make_twisted_model

RESULT_COLUMNS = [
    "experiment",
    "method",
    "twist",
    "N",
    "rep",
    "seed",
    "log_Z_hat",
    "ess_min",
    "resample_count",
    "wall_ms",
    "config_hash",
]

METHODS = ("smc-base", "smc-twist", "sis-twist")


class ConfigError(TwistSmcError):
    pass


class MissingOracle(TwistSmcError):
    pass


@dataclass
class RunConfig:
    experiment: str
    methods: list
    n_particles: list
    replications: int
    seed: int = 0
    order: str = "identity"
    ess_threshold: float = 0.5
    epsilon: float = 0.0
    oracle: str = "auto"
    resampling: str = "systematic"
    params: dict = field(default_factory=dict)

    def canonical(self):
        doc = {
            "experiment": self.experiment,
            "methods": list(self.methods),
            "n_particles": [int(n) for n in self.n_particles],
            "replications": self.replications,
            "seed": self.seed,
            "order": self.order,
            "ess_threshold": self.ess_threshold,
            "epsilon": self.epsilon,
            "oracle": self.oracle,
            "resampling": self.resampling,
            "params": self.params,
        }
        return json.dumps(doc, sort_keys=True)

    def config_hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


def parse_config(doc):
    """Validate a config mapping, raising ConfigError naming the bad field."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    exp = doc.get("experiment")
    if exp not in ("ising", "car", "lda", "custom-graph"):
        raise ConfigError(f"field 'experiment': unknown value {exp!r}")
    methods = doc.get("methods", ["smc-base", "smc-twist"])
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"field 'methods': unknown method {m!r}")
    ns = doc.get("n_particles")
    if not ns or any(int(n) < 1 for n in ns):
        raise ConfigError("field 'n_particles': need a list of counts >= 1")
    reps = int(doc.get("replications", 1))
    if reps < 1:
        raise ConfigError("field 'replications': must be >= 1")
    ess = float(doc.get("ess_threshold", 0.5))
    if not 0.0 <= ess <= 1.0:
        raise ConfigError("field 'ess_threshold': must lie in [0, 1]")
    eps = float(doc.get("epsilon", 0.0))
    if eps < 0:
        raise ConfigError("field 'epsilon': must be >= 0")
    if eps > 0 and exp != "car":
        raise ConfigError("field 'epsilon': regularization is wired for 'car' only")
    oracle = doc.get("oracle", "auto")
    if oracle not in ("auto", "none"):
        raise ConfigError(f"field 'oracle': unknown value {oracle!r}")
    params = doc.get(exp.replace("-", "_"), {})
    return RunConfig(
        experiment=exp,
        methods=list(methods),
        n_particles=[int(n) for n in ns],
        replications=reps,
        seed=int(doc.get("seed", 0)),
        order=doc.get("order", "identity"),
        ess_threshold=ess,
        epsilon=eps,
        oracle=oracle,
        resampling=doc.get("resampling", "systematic"),
        params=params,
    )


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} line {exc.lineno}: {exc.msg}") from exc
    return parse_config(doc)


def derive_seed(base_seed, *parts):
    """Stable replication seed from the base seed and run coordinates."""
    text = "|".join([str(base_seed)] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def _method_twist(cfg, method):
    twists = {"ising": "lbp", "car": "laplace", "lda": "ep", "custom-graph": "lbp"}
    if method == "smc-base":
        return "none", cfg.ess_threshold
    twist = twists[cfg.experiment]
    rho = 0.0 if method == "sis-twist" else cfg.ess_threshold
    return twist, rho


def _car_pieces(cfg):
    p = cfg.params
    if p.get("adjacency_file"):
        edges = gmrf_mod.load_adjacency(p["adjacency_file"])
        size = p.get("size")
    else:
        lat = p.get("lattice", [8, 8])
        edges = gmrf_mod.lattice_edges(int(lat[0]), int(lat[1]))
        size = int(lat[0]) * int(lat[1])
    car_cfg = gmrf_mod.CarConfig(
        edges=edges,
        tau=float(p.get("tau", 0.1)),
        d=float(p.get("d", 1.0)),
        trials=int(p.get("trials", 10)),
        tau_convention=p.get("tau_convention", "covariance-scale"),
    )
    if p.get("obs_file"):
        y, trials = gmrf_mod.load_observations(p["obs_file"])
        if trials is not None and not np.all(trials == car_cfg.trials):
            raise ConfigError("field 'car.obs_file': per-site trials must match 'trials'")
    else:
        _, y = models_mod.simulate_car_observations(
            car_cfg, int(p.get("data_seed", 1)), size=size
        )
    return car_cfg, y, size


def build_bundle(cfg, method):
    """Bundle for one method of the configured experiment."""
    twist, rho = _method_twist(cfg, method)
    if cfg.experiment == "ising":
        p = cfg.params
        spec = models_mod.IsingSpec(
            width=int(p.get("width", 8)),
            height=int(p.get("height", 8)),
            coupling=float(p.get("coupling", 0.44)),
            periodic=bool(p.get("periodic", True)),
            field_seed=int(p.get("field_seed", 0)),
            order_strategy=cfg.order,
            order_seed=p.get("order_seed"),
        )
        bundle = models_mod.ising_bundle(spec, twist=twist)
    elif cfg.experiment == "car":
        car_cfg, y, size = _car_pieces(cfg)
        bundle = models_mod.car_bundle(
            car_cfg,
            y,
            twist="laplace" if twist == "laplace" else "none",
            order_strategy=cfg.order,
            order_seed=cfg.params.get("order_seed"),
            size=size,
            epsilon=cfg.epsilon if twist == "laplace" else 0.0,
        )
    elif cfg.experiment == "lda":
        p = cfg.params
        if p.get("model_file"):
            model = lda_mod.load_lda_model(p["model_file"])
            if not p.get("doc_file"):
                raise ConfigError("field 'lda.doc_file': required with model_file")
            doc = lda_mod.load_document(p["doc_file"])
        else:
            spec = models_mod.LdaToySpec(
                n_topics=int(p.get("n_topics", 4)),
                vocab_size=int(p.get("vocab_size", 10)),
                doc_length=int(p.get("doc_length", 10)),
                model_seed=int(p.get("model_seed", 2024)),
                doc_seed=int(p.get("doc_seed", 7)),
            )
            model, doc = models_mod.lda_toy(spec)
        bundle = models_mod.lda_bundle(model, doc, twist="ep" if twist == "ep" else "none")
    elif cfg.experiment == "custom-graph":
        p = cfg.params
        graph = load_graph(p["graph_file"])
        if not graph.is_discrete():
            raise ConfigError("field 'custom_graph.graph_file': engine runs need discrete variables")
        order = reorder(graph, cfg.order, seed=p.get("order_seed"))
        partition = partition_factors(graph, order)
        if twist == "lbp":
            messages = lbp_mod.run_lbp(graph, lbp_mod.LbpConfig())
            twisting = lbp_mod.twisting_from_messages(messages, partition)
        else:
            twisting = UnitTwisting()
        model = make_twisted_model(graph, order, partition, twisting)
        bundle = models_mod.ExperimentBundle(
            model=model,
            proposal=fully_adapt_discrete(model),
            metadata={"experiment": "custom-graph", "twist": twist},
            oracle=(lambda: enumerate_logZ(graph).log_Z)
            if graph.joint_size() <= 2**24
            else None,
        )
    else:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}")
    return bundle, rho


def _run_task(args):
    """One worker task: all replications of a (method, N) cell."""
    cfg_doc, method, n, reps = args
    cfg = parse_config(cfg_doc)
    bundle, rho = build_bundle(cfg, method)
    chash = cfg.config_hash()
    rows = []
    for rep in reps:
        seed = derive_seed(cfg.seed, method, n, rep)
        t0 = time.perf_counter()
        result = run_smc(
            bundle.model,
            bundle.proposal,
            SmcConfig(
                n_particles=n,
                resampling=cfg.resampling,
                ess_threshold=rho,
                seed=seed,
            ),
        )
        wall_ms = (time.perf_counter() - t0) * 1e3
        rows.append(
            {
                "experiment": cfg.experiment,
                "method": method,
                "twist": bundle.metadata.get("twist", ""),
                "N": n,
                "rep": rep,
                "seed": seed,
                "log_Z_hat": repr(result.log_Z_hat),
                "ess_min": repr(float(np.min(result.ess_trace))),
                "resample_count": int(np.sum(result.resampled_flags)),
                "wall_ms": f"{wall_ms:.3f}",
                "config_hash": chash,
            }
        )
    return (method, n), rows


def compute_oracle(cfg):
    """Oracle value for the configured experiment, or None when disabled.

    Exact engines are used where feasible (transfer DP for Ising, enumeration
    for LDA and small custom graphs); the CAR experiment records a reference
    value from a single high-particle twisted run instead.
    """
    if cfg.oracle == "none":
        return None, None
    if cfg.experiment == "car":
        bundle, _ = build_bundle(cfg, "smc-twist")
        n_ref = int(cfg.params.get("reference_n", 100_000))
        seed = derive_seed(cfg.seed, "oracle-reference", n_ref)
        result = run_smc(
            bundle.model,
            bundle.proposal,
            SmcConfig(n_particles=n_ref, ess_threshold=cfg.ess_threshold, seed=seed),
        )
        return result.log_Z_hat, f"smc-twist-reference-N{n_ref}"
    bundle, _ = build_bundle(cfg, "smc-base")
    if bundle.oracle is None:
        return None, None
    return bundle.oracle(), "exact"


def run_experiment(cfg, out_path, jobs=1):
    """Execute every (method, N, replication) cell and write results + metadata.

    Rows land in a '.partial' file as they complete so an interrupted run
    leaves its finished rows behind; on success the final file is written
    atomically in deterministic (method, N, rep) order.
    """
    cfg_doc = json.loads(cfg.canonical())
    del cfg_doc["params"]
    cfg_doc[cfg.experiment.replace("-", "_")] = cfg.params
    tasks = [
        (cfg_doc, method, n, list(range(cfg.replications)))
        for method in cfg.methods
        for n in cfg.n_particles
    ]

    oracle_value, oracle_method = compute_oracle(cfg)
    deterministic = None
    if cfg.experiment in ("car", "lda") and "smc-twist" in cfg.methods:
        bundle, _ = build_bundle(cfg, "smc-twist")
        deterministic = bundle.deterministic_estimate

    partial_path = str(out_path) + ".partial"
    collected = {}
    with open(partial_path, "w", newline="") as partial:
        writer = csv.DictWriter(partial, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for key, rows in pool.map(_run_task, tasks):
                    collected[key] = rows
                    writer.writerows(rows)
                    partial.flush()
        else:
            for task in tasks:
                key, rows = _run_task(task)
                collected[key] = rows
                writer.writerows(rows)
                partial.flush()

    buf = io.StringIO()
    buf.write(f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
    writer = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS)
    writer.writeheader()
    for method in cfg.methods:
        for n in cfg.n_particles:
            writer.writerows(collected[(method, n)])
    if oracle_value is not None:
        writer.writerow(
            {
                "experiment": cfg.experiment,
                "method": "oracle",
                "twist": "",
                "N": "",
                "rep": "",
                "seed": "",
                "log_Z_hat": repr(float(oracle_value)),
                "ess_min": "",
                "resample_count": "",
                "wall_ms": "",
                "config_hash": cfg.config_hash(),
            }
        )
    tmp = str(out_path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, out_path)
    os.remove(partial_path)

    meta = {
        "config": cfg_doc,
        "config_hash": cfg.config_hash(),
        "oracle": None if oracle_value is None else float(oracle_value),
        "oracle_method": oracle_method,
        "deterministic_estimate": deterministic,
        "columns": RESULT_COLUMNS,
    }
    meta_path = str(out_path) + ".meta.json"
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out_path, meta_path


def read_results(path):
    """Parse a results file into (data rows, oracle value or None)."""
    rows, oracle = [], None
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    for row in reader:
        if row["method"] == "oracle":
            oracle = float(row["log_Z_hat"])
            continue
        rows.append(row)
    return rows, oracle


SUMMARY_COLUMNS = ["method", "N", "count", "mean", "stdev", "median", "bias", "mse"]


def summarize(results_path, out_path=None, require_oracle=False):
    """Per-(method, N) summary: mean, sample stdev, median, bias and MSE vs oracle."""
    rows, oracle = read_results(results_path)
    if require_oracle and oracle is None:
        raise MissingOracle(f"{results_path} has no oracle row")
    groups = {}
    for row in rows:
        groups.setdefault((row["method"], int(row["N"])), []).append(
            float(row["log_Z_hat"])
        )
    out_rows = []
    for (method, n) in sorted(groups):
        vals = np.array(groups[(method, n)])
        rec = {
            "method": method,
            "N": n,
            "count": vals.size,
            "mean": repr(float(np.mean(vals))),
            "stdev": repr(float(np.std(vals, ddof=1))) if vals.size > 1 else "",
            "median": repr(float(np.median(vals))),
            "bias": repr(float(np.mean(vals) - oracle)) if oracle is not None else "",
            "mse": repr(float(np.mean((vals - oracle) ** 2)))
            if oracle is not None
            else "",
        }
        out_rows.append(rec)
    if out_path is not None:
        tmp = str(out_path) + ".tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
            writer.writeheader()
            writer.writerows(out_rows)
        os.replace(tmp, out_path)
    return out_rows


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="twistsmc", description="Twisted SMC experiment runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the experiment described by a config file")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=".", help="output directory")
    p_run.add_argument("--jobs", type=int, default=1)

    p_sum = sub.add_parser("summarize", help="summarize a results file")
    p_sum.add_argument("results")
    p_sum.add_argument("--out", default=None)
    p_sum.add_argument("--require-oracle", action="store_true")

    p_or = sub.add_parser("oracle", help="print the oracle value for a config")
    p_or.add_argument("config")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            os.makedirs(args.out, exist_ok=True)
            stem = os.path.splitext(os.path.basename(args.config))[0]
            out_path = os.path.join(args.out, stem + ".results.csv")
            results, meta = run_experiment(cfg, out_path, jobs=args.jobs)
            print(results)
            print(meta)
        elif args.command == "summarize":
            out = args.out or (str(args.results).rsplit(".", 1)[0] + ".summary.csv")
            rows = summarize(args.results, out, require_oracle=args.require_oracle)
            print(out)
            for row in rows:
                print(
                    f"{row['method']:>10} N={row['N']:<6} count={row['count']:<4}"
                    f" mean={row['mean']} stdev={row['stdev']}"
                )
        elif args.command == "oracle":
            cfg = load_config(args.config)
            value, method = compute_oracle(cfg)
            if value is None:
                raise MissingOracle("no oracle available for this config")
            print(json.dumps({"log_Z": value, "method": method}))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TwistSmcError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
