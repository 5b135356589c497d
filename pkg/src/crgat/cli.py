"""Command-line entry points.

Exit status: 0 success, 1 I/O or unexpected failure, 2 usage or contract
error, 3 malformed file, 4 solver failure, 5 infeasible instance.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines as bl
from .channels import Dataset, generate_dataset, load_dataset, save_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .errors import ContractError, FormatError, InfeasibleError, SolverError
from .evaluation import build_report, inference_time, mad_per_layer, metrics_table, reports_json
from .model import init_params
from .oracle import brute_force_oracle, check_cost_guard
from .training import check_compatible, evaluate_rates, train

log = logging.getLogger("crgat")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_FORMAT, EXIT_SOLVER, EXIT_INFEASIBLE = 0, 1, 2, 3, 4, 5
METHODS = ("sca", "mrt", "zf", "oracle")


# ---------------------------------------------------------------------------
# per-sample baseline solves (module level so worker processes can pickle them)


def _solve_one(job) -> dict:
    method, h, p_max, r_req, sca_cfg, oracle_budget = job
    start = time.perf_counter()
    rec = {"method": method, "sum_rate": float("nan"), "feasible": 0, "iterations": 0, "status": "ok"}
    try:
        if method == "sca":
            res = bl.sca_solve(h, p_max, r_req, sca_cfg)
            w, rec["iterations"] = res.w, res.iterations
            rec["monotone"] = bool(np.all(np.diff(res.trace) >= -1e-10))
        elif method in ("mrt", "zf"):
            d = bl.mrt_directions(h) if method == "mrt" else bl.zf_directions(h)
            res = bl.power_only_sca(h, d, p_max, r_req, sca_cfg)
            w, rec["iterations"] = res.w, len(res.trace) - 1
            if method == "zf":
                s = np.abs(bl.cross_gains(h, d))
                rec["zf_cross"] = float(np.max(s - np.diag(np.diag(s)))) if len(h) > 1 else 0.0
        else:
            res = brute_force_oracle(h, p_max, r_req, oracle_budget)
            if not res.feasible:
                raise InfeasibleError("oracle found no feasible point")
            w = res.w
            rec["stable"] = res.stable
        rec["sum_rate"] = float(bl.user_rates(h, w, sca_cfg.sigma2).sum())
        rec["feasible"] = int(bl.is_feasible(h, w, p_max, r_req, sca_cfg.sigma2))
    except InfeasibleError:
        rec["status"] = "infeasible"
    except (SolverError, ContractError) as exc:
        rec["status"] = "error:" + type(exc).__name__
    rec["wall_time"] = time.perf_counter() - start
    return rec


def worker_count(flag: int | None) -> int:
    if flag is not None:
        n = flag
    elif os.environ.get("CRGAT_WORKERS"):
        try:
            n = int(os.environ["CRGAT_WORKERS"])
        except ValueError:
            raise ContractError("CRGAT_WORKERS must be an integer") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ContractError("worker count must be at least 1")
    return n


def run_baseline(h_all: np.ndarray, method: str, cfg: ExperimentConfig, workers: int) -> list[dict]:
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    if method == "oracle":
        check_cost_guard(h_all.shape[1], h_all.shape[2])
    scen = cfg.scenario
    jobs = [(method, h, scen.p_max, scen.r_req, cfg.sca, cfg.oracle) for h in h_all]
    if workers == 1 or len(jobs) < 2:
        out = [_solve_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_solve_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    for i, rec in enumerate(out):
        rec["sample"] = i
    return out


BASELINE_COLUMNS = ("sample", "method", "sum_rate", "feasible", "iterations", "status")


def baseline_table(records: list[dict]) -> str:
    buf = io.StringIO()
    buf.write("# " + "\t".join(BASELINE_COLUMNS) + "\n")
    for r in records:
        buf.write(f"{r['sample']}\t{r['method']}\t{r['sum_rate']:.12g}\t{r['feasible']}\t{r['iterations']}\t{r['status']}\n")
    buf.write("## timing\n# sample\twall_time_s\n")
    for r in records:
        buf.write(f"{r['sample']}\t{r['wall_time']:.6e}\n")
    return buf.getvalue()


def parse_baseline_table(text: str) -> np.ndarray:
    """Per-sample reference sum rates from a baseline results file (NaN where unsolved)."""
    values = []
    for line in text.splitlines():
        if line.startswith("## "):
            break
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != len(BASELINE_COLUMNS):
            raise FormatError(f"baseline row has {len(cols)} columns: {line!r}", 0)
        rate = float(cols[2])
        values.append(rate if cols[5] == "ok" and cols[3] == "1" else float("nan"))
    return np.array(values)


# ---------------------------------------------------------------------------
# reference cache


def _dataset_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def reference_rates(data_path: Path, dataset: Dataset, method: str, cfg: ExperimentConfig, cache_dir, workers):
    """Reference sum rates of the test split, cached by (dataset, method, config)."""
    section = "oracle" if method == "oracle" else "sca"
    key = f"{_dataset_hash(data_path)}-{method}-{cfg.digest(section)}-{cfg.digest('scenario')}"
    cache_dir = Path(cache_dir) if cache_dir else data_path.parent / (data_path.name + ".refcache")
    cache = cache_dir / f"{key}.tsv"
    if cache.exists():
        return parse_baseline_table(cache.read_text()), cache
    records = run_baseline(dataset.test, method, cfg, workers)
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache.write_text(baseline_table(records))
    return parse_baseline_table(cache.read_text()), cache


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if args.count < 1:
        raise ContractError("--count must be at least 1")
    scen = cfg.scenario if args.seed is None else cfg.scenario.replace(seed=args.seed)
    sizes = None
    if args.sizes:
        sizes = tuple(int(x) for x in args.sizes.split(","))
        if len(sizes) != 3:
            raise ContractError("--sizes needs three comma-separated integers")
    ds = generate_dataset(scen, args.count, args.kind, sizes)
    save_dataset(ds, args.out)
    tr, va, te = (b - a for a, b in ds.split)
    print(f"wrote {args.out}: kind={ds.kind} N_T={scen.n_t} K={scen.k_users} count={len(ds)} split={tr}/{va}/{te} seed={scen.seed}")
    return EXIT_OK


def _training_config(cfg: ExperimentConfig, loss: str | None, epochs: int | None):
    from dataclasses import replace

    tc = cfg.training
    changes = {}
    if loss:
        changes["loss"] = loss
    if epochs is not None:
        changes["epochs"] = epochs
    if tc.r_req is None:
        changes["r_req"] = cfg.scenario.r_req
    return replace(tc, **changes)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    tc = _training_config(cfg, args.loss, args.epochs)
    n_t = ds.config.n_t
    if cfg.scenario.n_t != n_t:
        raise ContractError(f"config expects N_T={cfg.scenario.n_t}, dataset has N_T={n_t}")
    if args.warm_start:
        params, _ = load_checkpoint(args.warm_start)
        arch = cfg.model.build(n_t, cfg.scenario.p_max, ds.train)
        check_compatible(params, n_t)
        if params.config.crgal_layers != arch.crgal_layers or params.config.cfcl_layers != arch.cfcl_layers:
            raise ContractError("warm-start checkpoint layer sizes differ from the configured architecture")
    else:
        arch = cfg.model.build(n_t, cfg.scenario.p_max, ds.train)
        params = init_params(arch, np.random.default_rng([cfg.seed, 1]))
    trained, report, state = train(ds, params, tc)
    meta = {
        "loss": tc.loss,
        "mu": None if state is None else state.mu.tolist(),
        "epoch": tc.epochs,
        "rng": {"init": [cfg.seed, 1], "shuffle": tc.seed},
        "optimizer_state": False,
    }
    save_checkpoint(args.out, trained, meta)
    report_path = Path(args.report) if args.report else Path(str(args.out) + ".report.tsv")
    report.write(report_path)
    last = report.records[-1] if report.records else None
    summary = "" if last is None else f" val_sum_rate={last.val_sum_rate:.4f} val_FR={last.val_feasibility:.1f}%"
    print(f"wrote {args.out} and {report_path}: loss={tc.loss} epochs={tc.epochs}{summary}")
    return EXIT_OK


def _load_reference(args, data_path, ds, cfg, workers):
    ref = args.reference
    if ref in ("sca", "oracle"):
        if ref == "oracle":
            check_cost_guard(ds.config.k_users, ds.config.n_t)
        return reference_rates(data_path, ds, ref, cfg, args.cache_dir, workers)[0]
    path = Path(ref)
    if not path.exists():
        raise ContractError(f"reference {ref!r} is neither sca, oracle nor an existing results file")
    values = parse_baseline_table(path.read_text())
    if len(values) != len(ds.test):
        raise ContractError(f"reference file has {len(values)} rows, test split has {len(ds.test)}")
    return values


def _experiment_for(args, ds: Dataset) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
        if (cfg.scenario.n_t, cfg.scenario.k_users) != (ds.config.n_t, ds.config.k_users):
            raise ContractError("config scenario dimensions differ from the dataset")
        return cfg
    return ExperimentConfig(seed=ds.config.seed, scenario=ds.config)


def cmd_eval(args) -> int:
    data_path = Path(args.data)
    ds = load_dataset(data_path)
    params, _ = load_checkpoint(args.checkpoint)
    check_compatible(params, ds.config.n_t)
    cfg = _experiment_for(args, ds)
    ref = _load_reference(args, data_path, ds, cfg, worker_count(args.workers))
    r = evaluate_rates(params, ds.test)
    t = inference_time(params, ds.test, repetitions=args.repetitions)
    report = build_report(r, ref, ds.config.r_req, t, label=Path(args.checkpoint).name)
    _emit(metrics_table([report]), reports_json([report]), args.out, args.json)
    return EXIT_OK


def cmd_baseline(args) -> int:
    ds = load_dataset(args.data)
    cfg = _experiment_for(args, ds)
    h = ds.part(args.split)
    records = run_baseline(h, args.method, cfg, worker_count(args.workers))
    text = baseline_table(records)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    solved = [r for r in records if r["status"] == "ok"]
    ok = sum(r["feasible"] for r in solved)
    print(f"{args.method}: {len(solved)}/{len(records)} solved, {ok} feasible", file=sys.stderr)
    if records and all(r["status"] == "infeasible" for r in records):
        return EXIT_INFEASIBLE
    if records and all(r["status"].startswith("error") for r in records):
        return EXIT_SOLVER
    return EXIT_OK


def cmd_mad(args) -> int:
    ds = load_dataset(args.data)
    params, _ = load_checkpoint(args.checkpoint)
    check_compatible(params, ds.config.n_t)
    report = mad_per_layer(params, ds.part(args.split), label=Path(args.checkpoint).name)
    _emit(report.to_text(), json.dumps(report.to_dict(), sort_keys=True, indent=2), args.out, args.json)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from dataclasses import replace

    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    tc = _training_config(cfg, args.loss, args.epochs)
    h_eval = ds.part(args.split)
    reports = []
    for label, residual in (("full", True), ("no_residual", False)):
        arch = replace(cfg.model, residual=residual).build(ds.config.n_t, cfg.scenario.p_max, ds.train)
        params = init_params(arch, np.random.default_rng([cfg.seed, 1]))
        trained, _, _ = train(ds, params, tc)
        reports.append(mad_per_layer(trained, h_eval, label=label))
        if args.save_dir:
            Path(args.save_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(args.save_dir) / f"{label}.crgw", trained, {"loss": tc.loss, "epoch": tc.epochs})
    full, plain = reports
    text = "".join(r.to_text() for r in reports)
    flags = []
    if not full.values[-1] > plain.values[-1]:
        flags.append("deepest-layer MAD of the full model does not exceed the no-residual variant")
    if not all(b < a for a, b in zip(plain.values, plain.values[1:])):
        flags.append("no-residual MAD is not strictly decreasing across layers")
    text += "".join(f"## flag\t{f}\n" for f in flags)
    doc = {"reports": [r.to_dict() for r in reports], "flags": flags}
    _emit(text, json.dumps(doc, sort_keys=True, indent=2), args.out, args.json)
    return EXIT_OK


def _emit(text: str, doc: str, out, json_path) -> None:
    if out:
        Path(out).write_text(text)
        Path(json_path or str(out) + ".json").write_text(doc + "\n")
    else:
        sys.stdout.write(text)
        if json_path:
            Path(json_path).write_text(doc + "\n")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crgat", description="Graph-attention beamforming experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a channel dataset file")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, help="overrides the config seed")
    g.add_argument("--kind", choices=("A", "B"), default="A")
    g.add_argument("--sizes", help="explicit train,val,test sizes")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--loss", choices=("pm", "ldm"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--warm-start")
    t.add_argument("--report")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint against a reference")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--reference", default="sca", help="sca, oracle, or a baseline results file")
    e.add_argument("--config")
    e.add_argument("--cache-dir")
    e.add_argument("--repetitions", type=int, default=10)
    e.add_argument("--workers", type=int)
    e.add_argument("--out")
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="run an optimisation baseline on every sample of a split")
    b.add_argument("--data", required=True)
    b.add_argument("--method", choices=METHODS, required=True)
    b.add_argument("--split", choices=("train", "val", "test"), default="test")
    b.add_argument("--config")
    b.add_argument("--workers", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_baseline)

    a = sub.add_parser("ablate", help="train full and no-residual models and compare per-layer MAD")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--loss", choices=("pm", "ldm"))
    a.add_argument("--epochs", type=int)
    a.add_argument("--split", choices=("train", "val", "test"), default="test")
    a.add_argument("--save-dir")
    a.add_argument("--out")
    a.add_argument("--json")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("mad", help="per-layer MAD of a checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--split", choices=("train", "val", "test"), default="test")
    m.add_argument("--out")
    m.add_argument("--json")
    m.set_defaults(func=cmd_mad)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"crgat: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except InfeasibleError as exc:
        print(f"crgat: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverError as exc:
        print(f"crgat: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ContractError as exc:
        print(f"crgat: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"crgat: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
