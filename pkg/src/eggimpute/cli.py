"""Experiment orchestration.

Subcommands compose the library into the benchmark protocol: corrupt a
dataset, train a model, impute, evaluate, run a config grid, and
aggregate results.  A JSON config drives everything; CLI flags override
individual fields.  Artifacts land in
``<out>/<dataset>/<mechanism>/<rate>/<method>/<seed>/``.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines, dataio, ensemble, evaluation, missingness, model, training

MODEL_METHODS = {"egg": "egg", "kegg": "kegg", "nn_ablation": "identity"}
ALL_METHODS = list(MODEL_METHODS) + ["mean", "knn"]

RESULTS_COLUMNS = ["dataset", "mechanism", "rate", "method", "seed", "rmse", "mae",
                   "cat_accuracy", "downstream_accuracy", "train_seconds",
                   "inference_seconds"]


def _seed_for(master_seed, stage):
    ids = {"corrupt": 1, "split": 2, "train": 3, "ensemble": 4, "forest": 5}
    return np.random.SeedSequence([int(master_seed), ids[stage]])


def _stage_seed_int(master_seed, stage):
    return int(_seed_for(master_seed, stage).generate_state(1)[0])


def load_config(path, overrides=None):
    cfg = {"rate": 0.2, "mechanism": "mcar", "method": "egg", "seed": 0, "runs": 1,
           "ensemble": 5, "out": "runs", "train_fraction": 0.7, "knn_k": 5,
           "train": {}}
    if path:
        with open(path) as fh:
            cfg.update(json.load(fh))
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    if "EGGIMPUTE_OUT" in os.environ:
        cfg["out"] = os.environ["EGGIMPUTE_OUT"]
    return cfg


def run_dir(cfg, dataset_name, mechanism=None, rate=None, method=None, seed=None):
    path = Path(cfg["out"]) / dataset_name / (mechanism or cfg["mechanism"]) / \
        str(rate if rate is not None else cfg["rate"]) / (method or cfg["method"]) / \
        str(seed if seed is not None else cfg["seed"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset_name(cfg):
    return cfg.get("name") or Path(cfg["dataset"]).stem


def _load_dataset(cfg):
    ds, load_mask = dataio.load_csv(cfg["dataset"], cfg["schema"])
    return ds, load_mask


def _require(path, hint):
    if not Path(path).exists():
        raise FileNotFoundError(f"missing artifact {path}; run `{hint}` first")
    return path


def _train_config(cfg, method, seed):
    raw = dict(cfg.get("train") or {})
    model_raw = dict(raw.pop("model", {}))
    model_raw["sampler"] = MODEL_METHODS[method]
    if "k" not in model_raw and "knn_k" in cfg and method == "kegg":
        model_raw["k"] = 5
    tc = training.TrainConfig.from_dict({**raw, "model": model_raw,
                                         "seed": _stage_seed_int(seed, "train")})
    return tc


def _prepare(cfg, seed, mask_bits):
    """Split, compute training-observed stats, z-score the whole table."""
    ds, load_mask = _load_dataset(cfg)
    mask = (mask_bits * load_mask).astype(np.int8)
    train_rows, val_rows = dataio.split(ds, cfg["train_fraction"],
                                        _stage_seed_int(seed, "split"))
    stats = dataio.compute_stats(ds.subset(train_rows), mask[train_rows])
    ds_norm = dataio.normalize(ds, stats)
    return ds, ds_norm, mask, stats, train_rows, val_rows


# -- subcommands --------------------------------------------------------

def cmd_make_synthetic(args):
    ds = dataio.make_two_cluster(n=args.rows, d=args.cols, seed=args.seed)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    schema_path = out.with_suffix(".schema.json")
    dataio.write_csv(ds, None, out, schema_path)
    print(f"wrote {out} and {schema_path}")
    return 0


def cmd_fetch_wireless(args):
    """Download the UCI wireless indoor localization table (needs network)."""
    import io
    import urllib.request
    import zipfile

    url = "https://archive.ics.uci.edu/static/public/422/wireless+indoor+localization.zip"
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.from_txt:
        convert_wireless_txt(args.from_txt, out)
        print(f"wrote {out}")
        return 0
    try:
        payload = urllib.request.urlopen(url, timeout=60).read()
    except OSError as err:
        print(f"error: download failed ({err}); fetch wifi_localization.txt manually "
              f"and convert with `eggimpute fetch-wireless --from-txt <path>`", file=sys.stderr)
        return 1
    with zipfile.ZipFile(io.BytesIO(payload)) as zf:
        name = next(n for n in zf.namelist() if n.endswith(".txt"))
        text = zf.read(name).decode()
    _write_wireless_csv(text, out)
    print(f"wrote {out}")
    return 0


def _write_wireless_csv(text, out: Path):
    rows = [line.split() for line in text.strip().splitlines()]
    header = [f"wifi{i + 1}" for i in range(7)] + ["room"]
    with open(out, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    schema = {"columns": [{"name": f"wifi{i + 1}", "kind": "numerical"} for i in range(7)],
              "target": "room"}
    with open(out.with_suffix(".schema.json"), "w") as fh:
        json.dump(schema, fh, indent=2)


def convert_wireless_txt(txt_path, out_path):
    with open(txt_path) as fh:
        _write_wireless_csv(fh.read(), Path(out_path))


def cmd_corrupt(args):
    cfg = load_config(args.config, _overrides(args))
    ds, _ = _load_dataset(cfg)
    mask = missingness.corrupt(ds, cfg["mechanism"], cfg["rate"],
                               _seed_for(cfg["seed"], "corrupt"))
    rd = run_dir(cfg, _dataset_name(cfg))
    missingness.save_mask(mask, rd / "mask.csv")
    print(f"wrote {rd / 'mask.csv'} (missing fraction {mask.missing_fraction:.4f})")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, _overrides(args))
    method = cfg["method"]
    rd = run_dir(cfg, _dataset_name(cfg))
    if method not in MODEL_METHODS:
        print(f"method {method!r} needs no training; skipping")
        return 0
    mask_path = _require(rd / "mask.csv", "eggimpute corrupt")
    mask_bits = missingness.load_mask(mask_path).bits
    ds, ds_norm, mask, stats, train_rows, val_rows = _prepare(cfg, cfg["seed"], mask_bits)
    tc = _train_config(cfg, method, cfg["seed"])
    t0 = time.perf_counter()
    trained = training.train(tc, ds_norm.subset(train_rows), ds_norm.subset(val_rows),
                             mask[train_rows], mask[val_rows])
    seconds = time.perf_counter() - t0
    model.save_checkpoint(rd / "checkpoint.npz", trained.params,
                          extra={"best_val_loss": trained.best_val_loss,
                                 "best_epoch": trained.best_epoch,
                                 "train_seconds": seconds})
    with open(rd / "history.json", "w") as fh:
        json.dump({"config": tc.to_dict(), "train_seconds": seconds,
                   "epochs": trained.history}, fh, indent=2)
    print(f"wrote {rd / 'checkpoint.npz'} (best val loss {trained.best_val_loss:.4f} "
          f"at epoch {trained.best_epoch}, {seconds:.1f}s)")
    return 0


def _impute_all(cfg, method, ds, ds_norm, mask, stats, train_rows, val_rows, params):
    """Impute the normalized table; model methods ensemble per split."""
    if method == "mean":
        return baselines.mean_impute(ds_norm, mask,
                                     dataio.compute_stats(ds_norm.subset(train_rows),
                                                          mask[train_rows]))
    if method == "knn":
        return baselines.knn_impute(ds_norm, mask, cfg.get("knn_k", 5))
    batch_size = (cfg.get("train") or {}).get("batch_size", 300)
    imputed = ds_norm.values.copy()
    for rows in (train_rows, val_rows):
        sub = ds_norm.subset(rows)
        res = ensemble.ensemble_impute(sub, mask[rows], params, cfg["ensemble"],
                                       _stage_seed_int(cfg["seed"], "ensemble"),
                                       batch_size=batch_size)
        imputed[rows] = res.imputed
    return imputed


def cmd_impute(args):
    cfg = load_config(args.config, _overrides(args))
    method = cfg["method"]
    rd = run_dir(cfg, _dataset_name(cfg))
    mask_bits = missingness.load_mask(_require(rd / "mask.csv", "eggimpute corrupt")).bits
    ds, ds_norm, mask, stats, train_rows, val_rows = _prepare(cfg, cfg["seed"], mask_bits)
    params = None
    if method in MODEL_METHODS:
        params, _ = model.load_checkpoint(_require(rd / "checkpoint.npz", "eggimpute train"),
                                          ds.schema)
    imputed_z = _impute_all(cfg, method, ds, ds_norm, mask, stats, train_rows, val_rows, params)
    np.save(rd / "imputed_z.npy", imputed_z)
    export = ds.values.copy()
    for j in ds.numeric_idx:
        export[:, j] = dataio.denormalize_column(imputed_z[:, j], j, stats)
    for j in ds.categorical_idx:
        export[:, j] = imputed_z[:, j]
    out_ds = dataio.TabularDataset(ds.schema, export, ds.targets, ds.num_classes,
                                   ds.target_categories)
    dataio.write_csv(out_ds, None, rd / "imputed.csv")
    print(f"wrote {rd / 'imputed.csv'}")
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config, _overrides(args))
    rd = run_dir(cfg, _dataset_name(cfg))
    mask_bits = missingness.load_mask(_require(rd / "mask.csv", "eggimpute corrupt")).bits
    ds, ds_norm, mask, stats, train_rows, val_rows = _prepare(cfg, cfg["seed"], mask_bits)
    imputed_z = np.load(_require(rd / "imputed_z.npy", "eggimpute impute"))
    report = _evaluate(cfg, cfg["method"], ds_norm, mask, train_rows, val_rows, imputed_z,
                       _dataset_name(cfg))
    with open(rd / "report.json", "w") as fh:
        json.dump(report.__dict__, fh, indent=2, default=str)
    _append_result(Path(cfg["out"]) / "results.csv", report)
    print(json.dumps({k: getattr(report, k) for k in
                      ("rmse", "mae", "cat_accuracy", "downstream_accuracy")}))
    return 0


def _evaluate(cfg, method, ds_norm, mask, train_rows, val_rows, imputed_z, dataset_name,
              train_seconds=None, inference_seconds=None):
    truth = ds_norm.values
    eval_mask = mask.copy()
    eval_mask[train_rows] = 1  # metrics concern the held-out rows only
    rep = evaluation.MetricReport(dataset_name, cfg["mechanism"], cfg["rate"], method,
                                  cfg["seed"])
    rep.rmse = evaluation.rmse(truth, imputed_z, eval_mask, ds_norm.numeric_idx)
    rep.mae = evaluation.mae(truth, imputed_z, eval_mask, ds_norm.numeric_idx)
    rep.cat_accuracy = evaluation.cat_accuracy(truth, imputed_z, eval_mask,
                                               ds_norm.categorical_idx)
    rep.downstream_accuracy = evaluation.downstream_accuracy(
        imputed_z[train_rows], ds_norm.targets[train_rows],
        imputed_z[val_rows], ds_norm.targets[val_rows], ds_norm.schema,
        seed=_stage_seed_int(cfg["seed"], "forest"))
    rep.train_seconds = train_seconds
    rep.inference_seconds = inference_seconds
    return rep


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _append_result(path, report: evaluation.MetricReport):
    new = not Path(path).exists()
    with open(path, "a") as fh:
        if new:
            fh.write(",".join(RESULTS_COLUMNS) + "\n")
        fh.write(",".join(_format_cell(getattr(report, c)) for c in RESULTS_COLUMNS) + "\n")


def run_single(cfg, dataset_spec, mechanism, rate, method, seed):
    """One full corrupt -> train -> impute -> evaluate pass, in memory."""
    local = dict(cfg)
    local.update({"dataset": dataset_spec["csv"], "schema": dataset_spec["schema"],
                  "name": dataset_spec["name"], "mechanism": mechanism, "rate": rate,
                  "method": method, "seed": seed})
    ds, _ = _load_dataset(local)
    mask_m = missingness.corrupt(ds, mechanism, rate, _seed_for(seed, "corrupt"))
    ds, ds_norm, mask, stats, train_rows, val_rows = _prepare(local, seed, mask_m.bits)
    params = None
    train_seconds = None
    if method in MODEL_METHODS:
        tc = _train_config(local, method, seed)
        t0 = time.perf_counter()
        trained = training.train(tc, ds_norm.subset(train_rows), ds_norm.subset(val_rows),
                                 mask[train_rows], mask[val_rows])
        train_seconds = time.perf_counter() - t0
        params = trained.params
    t0 = time.perf_counter()
    imputed_z = _impute_all(local, method, ds, ds_norm, mask, stats, train_rows, val_rows,
                            params)
    inference_seconds = time.perf_counter() - t0
    return _evaluate(local, method, ds_norm, mask, train_rows, val_rows, imputed_z,
                     dataset_spec["name"], train_seconds, inference_seconds)


def _benchmark_grid(cfg):
    grid = cfg.get("grid") or {}
    datasets = cfg.get("datasets")
    if not datasets:
        datasets = [{"name": _dataset_name(cfg), "csv": cfg["dataset"],
                     "schema": cfg["schema"]}]
    mechanisms = grid.get("mechanisms", [cfg["mechanism"]])
    rates = grid.get("rates", [cfg["rate"]])
    methods = grid.get("methods", [cfg["method"]])
    seeds = grid.get("seeds", [cfg["seed"] + i for i in range(cfg["runs"])])
    jobs = []
    for spec in datasets:
        for mechanism in mechanisms:
            for rate in rates:
                for method in methods:
                    for seed in seeds:
                        jobs.append((spec, mechanism, rate, method, seed))
    return jobs


def cmd_benchmark(args):
    cfg = load_config(args.config, _overrides(args))
    jobs = _benchmark_grid(cfg)
    if not jobs:
        print("error: empty benchmark grid", file=sys.stderr)
        return 1
    out_root = Path(cfg["out"])
    out_root.mkdir(parents=True, exist_ok=True)
    results = [None] * len(jobs)
    failures = []

    def execute(i):
        return i, run_single(cfg, *jobs[i])

    if args.workers and args.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = [pool.submit(execute, i) for i in range(len(jobs))]
            for fut in concurrent.futures.as_completed(futures):
                i, rep = fut.result()
                results[i] = rep
    else:
        for i in range(len(jobs)):
            try:
                results[i] = execute(i)[1]
            except Exception as err:  # record, keep going
                failures.append((jobs[i], str(err)))
    results_path = out_root / "results.csv"
    if results_path.exists():
        results_path.unlink()
    for rep in results:
        if rep is not None:
            _append_result(results_path, rep)
    for job, err in failures:
        print(f"error: run {job} failed: {err}", file=sys.stderr)
    print(f"wrote {results_path} ({sum(r is not None for r in results)} rows)")
    return 0 if not failures else 1


def _read_results(path):
    import csv as csvmod
    reports = []
    with open(path) as fh:
        for row in csvmod.DictReader(fh):
            reports.append(evaluation.MetricReport(
                row["dataset"], row["mechanism"], float(row["rate"]), row["method"],
                int(row["seed"]),
                rmse=float(row["rmse"]) if row["rmse"] else None,
                mae=float(row["mae"]) if row["mae"] else None,
                cat_accuracy=float(row["cat_accuracy"]) if row["cat_accuracy"] else None,
                downstream_accuracy=(float(row["downstream_accuracy"])
                                     if row["downstream_accuracy"] else None),
                train_seconds=float(row["train_seconds"]) if row["train_seconds"] else None,
                inference_seconds=(float(row["inference_seconds"])
                                   if row["inference_seconds"] else None)))
    return reports


def cmd_report(args):
    reports = _read_results(_require(args.results, "eggimpute benchmark"))
    wins = evaluation.count_of_wins(reports)
    ranking = evaluation.unified_average_ranking(reports)
    timing = {}
    for r in reports:
        entry = timing.setdefault(r.method, {"train": [], "inference": []})
        if r.train_seconds is not None:
            entry["train"].append(r.train_seconds)
        if r.inference_seconds is not None:
            entry["inference"].append(r.inference_seconds)
    timing_summary = {m: {"mean_train_seconds": float(np.mean(v["train"])) if v["train"] else None,
                          "mean_inference_seconds": (float(np.mean(v["inference"]))
                                                     if v["inference"] else None)}
                      for m, v in timing.items()}
    summary = {"count_of_wins": wins, "unified_average_ranking": ranking,
               "timing": timing_summary}
    out = Path(args.output) if args.output else Path(args.results).parent / "summary.json"
    with open(out, "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"wrote {out}\n")
    print(f"{'method':<14}{'mean rank':>10}{'std':>8}{'wins':>6}")
    for method, stats in sorted(ranking.items(), key=lambda kv: kv[1]["mean_rank"]):
        print(f"{method:<14}{stats['mean_rank']:>10.3f}{stats['std_rank']:>8.3f}"
              f"{wins.get(method, 0):>6}")
    return 0


# -- argument parsing ---------------------------------------------------

def _overrides(args):
    keys = ("dataset", "schema", "name", "mechanism", "rate", "method", "seed", "runs",
            "ensemble", "out")
    return {k: getattr(args, k, None) for k in keys}


def _add_common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--dataset", help="dataset CSV path")
    p.add_argument("--schema", help="schema JSON path")
    p.add_argument("--name", help="dataset name for the run directory")
    p.add_argument("--mechanism", choices=list(missingness.MECHANISMS))
    p.add_argument("--rate", type=float)
    p.add_argument("--method", choices=ALL_METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--ensemble", type=int, help="predictions per row at inference")
    p.add_argument("--out", help="output root (or env EGGIMPUTE_OUT)")


def build_parser():
    parser = argparse.ArgumentParser(prog="eggimpute",
                                     description="latent-graph tabular imputation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write the synthetic 2-cluster dataset")
    p.add_argument("--rows", type=int, default=600)
    p.add_argument("--cols", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="data/synthetic.csv")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("fetch-wireless", help="download the UCI wireless dataset")
    p.add_argument("--output", default="data/wireless.csv")
    p.add_argument("--from-txt", dest="from_txt",
                   help="convert an already-downloaded wifi_localization.txt instead")
    p.set_defaults(func=cmd_fetch_wireless)

    for name, fn in [("corrupt", cmd_corrupt), ("train", cmd_train),
                     ("impute", cmd_impute), ("evaluate", cmd_evaluate)]:
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("benchmark", help="run the full config grid")
    _add_common(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", help="aggregate a results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
