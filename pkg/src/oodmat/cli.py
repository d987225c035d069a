"""Command-line entry point: ``oodmat <group> [<command>] [options]``.

Every command accepts ``--config`` (a RunConfig JSON/YAML file whose
sections supply defaults), ``--seed``, ``--out`` and ``--format``.  On
failure a single line ``error command=<cmd> type=<Exception> message=<...>``
is written to stderr and the exit status is 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .dataio import FORMATS, parse_dataset, write_dataset
from .harness import (RunConfig, derive_seed, read_passes, run_benchmark, score_external, soap_config_for,
                      write_passes, write_truth)
from .metrics import read_report_csv, summarize, write_report_csv
from .model import ModelConfig, load_weights, save_weights
from .soap import compute_descriptors, load_external_descriptors, save_descriptors
from .splitting import STRATEGIES, load_scenario, make_scenario, optimize_cluster_count, save_scenario
from .synthetic import generate_synthetic
from .training import MC_PASSES, TrainConfig, deterministic_infer, mcd_infer, train, write_history


def _load_config(path) -> dict:
    if not path:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    if Path(path).suffix.lower() in (".yaml", ".yml"):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)


def _pick(args, conf, key, default=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    return conf.get(key, default)


def _dataset(args, conf):
    path = args.dataset or conf.get("dataset")
    if not path:
        raise ValueError("no dataset given (--dataset or 'dataset' in the config)")
    return parse_dataset(path, conf.get("dataset_format"))


def _emit(text, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_dataset_synth(args, conf):
    syn = conf.get("synthetic") or {}
    n = _pick(args, syn, "n", 200)
    seed = args.seed if args.seed is not None else syn.get("seed", conf.get("seed", 0))
    ds = generate_synthetic(int(n), int(seed))
    write_dataset(ds, args.out, args.dataset_format)
    print(f"wrote {len(ds)} structures to {args.out}")


def cmd_descriptors_compute(args, conf):
    ds = _dataset(args, conf)
    opts = dict(conf.get("descriptors") or {})
    for key in ("r_cut", "n_max", "l_max", "sigma"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    X = compute_descriptors(ds, soap_config_for(ds, opts), workers=args.workers or 1)
    save_descriptors(X, args.out)
    print(f"wrote {X.shape[0]}x{X.shape[1]} descriptors to {args.out}")


def cmd_descriptors_import(args, conf):
    X = load_external_descriptors(args.csv)
    if args.dataset or conf.get("dataset"):
        n = len(_dataset(args, conf))
        if len(X) != n:
            raise ValueError(f"descriptor file has {len(X)} rows, dataset has {n}")
    save_descriptors(X, args.out)
    print(f"wrote {X.shape[0]}x{X.shape[1]} descriptors to {args.out}")


def cmd_split_generate(args, conf):
    strategy = _pick(args, conf, "strategy", "SOAP-LOCO")
    seed = _pick(args, conf, "seed", 0)
    X = load_external_descriptors(args.descriptors) if args.descriptors else None
    y = _dataset(args, conf).targets if strategy in ("SYS", "SYC") or args.dataset else None
    sc = make_scenario(strategy, X, y, int(seed), _pick(args, conf, "k"),
                       int(_pick(args, conf, "n_tasks", 50)), int(_pick(args, conf, "m_neighbors", 10)),
                       int(_pick(args, conf, "k_density", 10)))
    save_scenario(sc, args.out)
    print(f"wrote {len(sc)} {sc.strategy} tasks to {args.out}")


def cmd_split_optimize_k(args, conf):
    X = load_external_descriptors(args.descriptors)
    y = _dataset(args, conf).targets
    cands = [int(c) for c in args.candidates.split(",")] if args.candidates else conf.get("candidates")
    if not cands:
        raise ValueError("no candidates (--candidates or 'candidates' in the config)")
    k, scores = optimize_cluster_count(X, y, cands, int(_pick(args, conf, "seed", 0)), return_scores=True)
    text = json.dumps({"k_best": k, "mean_proxy_mae": {str(c): v for c, v in scores.items()}}, indent=1,
                      sort_keys=True) + "\n"
    _emit(text, args.out)


def _configs(args, conf, task_name):
    seed = int(_pick(args, conf, "seed", 0))
    task_seed = derive_seed(seed, task_name)
    model = {**(conf.get("model") or {}), "seed": task_seed}
    tr = {**(conf.get("train") or {}), "seed": task_seed}
    if getattr(args, "epochs", None) is not None:
        tr["epochs"] = args.epochs
    return ModelConfig(**model), TrainConfig(**tr), task_seed


def cmd_train(args, conf):
    ds = _dataset(args, conf)
    task = load_scenario(args.split).task(args.task)
    mcfg, tcfg, _ = _configs(args, conf, task.name)
    w, history = train(ds, task, mcfg, tcfg)
    save_weights(w, mcfg, args.out)
    write_history(history, Path(args.out).with_suffix(".history.csv"))
    print(f"trained {task.name}: best val D-MAE {min(h['val_d_mae'] for h in history):.6g}; weights in {args.out}")


def cmd_infer(args, conf):
    ds = _dataset(args, conf)
    task = load_scenario(args.split).task(args.task)
    w, mcfg = load_weights(args.weights)
    T = int(_pick(args, conf, "T", MC_PASSES))
    idx = list(task.test_idx)
    seed = mcfg.seed if args.seed is None else args.seed
    write_passes(mcd_infer(ds, idx, w, mcfg, T, seed), args.out)
    stem = Path(args.out)
    write_passes(deterministic_infer(ds, idx, w, mcfg), stem.with_name(stem.stem + ".deterministic.csv"))
    write_truth(ds.targets[idx], stem.with_name(stem.stem + ".truth.csv"))
    print(f"wrote T={T} passes for {len(idx)} test samples to {args.out}")


def cmd_evaluate(args, conf):
    if not args.config:
        raise ValueError("evaluate needs --config")
    overrides = {"out": args.out, "seed": args.seed, "workers": args.workers}
    cfg = RunConfig.load(args.config, **overrides)
    _, summary, manifest = run_benchmark(cfg)
    print(f"{len(manifest['hashes'])} artifacts in {cfg.out}; run_hash {manifest['run_hash']}")
    print(f"summary mae={summary.mae:.6g} d_mae={summary.d_mae:.6g} d_eviu={summary.d_eviu:.6g}")


def cmd_score_external(args, conf):
    rep = score_external(args.passes, args.truth, args.T, args.deterministic, name=Path(args.passes).stem)
    if args.format == "json":
        _emit(json.dumps(rep.row(), indent=1, sort_keys=True) + "\n", args.out)
    elif args.out:
        write_report_csv([rep], None, args.out)
    else:
        row = rep.row()
        print(",".join(row))
        print(",".join("" if v is None else str(v) for v in row.values()))


def cmd_report(args, conf):
    run = Path(args.run or conf.get("out", "run"))
    rows = [r for r in read_report_csv(run / "tasks.csv") if r["task"] != "summary"]
    if args.format == "json":
        _emit(json.dumps(rows, indent=1, sort_keys=True) + "\n", args.out)
        return
    cols = list(rows[0]) if rows else []
    lines = [",".join(cols)]
    for r in rows + [_summary_row(rows)]:
        lines.append(",".join("" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else str(r[c]))
                              for c in cols))
    _emit("\n".join(lines) + "\n", args.out)


def _summary_row(rows):
    out = {"task": "summary", "n": sum(r["n"] for r in rows)}
    for c in rows[0]:
        if c in out:
            continue
        vals = [r[c] for r in rows if r[c] is not None]
        out[c] = sum(vals) / len(vals) if vals else None
    return out


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig file (JSON or YAML) supplying defaults")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="oodmat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"oodmat {__version__}")
    groups = p.add_subparsers(dest="group", required=True)

    g = groups.add_parser("dataset").add_subparsers(dest="command", required=True)
    c = g.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    c.add_argument("--n", type=int)
    c.add_argument("--dataset-format", choices=FORMATS)
    c.set_defaults(func=cmd_dataset_synth, need_out=True)

    g = groups.add_parser("descriptors").add_subparsers(dest="command", required=True)
    c = g.add_parser("compute", parents=[common], help="SOAP material descriptors")
    c.add_argument("--dataset")
    for key, typ in (("r_cut", float), ("n_max", int), ("l_max", int), ("sigma", float)):
        c.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ)
    c.add_argument("--workers", type=int)
    c.set_defaults(func=cmd_descriptors_compute, need_out=True)
    c = g.add_parser("import", parents=[common], help="validate and normalise an external descriptor CSV")
    c.add_argument("--csv", required=True)
    c.add_argument("--dataset")
    c.set_defaults(func=cmd_descriptors_import, need_out=True)

    g = groups.add_parser("split").add_subparsers(dest="command", required=True)
    c = g.add_parser("generate", parents=[common], help="write a split manifest")
    c.add_argument("--strategy", choices=STRATEGIES)
    c.add_argument("--descriptors")
    c.add_argument("--dataset")
    c.add_argument("--k", type=int)
    c.add_argument("--n-tasks", dest="n_tasks", type=int)
    c.add_argument("--m-neighbors", dest="m_neighbors", type=int)
    c.add_argument("--k-density", dest="k_density", type=int)
    c.set_defaults(func=cmd_split_generate, need_out=True)
    c = g.add_parser("optimize-k", parents=[common], help="pick the LOCO cluster count")
    c.add_argument("--descriptors", required=True)
    c.add_argument("--dataset")
    c.add_argument("--candidates", help="comma-separated cluster counts")
    c.set_defaults(func=cmd_split_optimize_k)

    c = groups.add_parser("train", parents=[common], help="train the reference model on one task")
    c.add_argument("--dataset")
    c.add_argument("--split", required=True)
    c.add_argument("--task", required=True)
    c.add_argument("--epochs", type=int)
    c.set_defaults(func=cmd_train, need_out=True)

    c = groups.add_parser("infer", parents=[common], help="MC-dropout and deterministic inference on a test set")
    c.add_argument("--dataset")
    c.add_argument("--split", required=True)
    c.add_argument("--task", required=True)
    c.add_argument("--weights", required=True)
    c.add_argument("--T", type=int)
    c.set_defaults(func=cmd_infer, need_out=True)

    c = groups.add_parser("evaluate", parents=[common], help="run the full benchmark pipeline")
    c.add_argument("--workers", type=int)
    c.set_defaults(func=cmd_evaluate)

    c = groups.add_parser("score-external", parents=[common], help="score an external NIG-pass file")
    c.add_argument("--passes", required=True)
    c.add_argument("--truth", required=True)
    c.add_argument("--T", type=int)
    c.add_argument("--deterministic")
    c.set_defaults(func=cmd_score_external)

    c = groups.add_parser("report", parents=[common], help="print a run's task table with its summary row")
    c.add_argument("--run", help="run directory")
    c.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    name = " ".join(x for x in (args.group, getattr(args, "command", None)) if x)
    try:
        if getattr(args, "need_out", False) and not args.out:
            raise ValueError("--out is required")
        args.func(args, _load_config(args.config))
    except Exception as exc:  # one machine-readable line, no traceback
        msg = str(exc).replace("\n", " ")
        print(f"error command={name.replace(' ', '-')} type={type(exc).__name__} message={json.dumps(msg)}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
