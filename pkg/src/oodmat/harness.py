"""Benchmark orchestration and the plain-text interchange formats.

NIG-pass file (``passes.csv``)::

    # nig-passes T=<T> N=<N>
    t,i,gamma,nu,alpha,beta
    0,0,<gamma>,<nu>,<alpha>,<beta>
    ...

rows sorted by ``(t, i)``, every cell present, floats in round-trip
precision.  A deterministic prediction is the same layout with ``T=1``.

Truth file: a single CSV column of targets, optionally headed ``target``.

Run directory layout written by :func:`run_benchmark`::

    dataset.jsonl  descriptors.csv  split.json
    tasks/<task>/{history.csv, passes.csv, deterministic.csv, truth.csv}
    tasks.csv      one row per task plus a ``summary`` row
    report.json    same numbers, structured
    manifest.json  resolved config, version, sha256 of every artifact
    FAILED         only when a stage failed; names the stage
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import parse_dataset, write_dataset
from .errors import ConfigError, DomainError, ParseError, PipelineError, ValidationError
from .evidential import NIGParams
from .metrics import (UNCERTAINTIES, MetricReport, d_eviu, d_unc, eviu, mc_mean, score, spearman, summarize,
                      write_report_csv, write_report_json)
from .model import ModelConfig
from .soap import SoapConfig, compute_descriptors, load_external_descriptors, save_descriptors
from .splitting import (K_DENSITY, N_NEIGHBORS, N_SPARSE_TASKS, STRATEGIES, Scenario, make_scenario,
                        optimize_cluster_count, save_scenario)
from .structure import LabeledDataset
from .synthetic import generate_synthetic
from .training import MC_PASSES, GraphCache, PassTensor, TrainConfig, deterministic_infer, mcd_infer, train, write_history

log = logging.getLogger(__name__)

WORKERS_ENV = "OODMAT_WORKERS"
_HEADER = re.compile(r"#\s*nig-passes\s+T=(\d+)\s+N=(\d+)\s*$")
_COLUMNS = "t,i,gamma,nu,alpha,beta"


# ---------------------------------------------------------------------------
# pass and truth files


def write_passes(passes, path):
    """Write a PassTensor (or NIGParams, as T=1) in the NIG-pass layout."""
    if isinstance(passes, NIGParams):
        passes = PassTensor.from_passes([passes])
    lines = [f"# nig-passes T={passes.T} N={passes.N}", _COLUMNS]
    for t in range(passes.T):
        for i in range(passes.N):
            vals = (passes.gamma[t, i], passes.nu[t, i], passes.alpha[t, i], passes.beta[t, i])
            lines.append(f"{t},{i}," + ",".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_passes(path) -> PassTensor:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    name = Path(path).name
    if len(text) < 2:
        raise ParseError(f"{name}: missing header")
    m = _HEADER.match(text[0].strip())
    if not m:
        raise ParseError(f"{name}:1: expected '# nig-passes T=<T> N=<N>'")
    T, N = int(m.group(1)), int(m.group(2))
    if T < 1:
        raise ParseError(f"{name}: T must be >= 1")
    if text[1].strip().replace(" ", "") != _COLUMNS:
        raise ParseError(f"{name}:2: expected column header '{_COLUMNS}'")
    body = [ln for ln in text[2:] if ln.strip()]
    if len(body) != T * N:
        raise ParseError(f"{name}: expected {T * N} rows for T={T}, N={N}, found {len(body)}")
    vals = np.empty((T, N, 4))
    for k, ln in enumerate(body):
        parts = ln.split(",")
        try:
            t, i = int(parts[0]), int(parts[1])
            row = [float(v) for v in parts[2:]]
        except (ValueError, IndexError):
            raise ParseError(f"{name}:{k + 3}: malformed row") from None
        if len(row) != 4:
            raise ParseError(f"{name}:{k + 3}: expected 6 fields")
        if (t, i) != divmod(k, N):
            raise ParseError(f"{name}:{k + 3}: rows must be sorted by (t, i); got ({t}, {i})")
        vals[t, i] = row
    try:
        return PassTensor(vals[..., 0], vals[..., 1], vals[..., 2], vals[..., 3])
    except DomainError as exc:
        raise ValidationError(f"{name}: {exc}") from exc


def write_truth(y, path):
    Path(path).write_text("target\n" + "".join(f"{float(v)!r}\n" for v in np.ravel(y)), encoding="utf-8")


def read_truth(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if lines and lines[0].lower() == "target":
        lines = lines[1:]
    try:
        y = np.array([float(ln.split(",")[0]) for ln in lines])
    except ValueError as exc:
        raise ParseError(f"{Path(path).name}: {exc}") from None
    if not np.all(np.isfinite(y)):
        raise ValidationError(f"{Path(path).name}: non-finite target")
    return y


def score_external(pass_file, truth_file, T: int | None = None, deterministic_file=None,
                   name: str = "external") -> MetricReport:
    """Score externally produced NIG predictions.

    A ``T=1`` pass file is treated as a deterministic prediction and fills
    MAE and EviU only.  For ``T > 1`` the dropout metrics are computed, and
    MAE/EviU come from ``deterministic_file`` when one is given.
    """
    passes = read_passes(pass_file)
    truth = read_truth(truth_file)
    if T is not None and passes.T != T:
        raise ValueError(f"pass file has T={passes.T}, expected T={T}")
    if passes.N != len(truth):
        raise ValueError(f"pass file has N={passes.N} samples but truth file has {len(truth)}")
    det = None
    if deterministic_file is not None:
        dpass = read_passes(deterministic_file)
        if dpass.T != 1 or dpass.N != len(truth):
            raise ValueError("deterministic file must have T=1 and match the truth length")
        det = dpass.pass_params(0)
    if passes.T == 1:
        return score(truth, deterministic=passes.pass_params(0), name=name)
    return score(truth, deterministic=det, passes=passes, name=name)


# ---------------------------------------------------------------------------
# configuration


def _sub(cls, d):
    if d is None:
        return cls()
    if isinstance(d, cls):
        return d
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class RunConfig:
    """Everything needed to reproduce one benchmark run.

    ``descriptors`` is ``{"source": "soap", <SoapConfig fields except
    species>}`` or ``{"source": "external", "path": ...}``; it may be
    ``None`` only for the target-space strategies SYS and SYC.
    """

    dataset: str | None = None
    dataset_format: str | None = None
    synthetic: dict | None = None
    descriptors: dict | None = field(default_factory=lambda: {"source": "soap"})
    strategy: str = "SOAP-LOCO"
    k: int | None = None
    candidates: list | None = None
    n_tasks: int = N_SPARSE_TASKS
    m_neighbors: int = N_NEIGHBORS
    k_density: int = K_DENSITY
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    T: int = MC_PASSES
    out: str = "run"
    seed: int = 0
    workers: int = field(default_factory=default_workers)

    def __post_init__(self):
        self.model = _sub(ModelConfig, self.model)
        self.train = _sub(TrainConfig, self.train)
        if (self.dataset is None) == (self.synthetic is None):
            raise ConfigError("give exactly one of 'dataset' and 'synthetic'")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.descriptors is None:
            if self.strategy not in ("SYS", "SYC"):
                raise ConfigError(f"strategy {self.strategy} needs a descriptor source")
        else:
            src = self.descriptors.get("source")
            if src not in ("soap", "external"):
                raise ConfigError("descriptors.source must be 'soap' or 'external'")
            if src == "external" and not self.descriptors.get("path"):
                raise ConfigError("external descriptors need a 'path'")
        if self.candidates is not None and self.strategy not in ("LOCO", "SOAP-LOCO"):
            raise ConfigError("cluster-count candidates only apply to LOCO strategies")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        text = Path(path).read_text(encoding="utf-8")
        if Path(path).suffix.lower() in (".yaml", ".yml"):
            import yaml

            d = yaml.safe_load(text) or {}
        else:
            d = json.loads(text)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self, include_workers: bool = False) -> dict:
        d = asdict(self)
        if not include_workers:
            d.pop("workers")
        return d


# ---------------------------------------------------------------------------
# pipeline pieces


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_dataset(cfg: RunConfig) -> LabeledDataset:
    if cfg.synthetic is not None:
        return generate_synthetic(int(cfg.synthetic.get("n", 200)), int(cfg.synthetic.get("seed", cfg.seed)))
    return parse_dataset(cfg.dataset, cfg.dataset_format)


def soap_config_for(ds: LabeledDataset, opts: dict | None) -> SoapConfig:
    opts = {k: v for k, v in (opts or {}).items() if k not in ("source", "path", "workers")}
    species = opts.pop("species", None) or ds.species()
    return SoapConfig(species=tuple(species), **opts)


def descriptors_for(ds: LabeledDataset, cfg: RunConfig):
    if cfg.descriptors is None:
        return None
    if cfg.descriptors["source"] == "external":
        X = load_external_descriptors(cfg.descriptors["path"])
        if len(X) != len(ds):
            raise ValidationError(f"descriptor file has {len(X)} rows, dataset has {len(ds)}")
        return X
    return compute_descriptors(ds, soap_config_for(ds, cfg.descriptors), workers=cfg.workers)


def build_scenario(X, y, cfg: RunConfig) -> Scenario:
    k = cfg.k
    if cfg.candidates:
        k = optimize_cluster_count(X, y, cfg.candidates, cfg.seed)
    return make_scenario(cfg.strategy, X, y, cfg.seed, k, cfg.n_tasks, cfg.m_neighbors, cfg.k_density)


@dataclass
class TaskResult:
    report: MetricReport
    history: list
    passes: PassTensor
    deterministic: NIGParams
    truth: np.ndarray


def run_task(data: LabeledDataset, task, model: ModelConfig, tcfg: TrainConfig, T: int, seed: int) -> TaskResult:
    """Train on one task, then score deterministic and MC-dropout predictions on its test set."""
    task_seed = derive_seed(seed, task.name)
    mcfg = ModelConfig(**{**asdict(model), "seed": task_seed})
    tc = TrainConfig(**{**asdict(tcfg), "seed": task_seed})
    graphs = GraphCache(data, mcfg)
    w, history = train(data, task, mcfg, tc, graphs)
    test = list(task.test_idx)
    det = deterministic_infer(data, test, w, mcfg, graphs)
    passes = mcd_infer(data, test, w, mcfg, T, task_seed, graphs)
    truth = data.targets[test]
    rep = score(truth, det, passes, name=task.name)
    return TaskResult(rep, history, passes, det, truth)


def _run_task_job(args):
    return run_task(*args)


class _Stage:
    def __init__(self, out: Path, name: str):
        self.out, self.name = out, name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, PipelineError):
            return False
        (self.out / "FAILED").write_text(f"stage={self.name}\nerror={type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise PipelineError(self.name, f"{type(exc).__name__}: {exc}") from exc


def run_benchmark(cfg: RunConfig):
    """Run the whole pipeline; returns ``(task_reports, summary, manifest)``.

    Everything written is a pure function of ``cfg`` minus ``workers``, so
    reruns reproduce every report byte for byte.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    # task folders from an earlier run in the same directory would leak into the manifest
    shutil.rmtree(out / "tasks", ignore_errors=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    with _Stage(out, "dataset"):
        data = load_dataset(cfg)
        write_dataset(data, out / "dataset.jsonl", "structured-records")
    with _Stage(out, "descriptors"):
        X = descriptors_for(data, cfg)
        if X is not None:
            save_descriptors(X, out / "descriptors.csv")
    with _Stage(out, "split"):
        scenario = build_scenario(X, data.targets, cfg)
        save_scenario(scenario, out / "split.json")

    tasks = sorted(scenario.tasks, key=lambda t: t.name)
    with _Stage(out, "train"):
        jobs = [(data, t, cfg.model, cfg.train, cfg.T, cfg.seed) for t in tasks]
        if cfg.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(min(cfg.workers, len(jobs))) as ex:
                results = list(ex.map(_run_task_job, jobs))
        else:
            results = [run_task(*j) for j in jobs]

    with _Stage(out, "report"):
        for t, res in zip(tasks, results):
            tdir = out / "tasks" / t.name
            tdir.mkdir(parents=True, exist_ok=True)
            write_history(res.history, tdir / "history.csv")
            write_passes(res.passes, tdir / "passes.csv")
            write_passes(res.deterministic, tdir / "deterministic.csv")
            write_truth(res.truth, tdir / "truth.csv")
        reports = [r.report for r in results]
        summary = summarize(reports)
        write_report_csv(reports, summary, out / "tasks.csv")
        write_report_json(reports, summary, out / "report.json",
                          {"strategy": scenario.strategy, "params": scenario.params, "seed": cfg.seed,
                           "pooled_spearman": pooled_spearman(results)})
        manifest = write_manifest(cfg, out, started)
    return reports, summary, manifest


def pooled_spearman(results) -> dict:
    """Spearman of each uncertainty against absolute error over all test samples of all tasks.

    Complements the per-task values and their unweighted mean in the summary row.
    """
    err, d_err, unc = [], [], {k: [] for k in UNCERTAINTIES}
    for r in results:
        err.append(np.abs(r.deterministic.gamma - r.truth))
        d_err.append(np.abs(mc_mean(r.passes) - r.truth))
        unc["eviu"].append(eviu(r.deterministic)[1])
        unc["d_unc"].append(d_unc(r.passes))
        unc["d_eviu"].append(d_eviu(r.passes)[1])
    err, d_err = np.concatenate(err), np.concatenate(d_err)
    if len(err) < 2:
        return {}
    return {k: spearman(np.concatenate(v), err if k == "eviu" else d_err) for k, v in unc.items()}


def write_manifest(cfg: RunConfig, out: Path, started: str) -> dict:
    artifacts = sorted(
        p for p in out.rglob("*") if p.is_file() and p.name not in ("manifest.json", "FAILED")
    )
    hashes = {p.relative_to(out).as_posix(): sha256_file(p) for p in artifacts}
    config = cfg.to_dict()
    # the output location does not affect any artifact
    core = {"config": {k: v for k, v in config.items() if k != "out"}, "version": __version__, "hashes": hashes}
    manifest = {
        **core,
        "out": config["out"],
        "run_hash": hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest(),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return manifest
