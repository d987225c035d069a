"""Accuracy and uncertainty metrics for deterministic and MC-dropout inference."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError
from .evidential import NIGParams, eviu_per_sample
from .training import PassTensor, pass_mean

METRICS = ("mae", "eviu", "d_mae", "d_unc", "d_eviu")
UNCERTAINTIES = ("eviu", "d_unc", "d_eviu")


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(truth)} targets")
    if len(pred) == 0:
        raise ValueError("mae of an empty set")
    return float(np.mean(np.abs(pred - truth)))


def mc_mean(passes: PassTensor) -> np.ndarray:
    return pass_mean(passes.gamma)


def d_mae(passes: PassTensor, truth) -> float:
    return mae(mc_mean(passes), truth)


def d_unc(passes: PassTensor) -> np.ndarray:
    """Per-sample population variance of the predicted means across passes."""
    dev = passes.gamma - mc_mean(passes)[None, :]
    return (dev * dev).mean(axis=0)


def eviu(params: NIGParams):
    """(mean, per-sample) evidential uncertainty."""
    if np.size(params.gamma) == 0:
        raise ValueError("eviu of an empty set")
    per = np.atleast_1d(eviu_per_sample(params))
    return float(per.mean()), per


def d_eviu(passes: PassTensor):
    """Evidential uncertainty of the pass-averaged nu, alpha, beta."""
    nu, a, b = pass_mean(passes.nu), pass_mean(passes.alpha), pass_mean(passes.beta)
    if np.any(a <= 1):
        raise DomainError("averaged alpha must exceed 1")
    per = b / (nu * (a - 1.0)) + b / (a - 1.0)
    return float(per.mean()), per


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    start = 0
    while start < len(x):
        stop = start + 1
        while stop < len(x) and xs[stop] == xs[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def spearman(u, e, full: bool = False):
    """Spearman rank correlation with average ranks for ties.

    A constant input gives 0; with ``full=True`` the return value is
    ``(rho, degenerate)`` so callers can tell that case apart.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    e = np.asarray(e, dtype=float).reshape(-1)
    if len(u) != len(e):
        raise ValueError("length mismatch")
    if len(u) < 2:
        raise ValueError("spearman needs at least two samples")
    ru, re = average_ranks(u), average_ranks(e)
    ru -= ru.mean()
    re -= re.mean()
    den = math.sqrt(float((ru * ru).sum() * (re * re).sum()))
    if den == 0.0:
        return (0.0, True) if full else 0.0
    rho = float(np.clip((ru * re).sum() / den, -1.0, 1.0))
    return (rho, False) if full else rho


@dataclass
class MetricReport:
    """Task- or scenario-level metrics.

    Any of the five metrics may be ``None`` when the matching inference
    mode was not available.  ``spearman`` maps an uncertainty name to its
    rank correlation with absolute error: EviU against deterministic
    errors, D-Unc and D-EviU against errors of the pass-averaged prediction.
    """

    name: str
    n: int
    mae: float | None = None
    eviu: float | None = None
    d_mae: float | None = None
    d_unc: float | None = None
    d_eviu: float | None = None
    spearman: dict = field(default_factory=dict)
    per_sample: dict | None = field(default=None, repr=False)

    def row(self) -> dict:
        out = {"task": self.name, "n": self.n}
        for k in METRICS:
            out[k] = getattr(self, k)
        for k in UNCERTAINTIES:
            out[f"spearman_{k}"] = self.spearman.get(k)
        return out


def score(truth, deterministic: NIGParams | None = None, passes: PassTensor | None = None,
          name: str = "task", keep_samples: bool = False) -> MetricReport:
    """All available metrics for one task."""
    truth = np.asarray(truth, dtype=float).reshape(-1)
    rep = MetricReport(name, len(truth))
    samples = {}
    if deterministic is not None:
        pred = np.atleast_1d(deterministic.gamma)
        rep.mae = mae(pred, truth)
        rep.eviu, u = eviu(deterministic)
        err = np.abs(pred - truth)
        if len(truth) >= 2:
            rep.spearman["eviu"] = spearman(u, err)
        samples.update(abs_error=err, eviu=u)
    if passes is not None:
        if passes.N != len(truth):
            raise ValueError(f"pass tensor has {passes.N} samples, truth has {len(truth)}")
        rep.d_mae = d_mae(passes, truth)
        unc = d_unc(passes)
        rep.d_unc = float(unc.mean())
        rep.d_eviu, du = d_eviu(passes)
        d_err = np.abs(mc_mean(passes) - truth)
        if len(truth) >= 2:
            rep.spearman["d_unc"] = spearman(unc, d_err)
            rep.spearman["d_eviu"] = spearman(du, d_err)
        samples.update(d_abs_error=d_err, d_unc=unc, d_eviu=du)
    if keep_samples:
        rep.per_sample = samples
    return rep


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(reports, name: str = "summary") -> MetricReport:
    """Unweighted mean of task-level metrics (and of per-task Spearman values)."""
    reports = list(reports)
    out = MetricReport(name, int(sum(r.n for r in reports)))
    for k in METRICS:
        setattr(out, k, _mean_or_none(getattr(r, k) for r in reports))
    for k in UNCERTAINTIES:
        v = _mean_or_none(r.spearman.get(k) for r in reports)
        if v is not None:
            out.spearman[k] = v
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(reports, summary: MetricReport | None, path):
    """One row per task, then the summary row."""
    rows = [r.row() for r in reports] + ([summary.row()] if summary is not None else [])
    cols = list(rows[0]) if rows else ["task"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for r in rows:
            wr.writerow([_fmt(r[c]) for c in cols])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k == "task":
                continue
            r[k] = None if v == "" else (int(v) if k == "n" else float(v))
    return rows


def report_to_dict(rep: MetricReport) -> dict:
    d = asdict(rep)
    d.pop("per_sample")
    return d


def write_report_json(reports, summary, path, extra: dict | None = None):
    payload = {
        "tasks": [report_to_dict(r) for r in reports],
        "summary": report_to_dict(summary) if summary is not None else None,
    }
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
