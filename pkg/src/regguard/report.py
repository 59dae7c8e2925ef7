"""Reports: JSON documents with a fixed key schema, text tables, CSV rows and figures."""

from __future__ import annotations

import csv
import io
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Mapping, Sequence

from .presync import FreshnessParams, estimate_fail_rate
from .sim import MetricStat, ScenarioConfig, complexity_scaling, linear_fit, monte_carlo, run_scenario, with_overrides

REPORT_FORMAT = "regguard-report/1"
SWEEP_FORMAT = "regguard-sweep/1"
BOUND_FORMAT = "regguard-bound/1"


def dumps(doc) -> str:
    return json.dumps(doc, indent=2) + "\n"


def _run(args):
    cfg, mode, with_log = args
    log = [] if with_log else None
    m = run_scenario(cfg, mode=mode, event_log=log)
    return m.as_dict(), m.evidence, log


def _reduction(base: float, guarded: float) -> float | None:
    return None if base == 0 else 1.0 - guarded / base


def simulate(cfg: ScenarioConfig, *, trials: int = 0, jobs: int = 1) -> tuple[dict, list, list]:
    """Report document, slashing evidence texts and event log for one scenario.

    Runs cfg.mode (and baseline too when cfg.compare_baseline); with trials >= 2
    also aggregates Monte Carlo statistics per mode.
    """
    modes = [cfg.mode] + (["baseline"] if cfg.compare_baseline and cfg.mode != "baseline" else [])
    work = [(cfg, mode, i == 0) for i, mode in enumerate(modes)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            results = list(pool.map(_run, work))
    else:
        results = [_run(w) for w in work]
    runs = {mode: r[0] for mode, r in zip(modes, results)}
    doc = {"format": REPORT_FORMAT, "config": cfg.to_dict(), "runs": runs}
    if "baseline" in runs and "guarded" in runs:
        b, g = runs["baseline"]["p_fail_accepted"], runs["guarded"]["p_fail_accepted"]
        doc["comparison"] = {"p_fail_baseline": b, "p_fail_guarded": g, "relative_reduction": _reduction(b, g)}
    if trials >= 2:
        doc["monte_carlo"] = {
            mode: {"trials": trials, "stats": {k: v.as_dict() for k, v in monte_carlo(cfg, trials, mode=mode, jobs=jobs).items()}}
            for mode in modes
        }
    evidence = results[0][1]
    return doc, evidence, results[0][2]


def sweep(cfg: ScenarioConfig, axes: Mapping[str, Sequence], *, trials: int = 2, jobs: int = 1) -> dict:
    """Monte Carlo at every point of the Cartesian product of `axes`."""
    names = list(axes)
    modes = [cfg.mode] + (["baseline"] if cfg.compare_baseline and cfg.mode != "baseline" else [])
    rows = []
    for values in itertools.product(*(axes[n] for n in names)):
        point = dict(zip(names, values))
        pcfg = with_overrides(cfg, point)
        for mode in modes:
            st = monte_carlo(pcfg, trials, mode=mode, jobs=jobs)
            row = dict(point)
            row["mode"] = mode
            row.update(_flat("p_fail_accepted", st["p_fail_accepted"]))
            row.update(_flat("beta_hat", st["beta_hat"]))
            row["bound_mean"] = st["bound"].mean
            row["settle_failed_mean"] = st["count.settle_failed"].mean
            row["executed_mean"] = st["count.executed"].mean
            rows.append(row)
    return {"format": SWEEP_FORMAT, "axes": names, "trials": trials, "rows": rows}


def _flat(name: str, s: MetricStat) -> dict:
    return {f"{name}_mean": s.mean, f"{name}_ci_low": s.ci_low, f"{name}_ci_high": s.ci_high}


def _bound_point(args) -> dict:
    eps, eta, trials, seed = args
    return estimate_fail_rate(trials, FreshnessParams(eps, eta), seed=seed).as_dict()


def bound_sweep(epsilons: Sequence[float], etas: Sequence[float], *, trials: int, seed: int = 0, jobs: int = 1) -> dict:
    """Failure rate among accepted transactions against epsilon + eta over a grid."""
    work = [(e, h, trials, seed) for e in epsilons for h in etas]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_bound_point, work))
    else:
        rows = [_bound_point(w) for w in work]
    return {"format": BOUND_FORMAT, "trials": trials, "seed": seed, "rows": rows}


# ---------------------------------------------------------------------------
# text output


def to_csv(rows: Sequence[Mapping]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def render_table(doc: Mapping) -> str:
    fmt = doc.get("format")
    if fmt == REPORT_FORMAT:
        runs = doc["runs"]
        modes = list(runs)
        lines = [f"{'metric':<28}" + "".join(f"{m:>14}" for m in modes)]
        keys = [("count", k) for k in runs[modes[0]]["counts"]]
        keys += [("p_fail_accepted", None), ("bound", "epsilon_hat"), ("bound", "bound"), ("fairness", "beta_hat"), ("fairness", "qualifying_pairs"), ("slashing", "events")]
        keys += [("cost", k) for k in runs[modes[0]]["costs"]]
        for sect, k in keys:
            if sect == "count":
                vals, label = [runs[m]["counts"][k] for m in modes], k
            elif sect == "cost":
                vals, label = [runs[m]["costs"][k] for m in modes], k
            elif sect == "bound":
                vals, label = [runs[m]["bound_line"][k] for m in modes], k
            elif k is None:
                vals, label = [runs[m][sect] for m in modes], sect
            else:
                vals, label = [runs[m][sect][k] for m in modes], f"{sect}.{k}"
            lines.append(f"{label:<28}" + "".join(f"{_fmt(v):>14}" for v in vals))
        if "comparison" in doc and doc["comparison"]["relative_reduction"] is not None:
            lines.append(f"{'relative_reduction':<28}{_fmt(doc['comparison']['relative_reduction']):>14}")
        return "\n".join(lines) + "\n"
    rows = doc.get("rows", [])
    if not rows:
        return "(no rows)\n"
    cols = list(rows[0])
    widths = [max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in cols]
    out = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    out += ["  ".join(_fmt(r[c]).rjust(w) for c, w in zip(cols, widths)) for r in rows]
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# figures


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> None:
    # fixed metadata keeps the files reproducible
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else {"Creator": None, "CreationDate": None})


def plot_sweep(doc: Mapping, path: Path) -> None:
    """p_fail against the first sweep axis, one line per mode, with 95% CIs."""
    plt = _plt()
    axis = doc["axes"][0]
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode in dict.fromkeys(r["mode"] for r in doc["rows"]):
        rows = [r for r in doc["rows"] if r["mode"] == mode]
        xs = [r[axis] for r in rows]
        ys = [r["p_fail_accepted_mean"] for r in rows]
        lo = [max(0.0, y - r["p_fail_accepted_ci_low"]) for y, r in zip(ys, rows)]
        hi = [r["p_fail_accepted_ci_high"] - y for y, r in zip(ys, rows)]
        ax.errorbar(xs, ys, yerr=[lo, hi], marker="o", capsize=3, label=mode)
    ax.set_xlabel(axis)
    ax.set_ylabel("settlement failures / accepted")
    ax.set_title(f"Settlement failure rate ({doc['trials']} runs per point, 95% CI)")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_bound(doc: Mapping, path: Path) -> None:
    plt = _plt()
    rows = doc["rows"]
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r["bound"] for r in rows]
    ax.scatter(xs, [r["p_fail_accepted"] for r in rows], label="empirical", zorder=3)
    ax.scatter(xs, [r["allowance"] for r in rows], marker="_", s=200, label="bound + 3 sd allowance")
    top = max(xs + [1e-3])
    ax.plot([0, top], [0, top], "k--", linewidth=1, label="epsilon + eta")
    ax.set_xlabel("epsilon + eta")
    ax.set_ylabel("failure rate among accepted")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_complexity(rows: Sequence[Mapping], path: Path) -> None:
    plt = _plt()
    xs = [r["sum_L"] for r in rows]
    ys = [r["mean_visits"] for r in rows]
    slope, icpt, r2 = linear_fit(xs, ys)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, "o", label="measured")
    ax.plot(xs, [slope * x + icpt for x in xs], "-", label=f"linear fit, R^2={r2:.4f}")
    ax.set_xlabel("sum of rule sizes L over applicable rules")
    ax.set_ylabel("predicate node visits per transaction")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_fairness(docs: Sequence[Mapping], path: Path) -> None:
    plt = _plt()
    labels, values = [], []
    for i, d in enumerate(docs):
        for mode, run in d["runs"].items():
            labels.append(f"{i}:{mode}")
            values.append(run["fairness"]["beta_hat"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, values)
    ax.set_ylabel("empirical beta (inverted qualifying pairs)")
    ax.set_title("Ordering fairness per run")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def write_report_bundle(out: Path, inputs: Sequence[Mapping], *, seed: int = 0) -> list[Path]:
    """Render every figure and CSV the inputs support, plus the rule-cost scaling series."""
    out.mkdir(parents=True, exist_ok=True)
    written = []
    sims = [d for d in inputs if d.get("format") == REPORT_FORMAT]
    for i, d in enumerate(inputs):
        fmt = d.get("format")
        if fmt == SWEEP_FORMAT:
            p = out / f"sweep_{i}.png"
            plot_sweep(d, p)
            written += [p, _write(out / f"sweep_{i}.csv", to_csv(d["rows"]))]
        elif fmt == BOUND_FORMAT:
            p = out / f"bound_{i}.png"
            plot_bound(d, p)
            written += [p, _write(out / f"bound_{i}.csv", to_csv(d["rows"]))]
        elif fmt == REPORT_FORMAT:
            rows = [{"mode": m, **r["counts"], "p_fail_accepted": r["p_fail_accepted"], "beta_hat": r["fairness"]["beta_hat"]} for m, r in d["runs"].items()]
            written.append(_write(out / f"simulate_{i}.csv", to_csv(rows)))
        else:
            raise ValueError(f"input {i}: unknown document format {fmt!r}")
    if sims:
        p = out / "fairness.png"
        plot_fairness(sims, p)
        written.append(p)
    rows = complexity_scaling(seed=seed)
    p = out / "complexity.png"
    plot_complexity(rows, p)
    written += [p, _write(out / "complexity.csv", to_csv(rows))]
    return written


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path
