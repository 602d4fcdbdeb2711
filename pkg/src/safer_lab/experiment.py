"""Experiment execution and result artifacts.

Layout under the output directory::

    runs/<label>/seed-<k>/result.json   one run (algorithm x seed)
    runs/<label>/seed-<k>/trace.csv     per-step loss terms
    log.json                            the experiment log (config echo, runs, records, summary)
    tables/*.tsv                        human-readable summaries
    plots/*.tsv                         plot data, see :func:`emit_plot_data`
    timings.json                        wall-clock seconds per phase

Everything except ``timings.json`` is a pure function of the config.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datagen import LabeledDataset, PhasePlan, plan_phases
from .metrics import (
    accuracy,
    dbi,
    forgetting_reversal,
    knowledge_erosion,
    margin_histogram,
    mia_score,
    representation_similarity,
    tug_of_war,
)
from .model import Model, forward_classify, forward_stabilized
from .unlearn import AlgorithmConfig, PhaseResult, eval_sets, iter_continual, train_original

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("phase", "step", "ce", "recon", "kl", "sep", "forget_kl")
ALIGNED_TOW_SETS = ("retain_test", "forget_test", "forgot_test")
MISALIGNED_TOW_SETS = ("retain_train", "forget_train", "test", "forgot_train")


def artifact_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _pct(v):
    return None if v is None else 100.0 * v


def _hist(h) -> dict:
    return {
        "edges": h.edges.tolist(),
        "counts": h.counts.tolist(),
        "n": int(h.counts.sum()),
        "frac_negative": h.frac_negative,
    }


def _similarity(before: Model, after: Model, x, edges) -> dict:
    s = representation_similarity(before, after, x) if len(x) else None
    if s is None:
        return {"edges": edges.tolist(), "counts": [0] * (edges.size - 1), "n": 0, "excluded": 0, "mean": None}
    counts, _ = np.histogram(s.values, bins=edges)
    return {
        "edges": edges.tolist(),
        "counts": counts.astype(int).tolist(),
        "n": int(s.values.size),
        "excluded": s.excluded,
        "mean": float(s.values.mean()) if s.values.size else None,
    }


def _stabilized_acc(model: Model, x, y):
    if len(y) == 0:
        return None
    return 100.0 * float(np.mean(np.argmax(forward_stabilized(model, x), axis=1) == y))


def tow_sets(class_aligned: bool) -> tuple[str, ...]:
    return ALIGNED_TOW_SETS if class_aligned else MISALIGNED_TOW_SETS


def phase_record(
    cfg: ExperimentConfig,
    ds: LabeledDataset,
    plan: PhasePlan,
    res: PhaseResult,
    ref: PhaseResult | None,
    original: Model,
    algo: AlgorithmConfig,
) -> dict:
    """Everything reported about one phase of one run."""
    t = res.t
    sets = eval_sets(ds, plan, t)
    xy = {k: (ds.features[idx], ds.labels[idx]) for k, idx in sets.items()}
    acc = {k: _pct(v) for k, v in res.accuracy.items()}
    rec: dict = {
        "phase": t,
        "accuracy": acc,
        "original_accuracy": {k: _pct(accuracy(original, *xy[k])) for k in sorted(xy)},
    }

    tow = None
    if ref is not None:
        keys = [k for k in tow_sets(ds.class_aligned) if res.accuracy[k] is not None]
        tow = tug_of_war({k: res.accuracy[k] for k in keys}, {k: ref.accuracy[k] for k in keys})
    rec["tow"] = tow

    if algo.name == "safer":
        rec["stabilized_accuracy"] = {k: _stabilized_acc(res.model, *xy[k]) for k in ("retain_test", "forget_test", "test")}

    m = cfg.metrics
    feats = forward_classify(res.model, xy["retain_train"][0])[0]
    labels = xy["retain_train"][1]
    rec["feature_centroids"] = {str(int(c)): feats[labels == c].mean(axis=0).tolist() for c in np.unique(labels)}
    if m.dbi:
        try:
            d = dbi(feats, labels)
            rec["dbi"] = {"value": d.value, "per_class": {str(k): v for k, v in d.per_class.items()}, "guarded": d.guarded}
        except ValueError:
            rec["dbi"] = None
    if m.mia:
        if all(len(xy[k][1]) for k in ("retain_train", "retain_test", "forget_train")):
            r = mia_score(res.model, xy["retain_train"], xy["retain_test"], xy["forget_train"])
            rec["mia"] = {
                "attack": "loss-threshold",
                "score": r.score,
                "threshold": r.threshold,
                "balanced_accuracy": r.balanced_accuracy,
                "degenerate": r.degenerate,
            }
        else:
            rec["mia"] = None
    if m.margins:
        rec["margins"] = {
            k: _hist(margin_histogram(res.model, *xy[f"{k}_train"], m.margin_edges, k, t)) for k in ("forget", "forgot")
        }
    if m.similarity:
        rec["similarity"] = {
            k: _similarity(original, res.model, xy[f"{k}_train"][0], m.similarity_edges) for k in ("retain", "forget")
        }
    return rec


def run_metrics(phases: list[dict], class_aligned: bool) -> dict:
    """m(KE) and m(FR) in percentage points; ``None`` when undefined (T < 2)."""
    split = "test" if class_aligned else "train"
    retain = [p["accuracy"][f"retain_{split}"] for p in phases]
    forget = [p["accuracy"][f"forget_{split}"] for p in phases]
    forgot = [p["accuracy"][f"forgot_{split}"] for p in phases[1:]]
    ok = None not in retain and None not in forget and None not in forgot
    return {
        "m_ke": knowledge_erosion(retain) if ok else None,
        "m_fr": forgetting_reversal(forget, forgot) if ok and forgot else None,
    }


def _trace_rows(results: list[PhaseResult]) -> list[dict]:
    return [{"phase": r.t, **row} for r in results for row in r.trace]


def run_seed(cfg: ExperimentConfig, seed: int) -> list[dict]:
    """All algorithms for one seed. Retrain is always run as the reference."""
    ds = cfg.build_dataset()
    plan = plan_phases(ds, cfg.schedule)
    out = []
    original = train_original(ds, cfg.train, seed)

    ref_cfg = AlgorithmConfig("retrain")
    ref: list[PhaseResult] = []
    ref_error = None
    try:
        for r in iter_continual(ds, plan, ref_cfg, cfg.train, seed, original):
            ref.append(r)
    except Exception as exc:  # the reference failing must not kill the other runs
        ref_error = f"{type(exc).__name__}: {exc}"
        log.error("retrain reference failed for seed %d: %s", seed, ref_error)

    for algo in cfg.algorithms:
        results: list[PhaseResult] = []
        error = None
        if algo.name == "retrain":
            results, error = ref, ref_error
        else:
            try:
                for r in iter_continual(ds, plan, algo, cfg.train, seed, original):
                    results.append(r)
            except Exception as exc:
                error = f"{type(exc).__name__}: {exc}"
                log.error("%s seed %d failed: %s", algo.label, seed, error)
                log.debug("%s", traceback.format_exc())
        phases = []
        for i, r in enumerate(results):
            phases.append(phase_record(cfg, ds, plan, r, ref[i] if i < len(ref) else None, original, algo))
        complete = error is None and len(phases) == plan.T
        out.append(
            {
                "label": algo.label,
                "seed": seed,
                "algorithm": asdict(algo),
                "status": "ok" if complete else "failed",
                "error": error,
                "phases": phases,
                "metrics": run_metrics(phases, ds.class_aligned) if complete else {"m_ke": None, "m_fr": None},
                "trace": _trace_rows(results),
                "wall_time": [r.wall_time for r in results],
            }
        )
    return out


def _stat(values) -> dict:
    v = [x for x in values if x is not None]
    if not v:
        return {"mean": None, "std": None, "n": 0}
    a = np.asarray(v, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std()), "n": int(a.size)}


def summarize(runs: list[dict], labels: list[str], T: int) -> dict:
    """Mean and (population) standard deviation over the successful repeats."""
    summary = {}
    for label in labels:
        ok = [r for r in runs if r["label"] == label and r["status"] == "ok"]
        per_phase = []
        for t in range(T):
            ph = [r["phases"][t] for r in ok]
            keys = sorted(ph[0]["accuracy"]) if ph else []
            entry = {
                "phase": t + 1,
                "accuracy": {k: _stat(p["accuracy"][k] for p in ph) for k in keys},
                "tow": _stat(p["tow"] for p in ph),
                "dbi": _stat((p.get("dbi") or {}).get("value") for p in ph),
                "mia": _stat((p.get("mia") or {}).get("score") for p in ph),
            }
            per_phase.append(entry)
        summary[label] = {
            "repeats_ok": len(ok),
            "phases": per_phase,
            "m_ke": _stat(r["metrics"]["m_ke"] for r in ok),
            "m_fr": _stat(r["metrics"]["m_fr"] for r in ok),
        }
    return summary


def records(runs: list[dict]) -> list[dict]:
    """Flat per-(algorithm, repeat, phase) rows."""
    out = []
    for r in runs:
        for p in r["phases"]:
            out.append(
                {
                    "label": r["label"],
                    "seed": r["seed"],
                    "phase": p["phase"],
                    "accuracy": p["accuracy"],
                    "tow": p["tow"],
                    "dbi": (p.get("dbi") or {}).get("value"),
                    "mia": (p.get("mia") or {}).get("score"),
                }
            )
    return out


def _config_echo(cfg: ExperimentConfig) -> dict:
    return {
        "name": cfg.name,
        "dataset": cfg.dataset,
        "schedule": cfg.schedule,
        "train": asdict(cfg.train),
        "algorithms": [asdict(a) for a in cfg.algorithms],
        "seeds": cfg.seeds,
        "metrics": {
            **{k: v for k, v in asdict(cfg.metrics).items() if k != "margin_range"},
            "margin_range": list(cfg.metrics.margin_range),
        },
    }


def _tsv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def emit_plot_data(experiment_log: dict, out_dir) -> list[Path]:
    """Write one tab-separated file per figure family; returns the paths."""
    plots = Path(out_dir)
    plots.mkdir(parents=True, exist_ok=True)
    summary = experiment_log["summary"]
    runs = experiment_log["runs"]
    # config order; the summary mapping is key-sorted once written to disk
    labels = [a["label"] for a in experiment_log["config"]["algorithms"]]
    files = {}

    files["tow.tsv"] = _tsv(
        ["algorithm", "phase", "mean", "std", "n"],
        [[lab, p["phase"], _fmt(p["tow"]["mean"]), _fmt(p["tow"]["std"]), p["tow"]["n"]] for lab in labels for p in summary[lab]["phases"]],
    )
    files["ke_fr.tsv"] = _tsv(
        ["algorithm", "metric", "mean", "std", "n"],
        [[lab, m, _fmt(summary[lab][k]["mean"]), _fmt(summary[lab][k]["std"]), summary[lab][k]["n"]] for lab in labels for m, k in (("m(KE)", "m_ke"), ("m(FR)", "m_fr"))],
    )
    files["mia.tsv"] = _tsv(
        ["algorithm", "phase", "attack", "mean", "std", "n"],
        [[lab, p["phase"], "loss-threshold", _fmt(p["mia"]["mean"]), _fmt(p["mia"]["std"]), p["mia"]["n"]] for lab in labels for p in summary[lab]["phases"]],
    )
    files["dbi.tsv"] = _tsv(
        ["algorithm", "phase", "mean", "std", "n"],
        [[lab, p["phase"], _fmt(p["dbi"]["mean"]), _fmt(p["dbi"]["std"]), p["dbi"]["n"]] for lab in labels for p in summary[lab]["phases"]],
    )

    def hist_rows(key):
        rows = []
        for r in runs:
            for p in r["phases"]:
                for name, h in sorted((p.get(key) or {}).items()):
                    e = h["edges"]
                    for i, c in enumerate(h["counts"]):
                        rows.append([r["label"], r["seed"], p["phase"], name, repr(e[i]), repr(e[i + 1]), c])
        return rows

    head = ["algorithm", "seed", "phase", "set", "bin_lo", "bin_hi", "count"]
    files["margins.tsv"] = _tsv(head, hist_rows("margins"))
    files["similarity.tsv"] = _tsv(head, hist_rows("similarity"))

    paths = []
    for name, text in files.items():
        path = plots / name
        path.write_text(text)
        paths.append(path)
    return paths


def write_tables(experiment_log: dict, out_dir) -> None:
    tables = Path(out_dir)
    tables.mkdir(parents=True, exist_ok=True)
    summary = experiment_log["summary"]
    labels = [a["label"] for a in experiment_log["config"]["algorithms"]]
    rows = []
    for lab in labels:
        for p in summary[lab]["phases"]:
            for k, st in p["accuracy"].items():
                if st["n"]:
                    rows.append([lab, p["phase"], k, f"{st['mean']:.2f}", f"{st['std']:.2f}", st["n"]])
    (tables / "accuracy.tsv").write_text(_tsv(["algorithm", "phase", "set", "mean_pct", "std_pct", "n"], rows))
    rows = []
    for lab in labels:
        for p in summary[lab]["phases"]:
            row = [lab, p["phase"]]
            for key in ("tow", "dbi", "mia"):
                st = p[key]
                row.append("" if st["mean"] is None else f"{st['mean']:.4f} ± {st['std']:.4f}")
            rows.append(row)
    (tables / "metrics.tsv").write_text(_tsv(["algorithm", "phase", "tow", "dbi", "mia_loss_threshold"], rows))


def _write_run(out: Path, run: dict) -> None:
    d = out / "runs" / run["label"] / f"seed-{run['seed']}"
    d.mkdir(parents=True, exist_ok=True)
    body = {k: v for k, v in run.items() if k not in ("trace", "wall_time")}
    (d / "result.json").write_text(dumps(body))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, restval=0.0, lineterminator="\n")
    w.writeheader()
    for row in run["trace"]:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    (d / "trace.csv").write_text(buf.getvalue())


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> dict:
    """Execute every (algorithm, seed) run and write all artifacts. Returns the log."""
    out = Path(out_dir) if out_dir is not None else cfg.resolved_output()
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or cfg.workers
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cfg.seeds))) as pool:
            per_seed = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        per_seed = [run_seed(cfg, s) for s in cfg.seeds]

    labels = [a.label for a in cfg.algorithms]
    # label-major order, independent of scheduling
    runs = sorted((r for batch in per_seed for r in batch), key=lambda r: (labels.index(r["label"]), cfg.seeds.index(r["seed"])))
    for r in runs:
        _write_run(out, r)
    timings = {f"{r['label']}/seed-{r['seed']}": r["wall_time"] for r in runs}
    (out / "timings.json").write_text(json.dumps(timings, sort_keys=True, indent=1) + "\n")

    T = len(cfg.schedule)
    failed = [f"{r['label']}/seed-{r['seed']}" for r in runs if r["status"] != "ok"]
    experiment_log = {
        "artifact_version": artifact_version(),
        "config": _config_echo(cfg),
        "status": "failed" if failed else "ok",
        "failed_runs": failed,
        "runs": [{k: v for k, v in r.items() if k not in ("trace", "wall_time")} for r in runs],
        "records": records(runs),
        "summary": summarize(runs, labels, T),
    }
    (out / "log.json").write_text(dumps(experiment_log))
    write_tables(experiment_log, out / "tables")
    emit_plot_data(experiment_log, out / "plots")
    return experiment_log


def load_log(path) -> dict:
    return json.loads(Path(path).read_text())
