"""Stage runner: synth -> ingest -> features -> train -> predict -> evaluate -> report.

Every stage reads its inputs from, and writes its artifacts to, one output
directory, then drops ``manifests/<stage>.json`` with input/output hashes,
the config snapshot and the seeds.  A failing stage leaves ``<stage>.FAILED``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from . import ensemble as E
from . import evaluation as V
from . import export as X
from . import features as F
from . import gridding as G
from . import ingest as I
from . import models as M
from . import synth as S
from . import tensor as T

log = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "features", "train", "predict", "evaluate", "report")


class StageError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# paths and manifests
# --------------------------------------------------------------------------

class Layout:
    def __init__(self, out):
        self.root = Path(out)

    @property
    def trajectories(self):
        return self.root / "data" / "trajectories.csv"

    @property
    def truth(self):
        return self.root / "data" / "truth.json"

    @property
    def staypoints(self):
        return self.root / "ingest" / "staypoints.csv"

    @property
    def feat(self):
        return self.root / "features"

    def ckpt(self, kind, seed):
        return self.root / "train" / f"{kind}_s{seed}"

    def history(self, kind, seed):
        return self.root / "train" / f"{kind}_s{seed}_history.csv"

    def probs(self, kind, seed):
        return self.root / "predict" / f"probs_{kind}_s{seed}.npy"

    def predictions(self, seed):
        return self.root / "predict" / f"predictions_s{seed}.csv"

    @property
    def metrics(self):
        return self.root / "eval" / "metrics.json"


def sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(paths, root):
    return {str(Path(p).relative_to(root)) if Path(p).is_relative_to(root) else str(p): sha256(p)
            for p in sorted(map(str, paths)) if Path(p).is_file()}


def write_manifest(lay: Layout, stage, cfg: C.PipelineConfig, inputs, outputs, elapsed, extra=None):
    (lay.root / "manifests").mkdir(parents=True, exist_ok=True)
    man = {
        "stage": stage,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": cfg.seeds,
        "inputs": _hashes(inputs, lay.root),
        "outputs": _hashes(outputs, lay.root),
        "elapsed_s": round(elapsed, 3),
    }
    if extra:
        man.update(extra)
    (lay.root / "manifests" / f"{stage}.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def _require(path, what):
    if not Path(path).is_file():
        raise StageError(f"missing {what}: {path}")


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def stage_synth(cfg, lay):
    if cfg.synth is None:
        src = Path(cfg.trajectories)
        _require(src, "trajectory file")
        return [src], [src], {"source": "file"}
    lay.trajectories.parent.mkdir(parents=True, exist_ok=True)
    res = S.generate(cfg.synth)
    res.write_csv(lay.trajectories)
    res.truth.to_json(lay.truth)
    return [], [lay.trajectories, lay.truth], {"n_points": res.n_points(), "n_dwells": len(res.truth.dwells)}


def _trajectory_path(cfg, lay):
    return Path(cfg.trajectories) if cfg.synth is None else lay.trajectories


def stage_ingest(cfg, lay):
    src = _trajectory_path(cfg, lay)
    _require(src, "trajectory file")
    groups, report = I.parse_trajectories(src)
    stays = I.detect_all(groups, cfg.stay.delta, cfg.stay.theta, cfg.stay.max_gap)
    lay.staypoints.parent.mkdir(parents=True, exist_ok=True)
    I.write_staypoints(lay.staypoints, stays)
    first = min(g[0].t for g in groups.values()) if groups else 0.0
    last = max(g[-1].t for g in groups.values()) if groups else 0.0
    lats = [f(p.lat for p in g) for g in groups.values() for f in (min, max)]
    lons = [f(p.lon for p in g) for g in groups.values() for f in (min, max)]
    summary = {"n_rows": report.n_rows, "n_points": report.n_points, "n_rejected": len(report.rejected_rows),
               "rejected_rows": report.rejected_rows[:100], "n_trucks": len(groups), "n_staypoints": len(stays),
               "t_first": first, "t_last": last,
               "extent": [min(lats), min(lons), max(lats), max(lons)] if lats else None}
    (lay.root / "ingest" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return [src], [lay.staypoints, lay.root / "ingest" / "summary.json"], {"n_staypoints": len(stays)}


def _frame(cfg, summary):
    """Grid and time frame from config, the synthetic world, or the data extent."""
    g = cfg.grid
    if g.bbox is not None:
        bbox = tuple(g.bbox)
    elif cfg.synth is not None:
        bbox = cfg.synth.bbox
    else:
        lat0, lon0, lat1, lon1 = summary["extent"]
        pad = 1e-6
        bbox = (lat0 - pad, lon0 - pad, lat1 + pad, lon1 + pad)
    grid = G.build_grid(bbox, g.cell_size)
    if g.t0 is not None:
        t0 = int(g.t0)
    elif cfg.synth is not None:
        t0 = int(cfg.synth.t0)
    else:
        t0 = int(summary["t_first"] // 86_400 * 86_400)
    if g.n_slots is not None:
        n_slots = int(g.n_slots)
    elif cfg.synth is not None:
        n_slots = cfg.synth.days * 86_400 // g.slot_len
    else:
        n_slots = int(math.floor((summary["t_last"] - t0) / g.slot_len)) + 1
    return grid, t0, n_slots


def stage_features(cfg, lay):
    src = _trajectory_path(cfg, lay)
    summary_path = lay.root / "ingest" / "summary.json"
    for p, what in ((lay.staypoints, "stay points"), (summary_path, "ingest summary"), (src, "trajectory file")):
        _require(p, what)
    summary = json.loads(summary_path.read_text())
    grid, t0, n_slots = _frame(cfg, summary)
    stays = I.read_staypoints(lay.staypoints)
    act = G.count_activity(stays, grid, cfg.grid.slot_len, t0, n_slots)
    retained, tau = G.downsample_grids(act, cfg.labels.keep_fraction)
    study = act.subset(retained)
    bound = cfg.labels.medium_bound or G.derive_class_thresholds(study, cfg.labels.top_fraction)
    model_cells = retained if cfg.labels.downsample else list(range(grid.n_cells))
    model_act = act.subset(model_cells)
    classes = G.label_classes(model_act, bound)

    groups, _ = I.parse_trajectories(src)
    adj = F.build_adjacency(groups, grid, model_cells)
    sem = F.build_semantic_matrix(model_act, cfg.features.dtw_radius)

    d = lay.feat
    d.mkdir(parents=True, exist_ok=True)
    G.save_activity(d / "activity.csv", act, grid)
    G.save_classes(d / "classes.csv", classes, grid)
    F.save_triplets(d / "adjacency.csv", adj.a, model_cells)
    F.save_triplets(d / "semantic.csv", sem.d, model_cells)
    study_labels = G.label_classes(study, bound).labels
    cells = {
        "grid": asdict(grid), "t0": t0, "n_slots": n_slots, "slot_len": cfg.grid.slot_len,
        "retained": [int(c) for c in retained], "keep_threshold": tau,
        "model_cells": [int(c) for c in model_cells], "medium_bound": int(bound),
        "zero_fraction": float(np.mean(study.counts == 0)),
        "class_mix": np.bincount(study_labels.ravel(), minlength=3).tolist(),
        "dropped_staypoints": act.dropped,
    }
    (d / "cells.json").write_text(json.dumps(cells, indent=2, sort_keys=True) + "\n")
    samples = _samples(cfg, _load_features(lay))
    F.write_samples(d / f"samples_h{cfg.features.horizon}.bin", samples)
    outs = [d / n for n in ("activity.csv", "classes.csv", "adjacency.csv", "semantic.csv", "cells.json",
                            f"samples_h{cfg.features.horizon}.bin")]
    return [lay.staypoints, summary_path, src], outs, {"n_model_cells": len(model_cells),
                                                       "n_retained": len(retained), "medium_bound": int(bound)}


def _load_features(lay):
    d = lay.feat
    for n in ("classes.csv", "adjacency.csv", "semantic.csv", "cells.json", "activity.csv"):
        _require(d / n, "feature artifact")
    cells = json.loads((d / "cells.json").read_text())
    classes, grid = G.load_classes(d / "classes.csv")
    act, _ = G.load_activity(d / "activity.csv")
    mc = cells["model_cells"]
    return {
        "cells": cells, "grid": grid, "classes": classes,
        "activity": act.subset(mc),
        "A": F.load_triplets(d / "adjacency.csv", mc, np.int64),
        "D": F.load_triplets(d / "semantic.csv", mc, np.float64),
    }


def _samples(cfg, data):
    inputs = None
    if cfg.features.inputs == "counts":
        inputs = F.count_inputs(data["activity"].counts)
    return F.make_windows(data["classes"], cfg.features.k, cfg.features.horizon, cfg.grid.tz, inputs)


def _splits(cfg, data, seed):
    samples = _samples(cfg, data)
    train, test = F.split_dataset(samples, cfg.features.train_ratio, seed, cfg.features.chronological)
    n_val = int(math.floor(cfg.train.val_fraction * len(train.targets)))
    if n_val >= 1 and len(train.targets) - n_val >= 1:
        fit, val = train.with_targets(train.targets[:-n_val]), train.with_targets(train.targets[-n_val:])
    else:
        fit, val = train, None
    return fit, val, train, test


def _train_one(args):
    cfg_dict, out, kind, seed = args
    cfg = C.from_dict(cfg_dict)
    lay = Layout(out)
    data = _load_features(lay)
    fit, val, _, _ = _splits(cfg, data, seed)
    mcfg = cfg.models[kind]
    ctx = M.context_for(mcfg, data["A"], data["D"])
    tcfg = M.TrainConfig(**{**asdict(cfg.train), "seed": seed})
    t = time.perf_counter()
    res = M.train_model(mcfg, tcfg, fit, val, ctx)
    elapsed = time.perf_counter() - t
    (lay.root / "train").mkdir(parents=True, exist_ok=True)
    T.save_checkpoint(lay.ckpt(kind, seed), res.params, seed, res.steps,
                      {"kind": kind, "best_epoch": res.best_epoch, "model": M.config_dict(mcfg),
                       "train": M.config_dict(tcfg)})
    X.write_history(lay.history(kind, seed), res.history)
    return kind, seed, elapsed, res.best_epoch


def _jobs_map(fn, jobs, n):
    if n <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, jobs))


def stage_train(cfg, lay):
    jobs = [(cfg.to_dict(), str(lay.root), kind, seed) for seed in cfg.seeds for kind in M.KINDS]
    done = _jobs_map(_train_one, jobs, cfg.jobs)
    outs = []
    for kind, seed, _, _ in done:
        outs += [lay.ckpt(kind, seed).with_suffix(".bin"), lay.ckpt(kind, seed).with_suffix(".json"),
                 lay.history(kind, seed)]
    times = {f"{k}_s{s}": round(e, 3) for k, s, e, _ in done}
    feat = [lay.feat / n for n in ("classes.csv", "adjacency.csv", "semantic.csv", "cells.json")]
    return feat, outs, {"train_seconds": times}


def stage_predict(cfg, lay):
    data = _load_features(lay)
    (lay.root / "predict").mkdir(parents=True, exist_ok=True)
    ins, outs = [], []
    for seed in cfg.seeds:
        _, _, _, test = _splits(cfg, data, seed)
        probs = []
        for kind in M.KINDS:
            ck = lay.ckpt(kind, seed)
            _require(ck.with_suffix(".bin"), "checkpoint")
            params, _ = T.load_checkpoint(ck)
            mcfg = cfg.models[kind]
            p = M.predict_proba(mcfg, params, test, M.context_for(mcfg, data["A"], data["D"]))
            np.save(lay.probs(kind, seed), p)
            probs.append(p)
            ins.append(ck.with_suffix(".bin"))
            outs.append(lay.probs(kind, seed))
        fused = E.soft_vote(probs, cfg.ensemble)
        true = test.labels[:, test.targets].T
        E.write_predictions(lay.predictions(seed), fused, E.predict(fused), true, test.cell_ids, test.targets)
        outs.append(lay.predictions(seed))
    return ins, outs, {}


def _eval_cols(data):
    pos = {c: i for i, c in enumerate(data["cells"]["model_cells"])}
    return np.array([pos[c] for c in data["cells"]["retained"]], dtype=np.int64)


def _report_or_aggregate(reports):
    return V.aggregate_seeds(reports) if len(reports) >= 2 else reports[0]


def _mean_binary(scores):
    return {k: float(np.mean([getattr(s, k) for s in scores])) for k in ("precision", "recall", "f1")}


def stage_evaluate(cfg, lay):
    data = _load_features(lay)
    cols = _eval_cols(data)
    retained = data["cells"]["retained"]
    grid = data["grid"]
    per_model = {k: [] for k in (*M.KINDS, "ensemble")}
    strict, relaxed = [], []
    cm_total = np.zeros((3, 3), dtype=np.int64)
    per_seed = {}
    ins = []
    baseline = None
    for seed in cfg.seeds:
        _, _, train, test = _splits(cfg, data, seed)
        true = test.labels[:, test.targets].T[:, cols]
        probs = []
        seed_out = {}
        for kind in M.KINDS:
            _require(lay.probs(kind, seed), "probabilities")
            p = np.load(lay.probs(kind, seed))
            ins.append(lay.probs(kind, seed))
            probs.append(p)
            rep = V.prf(V.confusion_matrix(np.argmax(p[:, cols], axis=-1), true))
            per_model[kind].append(rep)
            seed_out[kind] = rep.to_dict()
        fused = E.soft_vote(probs, cfg.ensemble)[:, cols]
        pred = E.predict(fused)
        cm = V.confusion_matrix(pred, true)
        cm_total += cm
        rep = V.prf(cm)
        per_model["ensemble"].append(rep)
        seed_out["ensemble"] = rep.to_dict()
        strict.append(V.strict_high_activity(pred, true))
        relaxed.append(V.relaxed_high_activity(pred, true, grid, retained))
        seed_out["high_strict"] = strict[-1].to_dict()
        seed_out["high_relaxed"] = relaxed[-1].to_dict()
        per_seed[str(seed)] = seed_out
        if baseline is None:
            train_true = train.labels[:, train.targets][cols]
            maj = V.majority_baseline(train_true, true.size)
            baseline = V.prf(V.confusion_matrix(maj, true.ravel()))

    metrics = {
        "horizon": cfg.features.horizon,
        "seeds": cfg.seeds,
        "n_eval_cells": len(retained),
        "n_test_slots": int(true.shape[0]),
        "medium_bound": data["cells"]["medium_bound"],
        "zero_fraction": data["cells"]["zero_fraction"],
        "models": {k: _report_or_aggregate(v).to_dict() for k, v in per_model.items()},
        "high_activity": {"strict": _mean_binary(strict), "relaxed": _mean_binary(relaxed)},
        "baseline_majority": baseline.to_dict(),
        "per_seed": per_seed,
    }
    d = lay.root / "eval"
    d.mkdir(parents=True, exist_ok=True)
    V.dump_json(lay.metrics, metrics)
    V.write_report_csv(d / "metrics.csv", {k: _report_or_aggregate(v) for k, v in per_model.items()})
    V.write_confusion(d / "confusion.csv", cm_total)
    return ins, [lay.metrics, d / "metrics.csv", d / "confusion.csv"], {}


def stage_report(cfg, lay):
    data = _load_features(lay)
    _require(lay.metrics, "metrics")
    metrics = json.loads(lay.metrics.read_text())
    seed = cfg.geojson_seed if cfg.geojson_seed is not None else cfg.seeds[0]
    _require(lay.predictions(seed), "predictions")
    rows = E.read_predictions(lay.predictions(seed))
    keep = set(data["cells"]["retained"])
    rows = [r for r in rows if r[0] in keep]
    slots = sorted({r[1] for r in rows})
    cells = data["cells"]["retained"]
    si = {s: i for i, s in enumerate(slots)}
    ci = {c: i for i, c in enumerate(cells)}
    fused = np.zeros((len(slots), len(cells), 3))
    pred = np.zeros((len(slots), len(cells)), dtype=np.int64)
    true = np.zeros_like(pred)
    for cell, slot, p0, p1, p2, pr, tr in rows:
        fused[si[slot], ci[cell]] = (p0, p1, p2)
        pred[si[slot], ci[cell]] = pr
        true[si[slot], ci[cell]] = tr
    d = lay.root / "report"
    d.mkdir(parents=True, exist_ok=True)
    X.export_geojson(d / "cells.geojson", data["grid"], cells, slots, fused, pred, true)
    (d / "report.md").write_text(render_report(metrics))
    return [lay.metrics, lay.predictions(seed)], [d / "cells.geojson", d / "report.md"], {}


def render_report(metrics) -> str:
    lines = [f"# Activity prediction report (horizon {metrics['horizon']})", "",
             f"seeds: {len(metrics['seeds'])}, eval cells: {metrics['n_eval_cells']}, "
             f"test slots: {metrics['n_test_slots']}, class bound: {metrics['medium_bound']}, "
             f"zero fraction: {metrics['zero_fraction']:.3f}", "",
             "| model | P (0/1/2) | R (0/1/2) | F1 (0/1/2) | macro F1 |", "|---|---|---|---|---|"]

    def fmt(v):
        return "/".join(f"{x:.3f}" for x in v)

    rows = [(k, metrics["models"][k]) for k in (*M.KINDS, "ensemble")]
    for name, rep in rows + [("majority", metrics["baseline_majority"])]:
        std = rep.get("std", {}).get("macro_f1")
        macro = f"{rep['macro_f1']:.3f}" + (f" ± {std:.3f}" if std is not None else "")
        lines.append(f"| {name} | {fmt(rep['precision'])} | {fmt(rep['recall'])} | {fmt(rep['f1'])} | {macro} |")
    ha = metrics["high_activity"]
    lines += ["", "High-activity class (ensemble, mean over seeds):", "",
              f"- strict: P {ha['strict']['precision']:.3f}, R {ha['strict']['recall']:.3f}, F1 {ha['strict']['f1']:.3f}",
              f"- one-hop relaxed: P {ha['relaxed']['precision']:.3f}, R {ha['relaxed']['recall']:.3f}, "
              f"F1 {ha['relaxed']['f1']:.3f}", ""]
    return "\n".join(lines)


STAGE_FN = {
    "synth": stage_synth, "ingest": stage_ingest, "features": stage_features, "train": stage_train,
    "predict": stage_predict, "evaluate": stage_evaluate, "report": stage_report,
}


def run_stage(stage, cfg: C.PipelineConfig, out):
    lay = Layout(out)
    lay.root.mkdir(parents=True, exist_ok=True)
    marker = lay.root / f"{stage}.FAILED"
    if marker.exists():
        marker.unlink()
    t = time.perf_counter()
    try:
        ins, outs, extra = STAGE_FN[stage](cfg, lay)
    except Exception as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}")
        if isinstance(exc, StageError):
            raise
        raise StageError(f"stage {stage} failed: {type(exc).__name__}: {exc}") from exc
    write_manifest(lay, stage, cfg, ins, outs, time.perf_counter() - t, extra)
    log.info("stage %s done in %.1fs", stage, time.perf_counter() - t)
    return outs


def run_pipeline(cfg: C.PipelineConfig, out, stages=STAGES):
    Path(out).mkdir(parents=True, exist_ok=True)
    C.dump(cfg, Path(out) / "config.yaml")
    for stage in stages:
        run_stage(stage, cfg, out)
    return Layout(out).metrics
