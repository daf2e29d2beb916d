"""Run directories, seed sweeps, manifests and paired comparisons."""
from __future__ import annotations

import itertools
import json
import math
import os
import re
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from . import diagnostics as D
from .bilevel import RetrainConfig, SearchConfig, retrain, search
from .config import apply_overrides, config_hash, resolve
from .data import DatasetSplit, load_dataset, subset
from .noise import NoisePolicy
from .searchspace import Genotype, build_space, count_op

__all__ = ["build_data", "build_space_from", "run_search", "run_retrain", "run_diagnose",
           "sweep_entries", "run_sweep", "write_manifest", "summarize", "compare_manifests",
           "workers_from_env"]

SKIP = "skip_connect"


def _dump(path: str, obj: Any) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def build_data(cfg: Mapping) -> DatasetSplit:
    d = dict(cfg["data"])
    source = d.pop("source", "synthetic")
    split_seed = d.pop("split_seed", None)
    per_class = d.pop("per_class", None)
    test_per_class = d.pop("test_per_class", None)
    image_size = d.pop("image_size", None)
    d.pop("bench_lookup", None)
    if source == "synthetic" and image_size is not None:
        d["image_size"] = image_size
    split = load_dataset(source, seed=0 if split_seed is None else split_seed, **d)
    if per_class is not None or test_per_class is not None or (image_size and image_size != split.image_size):
        if per_class is None:
            per_class = int(min(np.bincount(split.train_y).min(), np.bincount(split.val_y).min()))
        split = subset(split, per_class, image_size, test_per_class)
    return split


def build_space_from(cfg: Mapping):
    s = dict(cfg["space"])
    return build_space(s.pop("name"), s)


def _policy(cfg: Mapping) -> NoisePolicy:
    return NoisePolicy.from_dict(dict(cfg.get("noise") or {}))


def _retrain_config(cfg: Mapping) -> RetrainConfig:
    r = dict(cfg.get("retrain") or {})
    r.pop("enabled", None)
    r.pop("genotype", None)
    return RetrainConfig.from_dict(r)


def run_search(cfg: Mapping, seed: int, run_dir: str, data: DatasetSplit | None = None) -> dict:
    """Search (plus optional Hessian tracking and retraining) for one seed."""
    os.makedirs(run_dir, exist_ok=True)
    resolved = dict(cfg)
    resolved["seeds"] = [seed]
    _dump(os.path.join(run_dir, "config.json"), resolved)
    t0 = time.perf_counter()
    data = data or build_data(cfg)
    space = build_space_from(cfg)
    hyper = SearchConfig.from_dict(cfg.get("optimizer"))
    diag = cfg.get("diagnostics") or {}
    tracker = None
    if diag.get("hessian"):
        vx, vy = data.part("val")
        n = diag.get("hessian_samples", 64)
        tracker = D.HessianTracker(vx[:n], vy[:n], window=diag.get("smoothing_window", 5),
                                   h=diag.get("hessian_step", D.HESSIAN_STEP))
    record = search(space, _policy(cfg), data, hyper, seed, on_epoch_end=tracker)
    _write(os.path.join(run_dir, "search_log.csv"), record.to_csv(space))
    _write(os.path.join(run_dir, "genotype.json"), record.genotype.to_json() + "\n")
    _dump(os.path.join(run_dir, "alpha_final.json"), {k: v.tolist() for k, v in record.final_alpha().items()})
    if tracker is not None:
        _write(os.path.join(run_dir, "hessian.csv"), tracker.trace.to_csv())
    entry = {"seed": seed, "dir": run_dir, "genotype": record.genotype.to_dict(),
             "skip_count": count_op(record.genotype, SKIP)}
    if (cfg.get("retrain") or {}).get("enabled"):
        res = retrain(record.genotype, space, data, _retrain_config(cfg), seed)
        entry["retrain_accuracy"] = res.accuracy
        _dump(os.path.join(run_dir, "retrain.json"), {"accuracy": res.accuracy, "train_loss": res.train_loss})
    entry["wall_time"] = time.perf_counter() - t0
    return entry


def run_retrain(cfg: Mapping, seed: int, genotype: Genotype, run_dir: str) -> dict:
    os.makedirs(run_dir, exist_ok=True)
    t0 = time.perf_counter()
    data = build_data(cfg)
    space = build_space_from(cfg)
    res = retrain(genotype, space, data, _retrain_config(cfg), seed)
    _dump(os.path.join(run_dir, "retrain.json"), {"accuracy": res.accuracy, "train_loss": res.train_loss,
                                                  "genotype": genotype.to_dict()})
    return {"seed": seed, "dir": run_dir, "genotype": genotype.to_dict(),
            "skip_count": count_op(genotype, SKIP), "retrain_accuracy": res.accuracy,
            "wall_time": time.perf_counter() - t0}


def run_diagnose(cfg: Mapping, seed: int, run_dir: str) -> dict:
    """Search with Hessian tracking, then landscape and noise verifiers at the final state."""
    os.makedirs(run_dir, exist_ok=True)
    _dump(os.path.join(run_dir, "config.json"), dict(cfg, seeds=[seed]))
    t0 = time.perf_counter()
    data = build_data(cfg)
    space = build_space_from(cfg)
    hyper = SearchConfig.from_dict(cfg.get("optimizer"))
    diag = dict(cfg.get("diagnostics") or {})
    vx, vy = data.part("val")
    from .bilevel import build_supernet
    net = build_supernet(space, data, hyper, seed)
    tracker = None
    if diag.get("hessian", True):
        n = diag.get("hessian_samples", 64)
        tracker = D.HessianTracker(vx[:n], vy[:n], window=diag.get("smoothing_window", 5),
                                   h=diag.get("hessian_step", D.HESSIAN_STEP))
    record = search(space, _policy(cfg), data, hyper, seed, on_epoch_end=tracker, net=net)
    _write(os.path.join(run_dir, "search_log.csv"), record.to_csv(space))
    _write(os.path.join(run_dir, "genotype.json"), record.genotype.to_json() + "\n")
    out = {"seed": seed, "dir": run_dir, "genotype": record.genotype.to_dict(),
           "skip_count": count_op(record.genotype, SKIP)}
    if tracker is not None:
        _write(os.path.join(run_dir, "hessian.csv"), tracker.trace.to_csv())
    if diag.get("landscape", True):
        n = diag.get("landscape_samples", 128)
        grid = D.landscape_scan(net, vx[:n], vy[:n], radius=diag.get("landscape_radius", 5),
                                step=diag.get("landscape_step", 0.1),
                                second=diag.get("landscape_second", "gradient"), seed=seed)
        _write(os.path.join(run_dir, "landscape.csv"), grid.to_csv("accuracy"))
        _write(os.path.join(run_dir, "landscape_loss.csv"), grid.to_csv("loss"))
    n_ver = diag.get("verify_samples", 16)
    has_skip = any(SKIP in m for c in space.cells.values() for m in c.ops)
    if has_skip and (diag.get("unbiasedness") or diag.get("smoothing")):
        rms = D.skip_feature_rms(net, vx[:n_ver])
        sigma = diag.get("relative_sigma", 0.05) * rms
        draws = diag.get("draws", 1000)
        if diag.get("unbiasedness"):
            rep = D.verify_unbiasedness(net, NoisePolicy(placement="ofs", sigma=sigma), vx[:n_ver], vy[:n_ver],
                                        draws, seed)
            _write(os.path.join(run_dir, "unbiasedness.json"), D.report_json(rep) + "\n")
        if diag.get("smoothing"):
            rep = D.verify_smoothing(net, sigma, vx[:n_ver], vy[:n_ver], draws, seed)
            _write(os.path.join(run_dir, "smoothing.json"), D.report_json(rep) + "\n")
    if diag.get("histogram"):
        op = diag.get("histogram_op", SKIP)
        hists = D.feature_histogram(net, vx, op, bins=diag.get("histogram_bins", 64))
        _write(os.path.join(run_dir, "histogram.json"),
               D.report_json({k: h.to_dict() for k, h in hists.items()}) + "\n")
    out["wall_time"] = time.perf_counter() - t0
    return out


# --- sweeps -----------------------------------------------------------------------

def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", text)


def sweep_entries(cfg: Mapping) -> list[tuple[str, dict]]:
    """Cartesian product of the declared sweep axes, as (label, config) pairs."""
    axes = cfg.get("sweep") or {}
    if not axes:
        return [("base", dict(cfg))]
    keys = sorted(axes)
    out = []
    for values in itertools.product(*(axes[k] for k in keys)):
        label = "__".join(_slug(f"{k}={json.dumps(v)}") for k, v in zip(keys, values))
        entry = apply_overrides(cfg, list(zip(keys, values)))
        entry["sweep"] = {}
        out.append((label, resolve(entry)))
    return out


def workers_from_env(default: int = 1) -> int:
    raw = os.environ.get("ND_WORKERS")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"ND_WORKERS must be an integer, got {raw!r}") from exc
    return max(1, n)


def _job(args):
    kind, cfg, seed, run_dir, label = args
    fn = run_diagnose if kind == "diagnose" else run_search
    entry = fn(cfg, seed, run_dir)
    entry["label"] = label
    return entry


def run_sweep(cfg: Mapping, out_dir: str, seeds: Sequence[int] | None = None, workers: int = 1,
              kind: str = "search") -> dict:
    seeds = list(seeds if seeds is not None else cfg.get("seeds", [0]))
    jobs = []
    for label, entry_cfg in sweep_entries(cfg):
        for s in seeds:
            run_dir = os.path.join(out_dir, label, f"seed_{s}") if cfg.get("sweep") else \
                os.path.join(out_dir, f"seed_{s}")
            jobs.append((kind, entry_cfg, s, run_dir, label))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_job, jobs))
    else:
        entries = [_job(j) for j in jobs]
    return write_manifest(cfg, out_dir, entries)


# --- manifests -----------------------------------------------------------------------

def summarize(values: Sequence[float]) -> dict:
    vals = [float(v) for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return {"n": 0, "mean": None, "std": None}
    std = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return {"n": len(vals), "mean": statistics.fmean(vals), "std": std}


def _fmt(s: dict, scale: float = 1.0) -> str:
    if not s["n"]:
        return "n/a"
    return f"{s['mean'] * scale:.2f}±{s['std'] * scale:.2f}"


def _summary(entries: Sequence[Mapping]) -> dict:
    acc = summarize([e.get("retrain_accuracy") for e in entries])
    skip = summarize([e.get("skip_count") for e in entries])
    return {"retrain_accuracy": acc, "skip_count": skip,
            "retrain_accuracy_text": _fmt(acc, 100.0), "skip_count_text": _fmt(skip)}


def write_manifest(cfg: Mapping, out_dir: str, entries: Sequence[Mapping]) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    entries = sorted(entries, key=lambda e: (e.get("label", ""), e["seed"]))
    groups: dict[str, list] = {}
    for e in entries:
        groups.setdefault(e.get("label", "base"), []).append(e)
    manifest = {
        "config_hash": config_hash(cfg),
        "code_version": __version__,
        "space": cfg["space"]["name"],
        "runs": list(entries),
        "summary": _summary(entries),
        "groups": {k: _summary(v) for k, v in sorted(groups.items())},
    }
    _dump(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def load_manifest(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def compare_manifests(base: Mapping, treat: Mapping) -> dict:
    """Paired per-seed deltas (treatment minus baseline) and a sign-test p-value."""
    if base.get("space") != treat.get("space"):
        raise ValueError(f"manifests cover different spaces: {base.get('space')} vs {treat.get('space')}")
    b = {(r.get("label", "base"), r["seed"]): r for r in base["runs"]}
    t = {(r.get("label", "base"), r["seed"]): r for r in treat["runs"]}
    bs = sorted(r["seed"] for r in base["runs"])
    ts = sorted(r["seed"] for r in treat["runs"])
    if bs != ts:
        raise ValueError(f"seed mismatch: baseline {bs} vs treatment {ts}")
    # pair by seed (labels may differ between the two manifests)
    bseed = {r["seed"]: r for r in base["runs"]}
    tseed = {r["seed"]: r for r in treat["runs"]}
    rows = []
    for s in bs:
        rb, rt = bseed[s], tseed[s]
        da = None
        if rb.get("retrain_accuracy") is not None and rt.get("retrain_accuracy") is not None:
            da = rt["retrain_accuracy"] - rb["retrain_accuracy"]
        ds = rt.get("skip_count", 0) - rb.get("skip_count", 0)
        rows.append({"seed": s, "accuracy_delta": da, "skip_delta": ds})
    acc = [r["accuracy_delta"] for r in rows if r["accuracy_delta"] is not None]
    wins = sum(d > 0 for d in acc)
    losses = sum(d < 0 for d in acc)
    return {"pairs": rows, "accuracy_wins": wins, "accuracy_losses": losses,
            "accuracy_ties": len(acc) - wins - losses,
            "sign_test_p": sign_test(wins, losses),
            "mean_accuracy_delta": statistics.fmean(acc) if acc else None,
            "mean_skip_delta": statistics.fmean([r["skip_delta"] for r in rows]) if rows else None}


def sign_test(wins: int, losses: int) -> float:
    """One-sided exact binomial p-value of at least ``wins`` successes out of ``wins+losses``."""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n)
