"""Experiment runner and report builder."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from . import micro_nn as nn
from .config import ExperimentConfig
from .federation import (Benchmark, ClientState, CommLedger, RoundMetrics, ServerState, comm_account, fit,
                         holdout_fold, partition)
from .generator import BaseGenerator, pretrain_base
from .globalization import global_round
from .lowrank import AdapterPayload
from .personalization import dsd_round
from .privacy import top_k_similar
from .rng import stream
from .warmstart import build_compact_subset, build_warm_start, client_payload, init_classifier, warmstart_report

log = logging.getLogger(__name__)

METRICS_FIELDS = ["round", "client", "mode", "gm_acc", "pm_acc", "bytes_up", "bytes_down", "flops",
                  "wall_ms", "seed", "fold", "config_hash"]
DSD_FIELDS = ["round", "client", "mode", "selected_newer", "selected_older", "seed", "fold", "config_hash"]


@dataclass
class GeneratorCache:
    """Base generators per seed and client payloads per (seed, client), shared across modes."""

    bases: Dict[Tuple, BaseGenerator] = field(default_factory=dict)
    payloads: Dict[Tuple, AdapterPayload] = field(default_factory=dict)

    def base(self, cfg: ExperimentConfig, bench: Benchmark, seed: int) -> BaseGenerator:
        key = (seed, repr(cfg.partition), cfg.warm.pretrain_epochs, cfg.warm.gen_hidden)
        if key not in self.bases:
            self.bases[key] = pretrain_base(bench.public_x, bench.public_y, cfg.partition.n_classes,
                                            epochs=cfg.warm.pretrain_epochs, hidden=cfg.warm.gen_hidden,
                                            seed=seed)
        return self.bases[key]

    def payload(self, cfg: ExperimentConfig, bench: Benchmark, client: ClientState, seed: int,
                with_adapters: bool) -> AdapterPayload:
        key = (seed, repr(cfg.partition), repr(cfg.warm), client.client_id, with_adapters)
        if key not in self.payloads:
            base = self.base(cfg, bench, seed)
            self.payloads[key] = client_payload(client, base, cfg.warm, seed, cfg.partition.n_classes,
                                                with_adapters=with_adapters)
        return self.payloads[key]


@dataclass
class RunResult:
    mode: str
    seed: int
    fold: int
    rounds: List[RoundMetrics]
    dsd_stats: List[Dict]
    warm_report: Optional[Dict] = None
    audit: Optional[Dict] = None
    ledger: CommLedger = field(default_factory=CommLedger)


def _benchmark(cfg: ExperimentConfig, seed: int, fold: int) -> Benchmark:
    bench = partition(cfg.partition, seed)
    return holdout_fold(bench, fold) if fold >= 0 else bench


def _eval(model: nn.Network, clients: Sequence[ClientState]) -> Dict[int, float]:
    return {c.client_id: nn.accuracy(model, c.x_test, c.y_test) for c in clients}


def _unseen_acc(model: nn.Network, bench: Benchmark) -> Optional[float]:
    if not bench.unseen:
        return None
    return float(np.mean([nn.accuracy(model, u.x, u.y) for u in bench.unseen]))


def run_protocol(cfg: ExperimentConfig, seed: int, fold: int = -1,
                 cache: Optional[GeneratorCache] = None) -> RunResult:
    """One full protocol run: start, then ``cfg.rounds`` federated rounds."""
    cache = cache or GeneratorCache()
    bench = _benchmark(cfg, seed, fold)
    clients = bench.clients
    spec = cfg.partition
    ids = [c.client_id for c in clients]
    init = init_classifier(spec.dim, cfg.classifier_hidden, spec.n_classes, seed)
    result = RunResult(cfg.mode_label(), seed, fold, [], [])
    t0 = time.perf_counter()

    adapter_bytes: Dict[int, int] = {}
    if cfg.start in ("warm", "generic_synthetic"):
        base = cache.base(cfg, bench, seed)
        payloads = [cache.payload(cfg, bench, c, seed, cfg.start == "warm") for c in clients]
        adapter_bytes = {p.client_id: p.byte_size for p in payloads}
        server = build_warm_start(payloads, base, init, cfg.train, cfg.warm.multiplier, cfg.warm.epochs,
                                  seed, expected_clients=ids)
        server.compact = build_compact_subset(server.synthetic, cfg.ft.per_class, seed)
        result.warm_report = warmstart_report(server, clients)
        if cfg.audit:
            private = np.vstack([c.x_train for c in clients])
            audit = top_k_similar(server.synthetic.x, private, k=cfg.audit_top_k, metric="cosine")
            result.audit = audit.summary()
    elif cfg.start == "public_pretrain":
        model = init.copy()
        fit(model, bench.public_x, bench.public_y, cfg.warm.epochs, cfg.train.optimizer_state(),
            cfg.train.batch_size, stream(seed, "public-train"))
        server = ServerState(model)
    else:
        server = ServerState(init.copy())

    comm_account(result.ledger, 0, ids, server.global_model.nbytes(), adapter_bytes)
    gm0 = _eval(server.global_model, clients)
    result.rounds.append(RoundMetrics(
        0, gm0, dict(gm0),
        {cid: result.ledger.up[(0, cid)] for cid in ids}, {cid: 0 for cid in ids}, {cid: 0 for cid in ids},
        wall_ms=(time.perf_counter() - t0) * 1e3, unseen_acc=_unseen_acc(server.global_model, bench)))

    for t in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        broadcast = server.global_model
        server, metrics, _ = global_round(server, clients, cfg.train, cfg.ft, seed)
        comm_account(result.ledger, t, ids, broadcast.nbytes())
        if cfg.personalization == "none":
            metrics.pm_acc = dict(metrics.gm_acc)
        elif cfg.personalization in ("sd", "dsd"):
            fwd = nn.flop_count(broadcast, 1)
            for c in clients:
                pm, stats = dsd_round(c, broadcast, cfg.train, cfg.dsd, seed, t, mode=cfg.personalization)
                metrics.pm_acc[c.client_id] = nn.accuracy(pm.network, c.x_test, c.y_test)
                # personal training, pool logits, and (dsd) global logits for selection
                extra = cfg.train.epochs * 3 * fwd * c.n_train + fwd * c.n_train
                if cfg.personalization == "dsd" and t >= 3:
                    extra += fwd * c.n_train
                metrics.flops[c.client_id] += extra
                result.dsd_stats.append({"round": t, "client": c.client_id, **stats})
        metrics.unseen_acc = _unseen_acc(server.global_model, bench)
        metrics.wall_ms = (time.perf_counter() - t0) * 1e3
        result.rounds.append(metrics)
    return result


# ----------------------------------------------------------------------------- output files

def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def metrics_rows(res: RunResult, config_hash: str, record_wall_time: bool) -> List[Dict]:
    rows = []
    for m in res.rounds:
        wall = m.wall_ms if record_wall_time else 0.0
        common = {"round": m.round_t, "mode": res.mode, "seed": res.seed, "fold": res.fold,
                  "config_hash": config_hash}
        for cid in sorted(m.gm_acc):
            rows.append({**common, "client": cid, "gm_acc": m.gm_acc[cid], "pm_acc": m.pm_acc[cid],
                         "bytes_up": m.bytes_up[cid], "bytes_down": m.bytes_down[cid],
                         "flops": m.flops[cid], "wall_ms": wall})
        rows.append({**common, "client": "mean", "gm_acc": m.mean_gm, "pm_acc": m.mean_pm,
                     "bytes_up": sum(m.bytes_up.values()), "bytes_down": sum(m.bytes_down.values()),
                     "flops": sum(m.flops.values()), "wall_ms": wall})
        if m.unseen_acc is not None:
            rows.append({**common, "client": "unseen", "gm_acc": m.unseen_acc, "pm_acc": None,
                         "bytes_up": 0, "bytes_down": 0, "flops": 0, "wall_ms": wall})
    return rows


def _write_csv(path: Path, fields: Sequence[str], rows: Sequence[Dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run(cfg: ExperimentConfig, out_dir, cache: Optional[GeneratorCache] = None) -> List[RunResult]:
    """Run every (seed, fold, mode) combination and write the output files into ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    cache = cache or GeneratorCache()
    folds = range(cfg.partition.n_clients) if cfg.holdout_folds else [-1]
    results: List[RunResult] = []
    timing = []
    for seed in cfg.seeds:
        for fold in folds:
            for vcfg in cfg.resolved_variants():
                t0 = time.perf_counter()
                res = run_protocol(vcfg, seed, fold, cache)
                timing.append({"mode": res.mode, "seed": seed, "fold": fold,
                               "seconds": round(time.perf_counter() - t0, 3)})
                log.info("mode=%s seed=%d fold=%d final GM=%.4f PM=%.4f", res.mode, seed, fold,
                         res.rounds[-1].mean_gm, res.rounds[-1].mean_pm)
                results.append(res)

    rows = [r for res in results for r in metrics_rows(res, h, cfg.record_wall_time)]
    _write_csv(out / "metrics.csv", METRICS_FIELDS, rows)
    dsd_rows = [{**s, "mode": res.mode, "seed": res.seed, "fold": res.fold, "config_hash": h}
                for res in results for s in res.dsd_stats]
    _write_csv(out / "dsd_stats.csv", DSD_FIELDS, dsd_rows)
    _write_json(out / "warmstart_report.json", {"config_hash": h, "runs": [
        {"mode": r.mode, "seed": r.seed, "fold": r.fold, **r.warm_report} for r in results if r.warm_report]})
    audits = [{"mode": r.mode, "seed": r.seed, "fold": r.fold, **r.audit} for r in results if r.audit]
    _write_json(out / "privacy_report.json", {
        "config_hash": h, "runs": audits,
        "max_cosine_similarity": max((a["nearest_score_max"] for a in audits), default=None)})
    _write_json(out / "manifest.json", {
        "config_hash": h, "config": cfg.to_dict(), "seeds": list(cfg.seeds), "version": __version__,
        "files": ["metrics.csv", "dsd_stats.csv", "warmstart_report.json", "privacy_report.json"]})
    if cfg.record_wall_time:
        _write_json(out / "timing.json", {"config_hash": h, "runs": timing})
    return results


# ----------------------------------------------------------------------------- report

class ReportError(RuntimeError):
    pass


def read_metrics(paths: Sequence) -> List[Dict]:
    rows = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            p = p / "metrics.csv"
        if not p.exists():
            raise ReportError(f"missing metrics file: {p}")
        with open(p, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    hashes = {r["config_hash"] for r in rows}
    if len(hashes) > 1:
        raise ReportError(f"refusing to mix runs with different config hashes: {sorted(hashes)}")
    return rows


def _mean_std(vals: Sequence[float]) -> Tuple[float, float]:
    a = np.asarray(vals, dtype=np.float64)
    return (float(a.mean()), float(a.std())) if len(a) else (float("nan"), float("nan"))


def summarize(rows: Sequence[Dict]) -> List[Dict]:
    """Per mode: final-round mean GM/PM (mean and std over seeds and folds), cumulative bytes,
    wall time and, where present, the held-out-domain accuracy."""
    modes = list(dict.fromkeys(r["mode"] for r in rows))
    out = []
    for mode in modes:
        mrows = [r for r in rows if r["mode"] == mode]
        runs = sorted({(r["seed"], r["fold"]) for r in mrows})
        final_round = max(int(r["round"]) for r in mrows)
        gm, pm, comm, wall, unseen = [], [], [], [], []
        for run_key in runs:
            rr = [r for r in mrows if (r["seed"], r["fold"]) == run_key]
            last = [r for r in rr if int(r["round"]) == final_round]
            mean_row = next(r for r in last if r["client"] == "mean")
            gm.append(float(mean_row["gm_acc"]))
            pm.append(float(mean_row["pm_acc"]))
            means = [r for r in rr if r["client"] == "mean"]
            comm.append(sum(int(r["bytes_up"]) + int(r["bytes_down"]) for r in means))
            wall.append(sum(float(r["wall_ms"]) for r in means))
            u = [r for r in last if r["client"] == "unseen"]
            if u:
                unseen.append(float(u[0]["gm_acc"]))
        row = {"mode": mode, "runs": len(runs), "final_round": final_round}
        for name, vals in (("gm", gm), ("pm", pm), ("comm_bytes", comm), ("wall_ms", wall), ("unseen_gm", unseen)):
            if vals:
                row[f"{name}_mean"], row[f"{name}_std"] = _mean_std(vals)
        out.append(row)
    return out


def cost_to_target(rows: Sequence[Dict], mode: str, target: float) -> Optional[float]:
    """Mean over runs of cumulative bytes when the mean GM first reaches ``target`` (None if never)."""
    mrows = [r for r in rows if r["mode"] == mode and r["client"] == "mean"]
    costs = []
    for run_key in sorted({(r["seed"], r["fold"]) for r in mrows}):
        rr = sorted((r for r in mrows if (r["seed"], r["fold"]) == run_key), key=lambda r: int(r["round"]))
        total = 0
        hit = None
        for r in rr:
            total += int(r["bytes_up"]) + int(r["bytes_down"])
            if float(r["gm_acc"]) >= target:
                hit = total
                break
        if hit is None:
            return None
        costs.append(hit)
    return float(np.mean(costs)) if costs else None


SUMMARY_FIELDS = ["mode", "runs", "final_round", "gm_mean", "gm_std", "pm_mean", "pm_std",
                  "comm_bytes_mean", "comm_bytes_std", "wall_ms_mean", "wall_ms_std", "unseen_gm_mean",
                  "unseen_gm_std"]


def report(paths: Sequence, out_csv=None) -> str:
    rows = read_metrics(paths)
    summary = summarize(rows)
    if out_csv is not None:
        _write_csv(Path(out_csv), SUMMARY_FIELDS, summary)
    lines = [f"{'mode':<24} {'runs':>4} {'round':>5} {'GM':>15} {'PM':>15} {'comm MB':>9} {'unseen GM':>15}"]
    for s in summary:
        unseen = (f"{s['unseen_gm_mean']:.4f}±{s['unseen_gm_std']:.4f}" if "unseen_gm_mean" in s else "-")
        lines.append(f"{s['mode']:<24} {s['runs']:>4} {s['final_round']:>5} "
                     f"{s['gm_mean']:.4f}±{s['gm_std']:.4f} {s['pm_mean']:.4f}±{s['pm_std']:.4f} "
                     f"{s['comm_bytes_mean'] / 1e6:>9.3f} {unseen:>15}")
    return "\n".join(lines)
