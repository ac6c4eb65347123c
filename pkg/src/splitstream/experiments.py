"""Config-driven runs: single training, threshold sweep, naive comparison, privacy probe."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import fp8
from .config import ExperimentConfig, config_hash
from .data import DatasetHandle, load_cifar10, make_synthetic, train_test_split
from .engine import SplitEngine, partition
from .metrics import (
    MetricsLog,
    distance_correlation,
    read_csv,
    reduction_report,
    write_json,
    write_reports,
)
from .nn import build_model, cut_preset, vgg_desk_spec
from .protocol import AlwaysASchedule, LossBasedSchedule, NaiveSchedule

__all__ = [
    "load_datasets",
    "build_engine",
    "run",
    "train",
    "sweep_threshold",
    "compare_naive",
    "privacy_probe",
    "report",
]

log = logging.getLogger(__name__)


def load_datasets(cfg: ExperimentConfig) -> tuple[DatasetHandle, DatasetHandle]:
    if cfg.dataset == "synthetic":
        data = make_synthetic(cfg.n_train + cfg.n_test, cfg.classes,
                              (3, cfg.image_size, cfg.image_size), cfg.difficulty, seed=cfg.seed)
        return train_test_split(data, cfg.n_test, seed=cfg.seed)
    path = Path(cfg.cifar_path)
    test_file = path / "test_batch.bin"
    if path.is_dir() and test_file.exists():
        train_files = sorted(path.glob("data_batch_*.bin"))
        parts = [load_cifar10(f) for f in train_files]
        x = np.concatenate([p.x for p in parts])
        y = np.concatenate([p.y for p in parts])
        train = DatasetHandle(x, y, 10, parts[0].mean, parts[0].std)
        if cfg.subset_size is not None and cfg.subset_size < len(train):
            idx = np.random.Generator(np.random.PCG64(cfg.seed)).choice(
                len(train), cfg.subset_size, replace=False)
            train = train.subset(np.sort(idx))
        test = load_cifar10(test_file, subset_size=cfg.n_test, seed=cfg.seed)
        return train, test
    data = load_cifar10(path, cfg.subset_size, cfg.seed)
    return train_test_split(data, min(cfg.n_test, len(data) // 5 or 1), seed=cfg.seed)


def _schedule(cfg: ExperimentConfig):
    if cfg.schedule == "always_A":
        return AlwaysASchedule()
    if cfg.schedule == "naive":
        return NaiveSchedule(cfg.epochs, cfg.naive_budget)
    return LossBasedSchedule(cfg.l_thred)


def build_engine(cfg: ExperimentConfig, train_set: DatasetHandle, test_set: DatasetHandle,
                 transport: str | None = None) -> SplitEngine:
    c, h, w = train_set.sample_shape
    if h != w:
        raise ValueError("square images expected")
    spec = vgg_desk_spec(c, cfg.width, h, train_set.class_count)
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    model = build_model(spec, cut_preset(cfg.cut), cfg.seed, input_shape=(c, h, w), dtype=dtype)
    clients = partition(train_set.x, train_set.y, cfg.clients, cfg.batch_size, cfg.seed)
    return SplitEngine(model, clients, _schedule(cfg), cfg.lr, quantize=cfg.quantize,
                       transport=transport or cfg.transport, tcp_host=cfg.tcp_host,
                       tcp_port=cfg.tcp_port, test_x=test_set.x, test_y=test_set.y)


def run(cfg: ExperimentConfig, datasets=None) -> tuple[MetricsLog, SplitEngine]:
    """Train one configuration to completion. Returns the log and the engine."""
    cfg.validate()
    train_set, test_set = datasets or load_datasets(cfg)
    engine = build_engine(cfg, train_set, test_set)
    try:
        engine.train(cfg.epochs)
    finally:
        engine.close()
    engine.log.meta.update({
        "config_hash": config_hash(cfg),
        "schedule": cfg.schedule,
        "l_thred": cfg.l_thred if cfg.schedule == "loss_based" else None,
        "naive_budget": cfg.naive_budget if cfg.schedule == "naive" else None,
        "quantize": cfg.quantize,
        "seed": cfg.seed,
    })
    return engine.log, engine


def _write_config(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.canonical(), encoding="utf-8")


def train(cfg: ExperimentConfig, out) -> MetricsLog:
    out = Path(out)
    _write_config(cfg, out)
    result, _ = run(cfg)
    write_reports(result, out)
    return result


def _baseline_cfg(cfg: ExperimentConfig) -> ExperimentConfig:
    return cfg.replace(schedule="always_A", quantize=False, naive_budget=None)


def sweep_threshold(cfg: ExperimentConfig, out) -> dict:
    """Baseline once, then one loss-based run per threshold in ``cfg.thresholds``.

    Treated runs keep the configured ``quantize`` flag. Writes one directory per
    run plus ``sweep.json`` with accuracy/reduction pairs.
    """
    out = Path(out)
    _write_config(cfg, out)
    datasets = load_datasets(cfg)
    base_cfg = _baseline_cfg(cfg)
    baseline, _ = run(base_cfg, datasets)
    write_reports(baseline, out / "baseline")
    rows = []
    logs = {}
    for thr in cfg.thresholds:
        tcfg = cfg.replace(schedule="loss_based", l_thred=thr, naive_budget=None)
        tlog, _ = run(tcfg, datasets)
        name = f"l_thred={thr:g}"
        logs[thr] = tlog
        write_reports(tlog, out / name, baseline=baseline)
        red = reduction_report(baseline, tlog)
        rows.append({
            "l_thred": thr,
            "accuracy": tlog.final_accuracy,
            "communication_reduction": red["communication"],
            "communication_total_reduction": red["communication_total"],
            "computation_reduction": red["computation"],
            "update_epochs": tlog.update_epochs,
        })
    summary = {
        "baseline_accuracy": baseline.final_accuracy,
        "baseline_payload_bytes": baseline.payload_bytes,
        "epochs": cfg.epochs,
        "quantize": cfg.quantize,
        "points": rows,
    }
    write_json(summary, out / "sweep.json")
    summary["logs"] = logs
    summary["baseline_log"] = baseline
    return summary


def compare_naive(cfg: ExperimentConfig, out) -> dict:
    """Loss-based run, then a naive run whose budget equals its A-epoch count."""
    out = Path(out)
    _write_config(cfg, out)
    datasets = load_datasets(cfg)
    lcfg = cfg.replace(schedule="loss_based", naive_budget=None)
    loss_log, _ = run(lcfg, datasets)
    budget = loss_log.update_epochs
    ncfg = cfg.replace(schedule="naive", naive_budget=budget)
    naive_log, _ = run(ncfg, datasets)
    write_reports(loss_log, out / "loss_based")
    write_reports(naive_log, out / "naive")
    summary = {
        "budget": budget,
        "loss_based_accuracy": loss_log.final_accuracy,
        "naive_accuracy": naive_log.final_accuracy,
        "loss_based_payload_bytes": loss_log.payload_bytes,
        "naive_payload_bytes": naive_log.payload_bytes,
        "loss_based_states": "".join(loss_log.states),
        "naive_states": "".join(naive_log.states),
    }
    write_json(summary, out / "compare.json")
    summary["logs"] = {"loss_based": loss_log, "naive": naive_log}
    return summary


def _probe_score(engine: SplitEngine, test_set: DatasetHandle, idx, quantize: bool) -> float:
    x = test_set.x[idx]
    act = engine.model.predict_client(x)
    if quantize:
        fmt = fp8.search_format(act)
        if fmt is not None:
            act = fp8.dequantize_tensor(fp8.quantize_tensor(act, fmt))
    return distance_correlation(x, act).score


def privacy_probe(cfg: ExperimentConfig, out) -> dict:
    """Distance correlation between raw test inputs and cut activations.

    Three runs share the dataset: synchronous baseline, loss-based async, and
    loss-based async with FP8 transfers. For the quantized run the probe sees
    the activation as it would be transmitted.
    """
    out = Path(out)
    _write_config(cfg, out)
    datasets = load_datasets(cfg)
    train_set, test_set = datasets
    n = min(cfg.privacy_samples, len(test_set))
    idx = np.sort(np.random.Generator(np.random.PCG64(cfg.seed)).choice(len(test_set), n, replace=False))
    variants = {
        "baseline": _baseline_cfg(cfg),
        "async": cfg.replace(schedule="loss_based", quantize=False, naive_budget=None),
        "async+quant": cfg.replace(schedule="loss_based", quantize=True, naive_budget=None),
    }
    rows = []
    for name, vcfg in variants.items():
        vlog, engine = run(vcfg, datasets)
        write_reports(vlog, out / name)
        score = _probe_score(engine, test_set, idx, vcfg.quantize)
        rows.append({"setting": name, "dcor": score, "accuracy": vlog.final_accuracy,
                     "update_epochs": vlog.update_epochs})
        log.info("privacy %s: dcor %.4f", name, score)
    summary = {"sample_size": int(n), "sample_source": "test", "cut": cfg.cut, "rows": rows}
    write_json(summary, out / "privacy.json")
    with open(out / "privacy.csv", "w", encoding="utf-8") as fh:
        fh.write("setting,dcor,accuracy,update_epochs\n")
        for r in rows:
            fh.write(f"{r['setting']},{r['dcor']!r},{r['accuracy']!r},{r['update_epochs']}\n")
    return summary


def report(out, baseline: str = "baseline") -> dict:
    """Rebuild summaries for every run directory under ``out``.

    Each subdirectory holding a ``metrics.csv`` is a run; ratios are taken
    against the run named ``baseline`` when present.
    """
    out = Path(out)
    runs = {p.parent.name: read_csv(p) for p in sorted(out.glob("*/metrics.csv"))}
    if not runs:
        raise FileNotFoundError(f"no */metrics.csv under {out}")
    base = runs.get(baseline)
    table = {}
    for name, rlog in runs.items():
        row = rlog.summary()
        if base is not None:
            row["reduction"] = reduction_report(base, rlog)
        table[name] = row
    summary = {"baseline": baseline if base is not None else None, "runs": table}
    write_json(summary, out / "report.json")
    return summary

