"""Gaussian noise injection and the robustness grid over noise fractions and training regimes."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data_synth import DiscretizedSeries
from .errors import ConfigError
from .pipeline import (
    aligned_table, dump_json, evaluate_records, load_records, row_config, run_experiment, save_svg,
)
from .schema import DEFAULT_SCHEMA

from matplotlib.figure import Figure

GRID_COLUMNS = ("Model", "Percentage of Noise", "AUROC", "AUPRC", "Macro F1", "Binary F1")
_METRIC_KEYS = (("AUROC", "auroc"), ("AUPRC", "auprc"), ("Macro F1", "macro_f1"), ("Binary F1", "binary_f1"))
MODES = ("train_clean", "train_noisy")
MODEL_NAMES = {"attention": "Attention", "lstm": "LSTM", "ehr_only": "Time-series only", "img_only": "Image only"}
DEFAULT_FRACTIONS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)


@dataclass
class NoiseSpec:
    fraction: float
    image_mean: float | None
    image_std: float | None
    series_mean: list
    series_std: list
    seed: int = 0
    additive: bool = False  # replace values by default; add zero-mean noise when True

    def validate(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError("noise.fraction", "must lie in [0, 1]")
        if self.image_std is not None and self.image_std < 0:
            raise ConfigError("noise.image_std", "must be non-negative")

    def at(self, fraction: float) -> "NoiseSpec":
        d = asdict(self)
        d["fraction"] = float(fraction)
        return NoiseSpec(**d)


def estimate_noise_params(records, n: int = 1000, seed: int = 0, fraction: float = 0.0,
                          schema=DEFAULT_SCHEMA) -> NoiseSpec:
    """Noise mean/std from up to ``n`` records drawn without replacement."""
    if not records:
        raise ValueError("need records to estimate noise parameters")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(records), size=min(n, len(records)), replace=False)
    sample = [records[i] for i in np.sort(pick)]
    images = [r.image for r in sample if r.image is not None]
    img_mean = img_std = None
    if images:
        pixels = np.concatenate([im.ravel() for im in images]).astype(np.float64)
        img_mean, img_std = float(pixels.mean()), float(pixels.std())
    nc = schema.n_continuous
    values = np.concatenate([r.series.values[:, :nc] for r in sample])
    spec = NoiseSpec(fraction, img_mean, img_std, values.mean(axis=0).tolist(), values.std(axis=0).tolist(), seed)
    spec.validate()
    return spec


def record_rng(spec: NoiseSpec, episode_id: str) -> np.random.Generator:
    key = int(hashlib.sha256(episode_id.encode()).hexdigest()[:12], 16)
    return np.random.default_rng([spec.seed, key])


def perturb(record, spec: NoiseSpec, rng=None, schema=DEFAULT_SCHEMA):
    """Return a noisy copy; ceil(p*HW) pixels and ceil(p*T) time steps of the continuous channels change."""
    spec.validate()
    if spec.fraction == 0.0:
        return record.replace()
    rng = rng if rng is not None else record_rng(spec, record.episode_id)
    image = record.image
    if image is not None and spec.image_std is not None:
        flat = image.astype(np.float64).ravel()
        k = math.ceil(spec.fraction * flat.size)
        where = rng.choice(flat.size, size=k, replace=False)
        if spec.additive:
            flat[where] += rng.normal(0.0, spec.image_std, size=k)
        else:
            flat[where] = rng.normal(spec.image_mean, spec.image_std, size=k)
        image = np.clip(np.rint(flat), 0, 255).astype(np.uint8).reshape(record.image.shape)
    values = record.series.values.copy()
    t = values.shape[0]
    nc = schema.n_continuous
    k = math.ceil(spec.fraction * t)
    steps = rng.choice(t, size=k, replace=False)
    mean, std = np.asarray(spec.series_mean), np.asarray(spec.series_std)
    draws = rng.normal(0.0, 1.0, size=(k, nc)) * std
    if spec.additive:
        values[steps, :nc] += draws
    else:
        values[steps, :nc] = mean + draws
    return record.replace(series=DiscretizedSeries(values, record.series.bin_hours), image=image)


def perturb_records(records, spec: NoiseSpec):
    return [perturb(r, spec) for r in records]


@dataclass
class GridCell:
    mode: str
    model: str
    fraction: float
    metrics: dict

    def row(self) -> list:
        m = self.metrics
        return [MODEL_NAMES.get(self.model, self.model), int(round(self.fraction * 100))] + [
            m[k] for _, k in _METRIC_KEYS]


@dataclass
class GridResult:
    cells: list = field(default_factory=list)
    clean: dict = field(default_factory=dict)  # model kind -> clean-test metrics dict
    files: dict = field(default_factory=dict)

    def get(self, mode: str, model: str, fraction: float) -> GridCell:
        for c in self.cells:
            if c.mode == mode and c.model == model and abs(c.fraction - fraction) < 1e-12:
                return c
        raise KeyError((mode, model, fraction))


def robustness_grid(config, out_dir, fractions=DEFAULT_FRACTIONS, modes=MODES, models=("attention", "lstm"),
                    noise_seed: int = 0, additive: bool = False, records=None) -> GridResult:
    """Evaluate each model under test-time noise (train_clean) and after training on noisy data (train_noisy)."""
    base = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    base.validate()
    bad = set(modes) - set(MODES)
    if bad:
        raise ConfigError("modes", f"unknown mode(s) {sorted(bad)}")
    fractions = sorted({0.0, *(float(p) for p in fractions)})  # the p=0 control row is always present
    if any(not 0.0 <= p <= 1.0 for p in fractions):
        raise ConfigError("fractions", "noise fractions must lie in [0, 1]")
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    cache = out / "_pretrain_cache"
    if records is None:
        records = load_records(base)
    noise = estimate_noise_params(records, seed=noise_seed)
    noise.additive = additive
    (out / "noise_params.json").write_text(dump_json(asdict(noise)))
    result = GridResult()

    for kind in models:
        cfg = row_config(base, MODEL_NAMES.get(kind, kind), {"fusion.kind": kind,
                                                             "loss_mode": base.loss_mode,
                                                             "preprocess.clahe.enabled": base.preprocess.clahe.enabled})
        clean = run_experiment(cfg, out / "models" / kind, cache_dir=cache, records=records)
        result.clean[kind] = clean.metrics.to_dict()
        for mode in modes:
            for p in fractions:
                spec = noise.at(p)
                if mode == "train_clean":
                    rep = evaluate_records(clean.model, cfg, perturb_records(clean.data.test_records, spec),
                                           clean.data.stats, clean.config_hash).to_dict()
                elif p == 0.0:
                    rep = clean.metrics.to_dict()
                else:
                    art = run_experiment(cfg, out / "noisy" / f"{kind}-p{int(round(p * 100)):02d}", cache_dir=cache,
                                         records=perturb_records(records, spec),
                                         data_tag={"noise": asdict(spec)})
                    rep = art.metrics.to_dict()
                cell = GridCell(mode, kind, p, rep)
                result.cells.append(cell)
                name = f"{mode}-{kind}-p{int(round(p * 100)):02d}.json"
                (out / "cells" / name).write_text(dump_json({"mode": mode, "model": kind, "noise_fraction": p,
                                                             "noise": asdict(spec), "metrics": rep}))
    result.files = write_grid(result, out, modes)
    return result


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def write_grid(result: GridResult, out: Path, modes) -> dict:
    files = {}
    with open(out / "robustness.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("Training",) + GRID_COLUMNS)
        for c in result.cells:
            w.writerow([c.mode] + [repr(v) if isinstance(v, float) else v for v in c.row()])
    files["csv"] = out / "robustness.csv"
    for mode in modes:
        rows = [c.row() for c in result.cells if c.mode == mode]
        path = out / f"robustness_{mode}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(GRID_COLUMNS)
            for r in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        files[f"{mode}_csv"] = path
        txt = out / f"robustness_{mode}.txt"
        txt.write_text(aligned_table(GRID_COLUMNS, [r[:2] + [_fmt(v) for v in r[2:]] for r in rows]))
        files[f"{mode}_txt"] = txt

    fig = Figure(figsize=(9.0, 6.5))
    for k, (label, key) in enumerate(_METRIC_KEYS):
        ax = fig.add_subplot(2, 2, k + 1)
        for mode in modes:
            for kind in sorted({c.model for c in result.cells}):
                cells = [c for c in result.cells if c.mode == mode and c.model == kind]
                xs = [100 * c.fraction for c in cells]
                ys = [c.metrics[key] if c.metrics[key] is not None else float("nan") for c in cells]
                ax.plot(xs, ys, marker="o", linestyle="-" if mode == "train_clean" else "--",
                        label=f"{MODEL_NAMES.get(kind, kind)} ({mode.replace('_', ' ')})")
        ax.set_title(label)
        ax.set_xlabel("Percentage of noise")
        ax.set_ylim(0, 1)
    fig.axes[0].legend(fontsize=7)
    fig.tight_layout()
    files["svg"] = save_svg(fig, out / "robustness.svg")
    return files
