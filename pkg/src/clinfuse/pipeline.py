"""End-to-end runs: data, encoder pretraining, joint fine-tuning, evaluation, ablation and reports."""

from __future__ import annotations

import copy
import csv
import json
import logging
import re
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import jsonschema
import matplotlib
import numpy as np
import torch

matplotlib.use("Agg")
from matplotlib.figure import Figure  # noqa: E402

from .checkpoint import config_hash, load_checkpoint, save_checkpoint  # noqa: E402
from .config import ExperimentConfig, apply_overrides, load_schema  # noqa: E402
from .data_synth import (  # noqa: E402
    NormStats, fit_norm_stats, generate_cohort, load_dataset, split_by_patient, standardize_records,
)
from .encoders import EhrEncoder, ImgEncoder  # noqa: E402
from .errors import ConfigError, DatasetError  # noqa: E402
from .fusion import FusionModel  # noqa: E402
from .metrics import MetricsReport, report_from_scores  # noqa: E402
from .preprocess import clahe  # noqa: E402
from .schema import TaskSpec  # noqa: E402
from .training import (  # noqa: E402
    PreparedSplit, TrainHyper, finetune, predict_split, prepare_split, pretrain_encoder,
)

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "evaluate")
METRIC_COLUMNS = (("Macro F1", "macro_f1"), ("Binary F1", "binary_f1"), ("AUROC", "auroc"), ("AUPRC", "auprc"))
SVG_SALT = "clinfuse"


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


# --- data ------------------------------------------------------------------

def load_records(cfg: ExperimentConfig):
    spec = cfg.task_spec()
    if cfg.data.synth is not None:
        return generate_cohort(cfg.synth_config(), cfg.seeds.data)
    records, task, _ = load_dataset(cfg.data.path)
    if task.kind != spec.kind or task.num_labels != spec.num_labels:
        raise DatasetError(f"{cfg.data.path}: dataset task {task.kind}/{task.num_labels} does not match config")
    return records


@dataclass
class PreparedData:
    train: PreparedSplit
    val: PreparedSplit
    test: PreparedSplit
    stats: NormStats
    test_records: list  # raw (unstandardised) test records, for perturbation studies


def image_fn(cfg: ExperimentConfig):
    c = cfg.preprocess.clahe
    return partial(clahe, params=c.params()) if c.enabled else None


def prepare_data(cfg: ExperimentConfig, records) -> PreparedData:
    train, val, test = split_by_patient(records, tuple(cfg.data.split_ratios), seed=cfg.seeds.split)
    stats = fit_norm_stats(train)
    fn = image_fn(cfg)
    splits = [prepare_split(standardize_records(part, stats), fn) for part in (train, val, test)]
    return PreparedData(*splits, stats=stats, test_records=test)


def _data_key(cfg: ExperimentConfig, data_tag) -> dict:
    d = cfg.to_dict()
    return {"data": d["data"], "task": cfg.task_spec().to_dict(), "seeds": {"data": cfg.seeds.data,
            "split": cfg.seeds.split}, "tag": data_tag}


# --- models ----------------------------------------------------------------

def needed_encoders(kind: str) -> tuple[bool, bool]:
    return kind != "img_only", kind != "ehr_only"


def build_model(cfg: ExperimentConfig, spec: TaskSpec, ehr: EhrEncoder | None, img: ImgEncoder | None):
    torch.manual_seed(cfg.seeds.train)
    return FusionModel(copy.deepcopy(ehr), copy.deepcopy(img), spec.num_labels, copy.deepcopy(cfg.fusion))


def _pretrain_hyper(cfg, lr) -> TrainHyper:
    e = cfg.encoders
    return TrainHyper(lr=lr, epochs=e.epochs, batch_size=e.batch_size, patience=e.patience, seed=cfg.seeds.train)


def _encoder_key(cfg, stage, data_tag) -> dict:
    key = {"stage": stage, **_data_key(cfg, data_tag)}
    if stage == "pretrain_ehr":
        key.update(encoder=asdict(cfg.encoders.ehr), hyper=_pretrain_hyper(cfg, cfg.ehr_lr()).to_dict())
    else:
        d = cfg.to_dict()["preprocess"]
        key.update(encoder=asdict(cfg.encoders.img), hyper=_pretrain_hyper(cfg, cfg.img_lr()).to_dict(),
                   clahe=d["clahe"], augment=d["augment"])
    return key


def pretrained_encoders(cfg: ExperimentConfig, data: PreparedData, cache_dir: Path, data_tag=None):
    """Pretrain (or load from the hash-keyed cache) the encoders the fusion kind needs."""
    spec = cfg.task_spec()
    want_ehr, want_img = needed_encoders(cfg.fusion.kind)
    out, info = [], {}
    for stage, wanted, factory, lr in (
        ("pretrain_ehr", want_ehr, lambda: EhrEncoder(cfg.encoders.ehr, spec.num_labels), cfg.ehr_lr()),
        ("pretrain_img", want_img, lambda: ImgEncoder(cfg.encoders.img, spec.num_labels), cfg.img_lr()),
    ):
        if not wanted:
            out.append(None)
            continue
        key = _encoder_key(cfg, stage, data_tag)
        path = cache_dir / f"{stage}-{config_hash(key)}.pt"
        torch.manual_seed(cfg.seeds.train)
        enc = factory()
        if path.exists():
            tensors, manifest = load_checkpoint(path, key)
            enc.load_state_dict(tensors)
            info[stage] = {"checkpoint": str(path), "cached": True, **manifest["extra"]}
        else:
            t0 = time.perf_counter()
            res = pretrain_encoder(enc, data.train, data.val, _pretrain_hyper(cfg, lr), cfg.preprocess.augment)
            extra = {"best_epoch": res.best_epoch, "best_score": res.best_score, "history": res.history}
            save_checkpoint(path, enc.state_dict(), key, extra)
            info[stage] = {"checkpoint": str(path), "cached": False, "seconds": time.perf_counter() - t0, **extra}
        enc.eval()
        out.append(enc)
    return out[0], out[1], info


def _skeleton(cfg: ExperimentConfig, spec: TaskSpec) -> FusionModel:
    want_ehr, want_img = needed_encoders(cfg.fusion.kind)
    ehr = EhrEncoder(cfg.encoders.ehr, spec.num_labels) if want_ehr else None
    img = ImgEncoder(cfg.encoders.img, spec.num_labels) if want_img else None
    return build_model(cfg, spec, ehr, img)


# --- evaluation ------------------------------------------------------------

def evaluation_split(cfg: ExperimentConfig, split: PreparedSplit) -> PreparedSplit:
    # the image-only model is scored on records that carry an image
    if cfg.fusion.kind == "img_only":
        return split.subset(np.flatnonzero(split.has_image))
    return split


def evaluate_model(model: FusionModel, cfg: ExperimentConfig, split: PreparedSplit, chash: str) -> MetricsReport:
    split = evaluation_split(cfg, split)
    if len(split) == 0:
        raise DatasetError("evaluation split is empty")
    probs = predict_split(model, split, cfg.preprocess.augment)
    return report_from_scores(probs, split.labels.numpy(), cfg.task_spec().label_names, chash, cfg.threshold)


def evaluate_records(model, cfg: ExperimentConfig, records, stats: NormStats, chash: str) -> MetricsReport:
    """Score raw records with clean-fit normalisation statistics."""
    split = prepare_split(standardize_records(records, stats), image_fn(cfg))
    return evaluate_model(model, cfg, split, chash)


def uncertainty_rows(spec: TaskSpec, log_var) -> list[dict]:
    return [{"task": j, "label": name, "log_var": float(s), "sigma2": float(np.exp(s))}
            for j, (name, s) in enumerate(zip(spec.label_names, log_var))]


def write_uncertainty_csv(path, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "label", "log_var", "sigma2"])
        for r in rows:
            w.writerow([r["task"], r["label"], repr(r["log_var"]), repr(r["sigma2"])])
    return Path(path)


# --- a single run ----------------------------------------------------------

@dataclass
class RunArtifact:
    name: str
    config: dict
    config_hash: str
    out_dir: Path
    metrics: MetricsReport | None = None
    uncertainty: list | None = None
    checkpoints: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    model: FusionModel | None = None
    data: PreparedData | None = None


def _read_state(out: Path, chash: str) -> dict:
    path = out / "state.json"
    if path.exists():
        state = json.loads(path.read_text())
        if state.get("config_hash") == chash:
            return state
        log.warning("%s: run directory belongs to config %s, starting over", out, state.get("config_hash"))
    return {"config_hash": chash, "completed": []}


def _write_state(out: Path, state: dict) -> None:
    tmp = out / "state.json.tmp"
    tmp.write_text(dump_json(state))
    tmp.replace(out / "state.json")


def run_experiment(config, out_dir=None, *, stages=STAGES, cache_dir=None, records=None,
                   data_tag=None) -> RunArtifact:
    """Run the requested stages; completed stages recorded in ``state.json`` are reused."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    cfg.validate()
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ConfigError("stages", f"unknown stage(s) {sorted(unknown)}")
    spec = cfg.task_spec()
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = cfg.to_dict()
    chash = config_hash({"config": cfg_dict, "data_tag": data_tag})
    state = _read_state(out, chash)
    cache = Path(cache_dir) if cache_dir is not None else out / "pretrain"
    art = RunArtifact(cfg.name, cfg_dict, chash, out)
    (out / "config.json").write_text(dump_json(cfg_dict))

    t0 = time.perf_counter()
    if records is None:
        records = load_records(cfg)
    data = prepare_data(cfg, records)
    art.data = data
    (out / "norm_stats.json").write_text(dump_json(data.stats.to_dict()))
    art.wall_clock["data"] = time.perf_counter() - t0

    ft_path = out / "checkpoints" / "finetune.pt"
    model = None
    log_var = None
    if "finetune" in state["completed"] and ft_path.exists() and ("finetune" in stages or "evaluate" in stages):
        model = _skeleton(cfg, spec)
        tensors, manifest = load_checkpoint(ft_path, {"config": cfg_dict, "data_tag": data_tag})
        log_var = tensors.pop("uncertainty.log_var", None)
        model.load_state_dict(tensors)
        model.eval()
        art.history["finetune"] = manifest["extra"].get("history", [])
        art.checkpoints["finetune"] = str(ft_path)
    elif "pretrain" in stages or "finetune" in stages:
        t0 = time.perf_counter()
        ehr, img, info = pretrained_encoders(cfg, data, cache, data_tag)
        art.wall_clock["pretrain"] = time.perf_counter() - t0
        art.checkpoints.update({k: v["checkpoint"] for k, v in info.items()})
        art.history.update({k: v.get("history", []) for k, v in info.items()})
        if "pretrain" not in state["completed"]:
            state["completed"].append("pretrain")
            _write_state(out, state)
        if "finetune" in stages:
            t0 = time.perf_counter()
            model = build_model(cfg, spec, ehr, img)
            ft = cfg.finetune
            hyper = TrainHyper(lr=cfg.finetune_lr(), epochs=ft.epochs, batch_size=ft.batch_size,
                               patience=ft.patience, seed=cfg.seeds.train, log_var_lr=ft.log_var_lr)
            res, unc = finetune(model, data.train, data.val, hyper, cfg.preprocess.augment, cfg.loss_mode)
            tensors = dict(model.state_dict())
            if unc is not None:
                log_var = unc.log_var.detach().clone()
                tensors["uncertainty.log_var"] = log_var
            save_checkpoint(ft_path, tensors, {"config": cfg_dict, "data_tag": data_tag},
                            {"best_epoch": res.best_epoch, "best_score": res.best_score, "history": res.history})
            art.checkpoints["finetune"] = str(ft_path)
            art.history["finetune"] = res.history
            art.wall_clock["finetune"] = time.perf_counter() - t0
            state["completed"].append("finetune")
            _write_state(out, state)

    if log_var is not None:
        art.uncertainty = uncertainty_rows(spec, log_var.tolist())
        write_uncertainty_csv(out / "uncertainty.csv", art.uncertainty)

    if "evaluate" in stages:
        if model is None:
            raise ConfigError("stages", "evaluation needs a fine-tuned model; run the finetune stage first")
        t0 = time.perf_counter()
        art.metrics = evaluate_model(model, cfg, data.test, chash)
        (out / "metrics.json").write_text(dump_json(art.metrics.to_dict()))
        art.wall_clock["evaluate"] = time.perf_counter() - t0
        if "evaluate" not in state["completed"]:
            state["completed"].append("evaluate")
            _write_state(out, state)

    art.model = model
    (out / "history.json").write_text(dump_json(art.history))
    # timings live apart from metrics.json so the latter stays byte-reproducible
    (out / "run.json").write_text(dump_json({"name": cfg.name, "config_hash": chash, "stages": list(stages),
                                             "checkpoints": art.checkpoints, "wall_clock": art.wall_clock}))
    return art


# --- ablation --------------------------------------------------------------

ABLATION_ROWS = (
    ("Time-series only", {"fusion.kind": "ehr_only"}),
    ("Image only", {"fusion.kind": "img_only"}),
    ("Multimodal LSTM fusion", {"fusion.kind": "lstm"}),
    ("Multimodal attention", {"fusion.kind": "attention"}),
    ("Attention + uncertainty loss", {"fusion.kind": "attention", "loss_mode": "uncertainty"}),
    ("Attention + CLAHE", {"fusion.kind": "attention", "preprocess.clahe.enabled": True}),
    ("Attention + uncertainty + CLAHE",
     {"fusion.kind": "attention", "loss_mode": "uncertainty", "preprocess.clahe.enabled": True}),
)
_ROW_DEFAULTS = {"loss_mode": "bce", "preprocess.clahe.enabled": False}


def row_config(base: ExperimentConfig, name: str, changes: dict) -> ExperimentConfig:
    merged = {**_ROW_DEFAULTS, **changes}
    d = apply_overrides(base.to_dict(), [f"{k}={json.dumps(v)}" for k, v in merged.items()])
    d["name"] = name
    return ExperimentConfig.from_dict(d)


@dataclass
class AblationResult:
    rows: list  # (name, RunArtifact | None, error str | None)
    files: dict

    def metrics(self, name: str) -> MetricsReport:
        for n, art, err in self.rows:
            if n == name:
                if art is None:
                    raise RuntimeError(f"ablation row {name!r} failed: {err}")
                return art.metrics
        raise KeyError(name)


def run_ablation(base, out_dir, rows=None, records=None) -> AblationResult:
    """Every row shares the cohort, split and (where keys match) the pretrained encoders."""
    base = base if isinstance(base, ExperimentConfig) else ExperimentConfig.from_dict(base)
    base.validate()
    out = Path(out_dir)
    selected = [r for r in ABLATION_ROWS if rows is None or r[0] in rows]
    if rows is not None and len(selected) != len(set(rows)):
        known = [r[0] for r in ABLATION_ROWS]
        raise ConfigError("rows", f"unknown ablation row; choose from {known}")
    if records is None:
        records = load_records(base)
    results = []
    for name, changes in selected:
        cfg = row_config(base, name, changes)
        try:
            art = run_experiment(cfg, out / "rows" / slug(name), cache_dir=out / "_pretrain_cache", records=records)
            results.append((name, art, None))
        except Exception as exc:  # one failing row must not take the table down
            log.exception("ablation row %s failed", name)
            results.append((name, None, f"{type(exc).__name__}: {exc}"))
    ok = [(n, a.metrics) for n, a, _ in results if a is not None]
    files = emit_report(ok, out, stem="ablation", title="Ablation")
    failed = {n: e for n, a, e in results if a is None}
    if failed:
        (out / "ablation_failures.json").write_text(dump_json(failed))
    names = {n: a for n, a, _ in results if a is not None}
    if "Multimodal attention" in names and "Attention + uncertainty loss" in names:
        files.update(emit_per_task_comparison(
            names["Multimodal attention"].metrics, names["Attention + uncertainty loss"].metrics,
            ("Attention", "Attention + uncertainty"), out, stem="per_task_uncertainty"))
    return AblationResult(results, files)


# --- reports ---------------------------------------------------------------

def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def aligned_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def save_svg(fig: Figure, path) -> Path:
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return Path(path)


def emit_report(rows, out_dir, stem: str = "report", title: str = "Results") -> dict:
    """``rows`` is a list of (model name, MetricsReport). Writes JSON, CSV, aligned text and SVG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"title": title, "columns": ["Model"] + [c for c, _ in METRIC_COLUMNS],
           "rows": [{"model": name, **rep.headline(), "per_task": [asdict(t) for t in rep.per_task],
                     "n_samples": rep.n_samples, "config_hash": rep.config_hash} for name, rep in rows]}
    jsonschema.validate(doc, load_schema("report.schema.json"))
    paths = {"json": out / f"{stem}.json", "csv": out / f"{stem}.csv", "txt": out / f"{stem}.txt",
             "svg": out / f"{stem}.svg"}
    paths["json"].write_text(dump_json(doc))
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(doc["columns"])
        for name, rep in rows:
            h = rep.headline()
            w.writerow([name] + ["" if h[k] is None else repr(h[k]) for _, k in METRIC_COLUMNS])
    table = [[name] + [_fmt(rep.headline()[k]) for _, k in METRIC_COLUMNS] for name, rep in rows]
    paths["txt"].write_text(f"{title}\n\n" + aligned_table(doc["columns"], table))

    fig = Figure(figsize=(max(6.0, 1.3 * len(rows) + 2), 4.0))
    ax = fig.add_subplot(1, 1, 1)
    width = 0.8 / len(METRIC_COLUMNS)
    x = np.arange(len(rows))
    for k, (label, key) in enumerate(METRIC_COLUMNS):
        vals = [rep.headline()[key] or 0.0 for _, rep in rows]
        ax.bar(x + (k - 1.5) * width, vals, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels([n for n, _ in rows], rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(fontsize=8, ncol=4, loc="upper left")
    fig.tight_layout()
    save_svg(fig, paths["svg"])
    return paths


def emit_per_task_comparison(a: MetricsReport, b: MetricsReport, names, out_dir, stem="per_task") -> dict:
    """Per-label AUROC/AUPRC of two models side by side, with the difference b - a."""
    out = Path(out_dir)
    header = ["Label", f"AUROC {names[0]}", f"AUROC {names[1]}", "AUROC diff",
              f"AUPRC {names[0]}", f"AUPRC {names[1]}", "AUPRC diff"]

    def diff(x, y):
        return None if x is None or y is None else y - x

    rows = [[ta.label, ta.auroc, tb.auroc, diff(ta.auroc, tb.auroc), ta.auprc, tb.auprc, diff(ta.auprc, tb.auprc)]
            for ta, tb in zip(a.per_task, b.per_task)]
    paths = {"per_task_csv": out / f"{stem}.csv", "per_task_txt": out / f"{stem}.txt"}
    with open(paths["per_task_csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[0]] + ["" if v is None else repr(v) for v in r[1:]])
    paths["per_task_txt"].write_text(aligned_table(header, [[r[0]] + [_fmt(v) for v in r[1:]] for r in rows]))
    return paths


def load_run_metrics(run_dir) -> tuple[str, MetricsReport]:
    run_dir = Path(run_dir)
    path = run_dir / "metrics.json"
    if not path.exists():
        raise DatasetError(f"{run_dir}: no metrics.json (has the evaluate stage run?)")
    name = run_dir.name
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        name = json.loads(cfg_path.read_text()).get("name", name)
    return name, MetricsReport.from_dict(json.loads(path.read_text()))
