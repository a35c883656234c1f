"""Synthetic paired image / clinical time-series cohort.

Every patient carries a latent pair ``(z_ehr, z_img)``. The series encodes
``z_ehr`` as level and trend shifts of the continuous vitals, the image renders
``z_img`` as the radius of a bright disk and the thickness of a bar, and the
labels come from a logistic model with a ``z_ehr * z_img`` interaction term, so
neither modality alone recovers the Bayes-optimal rule.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, DatasetVersionError
from .schema import DEFAULT_SCHEMA, ChannelSchema, TaskSpec

BIN_HOURS = 2.0
IMAGE_SIZE = 256
DATASET_FORMAT = "clinfuse-dataset"
DATASET_VERSION = 1

# per-variable spread of the continuous vitals (in natural units)
_CONTINUOUS_SCALE = np.array([10.0, 0.05, 30.0, 15.0, 8.0, 12.0, 1.5, 4.0, 18.0, 0.6, 12.0, 0.05])
# mean measurement interval in hours
_CONTINUOUS_INTERVAL = np.array([1.5, 4.0, 4.0, 1.0, 24.0, 1.5, 1.0, 1.5, 1.5, 4.0, 24.0, 6.0])
_CATEGORICAL_INTERVAL = np.array([8.0, 4.0, 4.0, 4.0, 4.0])


@dataclass
class RawEpisode:
    patient_id: str
    episode_id: str
    events: list  # (time_hours, variable_id, value)
    duration_hours: float

    def validate(self, schema: ChannelSchema = DEFAULT_SCHEMA) -> None:
        if not self.duration_hours > 0:
            raise ValueError(f"episode {self.episode_id}: duration_hours must be positive")
        for time, var, value in self.events:
            if not 0 <= time <= self.duration_hours:
                raise ValueError(
                    f"episode {self.episode_id}: event at {time}h outside [0, {self.duration_hours}]"
                )
            if not 0 <= var < schema.n_variables:
                raise ValueError(f"episode {self.episode_id}: unknown variable id {var}")
            if schema.is_categorical(var):
                k = schema.n_categories(var)
                if int(value) != value or not 0 <= value < k:
                    raise ValueError(
                        f"episode {self.episode_id}: category {value} outside 0..{k - 1} for variable {var}"
                    )


@dataclass
class DiscretizedSeries:
    values: np.ndarray  # (t, 76) float64
    bin_hours: float = BIN_HOURS

    @property
    def t(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, DiscretizedSeries):
            return NotImplemented
        return self.bin_hours == other.bin_hours and np.array_equal(self.values, other.values)


@dataclass
class MultimodalRecord:
    patient_id: str
    episode_id: str
    series: DiscretizedSeries
    image: np.ndarray | None  # (H, W) uint8, None when the episode has no image
    labels: np.ndarray  # (num_labels,) uint8

    @property
    def has_image(self) -> bool:
        return self.image is not None

    def __eq__(self, other):
        if not isinstance(other, MultimodalRecord):
            return NotImplemented
        if (self.image is None) != (other.image is None):
            return False
        if self.image is not None and not np.array_equal(self.image, other.image):
            return False
        return (
            self.patient_id == other.patient_id
            and self.episode_id == other.episode_id
            and self.series == other.series
            and np.array_equal(self.labels, other.labels)
        )

    def replace(self, **changes) -> "MultimodalRecord":
        d = dict(
            patient_id=self.patient_id,
            episode_id=self.episode_id,
            series=self.series,
            image=self.image,
            labels=self.labels,
        )
        d.update(changes)
        return MultimodalRecord(**d)


@dataclass
class SynthConfig:
    n_patients: int = 1000
    pairing_rate: float = 0.18
    task: str = "phenotyping"
    num_labels: int | None = None  # only for task="custom"
    signal_strength: float = 4.0  # weight of the z_ehr*z_img interaction
    main_effect: float = 0.5  # weight of each unimodal main effect
    max_episodes: int = 2
    duration_hours: tuple = (24.0, 72.0)  # ignored for mortality (fixed 48h)
    label_flip: list = field(default_factory=list)  # per-label flip probability
    image_size: int = IMAGE_SIZE

    def task_spec(self) -> TaskSpec:
        try:
            return TaskSpec.from_name(self.task, self.num_labels)
        except ValueError as exc:
            raise ConfigError("task", str(exc)) from None

    def validate(self) -> None:
        if not isinstance(self.n_patients, int) or self.n_patients < 10:
            raise ConfigError("n_patients", "must be an integer >= 10")
        if not 0.0 <= self.pairing_rate <= 1.0:
            raise ConfigError("pairing_rate", "must lie in [0, 1]")
        spec = self.task_spec()
        if not math.isfinite(self.signal_strength):
            raise ConfigError("signal_strength", "must be finite")
        if not math.isfinite(self.main_effect):
            raise ConfigError("main_effect", "must be finite")
        if self.max_episodes < 1:
            raise ConfigError("max_episodes", "must be >= 1")
        lo, hi = self.duration_hours
        if not 0 < lo <= hi:
            raise ConfigError("duration_hours", "need 0 < min <= max")
        if self.label_flip:
            if len(self.label_flip) != spec.num_labels:
                raise ConfigError("label_flip", f"needs {spec.num_labels} entries")
            if any(not 0.0 <= p <= 0.5 for p in self.label_flip):
                raise ConfigError("label_flip", "probabilities must lie in [0, 0.5]")
        if self.image_size < 32:
            raise ConfigError("image_size", "must be >= 32")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["duration_hours"] = list(self.duration_hours)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown synth config field")
        if "duration_hours" in known:
            known["duration_hours"] = tuple(known["duration_hours"])
        return cls(**known)


@dataclass
class LabelModel:
    """Logistic label model: logit_j = bias_j + inter_j*ze*zi + ehr_j*ze + img_j*zi."""

    bias: np.ndarray
    interaction: np.ndarray
    ehr_weight: np.ndarray
    img_weight: np.ndarray

    def logits(self, z_ehr, z_img):
        z_ehr = np.asarray(z_ehr, dtype=float)[..., None]
        z_img = np.asarray(z_img, dtype=float)[..., None]
        return self.bias + self.interaction * z_ehr * z_img + self.ehr_weight * z_ehr + self.img_weight * z_img

    def probabilities(self, z_ehr, z_img):
        return 1.0 / (1.0 + np.exp(-self.logits(z_ehr, z_img)))


def label_model(config: SynthConfig, seed: int) -> LabelModel:
    n = config.task_spec().num_labels
    rng = np.random.default_rng([seed, 0x4C41424C])
    if config.task in ("mortality", "custom"):
        # custom labels all share one rule, so they differ only through label_flip
        sign = np.ones(n)
        mag = np.ones(n)
        bias = np.full(n, -0.3)
        ehr = np.full(n, config.main_effect)
        img = np.full(n, config.main_effect)
    else:
        sign = rng.choice([-1.0, 1.0], size=n)
        mag = rng.uniform(0.8, 1.2, size=n)
        bias = rng.uniform(-1.0, 0.3, size=n)
        ehr = config.main_effect * rng.choice([-1.0, 1.0], size=n) * rng.uniform(0.6, 1.0, size=n)
        img = config.main_effect * rng.choice([-1.0, 1.0], size=n) * rng.uniform(0.6, 1.0, size=n)
    return LabelModel(bias, config.signal_strength * sign * mag, ehr, img)


def _loadings() -> tuple[np.ndarray, np.ndarray]:
    # fixed, seed-independent directions of the ehr latent in the 12 vitals
    level = np.array([0.9, 0.6, -0.8, 1.0, 0.0, 0.9, -0.7, 0.8, 1.0, 0.6, 0.0, -0.7])
    trend = np.array([0.5, -0.3, 0.4, -0.6, 0.0, 0.4, 0.3, -0.5, 0.5, -0.3, 0.0, 0.4])
    return level, trend


def _raw_episode(rng, patient_id, episode_id, z_ehr, duration, schema) -> RawEpisode:
    level, trend = _loadings()
    offset = rng.normal(0.0, 0.3, size=schema.n_continuous)  # episode-level nuisance
    events = []
    for v in range(schema.n_continuous):
        n_obs = max(1, rng.poisson(duration / _CONTINUOUS_INTERVAL[v]))
        times = np.sort(rng.uniform(0.0, duration, size=n_obs))
        frac = times / duration
        z = level[v] * z_ehr + trend[v] * z_ehr * (frac - 0.5) + offset[v] + rng.normal(0.0, 0.3, size=n_obs)
        vals = schema.continuous_normals[v] + _CONTINUOUS_SCALE[v] * z
        events.extend((float(tt), v, float(x)) for tt, x in zip(times, vals))
    for j, k in enumerate(schema.category_sizes):
        v = schema.n_continuous + j
        n_obs = rng.poisson(duration / _CATEGORICAL_INTERVAL[j])
        times = np.sort(rng.uniform(0.0, duration, size=n_obs))
        normal = schema.categorical_normals[j]
        for tt in times:
            cat = normal if rng.random() < 0.7 else int(rng.integers(0, k))
            events.append((float(tt), v, float(cat)))
    events.sort(key=lambda e: (e[0], e[1]))
    return RawEpisode(patient_id, episode_id, events, float(duration))


def render_image(z_img: float, rng, size: int = IMAGE_SIZE) -> np.ndarray:
    """Grayscale chest-like stand-in; disk radius and bar thickness grow with z_img."""
    s = size / 256.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = size / 2.0
    img = np.full((size, size), 20.0)
    body = ((yy - c) / (0.46 * size)) ** 2 + ((xx - c) / (0.40 * size)) ** 2 <= 1.0
    img[body] = 95.0
    for side in (-1.0, 1.0):
        lung = ((yy - c * 0.95) / (0.30 * size)) ** 2 + ((xx - c - side * 0.17 * size) / (0.13 * size)) ** 2 <= 1.0
        img[lung] = 55.0
    radius = np.clip(36.0 + 14.0 * z_img, 8.0, 72.0) * s
    cy, cx = c + rng.uniform(-16, 16) * s, c + rng.uniform(-16, 16) * s
    img[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = 200.0
    thick = np.clip(6.0 + 3.0 * z_img, 1.0, 16.0) * s
    by = c + 0.30 * size + rng.uniform(-6, 6) * s
    bar = (np.abs(yy - by) <= thick / 2.0) & (np.abs(xx - c) <= 0.25 * size)
    img[bar] = 170.0
    img += rng.normal(0.0, 8.0, size=img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def generate_latents(n_patients: int, seed: int) -> np.ndarray:
    """(n, 2) array of (z_ehr, z_img) exactly as used by generate_cohort."""
    return np.array([np.random.default_rng([seed, i]).standard_normal(2) for i in range(n_patients)])


def generate_cohort(config: SynthConfig, seed: int, schema: ChannelSchema = DEFAULT_SCHEMA,
                    return_latents: bool = False):
    """Deterministic synthetic cohort; records are pure functions of (seed, patient index)."""
    config.validate()
    spec = config.task_spec()
    model = label_model(config, seed)
    flip = np.asarray(config.label_flip, dtype=float) if config.label_flip else np.zeros(spec.num_labels)
    records, latents = [], []
    for i in range(config.n_patients):
        rng = np.random.default_rng([seed, i])
        z_ehr, z_img = rng.standard_normal(2)
        n_ep = int(rng.integers(1, config.max_episodes + 1))
        pid = f"P{i:06d}"
        for e in range(n_ep):
            eid = f"{pid}_E{e}"
            if config.task == "mortality":
                duration = 48.0
            else:
                lo, hi = config.duration_hours
                duration = float(rng.uniform(lo, hi))
            episode = _raw_episode(rng, pid, eid, z_ehr, duration, schema)
            series = discretize(episode, schema)
            image = render_image(z_img, rng, config.image_size) if rng.random() < config.pairing_rate else None
            p = model.probabilities(z_ehr, z_img)
            y = (rng.random(spec.num_labels) < p).astype(np.uint8)
            flips = rng.random(spec.num_labels) < flip
            y = np.where(flips, 1 - y, y).astype(np.uint8)
            records.append(MultimodalRecord(pid, eid, series, image, y))
            latents.append((z_ehr, z_img))
    if return_latents:
        return records, np.array(latents)
    return records


def discretize(episode: RawEpisode, schema: ChannelSchema = DEFAULT_SCHEMA,
               bin_hours: float = BIN_HOURS) -> DiscretizedSeries:
    """Bin events into fixed windows, impute, and append masks and time-since-last."""
    episode.validate(schema)
    duration = episode.duration_hours
    t = max(1, math.ceil(duration / bin_hours))
    nv = schema.n_variables
    observed = np.full((t, nv), np.nan)
    last_time_in_bin = np.full((t, nv), np.nan)
    for time, var, value in sorted(episode.events, key=lambda e: e[0]):
        k = min(int(time // bin_hours), t - 1)
        observed[k, var] = value  # later events overwrite: last value in the bin wins
        last_time_in_bin[k, var] = time

    out = np.zeros((t, schema.total_channels))
    normals = list(schema.continuous_normals) + list(schema.categorical_normals)
    current = np.array(normals, dtype=float)
    last_seen = np.full(nv, np.nan)
    blocks = schema.block_offsets()
    for k in range(t):
        hit = ~np.isnan(observed[k])
        current[hit] = observed[k, hit]
        last_seen[hit] = last_time_in_bin[k, hit]
        out[k, : schema.n_continuous] = current[: schema.n_continuous]
        for j, (start, _) in enumerate(blocks):
            out[k, start + int(current[schema.n_continuous + j])] = 1.0
        out[k, schema.mask_offset : schema.mask_offset + nv] = hit
        ref = min((k + 1) * bin_hours, duration)
        since = np.where(np.isnan(last_seen), duration, ref - last_seen)
        out[k, schema.tsl_offset : schema.tsl_offset + nv] = np.minimum(since, duration)
    return DiscretizedSeries(out, bin_hours)


def _split_key(seed: int, patient_id: str) -> str:
    return hashlib.sha256(f"{seed}:{patient_id}".encode()).hexdigest()


def split_by_patient(records, ratios=(0.70, 0.10, 0.20), seed: int = 0):
    """Patient-grouped split. Patients are ordered by a seeded hash of their id, then cut by ratio."""
    if not records:
        raise ValueError("cannot split an empty record list")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    patients = sorted({r.patient_id for r in records}, key=lambda p: _split_key(seed, p))
    n = len(patients)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    where = {}
    for idx, p in enumerate(patients):
        where[p] = 0 if idx < n_train else (1 if idx < n_train + n_val else 2)
    splits = ([], [], [])
    for r in records:
        splits[where[r.patient_id]].append(r)
    return splits


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def fit_norm_stats(train_records, schema: ChannelSchema = DEFAULT_SCHEMA) -> NormStats:
    """Per-channel mean and population std of the continuous channels, training split only."""
    if not train_records:
        raise ValueError("need at least one training record")
    stacked = np.concatenate([r.series.values[:, : schema.n_continuous] for r in train_records])
    return NormStats(stacked.mean(axis=0), stacked.std(axis=0))


def standardize(series: DiscretizedSeries, stats: NormStats, schema: ChannelSchema = DEFAULT_SCHEMA):
    nc = schema.n_continuous
    if stats.mean.shape != (nc,) or stats.std.shape != (nc,):
        raise ValueError(f"norm stats cover {stats.mean.shape} channels, schema has {nc} continuous")
    if series.values.shape[1] != schema.total_channels:
        raise ValueError("series width does not match the channel schema")
    values = series.values.copy()
    scale = np.where(stats.std > 0, stats.std, 1.0)
    shift = np.where(stats.std > 0, stats.mean, 0.0)
    values[:, :nc] = (values[:, :nc] - shift) / scale
    return DiscretizedSeries(values, series.bin_hours)


def standardize_records(records, stats: NormStats, schema: ChannelSchema = DEFAULT_SCHEMA):
    return [r.replace(series=standardize(r.series, stats, schema)) for r in records]


# --- persistence -----------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(x) for x in tokens[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise DatasetError(f"{path}: truncated PGM payload")
    return pixels.reshape(h, w).copy()


def save_dataset(records, directory, task: TaskSpec, seed: int | None = None, config: dict | None = None,
                 schema: ChannelSchema = DEFAULT_SCHEMA) -> Path:
    directory = Path(directory)
    (directory / "series").mkdir(parents=True, exist_ok=True)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    header = ",".join(schema.channel_names())
    entries = []
    for r in records:
        series_rel = f"series/{r.episode_id}.csv"
        np.savetxt(directory / series_rel, r.series.values, delimiter=",", fmt="%.17g", header=header, comments="")
        image_rel = None
        if r.image is not None:
            image_rel = f"images/{r.episode_id}.pgm"
            write_pgm(directory / image_rel, r.image)
        entries.append({
            "patient_id": r.patient_id,
            "episode_id": r.episode_id,
            "series": series_rel,
            "bin_hours": r.series.bin_hours,
            "image": image_rel,
            "labels": [int(x) for x in r.labels],
        })
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "task": task.to_dict(),
        "seed": seed,
        "config": config or {},
        "channel_schema": schema.to_dict(),
        "records": entries,
    }
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, directory / "manifest.json")
    return directory


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{path}: manifest not found")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: corrupt manifest ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path}: corrupt manifest (not a {DATASET_FORMAT} file)")
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetVersionError(
            f"{path}: dataset version {manifest.get('version')!r} unsupported (expected {DATASET_VERSION})"
        )
    for key in ("task", "records", "channel_schema"):
        if key not in manifest:
            raise DatasetError(f"{path}: corrupt manifest (missing {key!r})")
    return manifest


def load_dataset(directory):
    """Returns (records, task, manifest)."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    schema = ChannelSchema.from_dict(manifest["channel_schema"])
    task = TaskSpec.from_dict(manifest["task"])
    records = []
    for e in manifest["records"]:
        series_path = directory / e["series"]
        if not series_path.exists():
            raise DatasetError(f"missing series file {series_path}")
        values = np.loadtxt(series_path, delimiter=",", skiprows=1, ndmin=2)
        if values.shape[1] != schema.total_channels:
            raise DatasetError(f"{series_path}: expected {schema.total_channels} columns")
        image = None
        if e["image"] is not None:
            image_path = directory / e["image"]
            if not image_path.exists():
                raise DatasetError(f"missing image file {image_path}")
            image = read_pgm(image_path)
        labels = np.asarray(e["labels"], dtype=np.uint8)
        if labels.shape != (task.num_labels,):
            raise DatasetError(f"{e['episode_id']}: label length does not match task")
        records.append(MultimodalRecord(e["patient_id"], e["episode_id"],
                                        DiscretizedSeries(values, float(e.get("bin_hours", BIN_HOURS))),
                                        image, labels))
    return records, task, manifest
