"""Channel layout of the discretized clinical series and the task definitions."""

from __future__ import annotations

from dataclasses import dataclass, field

CONTINUOUS_VARIABLES = (
    "diastolic_blood_pressure",
    "fraction_inspired_oxygen",
    "glucose",
    "heart_rate",
    "height",
    "mean_blood_pressure",
    "oxygen_saturation",
    "respiratory_rate",
    "systolic_blood_pressure",
    "temperature",
    "weight",
    "ph",
)

# name -> number of categories
CATEGORICAL_VARIABLES = (
    ("capillary_refill_rate", 2),
    ("gcs_eye_opening", 4),
    ("gcs_motor_response", 6),
    ("gcs_verbal_response", 5),
    ("gcs_total", 13),
)

CONTINUOUS_NORMALS = (59.0, 0.21, 128.0, 86.0, 170.0, 77.0, 98.0, 19.0, 118.0, 36.6, 81.0, 7.4)
# category index of the "normal" reading for each categorical variable
CATEGORICAL_NORMALS = (0, 3, 5, 4, 12)

PHENOTYPE_LABELS = (
    "Acute and unspecified renal failure",
    "Acute cerebrovascular disease",
    "Acute myocardial infarction",
    "Cardiac dysrhythmias",
    "Chronic kidney disease",
    "Chronic obstructive pulmonary disease and bronchiectasis",
    "Complications of surgical procedures or medical care",
    "Conduction disorders",
    "Congestive heart failure; nonhypertensive",
    "Coronary atherosclerosis and other heart disease",
    "Diabetes mellitus with complications",
    "Diabetes mellitus without complication",
    "Disorders of lipid metabolism",
    "Essential hypertension",
    "Fluid and electrolyte disorders",
    "Gastrointestinal hemorrhage",
    "Hypertension with complications and secondary hypertension",
    "Other liver diseases",
    "Other lower respiratory disease",
    "Other upper respiratory disease",
    "Pleurisy; pneumothorax; pulmonary collapse",
    "Pneumonia",
    "Respiratory failure; insufficiency; arrest (adult)",
    "Septicemia (except in labor)",
    "Shock",
)


@dataclass(frozen=True)
class ChannelSchema:
    """Fixed 76-wide layout: continuous | one-hot blocks | masks | time-since-last.

    Variable ids 0..11 are the continuous variables, 12..16 the categorical ones.
    """

    continuous: tuple = CONTINUOUS_VARIABLES
    categorical: tuple = CATEGORICAL_VARIABLES
    continuous_normals: tuple = CONTINUOUS_NORMALS
    categorical_normals: tuple = CATEGORICAL_NORMALS
    version: int = 1

    def __post_init__(self):
        if len(self.continuous) != len(self.continuous_normals):
            raise ValueError("continuous_normals must match continuous variables")
        if len(self.categorical) != len(self.categorical_normals):
            raise ValueError("categorical_normals must match categorical variables")
        for (name, k), normal in zip(self.categorical, self.categorical_normals):
            if not 0 <= normal < k:
                raise ValueError(f"normal category of {name} outside 0..{k - 1}")

    @property
    def n_continuous(self) -> int:
        return len(self.continuous)

    @property
    def n_variables(self) -> int:
        return len(self.continuous) + len(self.categorical)

    @property
    def category_sizes(self) -> tuple:
        return tuple(k for _, k in self.categorical)

    @property
    def onehot_offset(self) -> int:
        return self.n_continuous

    @property
    def n_onehot(self) -> int:
        return sum(self.category_sizes)

    @property
    def mask_offset(self) -> int:
        return self.onehot_offset + self.n_onehot

    @property
    def tsl_offset(self) -> int:
        return self.mask_offset + self.n_variables

    @property
    def total_channels(self) -> int:
        return self.tsl_offset + self.n_variables

    def block_offsets(self) -> list[tuple[int, int]]:
        """(start, stop) column range of each one-hot block."""
        out, start = [], self.onehot_offset
        for k in self.category_sizes:
            out.append((start, start + k))
            start += k
        return out

    def is_categorical(self, variable_id: int) -> bool:
        return variable_id >= self.n_continuous

    def n_categories(self, variable_id: int) -> int:
        return self.category_sizes[variable_id - self.n_continuous]

    def variable_names(self) -> list[str]:
        return list(self.continuous) + [name for name, _ in self.categorical]

    def channel_names(self) -> list[str]:
        names = list(self.continuous)
        for name, k in self.categorical:
            names.extend(f"{name}={i}" for i in range(k))
        variables = self.variable_names()
        names.extend(f"mask:{v}" for v in variables)
        names.extend(f"hours_since:{v}" for v in variables)
        return names

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "continuous": list(self.continuous),
            "categorical": [[n, k] for n, k in self.categorical],
            "continuous_normals": list(self.continuous_normals),
            "categorical_normals": list(self.categorical_normals),
            "total_channels": self.total_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelSchema":
        return cls(
            continuous=tuple(d["continuous"]),
            categorical=tuple((n, int(k)) for n, k in d["categorical"]),
            continuous_normals=tuple(float(x) for x in d["continuous_normals"]),
            categorical_normals=tuple(int(x) for x in d["categorical_normals"]),
            version=int(d.get("version", 1)),
        )


DEFAULT_SCHEMA = ChannelSchema()


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    num_labels: int
    label_names: tuple = field(default=())

    def __post_init__(self):
        if self.kind == "mortality" and self.num_labels != 1:
            raise ValueError("mortality task has exactly 1 label")
        if self.kind == "phenotyping" and self.num_labels != len(PHENOTYPE_LABELS):
            raise ValueError(f"phenotyping task has {len(PHENOTYPE_LABELS)} labels")
        if self.kind not in ("mortality", "phenotyping", "custom"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.num_labels < 1:
            raise ValueError("num_labels must be positive")
        if self.label_names and len(self.label_names) != self.num_labels:
            raise ValueError("label_names length must equal num_labels")

    @classmethod
    def mortality(cls) -> "TaskSpec":
        return cls("mortality", 1, ("in_hospital_mortality",))

    @classmethod
    def phenotyping(cls) -> "TaskSpec":
        return cls("phenotyping", len(PHENOTYPE_LABELS), PHENOTYPE_LABELS)

    @classmethod
    def custom(cls, num_labels: int) -> "TaskSpec":
        return cls("custom", num_labels, tuple(f"task_{i}" for i in range(num_labels)))

    @classmethod
    def from_name(cls, name: str, num_labels: int | None = None) -> "TaskSpec":
        if name == "mortality":
            return cls.mortality()
        if name == "phenotyping":
            return cls.phenotyping()
        if name == "custom":
            if not num_labels:
                raise ValueError("custom task needs num_labels")
            return cls.custom(num_labels)
        raise ValueError(f"unknown task kind {name!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_labels": self.num_labels, "label_names": list(self.label_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(d["kind"], int(d["num_labels"]), tuple(d.get("label_names", ())))
