"""Feature schema: the 37 hourly clinical variables and their metadata.

Each feature has a kind (continuous, categorical or binary), a category, and
an imputation group of physiologically related features used as predictors by
the nearest-neighbour imputer. Categorical values are stored in grids as
level indices; one-hot expansion happens at standardization time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import yaml

CATEGORIES = (
    "demographics",
    "vital-signs",
    "ventilator",
    "respiratory-measurements",
    "blood-gas",
    "laboratory",
    "medications",
    "other",
)

DIAGNOSIS_LEVELS = (
    "cardiovascular",
    "respiratory",
    "neurological",
    "gastrointestinal",
    "infection",
    "other",
)

# Modes beyond PC/PS exist in the schema so the inclusion filter is testable;
# conventional pressure control/support are the only ones kept.
VENT_MODE_LEVELS = ("PC", "PS", "SIMV", "HFOV")
ALLOWED_MODES = ("PC", "PS")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Feature:
    name: str
    category: str
    kind: str  # "continuous" | "categorical" | "binary"
    group: str
    static: bool = False
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise SchemaError(f"unknown category {self.category!r}")
        if self.kind not in ("continuous", "categorical", "binary"):
            raise SchemaError(f"unknown kind {self.kind!r}")
        if self.kind == "categorical" and not self.levels:
            raise SchemaError(f"categorical feature {self.name!r} needs levels")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names")
        object.__setattr__(self, "index", {n: i for i, n in enumerate(names)})

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, name: str) -> Feature:
        return self.features[self.index[name]]

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def groups(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, f in enumerate(self.features):
            out.setdefault(f.group, []).append(i)
        return out

    def level_code(self, name: str, token: str) -> float:
        f = self[name]
        if f.kind != "categorical":
            raise SchemaError(f"{name!r} is not categorical")
        try:
            return float(f.levels.index(token))
        except ValueError:
            raise SchemaError(f"unknown level {token!r} for feature {name!r}") from None

    def hash(self) -> str:
        blob = json.dumps(
            [
                [f.name, f.category, f.kind, f.group, f.static, list(f.levels)]
                for f in self.features
            ],
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).hexdigest()


def _cont(name, category, group, static=False):
    return Feature(name, category, "continuous", group, static)


def default_schema() -> FeatureSchema:
    feats = [
        # demographics (static, broadcast across hours)
        _cont("age_months", "demographics", "demographics", static=True),
        Feature("gender_male", "demographics", "binary", "demographics", static=True),
        _cont("weight_kg", "demographics", "demographics", static=True),
        _cont("pim3", "demographics", "demographics", static=True),
        Feature(
            "diagnosis", "demographics", "categorical", "demographics",
            static=True, levels=DIAGNOSIS_LEVELS,
        ),
        # vital signs
        _cont("heart_rate", "vital-signs", "vital-signs"),
        _cont("temperature", "vital-signs", "vital-signs"),
        _cont("spo2", "vital-signs", "vital-signs"),
        _cont("bp_systolic", "vital-signs", "vital-signs"),
        _cont("bp_mean", "vital-signs", "vital-signs"),
        _cont("bp_diastolic", "vital-signs", "vital-signs"),
        # ventilator parameters
        Feature("vent_mode", "ventilator", "categorical", "ventilator", levels=VENT_MODE_LEVELS),
        _cont("pip", "ventilator", "ventilator"),
        _cont("peep_set", "ventilator", "ventilator"),
        _cont("resp_rate_set", "ventilator", "ventilator"),
        _cont("fio2", "ventilator", "ventilator"),
        _cont("inspiratory_time", "ventilator", "ventilator"),
        _cont("pressure_support", "ventilator", "ventilator"),
        # respiratory measurements
        _cont("etco2", "respiratory-measurements", "respiratory-measurements"),
        _cont("resp_rate_measured", "respiratory-measurements", "respiratory-measurements"),
        _cont("tidal_volume", "respiratory-measurements", "respiratory-measurements"),
        _cont("mean_airway_pressure", "respiratory-measurements", "respiratory-measurements"),
        # blood gas
        _cont("ph", "blood-gas", "blood-gas"),
        _cont("pco2", "blood-gas", "blood-gas"),
        _cont("base_excess", "blood-gas", "blood-gas"),
        _cont("lactate", "blood-gas", "blood-gas"),
        _cont("hco3", "blood-gas", "blood-gas"),
        # laboratory
        _cont("wbc", "laboratory", "laboratory"),
        _cont("neutrophils", "laboratory", "laboratory"),
        _cont("hemoglobin", "laboratory", "laboratory"),
        # medications
        Feature("nmb", "medications", "binary", "medications"),
        Feature("sedation", "medications", "binary", "medications"),
        Feature("furosemide", "medications", "binary", "medications"),
        Feature("vasoactive", "medications", "binary", "medications"),
        Feature("steroids", "medications", "binary", "medications"),
        # other
        _cont("fluid_balance", "other", "other"),
        _cont("ventilator_hours", "other", "other"),
    ]
    schema = FeatureSchema(tuple(feats))
    assert len(schema) == 37
    return schema


def save_schema(schema: FeatureSchema, path) -> None:
    doc = [
        {
            "name": f.name,
            "category": f.category,
            "kind": f.kind,
            "group": f.group,
            "static": f.static,
            **({"levels": list(f.levels)} if f.levels else {}),
        }
        for f in schema.features
    ]
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def load_schema(path) -> FeatureSchema:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    feats = tuple(
        Feature(
            name=d["name"],
            category=d["category"],
            kind=d["kind"],
            group=d["group"],
            static=d.get("static", False),
            levels=tuple(d.get("levels", ())),
        )
        for d in doc
    )
    return FeatureSchema(feats)
