"""Episode data model and the preprocessing pipeline.

Pipeline order is fixed: hourly aggregation -> bounded forward fill ->
grouped nearest-neighbour imputation -> inclusion filtering -> task labeling
-> standardization. Everything from forward fill onward is idempotent.

Grids are (T, 37) float64 matrices with a boolean observation mask;
categorical cells hold level indices until one-hot expansion.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .schema import ALLOWED_MODES, FeatureSchema, SchemaError

FORWARD_FILL_HOURS = 12
MIN_DURATION_H = 12
MAX_DURATION_H = 672  # 28 days
REINTUBATION_WINDOW_H = 48
TASK2_WINDOW_H = 12
TASK2_START_H = 12


class CohortError(ValueError):
    pass


@dataclass(frozen=True)
class RawEvent:
    feature: str
    timestamp_min: float
    value: object  # float for continuous/binary, level token for categorical

    def __post_init__(self):
        if self.timestamp_min < 0:
            raise CohortError(f"negative timestamp {self.timestamp_min}")


@dataclass
class RawEpisode:
    episode_id: str
    institution: str  # "source" | "target"
    admission_id: str
    attempt_index: int
    statics: dict
    events: list[RawEvent]
    extubation_hour: int | None
    reintubation_offset_h: float | None
    censored: bool


@dataclass
class Episode:
    episode_id: str
    institution: str
    admission_id: str
    attempt_index: int
    grid: np.ndarray  # (T, D) float64
    mask: np.ndarray  # (T, D) bool, True = observed
    extubation_hour: int | None
    reintubation_offset_h: float | None
    censored: bool
    statics: dict = field(default_factory=dict)

    @property
    def duration_h(self) -> int:
        return self.grid.shape[0]

    @property
    def outcome(self) -> str:
        if self.censored:
            return "censored"
        if (
            self.reintubation_offset_h is not None
            and self.reintubation_offset_h <= REINTUBATION_WINDOW_H
        ):
            return "failure"
        return "success"


@dataclass(frozen=True)
class LabeledSequence:
    episode_id: str
    task: int
    end_hour: int  # input is grid[:end_hour]
    label: int


# --- ingestion / export ----------------------------------------------------

EVENT_HEADER = ["episode_id", "institution", "admission_id", "attempt_index",
                "feature", "timestamp_min", "value"]
STATIC_HEADER = ["episode_id", "feature", "value"]
OUTCOME_HEADER = ["episode_id", "extubation_hour", "reintubation_offset_h", "censored"]


def _parse_value(schema: FeatureSchema, feature: str, token: str):
    kind = schema[feature].kind
    if kind == "categorical":
        if token not in schema[feature].levels:
            raise SchemaError(f"unknown level {token!r} for feature {feature!r}")
        return token
    return float(token)


def _format_value(schema: FeatureSchema, feature: str, value) -> str:
    if schema[feature].kind == "categorical":
        return str(value)
    return repr(float(value))


def write_cohort_csv(episodes: list[RawEpisode], schema: FeatureSchema,
                     events_path, statics_path, outcomes_path) -> None:
    with open(events_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_HEADER)
        for ep in episodes:
            for ev in ep.events:
                w.writerow([ep.episode_id, ep.institution, ep.admission_id,
                            ep.attempt_index, ev.feature, repr(float(ev.timestamp_min)),
                            _format_value(schema, ev.feature, ev.value)])
    with open(statics_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATIC_HEADER)
        for ep in episodes:
            for name, value in ep.statics.items():
                w.writerow([ep.episode_id, name, _format_value(schema, name, value)])
    with open(outcomes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OUTCOME_HEADER)
        for ep in episodes:
            w.writerow([
                ep.episode_id,
                "none" if ep.extubation_hour is None else ep.extubation_hour,
                "none" if ep.reintubation_offset_h is None else repr(float(ep.reintubation_offset_h)),
                int(ep.censored),
            ])


def ingest_csv(events_path, statics_path, outcomes_path,
               schema: FeatureSchema) -> list[RawEpisode]:
    meta: dict[str, dict] = {}
    events: dict[str, list[RawEvent]] = {}
    order: list[str] = []

    with open(events_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != EVENT_HEADER:
            raise CohortError(f"{events_path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(EVENT_HEADER):
                raise CohortError(f"{events_path}:{lineno}: malformed row")
            eid, inst, adm, attempt, feature, ts, value = row
            if feature not in schema.index:
                raise CohortError(f"{events_path}:{lineno}: unknown feature {feature!r}")
            try:
                ev = RawEvent(feature, float(ts), _parse_value(schema, feature, value))
                attempt_i = int(attempt)
            except (ValueError, SchemaError) as exc:
                raise CohortError(f"{events_path}:{lineno}: {exc}") from None
            if eid not in meta:
                meta[eid] = {"institution": inst, "admission_id": adm,
                             "attempt_index": attempt_i}
                order.append(eid)
            events.setdefault(eid, []).append(ev)

    statics: dict[str, dict] = {}
    with open(statics_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != STATIC_HEADER:
            raise CohortError(f"{statics_path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(STATIC_HEADER):
                raise CohortError(f"{statics_path}:{lineno}: malformed row")
            eid, feature, value = row
            if feature not in schema.index:
                raise CohortError(f"{statics_path}:{lineno}: unknown feature {feature!r}")
            try:
                statics.setdefault(eid, {})[feature] = _parse_value(schema, feature, value)
            except SchemaError as exc:
                raise CohortError(f"{statics_path}:{lineno}: {exc}") from None

    outcomes: dict[str, dict] = {}
    with open(outcomes_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != OUTCOME_HEADER:
            raise CohortError(f"{outcomes_path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(OUTCOME_HEADER):
                raise CohortError(f"{outcomes_path}:{lineno}: malformed row")
            eid, ext, reint, cens = row
            outcomes[eid] = {
                "extubation_hour": None if ext == "none" else int(ext),
                "reintubation_offset_h": None if reint == "none" else float(reint),
                "censored": bool(int(cens)),
            }

    episodes = []
    for eid in order:
        if eid not in outcomes:
            raise CohortError(f"episode {eid!r} has events but no outcome record")
        episodes.append(RawEpisode(
            episode_id=eid,
            events=events[eid],
            statics=statics.get(eid, {}),
            **meta[eid],
            **outcomes[eid],
        ))
    return episodes


def write_cohort_jsonl(episodes: list[RawEpisode], schema: FeatureSchema, path) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            doc = {
                "episode_id": ep.episode_id,
                "institution": ep.institution,
                "admission_id": ep.admission_id,
                "attempt_index": ep.attempt_index,
                "statics": ep.statics,
                "events": [[ev.feature, ev.timestamp_min, ev.value] for ev in ep.events],
                "extubation_hour": ep.extubation_hour,
                "reintubation_offset_h": ep.reintubation_offset_h,
                "censored": ep.censored,
            }
            fh.write(json.dumps(doc, sort_keys=True) + "\n")


def ingest_jsonl(path, schema: FeatureSchema) -> list[RawEpisode]:
    episodes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortError(f"{path}:{lineno}: malformed JSON ({exc})") from None
            events = []
            for feature, ts, value in doc["events"]:
                if feature not in schema.index:
                    raise CohortError(f"{path}:{lineno}: unknown feature {feature!r}")
                if schema[feature].kind != "categorical":
                    value = float(value)
                elif value not in schema[feature].levels:
                    raise CohortError(f"{path}:{lineno}: unknown level {value!r} for {feature!r}")
                events.append(RawEvent(feature, float(ts), value))
            for name in doc["statics"]:
                if name not in schema.index:
                    raise CohortError(f"{path}:{lineno}: unknown feature {name!r}")
            episodes.append(RawEpisode(
                episode_id=doc["episode_id"],
                institution=doc["institution"],
                admission_id=doc["admission_id"],
                attempt_index=int(doc["attempt_index"]),
                statics=doc["statics"],
                events=events,
                extubation_hour=doc["extubation_hour"],
                reintubation_offset_h=doc["reintubation_offset_h"],
                censored=bool(doc["censored"]),
            ))
    return episodes


# --- hourly aggregation ----------------------------------------------------

def _cell_value(schema: FeatureSchema, feature, values_in_order):
    """Median for continuous, earliest-observed-tie-break mode otherwise."""
    f = schema[feature]
    if f.kind == "continuous":
        return float(np.median(values_in_order))
    counts = Counter(values_in_order)
    best = max(counts.values())
    for v in values_in_order:  # earliest observed among tied modes
        if counts[v] == best:
            winner = v
            break
    if f.kind == "categorical":
        return schema.level_code(feature, winner)
    return float(winner)


def aggregate_hourly(raw: RawEpisode, schema: FeatureSchema) -> Episode:
    buckets: dict[tuple[int, int], list] = {}
    max_hour = -1
    for ev in sorted(raw.events, key=lambda e: e.timestamp_min):
        hour = int(ev.timestamp_min // 60)
        col = schema.index[ev.feature]
        buckets.setdefault((hour, col), []).append(ev.value)
        max_hour = max(max_hour, hour)
    T = max(max_hour + 1, raw.extubation_hour or 0)
    if T == 0:
        raise CohortError(f"episode {raw.episode_id!r} has no events")
    D = len(schema)
    grid = np.zeros((T, D))
    mask = np.zeros((T, D), dtype=bool)
    for (hour, col), values in buckets.items():
        grid[hour, col] = _cell_value(schema, schema.features[col].name, values)
        mask[hour, col] = True
    for name, value in raw.statics.items():
        col = schema.index[name]
        f = schema.features[col]
        v = schema.level_code(name, value) if f.kind == "categorical" else float(value)
        grid[:, col] = v
        mask[:, col] = True
    if raw.extubation_hour is not None and raw.extubation_hour > T:
        raise CohortError(
            f"episode {raw.episode_id!r}: extubation hour {raw.extubation_hour} > duration {T}"
        )
    return Episode(
        episode_id=raw.episode_id,
        institution=raw.institution,
        admission_id=raw.admission_id,
        attempt_index=raw.attempt_index,
        grid=grid,
        mask=mask,
        extubation_hour=raw.extubation_hour,
        reintubation_offset_h=raw.reintubation_offset_h,
        censored=raw.censored,
        statics=dict(raw.statics),
    )


# --- bounded forward fill --------------------------------------------------

def forward_fill(episode: Episode, max_gap: int = FORWARD_FILL_HOURS) -> Episode:
    grid = episode.grid.copy()
    mask = episode.mask.copy()
    T = grid.shape[0]
    rows = np.arange(T)
    for col in range(grid.shape[1]):
        obs = mask[:, col]
        if not obs.any():
            continue
        last = np.where(obs, rows, -1)
        last = np.maximum.accumulate(last)
        age = rows - last
        fillable = (~obs) & (last >= 0) & (age <= max_gap)
        grid[fillable, col] = grid[last[fillable], col]
        mask[fillable, col] = True
    return replace(episode, grid=grid, mask=mask)


# --- grouped nearest-neighbour imputation -----------------------------------

class KnnImputer:
    """Per-group kNN over hourly rows of the fitting episodes.

    Distances are z-scored Euclidean over the row's observed features within
    the group; continuous fills are the mean of the k nearest donors,
    categorical/binary fills take the donor majority (nearest donor breaks
    ties). Donor pools larger than `max_donors` are thinned deterministically.
    """

    def __init__(self, schema: FeatureSchema, k: int = 5, max_donors: int = 2000):
        if k < 1:
            raise CohortError("k must be >= 1")
        self.schema = schema
        self.k = k
        self.max_donors = max_donors
        self.donors: dict[str, np.ndarray] = {}
        self.stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.fallback: dict[str, np.ndarray] = {}
        self.fitted = False

    def fit(self, episodes: list[Episode]) -> "KnnImputer":
        groups = self.schema.groups()
        all_grid = np.concatenate([e.grid for e in episodes], axis=0)
        all_mask = np.concatenate([e.mask for e in episodes], axis=0)
        never = ~all_mask.any(axis=0)
        if never.any():
            names = [self.schema.features[i].name for i in np.where(never)[0]]
            raise CohortError(f"features never observed in any training row: {names}")
        for gname, cols in groups.items():
            sub = all_grid[:, cols]
            submask = all_mask[:, cols]
            complete = submask.all(axis=1)
            donors = sub[complete]
            if donors.shape[0] == 0:
                # no complete rows: fall back to column-wise means only
                donors = np.zeros((0, len(cols)))
            if donors.shape[0] > self.max_donors:
                idx = np.linspace(0, donors.shape[0] - 1, self.max_donors).astype(int)
                donors = donors[idx]
            mean = np.array([
                sub[submask[:, j], j].mean() for j in range(len(cols))
            ])
            std = np.array([
                max(sub[submask[:, j], j].std(), 1e-6) for j in range(len(cols))
            ])
            self.donors[gname] = donors
            self.stats[gname] = (mean, std)
            fb = []
            for j, col in enumerate(cols):
                vals = sub[submask[:, j], j]
                if self.schema.features[col].kind == "continuous":
                    fb.append(vals.mean())
                else:
                    uniq, counts = np.unique(vals, return_counts=True)
                    fb.append(uniq[np.argmax(counts)])
            self.fallback[gname] = np.array(fb)
        self.fitted = True
        return self

    def _fill_rows(self, gname: str, cols: list[int], grid, mask) -> None:
        donors = self.donors[gname]
        mean, std = self.stats[gname]
        sub = grid[:, cols]
        submask = mask[:, cols]
        incomplete = np.where(~submask.all(axis=1))[0]
        if incomplete.size == 0:
            return
        kinds = [self.schema.features[c].kind for c in cols]
        dz = (donors - mean) / std if donors.shape[0] else donors
        # group rows by observation pattern so distance math is vectorized
        patterns: dict[bytes, list[int]] = {}
        for r in incomplete:
            patterns.setdefault(submask[r].tobytes(), []).append(r)
        for pat, rows in patterns.items():
            obs = np.frombuffer(pat, dtype=bool)
            rows = np.array(rows)
            if donors.shape[0] == 0 or not obs.any():
                for j in np.where(~obs)[0]:
                    grid[rows, cols[j]] = self.fallback[gname][j]
                    mask[rows, cols[j]] = True
                continue
            q = (sub[rows][:, obs] - mean[obs]) / std[obs]
            d2 = ((q[:, None, :] - dz[None, :, obs]) ** 2).sum(axis=2)
            k = min(self.k, donors.shape[0])
            order = np.argsort(d2, axis=1, kind="stable")[:, :k]
            for j in np.where(~obs)[0]:
                vals = donors[order, j]  # (n_rows, k)
                if kinds[j] == "continuous":
                    fill = vals.mean(axis=1)
                else:
                    fill = np.empty(rows.size)
                    for i in range(rows.size):
                        uniq, counts = np.unique(vals[i], return_counts=True)
                        top = counts.max()
                        if (counts == top).sum() == 1:
                            fill[i] = uniq[np.argmax(counts)]
                        else:
                            tied = set(uniq[counts == top])
                            fill[i] = next(v for v in vals[i] if v in tied)
                grid[rows, cols[j]] = fill
                mask[rows, cols[j]] = True

    def apply(self, episode: Episode) -> Episode:
        if not self.fitted:
            raise CohortError("imputer not fitted")
        grid = episode.grid.copy()
        mask = episode.mask.copy()
        for gname, cols in self.schema.groups().items():
            self._fill_rows(gname, cols, grid, mask)
        assert mask.all()
        return replace(episode, grid=grid, mask=mask)


def knn_impute(
    fit_episodes: list[Episode],
    apply_episodes: list[Episode],
    schema: FeatureSchema,
    k: int = 5,
    max_donors: int = 2000,
) -> list[Episode]:
    imputer = KnnImputer(schema, k=k, max_donors=max_donors).fit(fit_episodes)
    return [imputer.apply(e) for e in apply_episodes]


# --- inclusion filtering ----------------------------------------------------

def filter_inclusion(
    episodes: list[Episode], schema: FeatureSchema
) -> tuple[list[Episode], list[tuple[str, str]]]:
    mode_col = schema.index["vent_mode"]
    allowed = {schema.level_code("vent_mode", m) for m in ALLOWED_MODES}
    kept, excluded = [], []
    for ep in episodes:
        if ep.duration_h < MIN_DURATION_H:
            excluded.append((ep.episode_id, "too-short"))
        elif ep.duration_h > MAX_DURATION_H:
            excluded.append((ep.episode_id, "too-long"))
        elif ep.attempt_index != 1:
            excluded.append((ep.episode_id, "not-first-attempt"))
        elif not set(np.unique(ep.grid[ep.mask[:, mode_col], mode_col])) <= allowed:
            excluded.append((ep.episode_id, "unsupported-mode"))
        else:
            kept.append(ep)
    return kept, excluded


# --- time-to-extubation -----------------------------------------------------

def tte(episode: Episode, t: int) -> float | None:
    """Hours to extubation from hour t; None when no event time applies."""
    if t > episode.duration_h or (t == episode.duration_h and
                                  episode.extubation_hour != episode.duration_h):
        raise CohortError(f"hour {t} beyond episode duration {episode.duration_h}")
    if episode.extubation_hour is None or t > episode.extubation_hour:
        return None
    return float(episode.extubation_hour - t)


# --- task labeling ----------------------------------------------------------

def label_task1(episode: Episode) -> LabeledSequence | None:
    if episode.censored or episode.extubation_hour is None:
        return None
    label = int(episode.outcome == "failure")
    return LabeledSequence(episode.episode_id, 1, episode.extubation_hour, label)


def label_task2(episode: Episode) -> list[LabeledSequence]:
    if episode.censored or episode.extubation_hour is None:
        return []
    ext = episode.extubation_hour
    success = episode.outcome == "success"
    out = []
    for t in range(TASK2_START_H, ext + 1):
        label = int(success and t < ext <= t + TASK2_WINDOW_H)
        out.append(LabeledSequence(episode.episode_id, 2, t, label))
    return out


# --- standardization --------------------------------------------------------

class Standardizer:
    """Train-split feature scaling: z-score continuous, one-hot categorical."""

    def __init__(self, schema: FeatureSchema):
        self.schema = schema
        self.means: np.ndarray | None = None
        self.stds: np.ndarray | None = None
        cols = []
        for f in schema.features:
            if f.kind == "categorical":
                cols.extend(f"{f.name}={lvl}" for lvl in f.levels)
            else:
                cols.append(f.name)
        self.encoded_names = cols

    @property
    def encoded_dim(self) -> int:
        return len(self.encoded_names)

    def fit(self, episodes: list[Episode]) -> "Standardizer":
        if not episodes:
            raise CohortError("standardizer needs a non-empty training split")
        rows = np.concatenate([e.grid for e in episodes], axis=0)
        cont = [i for i, f in enumerate(self.schema.features) if f.kind == "continuous"]
        self.means = np.zeros(len(self.schema))
        self.stds = np.ones(len(self.schema))
        self.means[cont] = rows[:, cont].mean(axis=0)
        self.stds[cont] = np.maximum(rows[:, cont].std(axis=0), 1e-6)
        return self

    def encode(self, grid: np.ndarray) -> np.ndarray:
        if self.means is None:
            raise CohortError("standardizer not fitted")
        out = np.empty((grid.shape[0], self.encoded_dim))
        j = 0
        for i, f in enumerate(self.schema.features):
            if f.kind == "categorical":
                n = len(f.levels)
                onehot = np.zeros((grid.shape[0], n))
                codes = grid[:, i].astype(int)
                onehot[np.arange(grid.shape[0]), np.clip(codes, 0, n - 1)] = 1.0
                out[:, j:j + n] = onehot
                j += n
            elif f.kind == "binary":
                out[:, j] = grid[:, i]
                j += 1
            else:
                out[:, j] = (grid[:, i] - self.means[i]) / self.stds[i]
                j += 1
        return out

    def state(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_state(cls, schema: FeatureSchema, state: dict) -> "Standardizer":
        s = cls(schema)
        s.means = np.asarray(state["means"], dtype=float)
        s.stds = np.asarray(state["stds"], dtype=float)
        return s


# --- processed episode store -------------------------------------------------

def save_store(path, episodes: list[Episode], schema: FeatureSchema,
               extra_meta: dict | None = None) -> None:
    meta = {
        "schema_hash": schema.hash(),
        "episodes": [
            {
                "episode_id": e.episode_id,
                "institution": e.institution,
                "admission_id": e.admission_id,
                "attempt_index": e.attempt_index,
                "extubation_hour": e.extubation_hour,
                "reintubation_offset_h": e.reintubation_offset_h,
                "censored": e.censored,
                "statics": e.statics,
            }
            for e in episodes
        ],
        "extra": extra_meta or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, e in enumerate(episodes):
        arrays[f"grid_{i}"] = e.grid
        arrays[f"mask_{i}"] = e.mask
    np.savez_compressed(path, **arrays)


def load_store(path, schema: FeatureSchema) -> tuple[list[Episode], dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["schema_hash"] != schema.hash():
            raise CohortError(f"{path}: schema hash mismatch")
        episodes = []
        for i, m in enumerate(meta["episodes"]):
            episodes.append(Episode(
                episode_id=m["episode_id"],
                institution=m["institution"],
                admission_id=m["admission_id"],
                attempt_index=m["attempt_index"],
                grid=data[f"grid_{i}"],
                mask=data[f"mask_{i}"],
                extubation_hour=m["extubation_hour"],
                reintubation_offset_h=m["reintubation_offset_h"],
                censored=m["censored"],
                statics=m["statics"],
            ))
    return episodes, meta["extra"]


# --- pipeline driver ----------------------------------------------------------

def preprocess(
    raw_episodes: list[RawEpisode],
    schema: FeatureSchema,
    k: int = 5,
    fit_fraction: float = 0.65,
    seed: int = 0,
    max_donors: int = 2000,
) -> tuple[list[Episode], list[tuple[str, str]]]:
    """Full pipeline. Imputation donors come from a seeded `fit_fraction`
    subset of episodes (the preprocessing-time training split)."""
    from . import rng as _rng

    episodes = [forward_fill(aggregate_hourly(r, schema)) for r in raw_episodes]
    g = _rng.stream(seed, "impute-fit")
    n_fit = max(1, int(math.ceil(fit_fraction * len(episodes))))
    fit_idx = g.permutation(len(episodes))[:n_fit]
    imputer = KnnImputer(schema, k=k, max_donors=max_donors).fit(
        [episodes[i] for i in sorted(fit_idx)]
    )
    episodes = [imputer.apply(e) for e in episodes]
    kept, excluded = filter_inclusion(episodes, schema)
    return kept, excluded
