"""Two-institution synthetic PICU cohort generator.

Each episode has a one-dimensional latent respiratory-recovery trajectory
r_t that rises toward an extubation threshold; all 37 features are emitted as
institution-specific affine functions of r_t plus noise. The two default
profiles are calibrated to the published demographics of a general (source)
and a cardiac-focused (target) unit, and differ both in feature baselines
(covariate shift) and in the coefficients mapping recovery to extubation
failure (concept shift).

Generation is deterministic per (seed, episode index) via counter-based RNG
streams, so cohorts are reproducible and order-independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import RawEpisode, RawEvent
from .rng import stream
from .schema import DIAGNOSIS_LEVELS

SOURCE_EPISODES = 1883
TARGET_EPISODES = 1932
CENSOR_RATE = 166 / (SOURCE_EPISODES + TARGET_EPISODES)


class SynthError(ValueError):
    pass


# name -> (baseline, recovery load, noise sd)
EMISSION = {
    "heart_rate": (142.0, -9.0, 7.0),
    "temperature": (37.1, -0.15, 0.3),
    "spo2": (95.0, 1.2, 1.2),
    "bp_systolic": (92.0, 5.0, 7.0),
    "bp_mean": (64.0, 4.0, 5.0),
    "bp_diastolic": (49.0, 3.0, 5.0),
    "pip": (22.0, -3.0, 1.8),
    "peep_set": (6.0, -0.8, 0.6),
    "resp_rate_set": (26.0, -4.0, 2.0),
    "fio2": (0.45, -0.08, 0.04),
    "inspiratory_time": (0.8, -0.05, 0.07),
    "pressure_support": (12.0, -2.5, 1.3),
    "etco2": (42.0, -3.0, 3.0),
    "resp_rate_measured": (30.0, -3.0, 4.0),
    "tidal_volume": (6.8, 0.6, 0.8),
    "mean_airway_pressure": (11.0, -2.0, 1.1),
    "ph": (7.36, 0.03, 0.035),
    "pco2": (45.0, -4.0, 4.5),
    "base_excess": (0.0, 1.2, 1.8),
    "lactate": (1.7, -0.5, 0.45),
    "hco3": (23.0, 1.0, 1.8),
    "wbc": (11.5, -1.0, 2.8),
    "neutrophils": (6.0, -0.5, 1.8),
    "hemoglobin": (11.0, 0.0, 1.3),
}

# scheduled observation cadence (minutes) per feature category
OBS_INTERVAL_MIN = {
    "vital-signs": 60,
    "ventilator": 240,
    "respiratory-measurements": 120,
    "blood-gas": 360,
    "laboratory": 1440,
    "medications": 360,
    "other": 360,
}


@dataclass(frozen=True)
class InstitutionProfile:
    name: str
    diagnosis_mix: tuple[float, ...]  # over DIAGNOSIS_LEVELS
    age_log_median: float
    age_log_sigma: float
    duration_log_median: float
    duration_log_sigma: float
    pim_log_median: float
    pim_log_sigma: float
    male_prob: float
    vasoactive_prob: float
    censoring_rate: float
    # additive shifts on continuous feature baselines (covariate shift)
    feature_offsets: dict[str, float] = field(default_factory=dict)
    # per-patient physiological instability: a latent z-score that multiplies
    # every continuous channel's measurement noise by exp(sigma * z), so
    # unstable patients chart erratic vitals at the same underlying recovery
    instability_sigma: float = 1.0
    # recovery dynamics
    recovery_start_mean: float = -2.0
    recovery_slack_mean: float = 0.9
    recovery_slack_sd: float = 1.0
    recovery_noise_sd: float = 0.05
    recovery_noise_rho: float = 0.3
    # failure risk: sigmoid(a + b * slack + w_vaso * vaso + w_age * z_age
    #               + w_plateau * z_plateau), where z_plateau standardizes the
    #               fraction of the course spent ready before extubation
    risk_intercept: float = -1.6
    risk_slack: float = -4.5
    risk_vaso: float = 0.8
    risk_age: float = 0.3
    risk_plateau: float = 0.0
    risk_instability: float = 0.0
    risk_drift: float = 0.0
    # institution practice: per-feature scaling of the recovery load, the
    # latent thresholds for the mode switch and for weaning sedation, and the
    # fraction of the course at which recovery crosses the readiness level
    # (how long a unit keeps patients ventilated past readiness)
    load_scale: dict[str, float] = field(default_factory=dict)
    noise_scale: float = 1.0
    ps_mode_threshold: float = -0.4
    sedation_threshold: float = 0.15
    crossing_frac_lo: float = 0.72
    crossing_frac_hi: float = 0.95
    # fraction of the post-readiness span spent fully recovered before the
    # unit extubates, and sedation weaning lead time before extubation
    # (0 keeps sedation tied to the recovery level instead)
    hold_frac_lo: float = 0.0
    hold_frac_hi: float = 0.0
    late_drift_sd: float = 0.075
    sedation_wean_hours: float = 0.0
    # fraction of scheduled observations randomly skipped, per category
    skip_prob: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if abs(sum(self.diagnosis_mix) - 1.0) > 1e-9:
            raise SynthError("diagnosis proportions must sum to 1")
        for r in (self.male_prob, self.vasoactive_prob, self.censoring_rate,
                  *self.skip_prob.values()):
            if not 0.0 <= r <= 1.0:
                raise SynthError(f"rate {r} outside [0, 1]")
        if self.age_log_sigma <= 0 or self.duration_log_sigma <= 0:
            raise SynthError("scales must be positive")


def default_profiles() -> tuple[InstitutionProfile, InstitutionProfile]:
    skip = {"vital-signs": 0.04, "ventilator": 0.05, "respiratory-measurements": 0.15,
            "blood-gas": 0.25, "laboratory": 0.2, "medications": 0.05, "other": 0.05}
    source = InstitutionProfile(
        name="source",
        diagnosis_mix=(0.016, 0.528, 0.12, 0.12, 0.10, 0.116),
        age_log_median=math.log(16.0), age_log_sigma=1.5,
        duration_log_median=math.log(80.0), duration_log_sigma=0.35,
        pim_log_median=math.log(0.014), pim_log_sigma=1.1,
        male_prob=0.572,
        vasoactive_prob=0.204,
        censoring_rate=CENSOR_RATE,
        feature_offsets={},
        risk_intercept=0.5, risk_slack=-5.5, risk_vaso=0.8, risk_age=0.3,
        noise_scale=1.6,
        hold_frac_lo=0.35, hold_frac_hi=0.7,
        skip_prob=skip,
    )
    target = InstitutionProfile(
        name="target",
        diagnosis_mix=(0.848, 0.067, 0.02, 0.02, 0.02, 0.025),
        age_log_median=math.log(5.0), age_log_sigma=1.4,
        duration_log_median=math.log(48.0), duration_log_sigma=1.05,
        pim_log_median=math.log(0.022), pim_log_sigma=0.8,
        male_prob=0.553,
        vasoactive_prob=0.555,
        censoring_rate=CENSOR_RATE,
        feature_offsets={
            "heart_rate": 9.0,
            "spo2": -2.0,
            "bp_systolic": -7.0,
            "bp_mean": -4.5,
            "bp_diastolic": -3.5,
            "lactate": 0.25,
            "hemoglobin": 0.8,
            "fio2": 0.025,
            "pip": -1.0,
            "tidal_volume": -0.4,
        },
        risk_intercept=-3.8, risk_slack=0.0, risk_vaso=0.0, risk_age=0.0,
        risk_instability=2.5, risk_drift=0.0,
        crossing_frac_lo=0.72, crossing_frac_hi=0.95,
        hold_frac_lo=0.35, hold_frac_hi=0.7,
        sedation_wean_hours=16.0,
        load_scale={
            "pressure_support": -0.7,
            "fio2": 0.5,
            "pip": 0.6,
            "resp_rate_set": -0.7,
        },
        noise_scale=1.6,
        ps_mode_threshold=-0.9,
        sedation_threshold=0.45,
        skip_prob=skip,
    )
    return source, target


def _trajectory(profile: InstitutionProfile, rng: np.random.Generator,
                duration: int, censored: bool):
    """Latent recovery per hour plus crossing/slack bookkeeping."""
    r_start = profile.recovery_start_mean + 0.3 * rng.normal()
    r_start = min(r_start, -0.8)
    hours = np.arange(duration + 1, dtype=float)
    if censored:
        # threshold never reached inside the observed window
        crossing = duration * rng.uniform(1.1, 1.6)
        slack = None
        r = r_start + (0.0 - r_start) * np.minimum(hours / crossing, 1.0)
        extra = {"ramp_end_hour": None, "hold_frac": None, "late_drift": None}
    else:
        frac = rng.uniform(profile.crossing_frac_lo, profile.crossing_frac_hi)
        crossing = max(1.0, frac * duration)
        slack = abs(rng.normal(profile.recovery_slack_mean, profile.recovery_slack_sd))
        slack = max(slack, 0.05)
        rise = np.minimum(hours / crossing, 1.0)
        hold_frac = rng.uniform(profile.hold_frac_lo, profile.hold_frac_hi)
        ramp_end = crossing + (1.0 - hold_frac) * max(duration - crossing, 1.0)
        post = np.maximum(hours - crossing, 0.0) / max(ramp_end - crossing, 1.0)
        r = r_start + (0.0 - r_start) * rise + slack * np.minimum(post, 1.0)
        # after the ramp settles, recovery keeps drifting at a per-episode
        # rate: some patients continue improving, others slowly deteriorate
        drift = rng.normal(0.0, profile.late_drift_sd)
        r = r + np.clip(drift * np.maximum(hours - ramp_end, 0.0), -1.5, 1.5)
        extra = {"ramp_end_hour": float(ramp_end), "hold_frac": float(hold_frac),
                 "late_drift": float(drift)}
    # AR(1) physiological fluctuation on the emitted (observable) trajectory
    eta = rng.normal(0.0, profile.recovery_noise_sd, size=duration + 1)
    noise = np.empty(duration + 1)
    noise[0] = eta[0]
    for t in range(1, duration + 1):
        noise[t] = profile.recovery_noise_rho * noise[t - 1] + eta[t]
    return r, r + noise, crossing, slack, extra


def _emit_feature(events, name, times_min, values):
    for tm, v in zip(times_min, values):
        events.append(RawEvent(name, float(tm), float(v)))


def _scheduled_hours(rng, duration, interval_min, skip):
    start = rng.uniform(0, interval_min)
    times = np.arange(start, duration * 60.0, interval_min)
    keep = rng.random(times.size) >= skip
    times = times[keep]
    return times, np.minimum((times // 60).astype(int), duration - 1)


def generate(
    profile: InstitutionProfile, n_episodes: int, seed: int
) -> tuple[list[RawEpisode], dict[str, dict]]:
    """Generate raw-event episodes plus a ground-truth oracle per episode."""
    if n_episodes < 1:
        raise SynthError("n_episodes must be >= 1")
    episodes = []
    oracles = {}
    tag = profile.name[0].upper()
    for idx in range(n_episodes):
        rng = stream(seed, f"synth-{profile.name}", idx)
        eid = f"{tag}{idx:05d}"

        age = math.exp(profile.age_log_median + profile.age_log_sigma * rng.normal())
        age = min(max(age, 0.25), 216.0)
        male = float(rng.random() < profile.male_prob)
        weight = math.exp(1.1 + 0.45 * math.log(age + 1.0) + 0.15 * rng.normal())
        pim = math.exp(profile.pim_log_median + profile.pim_log_sigma * rng.normal())
        pim = min(pim, 0.95)
        diagnosis = DIAGNOSIS_LEVELS[
            rng.choice(len(DIAGNOSIS_LEVELS), p=profile.diagnosis_mix)
        ]
        vaso = float(rng.random() < profile.vasoactive_prob)
        instability = rng.normal()
        noise_gain = math.exp(profile.instability_sigma * instability)

        duration = int(round(math.exp(
            profile.duration_log_median + profile.duration_log_sigma * rng.normal()
        )))
        duration = min(max(duration, 12), 672)
        censored = bool(rng.random() < profile.censoring_rate)

        r_true, r_emit, crossing, slack, traj_extra = _trajectory(
            profile, rng, duration, censored)

        if censored:
            extubation_hour = None
            reint_offset = None
            failure_prob = None
            failed = False
        else:
            extubation_hour = duration
            z_age = (math.log(age) - profile.age_log_median) / profile.age_log_sigma
            pf_mean = 1.0 - 0.5 * (profile.crossing_frac_lo + profile.crossing_frac_hi)
            pf_sd = (profile.crossing_frac_hi - profile.crossing_frac_lo) / math.sqrt(12.0)
            z_plateau = ((1.0 - crossing / duration) - pf_mean) / max(pf_sd, 1e-9)
            logit = (profile.risk_intercept + profile.risk_slack * slack
                     + profile.risk_vaso * vaso + profile.risk_age * z_age
                     + profile.risk_plateau * z_plateau
                     + profile.risk_instability * instability
                     + profile.risk_drift * traj_extra["late_drift"]
                     / max(profile.late_drift_sd, 1e-9))
            failure_prob = 1.0 / (1.0 + math.exp(-logit))
            failed = bool(rng.random() < failure_prob)
            reint_offset = float(rng.uniform(2.0, 46.0)) if failed else None

        statics = {
            "age_months": round(age, 2),
            "gender_male": male,
            "weight_kg": round(weight, 2),
            "pim3": round(pim, 5),
            "diagnosis": diagnosis,
        }

        events: list[RawEvent] = []
        for name, (base, load, noise_sd) in EMISSION.items():
            cat = _CATEGORY[name]
            times, hrs = _scheduled_hours(
                rng, duration, OBS_INTERVAL_MIN[cat], profile.skip_prob.get(cat, 0.0)
            )
            if times.size == 0:
                continue
            offset = profile.feature_offsets.get(name, 0.0)
            load = load * profile.load_scale.get(name, 1.0)
            noise_sd = noise_sd * profile.noise_scale
            noise_sd = noise_sd * noise_gain
            vals = base + offset + load * r_emit[hrs] + noise_sd * rng.normal(size=hrs.size)
            _emit_feature(events, name, times, vals)

        # ventilation mode: pressure control early, pressure support near recovery
        times, hrs = _scheduled_hours(rng, duration, OBS_INTERVAL_MIN["ventilator"],
                                      profile.skip_prob["ventilator"])
        for tm, h in zip(times, hrs):
            events.append(RawEvent("vent_mode", float(tm),
                                   "PS" if r_emit[h] > profile.ps_mode_threshold else "PC"))

        # medications
        vaso_end = rng.uniform(0.3, 0.85) * duration if vaso else 0.0
        times, hrs = _scheduled_hours(rng, duration, OBS_INTERVAL_MIN["medications"],
                                      profile.skip_prob["medications"])
        if profile.sedation_wean_hours > 0 and not censored:
            wean_start = max(0.0, duration - profile.sedation_wean_hours
                             * rng.uniform(0.85, 1.15))
            def _sedated(h):
                return float(h < wean_start)
        else:
            def _sedated(h):
                return float(r_emit[h] < profile.sedation_threshold)
        for tm, h in zip(times, hrs):
            events.append(RawEvent("vasoactive", float(tm), float(vaso and h < vaso_end)))
            events.append(RawEvent("sedation", float(tm), _sedated(h)))
            events.append(RawEvent("nmb", float(tm), float(r_emit[h] < -1.3)))
        steroids = float(rng.random() < (0.25 if profile.name == "target" else 0.15))
        furo_days = rng.random(int(duration // 24) + 1) < 0.25
        for tm, h in zip(times, hrs):
            events.append(RawEvent("steroids", float(tm), steroids))
            events.append(RawEvent("furosemide", float(tm), float(furo_days[int(h // 24)])))

        # other: cumulative fluid balance and elapsed ventilator hours
        fluid = np.cumsum(rng.normal(2.0, 25.0, size=duration))
        times, hrs = _scheduled_hours(rng, duration, OBS_INTERVAL_MIN["other"],
                                      profile.skip_prob["other"])
        _emit_feature(events, "fluid_balance", times, fluid[hrs])
        # charted once per 12 h shift, so the hourly grid sees a step function
        vh_times = np.arange(30.0, duration * 60.0, 720.0)
        _emit_feature(events, "ventilator_hours", vh_times,
                      (vh_times // 60).astype(float))

        # guarantee the grid spans the full duration
        events.append(RawEvent("ventilator_hours", duration * 60.0 - 1.0,
                               float(vh_times[-1] // 60)))

        episodes.append(RawEpisode(
            episode_id=eid,
            institution=profile.name,
            admission_id=f"A-{eid}",
            attempt_index=1,
            statics=statics,
            events=events,
            extubation_hour=extubation_hour,
            reintubation_offset_h=reint_offset,
            censored=censored,
        ))
        oracles[eid] = {
            "r": [round(float(v), 5) for v in r_true],
            "crossing_hour": round(float(crossing), 3),
            "slack": None if slack is None else round(float(slack), 5),
            "failure_prob": None if failure_prob is None else round(float(failure_prob), 6),
            "failed": failed,
            "extubation_hour": extubation_hour,
            "instability": round(float(instability), 5),
            **traj_extra,
        }
    return episodes, oracles


def oracle_labels(oracles: dict[str, dict], episode_id: str) -> dict:
    """Ground-truth latent record; only exists for synthetic episodes."""
    if episode_id not in oracles:
        raise SynthError(f"episode {episode_id!r} was not produced by this generator")
    return oracles[episode_id]


def write_oracle(path, oracles: dict[str, dict]) -> None:
    with open(path, "w") as fh:
        json.dump(oracles, fh, sort_keys=True)


def read_oracle(path) -> dict[str, dict]:
    with open(path) as fh:
        return json.load(fh)


# feature -> category for cadence lookup (continuous emission features only)
_CATEGORY = {
    "heart_rate": "vital-signs", "temperature": "vital-signs", "spo2": "vital-signs",
    "bp_systolic": "vital-signs", "bp_mean": "vital-signs", "bp_diastolic": "vital-signs",
    "pip": "ventilator", "peep_set": "ventilator", "resp_rate_set": "ventilator",
    "fio2": "ventilator", "inspiratory_time": "ventilator", "pressure_support": "ventilator",
    "etco2": "respiratory-measurements", "resp_rate_measured": "respiratory-measurements",
    "tidal_volume": "respiratory-measurements", "mean_airway_pressure": "respiratory-measurements",
    "ph": "blood-gas", "pco2": "blood-gas", "base_excess": "blood-gas",
    "lactate": "blood-gas", "hco3": "blood-gas",
    "wbc": "laboratory", "neutrophils": "laboratory", "hemoglobin": "laboratory",
}
