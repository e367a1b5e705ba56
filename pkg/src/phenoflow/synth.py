"""Synthetic EHR cohorts driven by known, independent latent phenotypes.

Each patient expresses phenotype j with probability ``prevalence_j``,
independently of everything else. An active phenotype follows a logistic
ramp ``a / (1 + exp(-(t - onset) / width))`` with a patient-specific
amplitude ``a`` and midpoint ``onset``. Code events are drawn from the
nonhomogeneous rate ``baseline + sum_j e_j(t) * code_loading_jc`` by
thinning; lab values are ``median_c + sum_j e_j(t) * lab_loading_jc`` plus
Gaussian noise, observed at homogeneous Poisson times. The first time the
target phenotype's expression crosses ``threshold`` becomes a diagnosis event.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._seeding import derive_rng
from .ehr_ingest import EventSeries, ValueSeries

DIAGNOSIS_CODE = "155.0"


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 800
    span_min: float = 8.0
    span_max: float = 20.0
    baseline_rate: float = 0.2
    lab_noise_sd: float = 0.3
    lab_rate: float = 4.0
    k_true: int = 6
    n_codes: int = 25
    n_labs: int = 15
    seed: int = 0
    target_phenotype: int = 0
    threshold: float = 0.7
    horizon: float = 10.0
    amplitude_min: float = 0.75
    amplitude_max: float = 1.25
    first_year: float = 1990.0
    last_year: float = 2000.0
    onset_margin: float = 5.0
    prevalence_min: float = 0.1
    prevalence_max: float = 0.2
    ramp_min: float = 0.5
    ramp_max: float = 2.0
    target_prevalence: float = 0.25
    target_ramp_width: float = 5.0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if not 0 < self.span_min <= self.span_max:
            raise ValueError("need 0 < span_min <= span_max")
        for name in ("baseline_rate", "lab_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lab_noise_sd < 0:
            raise ValueError("lab_noise_sd must be non-negative")
        if self.k_true < 1:
            raise ValueError("k_true must be >= 1")
        if self.n_codes < 1 or self.n_labs < 0:
            raise ValueError("need at least one code variable")
        if not 0 <= self.target_phenotype < self.k_true:
            raise ValueError("target_phenotype out of range")
        if not 0 < self.amplitude_min <= self.amplitude_max:
            raise ValueError("need 0 < amplitude_min <= amplitude_max")
        if not 0 <= self.prevalence_min <= self.prevalence_max <= 1:
            raise ValueError("need 0 <= prevalence_min <= prevalence_max <= 1")
        if not 0 <= self.target_prevalence <= 1:
            raise ValueError("target_prevalence must lie in [0, 1]")
        if not (0 < self.ramp_min <= self.ramp_max and self.target_ramp_width > 0):
            raise ValueError("ramp widths must be positive")

    @property
    def code_ids(self) -> list[str]:
        return [f"C{i:02d}" for i in range(self.n_codes)]

    @property
    def lab_ids(self) -> list[str]:
        return [f"L{i:02d}" for i in range(self.n_labs)]


@dataclass(frozen=True, eq=False)
class GroundTruthPhenotype:
    id: int
    code_loadings: np.ndarray   # events/year at full expression, >= 0
    lab_loadings: np.ndarray    # offset from the lab median at full expression
    prevalence: float
    ramp_width: float

    def __post_init__(self):
        code = np.asarray(self.code_loadings, dtype=np.float64)
        lab = np.asarray(self.lab_loadings, dtype=np.float64)
        if np.any(code < 0):
            raise ValueError("code loadings must be non-negative")
        if not (np.any(code != 0) or np.any(lab != 0)):
            raise ValueError("phenotype needs at least one nonzero loading")
        if not 0 <= self.prevalence <= 1:
            raise ValueError("prevalence must lie in [0, 1]")
        if not self.ramp_width > 0:
            raise ValueError("ramp width must be positive")
        object.__setattr__(self, "code_loadings", code)
        object.__setattr__(self, "lab_loadings", lab)


def make_phenotypes(cfg: SynthConfig, codes_per_phenotype: int = 4, labs_per_phenotype: int = 3,
                    prevalence=None) -> list[GroundTruthPhenotype]:
    """Random sparse phenotypes; the target gets a slow ramp so it is visible years ahead."""
    rng = derive_rng(cfg.seed, "phenotypes")
    out = []
    for j in range(cfg.k_true):
        code = np.zeros(cfg.n_codes)
        support = rng.choice(cfg.n_codes, size=min(codes_per_phenotype, cfg.n_codes), replace=False)
        code[support] = rng.uniform(2.0, 5.0, size=len(support))
        lab = np.zeros(cfg.n_labs)
        if cfg.n_labs:
            support = rng.choice(cfg.n_labs, size=min(labs_per_phenotype, cfg.n_labs), replace=False)
            lab[support] = rng.uniform(1.0, 2.5, size=len(support)) * rng.choice([-1.0, 1.0], size=len(support))
        prev = rng.uniform(cfg.prevalence_min, cfg.prevalence_max)
        width = rng.uniform(cfg.ramp_min, cfg.ramp_max)
        if j == cfg.target_phenotype:
            prev, width = cfg.target_prevalence, cfg.target_ramp_width
        if prevalence is not None:
            prev = prevalence[j] if np.ndim(prevalence) else float(prevalence)
        out.append(GroundTruthPhenotype(j, code, lab, prev, width))
    return out


def lab_medians(cfg: SynthConfig) -> np.ndarray:
    rng = derive_rng(cfg.seed, "lab-medians")
    return rng.uniform(20.0, 120.0, size=cfg.n_labs)


def thinning_sampler(rate_fn, rate_upper_bound: float, start: float, end: float, seed=0) -> np.ndarray:
    """Lewis-Shedler thinning for a nonhomogeneous Poisson process on [start, end].

    ``rate_fn`` must accept an array of times. ``seed`` may be an int or a
    ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, "thinning")
    if rate_upper_bound < 0 or not math.isfinite(rate_upper_bound):
        raise ValueError("rate bound must be finite and non-negative")
    if end < start:
        raise ValueError("end before start")
    n = rng.poisson(rate_upper_bound * (end - start))
    cand = np.sort(rng.uniform(start, end, size=n))
    u = rng.random(n)
    if n == 0:
        return cand
    rate = np.asarray(rate_fn(cand), dtype=np.float64)
    if np.any(rate > rate_upper_bound * (1 + 1e-12)) or np.any(rate < 0):
        bad = cand[np.argmax((rate > rate_upper_bound) | (rate < 0))]
        raise ValueError(f"rate at t={bad!r} outside [0, {rate_upper_bound}]")
    return cand[u * rate_upper_bound < rate]


def logistic_ramp(t, amplitude, onset, width):
    t = np.asarray(t, dtype=np.float64)
    return amplitude / (1.0 + np.exp(-(t - onset) / width))


@dataclass(frozen=True, eq=False)
class PatientTruth:
    record_id: str
    start: float
    end: float
    active: np.ndarray      # bool, k_true
    amplitude: np.ndarray   # k_true (drawn for all, used where active)
    onset: np.ndarray       # k_true
    diagnosis_time: float | None


@dataclass(eq=False)
class SynthCohort:
    config: SynthConfig
    phenotypes: list
    medians: np.ndarray
    events: list
    values: list
    diagnoses: list
    patients: dict = field(default_factory=dict)

    @property
    def ramp_widths(self) -> np.ndarray:
        return np.array([p.ramp_width for p in self.phenotypes])

    def expressions(self, record_id: str, times) -> np.ndarray:
        """k_true x len(times) latent expression levels for one patient."""
        p = self.patients[record_id]
        t = np.asarray(times, dtype=np.float64)
        e = logistic_ramp(t[None, :], p.amplitude[:, None], p.onset[:, None],
                          self.ramp_widths[:, None])
        return e * p.active[:, None]

    def expression_matrix(self, record_ids, times) -> np.ndarray:
        out = np.empty((len(self.phenotypes), len(times)))
        rids = np.asarray(record_ids, dtype=object)
        times = np.asarray(times, dtype=np.float64)
        for rid in sorted(set(record_ids)):
            cols = np.flatnonzero(rids == rid)
            out[:, cols] = self.expressions(rid, times[cols])
        return out

    def mixing_matrix(self, variable_ids) -> np.ndarray:
        """True loadings (n x k_true) in the given variable order."""
        cfg = self.config
        rows = {vid: [p.code_loadings[i] for p in self.phenotypes] for i, vid in enumerate(cfg.code_ids)}
        rows.update({vid: [p.lab_loadings[i] for p in self.phenotypes] for i, vid in enumerate(cfg.lab_ids)})
        zero = [0.0] * len(self.phenotypes)
        return np.array([rows.get(v, zero) for v in variable_ids], dtype=np.float64).reshape(
            len(variable_ids), len(self.phenotypes))


def _generate_patient(p: int, cfg: SynthConfig, phenos, medians):
    rid = f"P{p:05d}"
    rng = derive_rng(cfg.seed, "patient", p)
    k = len(phenos)
    start = rng.uniform(cfg.first_year, cfg.last_year)
    end = start + rng.uniform(cfg.span_min, cfg.span_max)
    prev = np.array([ph.prevalence for ph in phenos])
    active = rng.random(k) < prev
    amplitude = rng.uniform(cfg.amplitude_min, cfg.amplitude_max, size=k)
    onset = rng.uniform(start - cfg.onset_margin, end + cfg.onset_margin, size=k)
    widths = np.array([ph.ramp_width for ph in phenos])
    code_L = np.array([ph.code_loadings for ph in phenos])   # k x n_codes
    lab_L = np.array([ph.lab_loadings for ph in phenos])     # k x n_labs
    act_amp = amplitude * active

    def expr(t):
        return logistic_ramp(t[None, :], amplitude[:, None], onset[:, None], widths[:, None]) * active[:, None]

    events = []
    for c, cid in enumerate(cfg.code_ids):
        bound = cfg.baseline_rate + float(act_amp @ code_L[:, c])
        loading = code_L[:, c]
        times = thinning_sampler(lambda t, L=loading: cfg.baseline_rate + L @ expr(t),
                                 bound, start, end, derive_rng(cfg.seed, "events", p, c))
        if len(times):
            events.append(EventSeries(rid, cid, times))

    values = []
    for c, lid in enumerate(cfg.lab_ids):
        lrng = derive_rng(cfg.seed, "labs", p, c)
        n_obs = lrng.poisson(cfg.lab_rate * (end - start))
        times = np.sort(lrng.uniform(start, end, size=n_obs))
        noise = lrng.normal(0.0, cfg.lab_noise_sd, size=n_obs)
        if n_obs:
            vals = medians[c] + lab_L[:, c] @ expr(times) + noise
            values.append(ValueSeries(rid, lid, times, vals))

    diag = None
    j = cfg.target_phenotype
    if active[j] and amplitude[j] > cfg.threshold:
        t_cross = onset[j] + widths[j] * math.log(cfg.threshold / (amplitude[j] - cfg.threshold))
        if start <= t_cross <= end:
            diag = float(t_cross)
    truth = PatientTruth(rid, float(start), float(end), active, amplitude, onset, diag)
    return truth, events, values


def generate_cohort(phenos, cfg: SynthConfig) -> SynthCohort:
    """Simulate ``cfg.n_patients`` records; patient p depends only on ``(cfg.seed, p)``."""
    for ph in phenos:
        if len(ph.code_loadings) != cfg.n_codes or len(ph.lab_loadings) != cfg.n_labs:
            raise ValueError(f"phenotype {ph.id} loadings do not match the variable counts")
    if len(phenos) != cfg.k_true:
        raise ValueError(f"expected {cfg.k_true} phenotypes, got {len(phenos)}")
    medians = lab_medians(cfg)
    cohort = SynthCohort(cfg, list(phenos), medians, [], [], [])
    for p in range(cfg.n_patients):
        truth, events, values = _generate_patient(p, cfg, phenos, medians)
        cohort.patients[truth.record_id] = truth
        cohort.events.extend(events)
        cohort.values.extend(values)
        if truth.diagnosis_time is not None:
            cohort.diagnoses.append(EventSeries(truth.record_id, DIAGNOSIS_CODE, [truth.diagnosis_time]))
    return cohort


def write_ground_truth(path, cohort: SynthCohort) -> None:
    doc = {
        "config": asdict(cohort.config),
        "lab_medians": dict(zip(cohort.config.lab_ids, cohort.medians.tolist())),
        "phenotypes": [
            {"id": ph.id, "prevalence": ph.prevalence, "ramp_width": ph.ramp_width,
             "code_loadings": dict(zip(cohort.config.code_ids, ph.code_loadings.tolist())),
             "lab_loadings": dict(zip(cohort.config.lab_ids, ph.lab_loadings.tolist()))}
            for ph in cohort.phenotypes],
        "patients": [
            {"record_id": t.record_id, "start": t.start, "end": t.end,
             "active": [int(j) for j in np.flatnonzero(t.active)],
             "amplitude": t.amplitude.tolist(), "onset": t.onset.tolist(),
             "diagnosis_time": t.diagnosis_time}
            for t in cohort.patients.values()],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_ground_truth(path) -> SynthCohort:
    """Cohort truth without observations (events/values lists are empty)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = SynthConfig(**doc["config"])
    phenos = [GroundTruthPhenotype(
        ph["id"], np.array([ph["code_loadings"][c] for c in cfg.code_ids]),
        np.array([ph["lab_loadings"][c] for c in cfg.lab_ids]), ph["prevalence"], ph["ramp_width"])
        for ph in doc["phenotypes"]]
    medians = np.array([doc["lab_medians"][c] for c in cfg.lab_ids])
    cohort = SynthCohort(cfg, phenos, medians, [], [], [])
    for rec in doc["patients"]:
        active = np.zeros(cfg.k_true, dtype=bool)
        active[rec["active"]] = True
        cohort.patients[rec["record_id"]] = PatientTruth(
            rec["record_id"], rec["start"], rec["end"], active, np.array(rec["amplitude"]),
            np.array(rec["onset"]), rec["diagnosis_time"])
        if rec["diagnosis_time"] is not None:
            cohort.diagnoses.append(EventSeries(rec["record_id"], DIAGNOSIS_CODE, [rec["diagnosis_time"]]))
    return cohort
