"""Cohort preprocessing: event streams to windowed, scaled, labeled samples.

Raw patient records carry static attributes and a dated visit stream.
Processing follows a fixed order: visits are bucketed into 15-day periods
(diagnoses OR-ed, measurements averaged, empty buckets zeroed), rare
diagnosis codes are dropped, categoricals are one-hot encoded and numerics
min-max scaled with statistics fitted on the training split only.

Observation windows always start at the first visit; the prediction window
starts where the observation window ends. Months convert to days at 30.4
days/month, rounded to the nearest whole day. Features never read past the
observation end; labels never read past the prediction end.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

BUCKET_DAYS = 15
DAYS_PER_MONTH = 30.4
RARE_CODE_THRESHOLD = 0.02

VISIT_TYPES = ("nutrition", "medical", "psychology", "exercise")

CATEGORY_SETS = {
    "sex": ("male", "female"),
    "race": ("asian", "white", "black", "other"),
    "ethnicity": ("hispanic", "non-hispanic"),
    "insurance": ("medicaid", "private"),
    "food_item1": ("never", "sometimes", "often"),
    "food_item2": ("never", "sometimes", "often"),
}

# scaled numeric features, in static-vector order (after the one-hot blocks)
NUMERIC_FIELDS = ("age", "lifestyle_score", "psc17_score", "visit_gap")

# per-bucket layout: 4 visit-type indicators, mean BMI percentile, a flag
# that is 1 when the bucket holds at least one BMI measurement, then one
# indicator per retained diagnosis code
BMI_COL = len(VISIT_TYPES)
BMI_OBS_COL = BMI_COL + 1
DX_START_COL = BMI_OBS_COL + 1

_EPOCH = date(2018, 1, 1)


class CohortError(ValueError):
    pass


@dataclass(frozen=True)
class Visit:
    day: int
    visit_type: str
    bmi_pct: float | None = None
    dx_codes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.visit_type not in VISIT_TYPES:
            raise CohortError(f"unknown visit type {self.visit_type!r}")
        if self.bmi_pct is not None and not 0.0 <= self.bmi_pct <= 100.0:
            raise CohortError(f"BMI percentile {self.bmi_pct} outside [0, 100]")


@dataclass(frozen=True)
class PatientRecord:
    """One child's static attributes plus visit stream, day 0 = first visit."""

    patient_id: str
    sex: str
    race: str
    ethnicity: str
    insurance: str
    age: float
    food_item1: str
    food_item2: str
    lifestyle_score: int
    psc17_score: int
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if not self.visits:
            raise CohortError(f"patient {self.patient_id}: no visits")
        days = [v.day for v in self.visits]
        if days != sorted(days):
            raise CohortError(f"patient {self.patient_id}: visits not sorted by day")
        if days[0] != 0:
            raise CohortError(f"patient {self.patient_id}: first visit must be day 0")
        if not 12 <= self.lifestyle_score <= 48:
            raise CohortError(f"patient {self.patient_id}: lifestyle score out of range")
        if not 0 <= self.psc17_score <= 34:
            raise CohortError(f"patient {self.patient_id}: PSC-17 score out of range")

    @property
    def last_visit_day(self) -> int:
        return self.visits[-1].day

    def baseline_bmi(self) -> float | None:
        return self.visits[0].bmi_pct


@dataclass
class TemporalSequence:
    """Fixed-width 15-day buckets; a bucket with no visits is all zeros."""

    buckets: np.ndarray  # (n_buckets, DX_START_COL + len(vocab))
    vocab: tuple[str, ...]

    @property
    def n_buckets(self) -> int:
        return self.buckets.shape[0]

    @property
    def width(self) -> int:
        return self.buckets.shape[1]


@dataclass(frozen=True)
class WindowConfig:
    """Observation/prediction window pair, in months."""

    obs_months: float
    pred_months: float

    def __post_init__(self):
        if self.obs_months <= 0 or self.pred_months <= 0:
            raise CohortError("window lengths must be positive")

    @property
    def obs_days(self) -> int:
        return round(self.obs_months * DAYS_PER_MONTH)

    @property
    def pred_end_days(self) -> int:
        return self.obs_days + round(self.pred_months * DAYS_PER_MONTH)

    @property
    def n_buckets(self) -> int:
        return math.ceil(self.obs_months * DAYS_PER_MONTH / BUCKET_DAYS)

    def tag(self) -> str:
        return f"obs{self.obs_months:g}_pred{self.pred_months:g}"


DEFAULT_WINDOW_GRID = (
    WindowConfig(1, 1.5),
    WindowConfig(2, 3),
    WindowConfig(3, 4.5),
    WindowConfig(4, 6),
    WindowConfig(6, 9),
    WindowConfig(9, 13.5),
)


# ---------------------------------------------------------------------------
# bucketing and vocabulary


def bucketize(record: PatientRecord, horizon_days: float, vocab: tuple[str, ...] = (),
              n_buckets: int | None = None) -> TemporalSequence:
    """Combine visits into 15-day buckets covering [0, horizon_days).

    Bucket b covers days [15b, 15b+15): visit-type indicators are OR-ed,
    BMI measurements averaged (flag column marks buckets with a value),
    diagnosis indicators set when the code occurs at least once.
    """
    if not record.visits:
        raise CohortError("bucketize: record has no visits")
    if horizon_days < BUCKET_DAYS:
        raise CohortError(f"bucketize: horizon {horizon_days} shorter than one bucket")
    n = n_buckets if n_buckets is not None else math.ceil(horizon_days / BUCKET_DAYS)
    code_col = {c: DX_START_COL + k for k, c in enumerate(vocab)}
    buckets = np.zeros((n, DX_START_COL + len(vocab)))
    bmi_sums = np.zeros(n)
    bmi_counts = np.zeros(n)
    for v in record.visits:
        if v.day >= horizon_days:
            break
        b = v.day // BUCKET_DAYS
        if b >= n:
            continue
        buckets[b, VISIT_TYPES.index(v.visit_type)] = 1.0
        if v.bmi_pct is not None:
            bmi_sums[b] += v.bmi_pct
            bmi_counts[b] += 1
        for code in v.dx_codes:
            col = code_col.get(code)
            if col is not None:
                buckets[b, col] = 1.0
    observed = bmi_counts > 0
    buckets[observed, BMI_COL] = bmi_sums[observed] / bmi_counts[observed]
    buckets[observed, BMI_OBS_COL] = 1.0
    return TemporalSequence(buckets, tuple(vocab))


def filter_rare_codes(cohort, threshold: float = RARE_CODE_THRESHOLD) -> tuple[str, ...]:
    """Vocabulary of diagnosis codes present in at least ``threshold`` of
    patients (a code observed in exactly the threshold fraction is kept)."""
    if not 0.0 < threshold < 1.0:
        raise CohortError(f"threshold {threshold} outside (0, 1)")
    cohort = list(cohort)
    if not cohort:
        raise CohortError("filter_rare_codes: empty cohort")
    counts: dict[str, int] = {}
    for rec in cohort:
        seen = {c for v in rec.visits for c in v.dx_codes}
        for c in seen:
            counts[c] = counts.get(c, 0) + 1
    n = len(cohort)
    return tuple(sorted(c for c, k in counts.items() if k / n >= threshold))


# ---------------------------------------------------------------------------
# scaling and encoding


@dataclass
class ScalerParams:
    """Per-feature min/max learned on the training split only."""

    mins: dict[str, float] = field(default_factory=dict)
    maxs: dict[str, float] = field(default_factory=dict)

    def fit(self, name: str, values) -> None:
        values = np.asarray(values, dtype=float)
        values = values[np.isfinite(values)]
        if values.size == 0:
            self.mins[name], self.maxs[name] = 0.0, 1.0
            return
        self.mins[name] = float(values.min())
        self.maxs[name] = float(values.max())

    def transform(self, name: str, value: float) -> float:
        lo, hi = self.mins[name], self.maxs[name]
        if hi <= lo:
            return 0.0
        return float(np.clip((value - lo) / (hi - lo), 0.0, 1.0))


def one_hot(value: str, categories: tuple[str, ...]) -> np.ndarray:
    """Indicator block; unknown categories map to all zeros."""
    vec = np.zeros(len(categories))
    if value in categories:
        vec[categories.index(value)] = 1.0
    return vec


def static_width() -> int:
    return sum(len(c) for c in CATEGORY_SETS.values()) + len(NUMERIC_FIELDS)


def static_feature_blocks() -> list[tuple[str, int, int]]:
    """(name, start, stop) spans of the static vector's feature blocks."""
    blocks = []
    pos = 0
    for name, cats in CATEGORY_SETS.items():
        blocks.append((name, pos, pos + len(cats)))
        pos += len(cats)
    for name in NUMERIC_FIELDS:
        blocks.append((name, pos, pos + 1))
        pos += 1
    return blocks


def encode_static(record: PatientRecord, scaler: ScalerParams, visit_gap: float) -> np.ndarray:
    parts = [
        one_hot(record.sex, CATEGORY_SETS["sex"]),
        one_hot(record.race, CATEGORY_SETS["race"]),
        one_hot(record.ethnicity, CATEGORY_SETS["ethnicity"]),
        one_hot(record.insurance, CATEGORY_SETS["insurance"]),
        one_hot(record.food_item1, CATEGORY_SETS["food_item1"]),
        one_hot(record.food_item2, CATEGORY_SETS["food_item2"]),
    ]
    numerics = {"age": record.age, "lifestyle_score": record.lifestyle_score,
                "psc17_score": record.psc17_score, "visit_gap": visit_gap}
    parts.append(np.array([scaler.transform(k, numerics[k]) for k in NUMERIC_FIELDS]))
    return np.concatenate(parts)


def scale_temporal(seq: TemporalSequence, scaler: ScalerParams) -> np.ndarray:
    """Copy of the bucket matrix with observed BMI values min-max scaled."""
    out = seq.buckets.copy()
    observed = out[:, BMI_OBS_COL] > 0
    out[observed, BMI_COL] = [scaler.transform("bmi_pct", v) for v in out[observed, BMI_COL]]
    return out


def encode_features(record: PatientRecord, vocab: tuple[str, ...], scaler: ScalerParams,
                    horizon_days: float | None = None,
                    visit_gap: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One-hot + scaled static vector and the raw bucket matrix.

    Without an explicit horizon the full record span is bucketized; the
    windowed pipeline passes the observation horizon and window-level
    visit gap instead.
    """
    if horizon_days is None:
        horizon_days = max(record.last_visit_day + 1, BUCKET_DAYS)
    if visit_gap is None:
        visit_gap = mean_visit_gap(record, horizon_days)
    static = encode_static(record, scaler, visit_gap)
    temporal = bucketize(record, horizon_days, vocab)
    return static, temporal.buckets


def mean_visit_gap(record: PatientRecord, horizon_days: float) -> float:
    """Mean gap in days between consecutive visits inside [0, horizon).

    A window with fewer than two visits gets the horizon itself: no return
    within the window is the longest gap the window can witness.
    """
    days = [v.day for v in record.visits if v.day < horizon_days]
    if len(days) < 2:
        return float(horizon_days)
    return float(np.diff(days).mean())


# ---------------------------------------------------------------------------
# windowing and labels


@dataclass
class WindowedSample:
    static: np.ndarray
    temporal: np.ndarray
    y_attrition: int
    y_outcome: int | None
    patient_id: str


def extract_window(record: PatientRecord, wc: WindowConfig,
                   vocab: tuple[str, ...] = ()) -> tuple[TemporalSequence, float]:
    """Observation-period inputs: bucketed temporal sequence (truncated at
    the observation end) and the window-level mean visit gap."""
    if not record.visits:
        raise CohortError("extract_window: record has no visits")
    seq = bucketize(record, wc.obs_days, vocab, n_buckets=wc.n_buckets)
    return seq, mean_visit_gap(record, wc.obs_days)


def label_sample(record: PatientRecord, wc: WindowConfig) -> tuple[int, int | None]:
    """Labels from data at or before the prediction-window end.

    Attrition is positive when no visit occurs at or after the prediction
    end. The outcome compares the last BMI percentile measured inside the
    prediction window (undefined when there is none) against the baseline
    value: lower is a success (0), same-or-higher a failure (1).
    """
    y_att = 1 if record.last_visit_day < wc.pred_end_days else 0
    baseline = record.baseline_bmi()
    if baseline is None:
        for v in record.visits:
            if v.day >= wc.obs_days:
                break
            if v.bmi_pct is not None:
                baseline = v.bmi_pct
                break
    reference = None
    for v in record.visits:
        if v.day > wc.pred_end_days:
            break
        if v.day >= wc.obs_days and v.bmi_pct is not None:
            reference = v.bmi_pct
    if baseline is None or reference is None:
        return y_att, None
    return y_att, 1 if reference >= baseline else 0


def build_sample(record: PatientRecord, wc: WindowConfig, vocab: tuple[str, ...],
                 scaler: ScalerParams) -> WindowedSample:
    seq, gap = extract_window(record, wc, vocab)
    y_att, y_out = label_sample(record, wc)
    return WindowedSample(
        static=encode_static(record, scaler, gap),
        temporal=scale_temporal(seq, scaler),
        y_attrition=y_att,
        y_outcome=y_out,
        patient_id=record.patient_id,
    )


def fit_scaler(records, wc: WindowConfig) -> ScalerParams:
    """Min-max parameters from the supplied (training) records."""
    scaler = ScalerParams()
    scaler.fit("age", [r.age for r in records])
    scaler.fit("lifestyle_score", [r.lifestyle_score for r in records])
    scaler.fit("psc17_score", [r.psc17_score for r in records])
    gaps, bmis = [], []
    for r in records:
        gaps.append(mean_visit_gap(r, wc.obs_days))
        for v in r.visits:
            if v.day < wc.obs_days and v.bmi_pct is not None:
                bmis.append(v.bmi_pct)
    scaler.fit("visit_gap", gaps)
    scaler.fit("bmi_pct", bmis)
    return scaler


# ---------------------------------------------------------------------------
# splits and dataset assembly

SPLIT_NAMES = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


def split_patients(patient_ids, seed: int) -> dict[str, str]:
    """Deterministic 70/15/15 patient partition, fixed across window pairs."""
    ids = list(patient_ids)
    order = np.random.default_rng((seed, 31)).permutation(len(ids))
    n = len(ids)
    n_train = int(round(n * SPLIT_FRACTIONS[0]))
    n_val = int(round(n * SPLIT_FRACTIONS[1]))
    membership = {}
    for pos, idx in enumerate(order):
        split = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
        membership[ids[idx]] = split
    return membership


@dataclass
class SplitArrays:
    """Stacked model inputs for one split of one window pair."""

    static: np.ndarray        # (n, S)
    temporal: np.ndarray      # (n, T, F)
    y_attrition: np.ndarray   # (n,) float 0/1
    y_outcome: np.ndarray     # (n,) float 0/1, arbitrary where undefined
    outcome_mask: np.ndarray  # (n,) bool, True where the outcome is defined
    patient_ids: list[str]

    def __len__(self):
        return len(self.patient_ids)


@dataclass
class WindowedDataset:
    window: WindowConfig
    splits: dict[str, SplitArrays]
    scaler: ScalerParams
    vocab: tuple[str, ...]

    def prevalence(self) -> dict[str, dict[str, float]]:
        out = {}
        for name, arr in self.splits.items():
            att = float(arr.y_attrition.mean()) if len(arr) else float("nan")
            mask = arr.outcome_mask
            outc = float(arr.y_outcome[mask].mean()) if mask.any() else float("nan")
            out[name] = {"attrition": att, "outcome": outc,
                         "n": len(arr), "n_outcome": int(mask.sum())}
        return out


def _stack(samples: list[WindowedSample]) -> SplitArrays:
    if samples:
        static = np.stack([s.static for s in samples])
        temporal = np.stack([s.temporal for s in samples])
    else:
        static = np.zeros((0, static_width()))
        temporal = np.zeros((0, 0, 0))
    y_att = np.array([s.y_attrition for s in samples], dtype=float)
    y_out = np.array([0.0 if s.y_outcome is None else float(s.y_outcome) for s in samples])
    mask = np.array([s.y_outcome is not None for s in samples], dtype=bool)
    return SplitArrays(static, temporal, y_att, y_out, mask, [s.patient_id for s in samples])


def build_windowed_dataset(cohort, wc: WindowConfig, membership: dict[str, str],
                           vocab: tuple[str, ...]) -> WindowedDataset:
    """Window every record, fitting the scaler on training patients only."""
    by_split = {name: [] for name in SPLIT_NAMES}
    for rec in cohort:
        by_split[membership[rec.patient_id]].append(rec)
    scaler = fit_scaler(by_split["train"], wc)
    splits = {
        name: _stack([build_sample(r, wc, vocab, scaler) for r in recs])
        for name, recs in by_split.items()
    }
    return WindowedDataset(wc, splits, scaler, vocab)


def assemble_dataset(cohort, wc: WindowConfig, seed: int) -> WindowedDataset:
    """Patient-level 70/15/15 split, rare-code vocabulary, train-fitted
    scaler, stacked samples. Same seed, same splits."""
    cohort = list(cohort)
    if not cohort:
        raise CohortError("assemble_dataset: empty cohort")
    vocab = filter_rare_codes(cohort)
    membership = split_patients([r.patient_id for r in cohort], seed)
    return build_windowed_dataset(cohort, wc, membership, vocab)


# ---------------------------------------------------------------------------
# cohort I/O (line-delimited JSON, dates as ISO-8601)


def record_to_json(record: PatientRecord) -> dict:
    return {
        "patient_id": record.patient_id,
        "sex": record.sex,
        "race": record.race,
        "ethnicity": record.ethnicity,
        "insurance": record.insurance,
        "age": record.age,
        "food_item1": record.food_item1,
        "food_item2": record.food_item2,
        "lifestyle_score": record.lifestyle_score,
        "psc17_score": record.psc17_score,
        "events": [
            {
                "date": (_EPOCH + timedelta(days=v.day)).isoformat(),
                "visit_type": v.visit_type,
                "bmi_pct": v.bmi_pct,
                "dx_codes": list(v.dx_codes),
            }
            for v in record.visits
        ],
    }


def record_from_json(obj: dict) -> PatientRecord:
    events = sorted(obj["events"], key=lambda e: e["date"])
    if not events:
        raise CohortError(f"patient {obj.get('patient_id')}: no events")
    day0 = date.fromisoformat(events[0]["date"])
    visits = tuple(
        Visit(
            day=(date.fromisoformat(e["date"]) - day0).days,
            visit_type=e["visit_type"],
            bmi_pct=e.get("bmi_pct"),
            dx_codes=tuple(e.get("dx_codes", ())),
        )
        for e in events
    )
    return PatientRecord(
        patient_id=str(obj["patient_id"]),
        sex=obj["sex"],
        race=obj["race"],
        ethnicity=obj["ethnicity"],
        insurance=obj["insurance"],
        age=float(obj["age"]),
        food_item1=obj["food_item1"],
        food_item2=obj["food_item2"],
        lifestyle_score=int(obj["lifestyle_score"]),
        psc17_score=int(obj["psc17_score"]),
        visits=visits,
    )


def save_cohort(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec)) + "\n")


def load_cohort(path) -> list[PatientRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(record_from_json(json.loads(line)))
    return records


def write_manifest(path, membership: dict[str, str], vocab: tuple[str, ...],
                   scalers: dict[str, ScalerParams]) -> None:
    """Split membership, retained vocabulary and per-window scaler params."""
    doc = {
        "splits": {name: sorted(pid for pid, s in membership.items() if s == name)
                   for name in SPLIT_NAMES},
        "vocab": list(vocab),
        "scalers": {tag: {"mins": s.mins, "maxs": s.maxs} for tag, s in scalers.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
