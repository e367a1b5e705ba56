"""Random cross sections of curve sets, assembled into the dense data matrix X.

Matrix file layout (``write_matrix`` / ``read_matrix``)::

    line 1   "<n> <m>"                      decimal text
    line 2   n variable ids                 tab-separated
    line 3   m provenance triples           tab-separated, each "record_id|time|label"
    payload  n*m float64, little-endian, row-major (row = variable)

``time`` is written with ``repr`` so it round-trips exactly; ``label`` is -1
for unlabeled instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._seeding import derive_rng
from .curves import INTENSITY, VALUE, evaluate_curve
from .ehr_ingest import RecordSpan

CODE = "code"
LAB = "lab"


@dataclass(frozen=True)
class VariableCatalog:
    """Fixed row order of X: code variables first, then labs."""

    ids: tuple
    kinds: tuple
    medians: Mapping[str, float]

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("catalog ids must be unique")
        if len(self.ids) != len(self.kinds):
            raise ValueError("ids and kinds differ in length")
        for vid, kind in zip(self.ids, self.kinds):
            if kind not in (CODE, LAB):
                raise ValueError(f"unknown variable kind {kind!r}")
            if kind == LAB and not math.isfinite(self.medians.get(vid, math.nan)):
                raise ValueError(f"lab {vid!r} has no finite population median")

    @classmethod
    def build(cls, code_ids, medians: Mapping[str, float]) -> "VariableCatalog":
        codes = sorted(set(code_ids))
        labs = sorted(medians)
        return cls(tuple(codes + labs), (CODE,) * len(codes) + (LAB,) * len(labs),
                   {k: float(medians[k]) for k in labs})

    def __len__(self):
        return len(self.ids)

    def index(self) -> dict[str, int]:
        return {vid: i for i, vid in enumerate(self.ids)}

    def fill_value(self, i: int) -> float:
        return 0.0 if self.kinds[i] == CODE else self.medians[self.ids[i]]

    @property
    def code_rows(self) -> np.ndarray:
        return np.array([k == CODE for k in self.kinds])


@dataclass(frozen=True, eq=False)
class CrossSectionMatrix:
    X: np.ndarray
    variable_ids: tuple
    record_ids: tuple
    times: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != len(self.variable_ids):
            raise ValueError("X rows must match variable ids")
        if not (X.shape[1] == len(self.record_ids) == len(self.times) == len(self.labels)):
            raise ValueError("column count must match provenance count")
        if not np.all(np.isfinite(X)):
            raise ValueError("matrix contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    @property
    def shape(self):
        return self.X.shape


def draw_sample_times(span: RecordSpan, rate: float = 1.0, seed: int = 0) -> np.ndarray:
    """Poisson(rate * span length) uniform times on the span, at least one, sorted."""
    if not rate > 0:
        raise ValueError("sampling rate must be positive")
    rng = derive_rng(seed, "sample-times", span.record_id)
    count = max(1, int(rng.poisson(rate * span.length)))
    return np.sort(rng.uniform(span.start, span.end, size=count))


def compute_population_medians(values) -> dict[str, float]:
    """Median of all raw observations per lab across the cohort."""
    pooled: dict[str, list] = {}
    for s in values:
        pooled.setdefault(s.variable_id, []).append(np.asarray(s.values))
    medians = {}
    for vid in sorted(pooled):
        obs = np.concatenate(pooled[vid])
        if len(obs) == 0:
            raise ValueError(f"lab {vid!r} has no observations; drop it from the catalog")
        medians[vid] = float(np.median(obs))
    return medians


def record_columns(curves: Sequence, catalog: VariableCatalog, times,
                   span: RecordSpan | None = None) -> np.ndarray:
    """n x len(times) block for one record; absent variables take their fill value."""
    times = np.asarray(times, dtype=np.float64)
    if span is not None and not span.contains(times):
        raise ValueError(f"sample time outside span of record {span.record_id!r}")
    index = catalog.index()
    block = np.empty((len(catalog), len(times)))
    for i in range(len(catalog)):
        block[i] = catalog.fill_value(i)
    for c in curves:
        i = index.get(c.variable_id)
        if i is None:
            raise ValueError(f"curve variable {c.variable_id!r} not in catalog")
        expected = INTENSITY if catalog.kinds[i] == CODE else VALUE
        if c.kind != expected:
            raise ValueError(f"variable {c.variable_id!r} is a {catalog.kinds[i]} but curve is {c.kind}")
        block[i] = evaluate_curve(c, times)
    return block


def build_matrix(curves_by_record: Mapping[str, Sequence], catalog: VariableCatalog,
                 sample_times: Mapping[str, np.ndarray],
                 spans: Mapping[str, RecordSpan] | None = None,
                 labels: Mapping[str, np.ndarray] | None = None) -> CrossSectionMatrix:
    """Assemble X with columns ordered by record id, then time.

    Records in ``sample_times`` with no curves contribute pure fill columns.
    """
    blocks, rids, times, labs = [], [], [], []
    for rid in sorted(sample_times):
        t = np.asarray(sample_times[rid], dtype=np.float64)
        order = np.argsort(t, kind="stable")
        t = t[order]
        span = spans[rid] if spans is not None else None
        blocks.append(record_columns(curves_by_record.get(rid, ()), catalog, t, span))
        rids.extend([rid] * len(t))
        times.append(t)
        if labels is not None:
            labs.append(np.asarray(labels[rid], dtype=np.int64)[order])
        else:
            labs.append(np.full(len(t), -1, dtype=np.int64))
    X = np.hstack(blocks) if blocks else np.empty((len(catalog), 0))
    times = np.concatenate(times) if times else np.empty(0)
    labs = np.concatenate(labs) if labs else np.empty(0, dtype=np.int64)
    return CrossSectionMatrix(X, tuple(catalog.ids), tuple(rids), times, labs)


def write_matrix(path, M: CrossSectionMatrix) -> None:
    n, m = M.shape
    prov = "\t".join(f"{rid}|{float(t)!r}|{int(lab)}"
                     for rid, t, lab in zip(M.record_ids, M.times, M.labels))
    header = f"{n} {m}\n" + "\t".join(M.variable_ids) + "\n" + prov + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(M.X, dtype="<f8").tobytes(order="C"))


def read_matrix(path) -> CrossSectionMatrix:
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            n, m = (int(x) for x in fh.readline().decode("utf-8").split())
            ids = fh.readline().decode("utf-8").rstrip("\n")
            prov = fh.readline().decode("utf-8").rstrip("\n")
        except (ValueError, UnicodeDecodeError):
            raise ValueError(f"{path}: not a matrix file") from None
        payload = fh.read()
    variable_ids = tuple(ids.split("\t")) if n else ()
    rids, times, labels = [], [], []
    for item in (prov.split("\t") if m else ()):
        rid, t, lab = item.rsplit("|", 2)
        rids.append(rid)
        times.append(float(t))
        labels.append(int(lab))
    if len(variable_ids) != n or len(rids) != m or len(payload) != 8 * n * m:
        raise ValueError(f"{path}: header does not match payload")
    X = np.frombuffer(payload, dtype="<f8").reshape(n, m).astype(np.float64)
    return CrossSectionMatrix(X, variable_ids, tuple(rids), np.array(times), np.array(labels))


def write_catalog(path, catalog: VariableCatalog) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for vid, kind in zip(catalog.ids, catalog.kinds):
            med = repr(float(catalog.medians[vid])) if kind == LAB else ""
            fh.write(f"{vid}\t{kind}\t{med}\n")


def read_catalog(path) -> VariableCatalog:
    ids, kinds, medians = [], [], {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        vid, kind, med = line.split("\t")
        ids.append(vid)
        kinds.append(kind)
        if kind == LAB:
            medians[vid] = float(med)
    return VariableCatalog(tuple(ids), tuple(kinds), medians)
