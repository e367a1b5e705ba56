"""Stage helpers shared by the CLI and the reproduction experiment."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cross_section import (CrossSectionMatrix, VariableCatalog, compute_population_medians,
                            draw_sample_times, record_columns)
from .curves import Grid, IntensityConfig, record_curves
from .ehr_ingest import (EventSeries, apply_inclusion_criteria, filter_records, group_by_record,
                         observation_counts, record_spans)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, error: Exception):
        super().__init__(f"stage '{stage}' failed: {error}")
        self.stage = stage
        self.error = error


@dataclass(eq=False)
class Cohort:
    events: list
    values: list
    spans: dict
    n_obs: dict
    catalog: VariableCatalog
    by_record: dict

    @property
    def record_ids(self) -> list[str]:
        return sorted(self.spans)


def prepare_cohort(events, values, keep=None, catalog: VariableCatalog | None = None) -> Cohort:
    """Spans, observation counts and (unless given) the variable catalog for a cohort."""
    if keep is not None:
        events = filter_records(events, keep)
        values = filter_records(values, keep)
    if catalog is None:
        catalog = VariableCatalog.build({s.variable_id for s in events},
                                        compute_population_medians(values))
    grouped = group_by_record(events, values)
    by_record = {rid: ([s for s in ss if isinstance(s, EventSeries)],
                       [s for s in ss if not isinstance(s, EventSeries)])
                 for rid, ss in grouped.items()}
    return Cohort(list(events), list(values), record_spans(events, values),
                  observation_counts(events, values), catalog, by_record)


def include_records(events, values, cfg) -> list[str]:
    return apply_inclusion_criteria(events, values, cfg.lab_thresholds(), cfg.inclusion_codes)


def curves_for(cohort: Cohort, rid: str, resolution: float, icfg: IntensityConfig):
    span = cohort.spans[rid]
    events, values = cohort.by_record.get(rid, ([], []))
    return record_curves(events, values, span, Grid.for_span(span, resolution), icfg)


def draw_all_sample_times(cohort: Cohort, rate: float, seed: int) -> dict[str, np.ndarray]:
    return {rid: draw_sample_times(cohort.spans[rid], rate, seed) for rid in cohort.record_ids}


def assemble_matrices(cohort: Cohort, time_sets, resolution: float, icfg: IntensityConfig,
                      label_sets=None) -> list[CrossSectionMatrix]:
    """Evaluate each record's curves once and cut one matrix per time set.

    ``time_sets`` is a list of ``record_id -> times`` maps; ``label_sets``
    optionally supplies matching ``record_id -> labels`` maps.
    """
    label_sets = label_sets or [None] * len(time_sets)
    parts = [dict(blocks=[], rids=[], times=[], labels=[]) for _ in time_sets]
    wanted = sorted(set().union(*[set(ts) for ts in time_sets]))
    for rid in wanted:
        if rid not in cohort.spans:
            raise ValueError(f"record {rid!r} is not in the cohort")
        curves = curves_for(cohort, rid, resolution, icfg)
        for ts, labs, part in zip(time_sets, label_sets, parts):
            if rid not in ts:
                continue
            t = np.asarray(ts[rid], dtype=np.float64)
            order = np.argsort(t, kind="stable")
            t = t[order]
            part["blocks"].append(record_columns(curves, cohort.catalog, t, cohort.spans[rid]))
            part["rids"].extend([rid] * len(t))
            part["times"].append(t)
            lab = (np.asarray(labs[rid], dtype=np.int64)[order] if labs is not None
                   else np.full(len(t), -1, dtype=np.int64))
            part["labels"].append(lab)
    out = []
    n = len(cohort.catalog)
    for part in parts:
        X = np.hstack(part["blocks"]) if part["blocks"] else np.empty((n, 0))
        times = np.concatenate(part["times"]) if part["times"] else np.empty(0)
        labels = np.concatenate(part["labels"]) if part["labels"] else np.empty(0, dtype=np.int64)
        out.append(CrossSectionMatrix(X, tuple(cohort.catalog.ids), tuple(part["rids"]), times, labels))
    return out
