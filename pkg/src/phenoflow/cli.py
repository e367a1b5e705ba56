"""``phenoflow`` command line: one subcommand per pipeline stage.

Every stage reads its predecessor's files from the work directory and writes
its own outputs plus ``config.resolved.cfg`` there. Exit status is 0 on
success, 1 on usage or validation errors and 2 on runtime failures. All
messages go to standard error.

Work directory layout::

    synth      -> events.tsv values.tsv diagnoses.tsv ground_truth.json
    ingest     -> ingested_events.tsv ingested_values.tsv ingested_diagnoses.tsv
                  catalog.tsv spans.tsv
    curves     -> curves.tsv
    sample     -> sample_times.tsv matrix.bin
    ica        -> model.zip
    report     -> report.txt
    cohort     -> labeled.bin
    train      -> metrics.txt importance.tsv
    plot       -> plots/component_NNN.{svg,csv}
    reproduce  -> all of the above plus summary.txt
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import cross_section, curves, ehr_ingest, evaluation, forest, ica, pipeline, plots, synth
from ._seeding import derive_seed
from .config import ConfigError, PipelineConfig, dump_config, from_mapping, load_config

log = logging.getLogger("phenoflow")

STAGES = ("ingest", "curves", "sample", "ica", "report", "cohort", "train", "synth",
          "reproduce", "plot")


class UsageError(Exception):
    """Bad invocation or missing/invalid input; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --- small work-directory files ------------------------------------------------------

def write_spans(path, spans, n_obs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rid in sorted(spans):
            s = spans[rid]
            fh.write(f"{rid}\t{s.start!r}\t{s.end!r}\t{n_obs.get(rid, 0)}\n")


def read_spans(path):
    spans, n_obs = {}, {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            rid, start, end, n = line.split("\t")
            spans[rid] = ehr_ingest.RecordSpan(rid, float(start), float(end))
            n_obs[rid] = int(n)
    return spans, n_obs


def write_times(path, times) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rid in sorted(times):
            for t in times[rid]:
                fh.write(f"{rid}\t{float(t)!r}\n")


def read_times(path):
    out: dict[str, list] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            rid, t = line.split("\t")
            out.setdefault(rid, []).append(float(t))
    return {rid: np.array(ts) for rid, ts in out.items()}


# --- stage helpers ------------------------------------------------------------------

def _need(path: Path) -> Path:
    if not path.is_file():
        raise UsageError(f"missing input file: {path}")
    return path


def _parse(path: Path, kind: str, cfg: PipelineConfig):
    parsed = ehr_ingest.parse_observations(_need(path), kind, strict=cfg.strict)
    for err in parsed.errors[:20]:
        log.warning("%s", err)
    if parsed.n_rejected:
        log.warning("%s: rejected %d malformed line(s)", path, parsed.n_rejected)
    return parsed.series


def _icfg(cfg: PipelineConfig) -> curves.IntensityConfig:
    return curves.IntensityConfig(cfg.intensity_iterations, cfg.intensity_max_bins,
                                  derive_seed(cfg.seed, "curves"))


def _load_ingested(wd: Path):
    events = ehr_ingest.parse_observations(_need(wd / "ingested_events.tsv"), "event", strict=True)
    values = ehr_ingest.parse_observations(_need(wd / "ingested_values.tsv"), "value", strict=True)
    return events.series, values.series


def _load_curves(wd: Path, spans):
    by_record = curves.read_curve_dump(_need(wd / "curves.tsv"))
    return {rid: by_record.get(rid, []) for rid in spans}


def _matrix_from_curves(curve_map, catalog, spans, times, labels=None):
    return cross_section.build_matrix({rid: curve_map[rid] for rid in times}, catalog, times,
                                      spans=spans, labels=labels)


# --- stages -------------------------------------------------------------------------

def stage_synth(cfg: PipelineConfig, wd: Path, args) -> None:
    scfg = dataclasses.replace(cfg.synth, seed=derive_seed(cfg.seed, "synth"))
    cohort = synth.generate_cohort(synth.make_phenotypes(scfg), scfg)
    ehr_ingest.write_events(wd / "events.tsv", cohort.events)
    ehr_ingest.write_values(wd / "values.tsv", cohort.values)
    ehr_ingest.write_events(wd / "diagnoses.tsv", cohort.diagnoses)
    synth.write_ground_truth(wd / "ground_truth.json", cohort)
    log.info("synthesized %d patients", scfg.n_patients)


def stage_ingest(cfg: PipelineConfig, wd: Path, args) -> None:
    events = _parse(Path(cfg.events) if cfg.events else wd / "events.tsv", "event", cfg)
    values = _parse(Path(cfg.values) if cfg.values else wd / "values.tsv", "value", cfg)
    diag_path = Path(cfg.diagnosis_events) if cfg.diagnosis_events else wd / "diagnoses.tsv"
    diagnoses = _parse(diag_path, "event", cfg) if cfg.diagnosis_events or diag_path.is_file() else []
    keep = None
    if cfg.apply_inclusion:
        keep = pipeline.include_records(events + diagnoses, values, cfg)
        log.info("inclusion criteria kept %d records", len(keep))
    if cfg.code_map:
        mapping = ehr_ingest.load_code_map(_need(Path(cfg.code_map)))
        events = ehr_ingest.group_codes(events, mapping, drop_unmapped=cfg.drop_unmapped)
    C = pipeline.prepare_cohort(events, values, keep=keep)
    if not C.spans:
        raise UsageError("no records left after ingest")
    if keep is not None:
        diagnoses = ehr_ingest.filter_records(diagnoses, keep)
    ehr_ingest.write_events(wd / "ingested_events.tsv", C.events)
    ehr_ingest.write_values(wd / "ingested_values.tsv", C.values)
    ehr_ingest.write_events(wd / "ingested_diagnoses.tsv", diagnoses)
    cross_section.write_catalog(wd / "catalog.tsv", C.catalog)
    write_spans(wd / "spans.tsv", C.spans, C.n_obs)
    log.info("ingested %d records, %d variables", len(C.spans), len(C.catalog))


def stage_curves(cfg: PipelineConfig, wd: Path, args) -> None:
    events, values = _load_ingested(wd)
    catalog = cross_section.read_catalog(_need(wd / "catalog.tsv"))
    C = pipeline.prepare_cohort(events, values, catalog=catalog)
    icfg = _icfg(cfg)
    all_curves = []
    for rid in C.record_ids:
        all_curves.extend(pipeline.curves_for(C, rid, cfg.resolution, icfg))
    curves.write_curve_dump(wd / "curves.tsv", all_curves)
    log.info("wrote %d curves", len(all_curves))


def stage_sample(cfg: PipelineConfig, wd: Path, args) -> None:
    spans, _ = read_spans(_need(wd / "spans.tsv"))
    catalog = cross_section.read_catalog(_need(wd / "catalog.tsv"))
    seed = derive_seed(cfg.seed, "sample")
    times = {rid: cross_section.draw_sample_times(spans[rid], cfg.sample_rate, seed)
             for rid in sorted(spans)}
    X = _matrix_from_curves(_load_curves(wd, spans), catalog, spans, times)
    write_times(wd / "sample_times.tsv", times)
    cross_section.write_matrix(wd / "matrix.bin", X)
    log.info("cross-section matrix %d x %d", *X.shape)


def stage_ica(cfg: PipelineConfig, wd: Path, args) -> None:
    X = cross_section.read_matrix(_need(wd / "matrix.bin"))
    seed = args.ica_seed if args.ica_seed is not None else derive_seed(cfg.seed, "ica")
    model, _ = ica.fit_ica(X, cfg.ica_rank, seed=seed, tol=cfg.ica_tol, max_iter=cfg.ica_max_iter,
                           standardize=cfg.ica_standardize)
    if not model.converged:
        log.warning("ICA did not converge in %d iterations (final delta %.3g)",
                    cfg.ica_max_iter, model.final_delta)
    ica.save_model(wd / "model.zip", model)
    log.info("ICA rank %d, %d iterations", model.rank, model.n_iter)


def _model_and_catalog(wd: Path):
    model = ica.load_model(_need(wd / "model.zip"))
    catalog = cross_section.read_catalog(_need(wd / "catalog.tsv"))
    if len(catalog) != model.n_variables:
        raise UsageError("catalog.tsv does not match model.zip")
    return model, catalog


def stage_report(cfg: PipelineConfig, wd: Path, args) -> None:
    model, catalog = _model_and_catalog(wd)
    text = ica.phenotype_report(model, catalog, cfg.report_top).to_text()
    (wd / "report.txt").write_text(text, encoding="utf-8")


def stage_cohort(cfg: PipelineConfig, wd: Path, args) -> None:
    spans, n_obs = read_spans(_need(wd / "spans.tsv"))
    catalog = cross_section.read_catalog(_need(wd / "catalog.tsv"))
    sample_times = read_times(_need(wd / "sample_times.tsv"))
    events, _ = _load_ingested(wd)
    diag = ehr_ingest.parse_observations(_need(wd / "ingested_diagnoses.tsv"), "event", strict=True)
    first = ehr_ingest.earliest_code_times(list(events) + list(diag.series), cfg.target_codes)
    data = forest.build_hcc_cohort(spans, first, n_obs, sample_times, horizon=cfg.horizon,
                                   min_data=cfg.min_data,
                                   window=cfg.window_days / forest.DAYS_PER_YEAR,
                                   one_per_record=cfg.one_per_record)
    XL = _matrix_from_curves(_load_curves(wd, spans), catalog, spans, data.sample_times(),
                             labels=data.label_map())
    cross_section.write_matrix(wd / "labeled.bin", XL)
    log.info("labeled instances: %d (%d positive)", len(data), int(data.labels.sum()))


def stage_train(cfg: PipelineConfig, wd: Path, args) -> None:
    model = ica.load_model(_need(wd / "model.zip"))
    XL = cross_section.read_matrix(_need(wd / "labeled.bin"))
    if np.any(XL.labels < 0):
        raise UsageError(f"{wd / 'labeled.bin'} carries unlabeled columns")
    SL = ica.project(model, XL)
    data = forest.LabeledInstances(XL.record_ids, XL.times, XL.labels, SL.S)
    seed = args.forest_seed if args.forest_seed is not None else derive_seed(cfg.seed, "forest")
    train = forest.split_by_record(data, cfg.test_fraction, derive_seed(cfg.seed, "split"))
    params = forest.ForestParams(n_trees=cfg.forest_trees, mtry=cfg.forest_mtry or None,
                                 max_depth=cfg.forest_max_depth or None,
                                 min_leaf=cfg.forest_min_leaf,
                                 class_weight="balanced" if cfg.forest_balanced else None)
    fm = forest.train_forest(data.subset(train), params, seed)
    test = data.subset(~train)
    heldout = forest.auc(forest.predict_proba(fm, test.features), test.labels)
    tr = data.subset(train)
    forest.write_metrics(wd / "metrics.txt", {
        "heldout_auc": heldout, "oob_auc": forest.oob_auc(fm, tr.labels),
        "train_positive": int(tr.labels.sum()), "train_negative": int((tr.labels == 0).sum()),
        "test_positive": int(test.labels.sum()), "test_negative": int((test.labels == 0).sum())})
    forest.write_importances(wd / "importance.tsv", fm)
    log.info("held-out AUC %.4f", heldout)


def stage_plot(cfg: PipelineConfig, wd: Path, args) -> None:
    model, catalog = _model_and_catalog(wd)
    ids = range(model.rank) if args.component is None else [args.component]
    for j in ids:
        if not 0 <= j < model.rank:
            raise UsageError(f"component {j} out of range 0..{model.rank - 1}")
        svg, csv_path = plots.emit_phenotype_plot(model, catalog, j, wd / "plots", cfg.report_top)
        log.info("wrote %s and %s", svg, csv_path)


def stage_reproduce(cfg: PipelineConfig, wd: Path, args) -> None:
    summary = evaluation.run_reproduction(cfg)
    for key, value, tol in summary.metrics:
        if tol:
            log.info("%s = %s (target %s)", key, value, tol)
    log.info("summary written to %s", wd / "summary.txt")


HANDLERS = {
    "synth": stage_synth, "ingest": stage_ingest, "curves": stage_curves, "sample": stage_sample,
    "ica": stage_ica, "report": stage_report, "cohort": stage_cohort, "train": stage_train,
    "plot": stage_plot, "reproduce": stage_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--work-dir", help="directory for stage inputs and outputs")
    common.add_argument("--master-seed", type=int, help="master seed (overrides config 'seed')")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = _Parser(prog="phenoflow", description="Phenotype discovery pipeline for EHR data.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "synth": "generate a synthetic cohort with known phenotypes",
        "ingest": "parse observation files and build the variable catalog",
        "curves": "fit longitudinal curves for every record",
        "sample": "draw cross-section times and build the data matrix",
        "ica": "fit the phenotype decomposition",
        "report": "write the top loadings of every phenotype",
        "cohort": "build the labeled prediction instances",
        "train": "train the random forest and report AUC",
        "plot": "emit SVG and CSV loading plots",
        "reproduce": "run the full synthetic experiment",
    }
    subs = {name: sub.add_parser(name, parents=[common], help=helps[name]) for name in STAGES}
    p = subs["ica"]
    p.add_argument("--rank", type=int, help="number of components k")
    p.add_argument("--seed", dest="ica_seed", type=int, help="ICA initialization seed")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=None)
    p = subs["train"]
    p.add_argument("--trees", type=int)
    p.add_argument("--mtry", type=int)
    p.add_argument("--seed", dest="forest_seed", type=int, help="forest seed")
    p.add_argument("--balanced", action=argparse.BooleanOptionalAction, default=None)
    subs["plot"].add_argument("--component", type=int, help="component id (default: all)")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {}
    if args.work_dir is not None:
        overrides["work_dir"] = args.work_dir
    if args.master_seed is not None:
        overrides["seed"] = args.master_seed
    flag_keys = {"rank": "ica_rank", "tol": "ica_tol", "max_iter": "ica_max_iter",
                 "standardize": "ica_standardize", "trees": "forest_trees",
                 "mtry": "forest_mtry", "balanced": "forest_balanced"}
    for attr, key in flag_keys.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    return from_mapping(overrides, cfg)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("phenoflow %(levelname)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)

    try:
        cfg = resolve_config(args)
        wd = Path(cfg.work_dir)
        wd.mkdir(parents=True, exist_ok=True)
        (wd / "config.resolved.cfg").write_text(dump_config(cfg), encoding="utf-8")
        HANDLERS[args.command](cfg, wd, args)
    except (UsageError, ConfigError, ehr_ingest.ParseError) as exc:
        print(f"phenoflow: error: {exc}", file=sys.stderr)
        return 1
    except pipeline.StageError as exc:
        print(f"phenoflow: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"phenoflow: error in {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
