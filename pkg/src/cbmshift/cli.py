"""Command-line interface.

Every command reads one JSON run config (``--config``) and accepts flag
overrides; flags win. Artifacts go to ``--out`` (default ``runs/default``) under
fixed file names, so the stages chain without repeating paths::

    cbmshift generate --out runs/a
    cbmshift train --out runs/a --config configs/desk.json
    cbmshift dump-activations --out runs/a
    cbmshift memorize --out runs/a
    cbmshift identify --out runs/a --tau 1.4
    cbmshift evaluate --out runs/a
    cbmshift apply --out runs/a --activations runs/a/activations_test.csv

Exit status: 0 on success, 2 on bad input or config, 1 on anything else.
Set ``CBMSHIFT_LOG`` to ``quiet``, ``info`` (default) or ``debug``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from cbmshift.adaptation import (
    ConceptMask,
    IdentificationConfig,
    build_mask,
    collect_ood_activations,
    identify_confusion,
    masked_classify,
)
from cbmshift.data import (
    ClassVocabulary,
    ConceptVocabulary,
    FormatError,
    format_real,
    load_activations_csv,
    load_samples_csv,
    write_activations_csv,
    write_samples_csv,
)
from cbmshift.evaluation import Comparison, compare, comparison_table, evaluate
from cbmshift.memory import build_memory, load_memory, save_memory
from cbmshift.model import CbmParameters, LossConfig, forward
from cbmshift.pipeline import (
    OOD_ADAPT_STREAM,
    OOD_TEST_STREAM,
    SimulationConfig,
    activation_records,
    default_scenario,
    run_simulation,
)
from cbmshift.synthshift import ShiftScenario, generate_id, generate_ood_samples, samples_dataset
from cbmshift.training import TrainConfig, train, write_training_log

logger = logging.getLogger("cbmshift")

EXIT_OK, EXIT_INTERNAL, EXIT_BAD_INPUT = 0, 1, 2
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

# file names inside the output directory
FILES = {
    "scenario": "scenario.json",
    "concepts": "concepts.txt",
    "classes": "classes.txt",
    "dataset": "dataset.csv",
    "ood": "ood_adapt.csv",
    "ood_test": "ood_test.csv",
    "params": "params.json",
    "training_log": "training_log.csv",
    "activations": "activations_val.csv",
    "memory": "memory.json",
    "mask": "mask.json",
    "report": "report.json",
}


class ConfigError(ValueError):
    """Bad config or missing input; maps to exit status 2."""


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    paths: dict[str, str] = field(default_factory=dict)
    hidden: int = 16
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    identify: IdentificationConfig = field(default_factory=IdentificationConfig)
    scenario: dict[str, Any] = field(default_factory=lambda: {"preset": "feature"})
    counts: tuple[int, int, int] = (200, 100, 200)
    n_adapt: int = 4
    n_ood_test: int = 200
    fine_tune: bool = True
    histogram_bins: int = 10

    def path(self, key: str) -> Path:
        """Explicit path from the config, else the standard file in ``out``."""
        if key in self.paths:
            return Path(self.paths[key])
        return Path(self.out) / FILES[key]

    def input(self, key: str) -> Path:
        p = self.path(key)
        if not p.is_file():
            raise ConfigError(f"{key} file not found: {p}")
        return p

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["counts"] = list(self.counts)
        return doc


_SECTIONS = {"loss": LossConfig, "train": TrainConfig, "identify": IdentificationConfig}


def _section(cls, doc: Any, name: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    doc = dict(doc)
    preset = doc.pop("preset", None) if cls is IdentificationConfig else None
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls.preset(preset, **doc) if preset else cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kwargs[key] = _section(_SECTIONS[key], value, key)
        elif key == "counts":
            if not (isinstance(value, list) and len(value) == 3):
                raise ConfigError("counts must be a list [train, val, test]")
            kwargs[key] = tuple(int(v) for v in value)
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    if not isinstance(cfg.paths, dict) or not set(cfg.paths) <= set(FILES):
        raise ConfigError(f"paths may only name: {', '.join(FILES)}")
    return cfg


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.tau is not None:
        try:
            cfg.identify = replace(cfg.identify, tau=args.tau)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    for key in FILES:
        value = getattr(args, key, None)
        if value is not None:
            cfg.paths[key] = value
    cfg.train = replace(cfg.train, seed=cfg.seed)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _vocabularies(cfg: RunConfig) -> tuple[ConceptVocabulary, ClassVocabulary]:
    return ConceptVocabulary.load(cfg.input("concepts")), ClassVocabulary.load(cfg.input("classes"))


def _load_params(cfg: RunConfig, concepts, classes) -> CbmParameters:
    params = CbmParameters.load(cfg.input("params"))
    dims = params.dims
    if dims.L != len(concepts) or dims.K != len(classes):
        raise ConfigError(
            f"params have L={dims.L}, K={dims.K} but the vocabularies have {len(concepts)} concepts "
            f"and {len(classes)} classes"
        )
    return params


def _check_features(params: CbmParameters, dataset, path) -> None:
    if dataset.n_features != params.dims.d:
        raise ConfigError(f"{path}: {dataset.n_features} feature columns but params expect d={params.dims.d}")


def _scenario(cfg: RunConfig) -> ShiftScenario:
    spec = dict(cfg.scenario)
    if "file" in spec:
        return ShiftScenario.load(spec["file"])
    preset = spec.pop("preset", "feature")
    try:
        return default_scenario(cfg.seed, preset, **spec)
    except TypeError as exc:
        raise ConfigError(f"invalid scenario section: {exc}") from None


def _dump_json(doc, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# commands


def cmd_generate(cfg: RunConfig, args) -> int:
    """Write a synthetic scenario and its ID / OOD sample files."""
    out = _out_dir(cfg)
    scenario = _scenario(cfg)
    scenario.save(cfg.path("scenario"))
    scenario.concept_vocabulary().save(cfg.path("concepts"))
    scenario.class_vocabulary().save(cfg.path("classes"))
    write_samples_csv(generate_id(scenario, cfg.counts), cfg.path("dataset"))
    adapt = generate_ood_samples(scenario, cfg.n_adapt, stream=OOD_ADAPT_STREAM, split="train")
    test = generate_ood_samples(scenario, cfg.n_ood_test, stream=OOD_TEST_STREAM, split="test")
    write_samples_csv(samples_dataset(adapt, scenario), cfg.path("ood"))
    write_samples_csv(samples_dataset(test, scenario), cfg.path("ood_test"))
    logger.info("scenario d=%d L=%d K=%d written to %s", scenario.d, scenario.L, scenario.K, out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    concepts, classes = _vocabularies(cfg)
    dataset = load_samples_csv(cfg.input("dataset"), concepts, classes)
    if dataset.n_features is None:
        raise ConfigError(f"{cfg.path('dataset')}: training needs x_* feature columns")
    _out_dir(cfg)
    dims = (dataset.n_features, cfg.hidden, len(concepts), len(classes))
    params, log = train(dataset, dims, cfg.loss, cfg.train)
    params.save(cfg.path("params"))
    write_training_log(log, cfg.path("training_log"))
    val_acc = log[-1].val_accuracy if log else float("nan")
    print(f"final val accuracy: {val_acc:.4f}")
    return EXIT_OK


def cmd_dump_activations(cfg: RunConfig, args) -> int:
    concepts, classes = _vocabularies(cfg)
    params = _load_params(cfg, concepts, classes)
    source = cfg.input("dataset")
    dataset = load_samples_csv(source, concepts, classes)
    _check_features(params, dataset, source)
    samples = dataset.split(args.split)
    if not samples:
        raise ConfigError(f"{source}: split {args.split!r} is empty")
    _out_dir(cfg)
    target = Path(args.output) if args.output else Path(cfg.out) / f"activations_{args.split}.csv"
    write_activations_csv(activation_records(params, samples), target, classes, len(concepts))
    logger.info("%d activation rows written to %s", len(samples), target)
    return EXIT_OK


def cmd_memorize(cfg: RunConfig, args) -> int:
    concepts, classes = _vocabularies(cfg)
    records = load_activations_csv(cfg.input("activations"), concepts, classes)
    memory = build_memory(records, len(classes), len(concepts), splits=(args.split,))
    _out_dir(cfg)
    save_memory(memory, cfg.path("memory"))
    logger.info("memory from %d records written to %s", int(memory.counts.sum()), cfg.path("memory"))
    return EXIT_OK


def _flag_table(mask: ConceptMask, concepts, classes) -> str:
    rep = mask.report
    lines = ["kind            class       concept"]
    for i in sorted(rep.misactivated):
        lines.append(f"{'misactivated':<15} {'(all)':<11} {concepts.names[i]}")
    for k, under in enumerate(rep.under_activated):
        for i in sorted(under):
            lines.append(f"{'under-activated':<15} {classes.names[k]:<11} {concepts.names[i]}")
    if len(lines) == 1:
        lines.append("no concepts flagged")
    return "\n".join(lines)


def cmd_identify(cfg: RunConfig, args) -> int:
    concepts, classes = _vocabularies(cfg)
    params = _load_params(cfg, concepts, classes)
    memory = load_memory(cfg.input("memory"), K=len(classes), L=len(concepts))
    source = cfg.input("ood")
    ood = load_samples_csv(source, concepts, classes)
    _check_features(params, ood, source)
    table = collect_ood_activations(params, ood.samples, len(classes))
    report = identify_confusion(memory, table, cfg.identify)
    mask = build_mask(report, cfg.identify, len(concepts))
    _out_dir(cfg)
    mask.save(cfg.path("mask"), classes.names, concepts.names)
    print(f"tau = {cfg.identify.tau:g}, OOD samples per class: {', '.join(map(str, table.counts))}")
    print(_flag_table(mask, concepts, classes))
    return EXIT_OK


def cmd_apply(cfg: RunConfig, args) -> int:
    """Mask a CSV of precomputed activations and write predictions."""
    concepts, classes = _vocabularies(cfg)
    params = _load_params(cfg, concepts, classes)
    mask = ConceptMask.load(cfg.input("mask"), L=len(concepts))
    records = load_activations_csv(cfg.input("activations"), concepts, classes)
    if not records:
        raise ConfigError(f"{cfg.path('activations')}: no activation rows")
    acts = np.array([r.activations for r in records])
    pred, probs, _ = masked_classify(params, acts, mask)
    _out_dir(cfg)
    target = Path(args.output) if args.output else Path(cfg.out) / "predictions.csv"
    with open(target, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "split", "class", "predicted", *[f"p_{n}" for n in classes.names]])
        for r, k, p in zip(records, pred, probs):
            writer.writerow(
                [r.sample_id, r.split, classes.names[r.class_label], classes.names[k], *map(format_real, p)]
            )
    logger.info("%d predictions written to %s", len(records), target)
    return EXIT_OK


def activation_histogram(id_acts, id_labels, ood_acts, ood_labels, concepts, classes, bins: int) -> list[list]:
    """Rows ``class, concept, domain, bin_lo, bin_hi, count`` over equal-width bins on [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    rows = []
    for k, cname in enumerate(classes.names):
        for domain, acts, labels in (("id", id_acts, id_labels), ("ood", ood_acts, ood_labels)):
            a = acts[labels == k]
            for i, concept in enumerate(concepts.names):
                counts, _ = np.histogram(a[:, i], bins=edges)
                for b, n in enumerate(counts):
                    rows.append([cname, concept, domain, f"{edges[b]:.4f}", f"{edges[b + 1]:.4f}", int(n)])
    return rows


def cmd_evaluate(cfg: RunConfig, args) -> int:
    concepts, classes = _vocabularies(cfg)
    params = _load_params(cfg, concepts, classes)
    mask = ConceptMask.load(cfg.input("mask"), L=len(concepts))
    K = len(classes)
    id_path, ood_path = cfg.input("dataset"), cfg.input("ood_test")
    id_data = load_samples_csv(id_path, concepts, classes)
    ood_data = load_samples_csv(ood_path, concepts, classes)
    _check_features(params, id_data, id_path)
    _check_features(params, ood_data, ood_path)
    id_split = "test" if id_data.split("test") else id_data.splits[-1]
    sets = {
        "id": (id_data.features(id_split), id_data.labels(id_split)),
        "ood": (np.array([s.features for s in ood_data.samples]), np.array([s.class_label for s in ood_data.samples])),
    }
    results, concepts_by_domain = {}, {}
    for domain, (x, y) in sets.items():
        trace = forward(params, x)
        acts = trace.concepts
        concepts_by_domain[domain] = acts
        results[f"{domain}_unmasked"] = evaluate(trace.prediction, y, K)
        results[f"{domain}_masked"] = evaluate(masked_classify(params, acts, mask)[0], y, K)
    comparisons = {d: compare(results[f"{d}_unmasked"], results[f"{d}_masked"]) for d in sets}
    out = _out_dir(cfg)
    _dump_json(
        {
            "id_split": id_split,
            "mask": mask.m.tolist(),
            "results": {k: v.to_json() for k, v in results.items()},
            "comparisons": {k: v.to_json() for k, v in comparisons.items()},
        },
        out / "evaluation.json",
    )
    table = comparison_table({"in-domain": comparisons["id"], "out-of-domain": comparisons["ood"]})
    (out / "comparison.txt").write_text(table + "\n", encoding="utf-8")
    rows = activation_histogram(
        concepts_by_domain["id"], sets["id"][1], concepts_by_domain["ood"], sets["ood"][1], concepts, classes,
        cfg.histogram_bins,
    )
    with open(out / "activation_histogram.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "concept", "domain", "bin_lo", "bin_hi", "count"])
        writer.writerows(rows)
    print(table)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    scenario = _scenario(cfg)
    sim = SimulationConfig(
        counts=cfg.counts,
        n_adapt=cfg.n_adapt,
        n_ood_test=cfg.n_ood_test,
        hidden=cfg.hidden,
        fine_tune=cfg.fine_tune,
        loss=cfg.loss,
        train=cfg.train,
        identify=cfg.identify,
    )
    report = run_simulation(scenario, sim, cfg.seed)
    # output locations stay out of the report so it depends only on config and seed
    report["config"] = {k: v for k, v in cfg.to_json().items() if k not in ("out", "paths")}
    out = _out_dir(cfg)
    _dump_json(report, cfg.path("report"))
    rows = {name: _comparison(doc) for name, doc in report["comparisons"].items()}
    print(comparison_table(rows))
    ident = report["identification"]
    print(
        f"identification: misactivated P={ident['misactivated_precision']:.2f} R={ident['misactivated_recall']:.2f}, "
        f"under-activated P={ident['under_activated_precision']:.2f} R={ident['under_activated_recall']:.2f}"
    )
    logger.info("report written to %s", out / FILES["report"])
    return EXIT_OK


def _comparison(doc: dict) -> Comparison:
    return Comparison(
        doc["before"]["accuracy"], doc["after"]["accuracy"], doc["before"]["macro_f1"], doc["after"]["macro_f1"]
    )


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "dump-activations": cmd_dump_activations,
    "memorize": cmd_memorize,
    "identify": cmd_identify,
    "apply": cmd_apply,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--tau", type=float, help="identification threshold (overrides config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides config)")

    parser = argparse.ArgumentParser(prog="cbmshift", description="Concept confusion identification for CBMs.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text, *path_keys):
        p = sub.add_parser(name, parents=[common], help=help_text)
        for key in path_keys:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="PATH", help=f"{key} file")
        return p

    add("generate", "write a synthetic scenario and sample CSVs")
    add("train", "train a CBM on a samples CSV", "dataset", "concepts", "classes")
    p = add("dump-activations", "write concept activations for one split", "dataset", "concepts", "classes", "params")
    p.add_argument("--split", default="val", help="split to dump (default: val)")
    p.add_argument("--output", metavar="PATH", help="output CSV (default: OUT/activations_SPLIT.csv)")
    p = add("memorize", "build the concept activation memory", "activations", "concepts", "classes")
    p.add_argument("--split", default="val", help="split whose records are used (default: val)")
    add("identify", "flag confusion concepts and write the mask", "params", "memory", "ood", "concepts", "classes")
    p = add("apply", "mask an activations CSV and predict", "params", "mask", "activations", "concepts", "classes")
    p.add_argument("--output", metavar="PATH", help="output CSV (default: OUT/predictions.csv)")
    add("evaluate", "compare unmasked and masked predictions", "params", "mask", "dataset", "ood_test", "concepts", "classes")
    add("simulate", "run the full synthetic pipeline and write one report")
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("CBMSHIFT_LOG", "info").lower()
    level = LOG_LEVELS.get(level_name)
    if level is None:
        raise ConfigError(f"CBMSHIFT_LOG must be one of {', '.join(LOG_LEVELS)}, got {level_name!r}")
    root = logging.getLogger("cbmshift")
    root.setLevel(level)
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on usage errors
    try:
        _setup_logging()
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FormatError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
