#!/usr/bin/env python3
"""
Точка входа.

Запуск:
    python -m rffi.main experiment --config config.yaml --seed 1
    python -m rffi.main simulate --env indoor --split train --count 100 -o out/captures
    python -m rffi.main extract -i out/captures -o out/train.rfff --feature quotient
    python -m rffi.main train --train out/train.rfff --mode scratch -o out/model.rffm
    python -m rffi.main report -i out/report.json --format csv
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from rffi.attacks import (
    AttackScenario,
    LabeledFeatureSet,
    LabeledItem,
    contaminate_enrollment,
    impersonation_testset,
    load_feature_set,
    save_feature_set,
)
from rffi.classifier import TrainedModel, build, forward, load, save, train_scratch, transfer, write_history_csv
from rffi.config import FEATURE_KINDS, TRAIN_MODES, ExperimentConfig, load_config
from rffi.detection import detect, load_detector, posterior_difference, true_positive_margin
from rffi.errors import EXIT_OK, EXIT_UNEXPECTED, DataError, RffiError, exit_code_for
from rffi.feature import FeatureExtractor, band_rows, corpus_clip_range, rasterize
from rffi.harness import (
    SCENARIOS,
    Report,
    arch_for,
    build_population,
    capture_seed,
    check_split_hygiene,
    derive_seed,
    hyper_for,
    measure_rho_ref,
    run_experiment,
)
from rffi.logger import log_scenario, setup_logger
from rffi.metrics import posterior_accuracy
from rffi.signal_sim import CaptureJob, load_captures, save_captures, synthesize_batch

logger = logging.getLogger("rffi")


def build_parser() -> argparse.ArgumentParser:
    """CLI-аргументы. Флаги имеют приоритет над конфигом."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=str, default=None, help="Path to YAML config file")
    common.add_argument("--seed", type=int, default=None, help="Override experiment seed")
    common.add_argument("-o", "--output", type=str, default=None, help="Output file or directory")
    common.add_argument("--workers", type=int, default=None, help="Capture synthesis threads")
    common.add_argument(
        "--log-level",
        type=str,
        default=None,
        choices=["debug", "info", "warning", "error"],
        help="Logging level",
    )

    parser = argparse.ArgumentParser(
        description="RF fingerprint identification testbed",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Synthesize capture pairs")
    p.add_argument("--env", type=str, default=None, help="Channel environment (default: deployment env)")
    p.add_argument("--split", type=str, default="train", choices=["train", "test"])
    p.add_argument("--count", type=int, default=None, help="Pairs per device")
    p.add_argument("--rogue", action="store_true", help="Synthesize rogue devices instead of legitimate")

    p = sub.add_parser("extract", parents=[common], help="Capture pairs -> feature set")
    p.add_argument("-i", "--input", type=str, required=True, help="Capture directory")
    p.add_argument("--feature", type=str, default="quotient", choices=list(FEATURE_KINDS))
    p.add_argument("--split", type=str, default="train", choices=["train", "test"])
    p.add_argument("--clip", type=float, nargs=2, default=None, metavar=("LO", "HI"),
                   help="Frozen clip range (default: percentiles of the input)")

    p = sub.add_parser("train", parents=[common], help="Train a classifier")
    p.add_argument("--train", type=str, required=True, help="Training feature set")
    p.add_argument("--test", type=str, default=None, help="Optional held-out feature set")
    p.add_argument("--mode", type=str, default="scratch", choices=list(TRAIN_MODES))
    p.add_argument("--base", type=str, default=None, help="Base model for transfer")
    p.add_argument("--history", type=str, default=None, help="Training log CSV")

    p = sub.add_parser("attack", parents=[common], help="Apply an attack scenario to a feature set")
    p.add_argument("--scenario", type=str, required=True, help="Scenario JSON file")
    p.add_argument("-i", "--input", type=str, required=True, help="Legitimate feature set")
    p.add_argument("--rogue-set", type=str, required=True, help="Rogue feature set")

    p = sub.add_parser("detect", parents=[common], help="Posterior difference check of an enrollment")
    p.add_argument("--base", type=str, required=True, help="Base model")
    p.add_argument("--train", type=str, required=True, help="Enrollment feature set")
    p.add_argument("--test", type=str, required=True, help="Held-out feature set")
    p.add_argument("--detector", type=str, default=None, help="Fitted one-class detector")

    p = sub.add_parser("experiment", parents=[common], help="Run scenario experiments")
    p.add_argument("--scenario", type=str, default="all", choices=["all"] + list(SCENARIOS))

    p = sub.add_parser("report", parents=[common], help="Render a saved report")
    p.add_argument("-i", "--input", type=str, required=True, help="report.json")
    p.add_argument("--format", type=str, default="text", choices=["text", "csv", "json"])
    return parser


def load_effective_config(args: argparse.Namespace) -> ExperimentConfig:
    """Конфиг из файла (или дефолтный) + флаги поверх."""
    cfg = load_config(args.config)
    output = args.output if args.command == "experiment" else None
    return cfg.with_overrides(seed=args.seed, output_dir=output, workers=args.workers, log_level=args.log_level)


def _output(args: argparse.Namespace, default: Path) -> Path:
    path = Path(args.output) if args.output else default
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_simulate(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    seed = cfg.seeds[0]
    env = args.env or cfg.samples.deployment_env
    count = args.count or cfg.samples.test_per_device
    population = build_population(cfg, seed)
    devices = population.rogue if args.rogue else population.legit
    jobs = [
        CaptureJob(dev, env, capture_seed(seed, population.index_of(dev), env, args.split, i))
        for dev in devices
        for i in range(count)
    ]
    with log_scenario(logger, f"simulate/{env}/{args.split}") as log:
        pairs = synthesize_batch(jobs, cfg.lora, cfg.environments, cfg.limits.workers)
        directory = Path(args.output or Path(cfg.output_dir) / f"captures-{env}-{args.split}")
        save_captures(pairs, directory, extra={"split": args.split, "experiment_seed": seed})
        log.summary = f"{len(pairs)} pairs -> {directory}"


def cmd_extract(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    seed = cfg.seeds[0]
    pairs = load_captures(Path(args.input))
    rho_ref = cfg.feature.rho_ref
    if rho_ref is None:
        rho_ref = measure_rho_ref(cfg, build_population(cfg, seed).legit, seed)
    rows = band_rows(cfg.stft, cfg.lora.bandwidth, cfg.lora.sample_rate) if cfg.feature.crop_to_band else None
    extractor = FeatureExtractor(cfg.stft, rho_ref, cfg.feature.theta, cfg.feature.epsilon, rows)

    index = 0 if args.feature == "quotient" else 1
    accepted = []
    with log_scenario(logger, f"extract/{args.feature}") as log:
        for pair in pairs:
            mats = extractor.matrices(pair)
            if mats is not None:
                accepted.append((pair, mats[index]))
        if not accepted:
            raise DataError(f"no capture pair in {args.input} passed the correlation filter")
        clip = tuple(args.clip) if args.clip else corpus_clip_range(
            [m for _, m in accepted], cfg.feature.clip_percentiles
        )
        fc = cfg.feature
        items = tuple(
            LabeledItem(
                image=rasterize(m, fc.image_size, fc.depth, clip, source=args.feature),
                claimed=pair.claimed_id,
                true=pair.device_id,
                capture_seed=pair.capture_seed,
                env=str(pair.channel_meta.get("env", "")),
            )
            for pair, m in accepted
        )
        out = _output(args, Path(cfg.output_dir) / f"{args.feature}-{args.split}.rfff")
        save_feature_set(LabeledFeatureSet(items, args.split), out, extra={"clip_range": list(clip)})
        log.summary = f"{len(items)} accepted, {extractor.rejected} rejected, clip={clip} -> {out}"


def cmd_train(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    seed = derive_seed(cfg.seeds[0], "cli-train", args.mode)
    train = load_feature_set(Path(args.train))
    if not len(train):
        raise DataError(f"{args.train} is empty")
    test = load_feature_set(Path(args.test)) if args.test else None
    if test is not None:
        check_split_hygiene(train, test)

    with log_scenario(logger, f"train/{args.mode}") as log:
        labels = sorted(set(train.claimed_labels))
        if args.mode == "scratch":
            arch = replace(arch_for(cfg, len(labels)), input_size=train.items[0].image.size)
            model = train_scratch(build(arch, seed, labels), train, hyper_for(cfg, "scratch", seed))
        else:
            if not args.base:
                raise DataError("transfer mode needs --base")
            model = transfer(load(Path(args.base)), train, hyper_for(cfg, "transfer", seed), class_labels=labels)
        out = _output(args, Path(cfg.output_dir) / f"model-{args.mode}.rffm")
        save(model, out)
        if args.history:
            write_history_csv(model.history, Path(args.history))
        log.summary = f"{len(model.history)} epochs -> {out}"
        if test is not None:
            images, _ = test.as_arrays()
            acc = posterior_accuracy(forward(model, images, test.observation_ids()), test.true_labels)
            log.summary += f" test_accuracy={acc:.4f}"
            print(json.dumps({"test_accuracy": acc}, sort_keys=True))


def cmd_attack(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    sc = AttackScenario.from_file(Path(args.scenario))
    legit = load_feature_set(Path(args.input))
    rogue = load_feature_set(Path(args.rogue_set))
    sc.validate(set(legit.true_labels), set(rogue.true_labels))
    with log_scenario(logger, sc.scenario_id) as log:
        if sc.kind == "impersonation":
            result = impersonation_testset(legit, rogue, sc, cfg.attack.rogue_only)
        else:
            result = contaminate_enrollment(legit, rogue.by_true(sc.rogue), sc)
        out = _output(args, Path(cfg.output_dir) / f"{sc.scenario_id}.rfff")
        save_feature_set(result, out, extra={"scenario": json.loads(sc.to_json())})
        log.summary = f"{len(result)} items -> {out}"


def cmd_detect(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    """Один enrollment: M_diff, margins и (если есть детектор) вердикт."""
    seed = derive_seed(cfg.seeds[0], "cli-detect")
    base: TrainedModel = load(Path(args.base))
    train = load_feature_set(Path(args.train))
    test = load_feature_set(Path(args.test))
    check_split_hygiene(train, test)
    labels = list(base.class_labels)

    with log_scenario(logger, "detect") as log:
        t_model = transfer(base, train, hyper_for(cfg, "transfer", seed), class_labels=labels)
        d_model = train_scratch(build(base.arch, seed, labels), train, hyper_for(cfg, "scratch", seed))
        images, _ = test.as_arrays()
        ids = test.observation_ids()
        d = posterior_difference(forward(t_model, images, ids), forward(d_model, images, ids))
        result = {"margins": true_positive_margin(d, test.true_labels)}
        if args.detector:
            flag, score = detect(load_detector(Path(args.detector)), d)
            result.update({"flag": flag, "score": score})
            log.summary = f"flag={flag} score={score:.4f}"
        text = json.dumps(result, sort_keys=True, indent=2)
        if args.output:
            _output(args, Path(args.output)).write_text(text + "\n")
        else:
            print(text)


def cmd_experiment(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    scenarios = list(SCENARIOS) if args.scenario == "all" else [args.scenario]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with log_scenario(logger, f"experiment/{args.scenario}") as log:
        report = run_experiment(cfg, scenarios, artifacts=out / "artifacts")
        (out / "report.json").write_text(report.to_json())
        (out / "report.csv").write_text(report.to_csv())
        (out / "report.txt").write_text(report.to_text())
        failed = sorted(name for name, ok in report.checks.items() if not ok)
        log.summary = f"{len(report.rows)} rows, failed checks: {failed or 'none'}"
    runtime = {"seconds": round(time.perf_counter() - start, 3), "scenarios": scenarios}
    (out / "runtime.json").write_text(json.dumps(runtime, sort_keys=True) + "\n")


def cmd_report(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    try:
        text = Path(args.input).read_text()
    except OSError as e:
        raise DataError(f"cannot read report {args.input}: {e}") from e
    report = Report.from_json(text)
    render = {"text": report.to_text, "csv": report.to_csv, "json": report.to_json}[args.format]
    sys.stdout.write(render())


COMMANDS = {
    "simulate": cmd_simulate,
    "extract": cmd_extract,
    "train": cmd_train,
    "attack": cmd_attack,
    "detect": cmd_detect,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Код выхода: 0 ок, 2 usage (argparse), 3 config, 4 data, 5 metric, 1 прочее."""
    args = build_parser().parse_args(argv)
    setup_logger(args.log_level or "info")
    try:
        cfg = load_effective_config(args)
        setup_logger(cfg.log_level)
        logger.debug(f"Config loaded: {cfg.to_dict()}")
        COMMANDS[args.command](args, cfg)
    except RffiError as e:
        logger.error(str(e))
        return exit_code_for(e)
    except Exception:
        logger.exception("unexpected failure")
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
