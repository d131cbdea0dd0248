"""Command-line pipeline: data, vocabulary, training, fine-tuning, evaluation."""
import argparse
import json
import logging
import sys

from trajmoe import numerics as nx
from trajmoe.checks import check_horizon
from trajmoe.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from trajmoe.config import RunConfig
from trajmoe.csv_table import CsvTable
from trajmoe.ensemble import EnsembleSpec, check_hull, ensemble_plan, load_members
from trajmoe.evaluation import ensemble_records, model_records, summarize, write_report
from trajmoe.grpo import LOG_COLUMNS as GRPO_LOG_COLUMNS, finetune
from trajmoe.model import MoEScorerParams, score_vocabulary, supervised_objective
from trajmoe.training import SupervisedTrainer, prepare_scenes
from trajmoe.vocab import TrajectoryVocabulary, build_vocabulary, sample_trajectories
from trajmoe.world import (
    family_histogram,
    generate_scenario,
    generate_scenarios,
    label_array,
    read_scenarios,
    scene_features,
    write_scenarios,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_DIVERGENCE = 3


def _add_config(parser):
    parser.add_argument(
        "--config", "-c", type=str, default=None, dest="CONFIG", help="Run configuration (YAML)."
    )


def _parser():
    parser = argparse.ArgumentParser(prog="trajmoe", description="Trajectory scoring planner.")
    parser.add_argument(
        "--verbose", "-v", action="store_true", dest="VERBOSE", help="Log at DEBUG level."
    )
    commands = parser.add_subparsers(dest="COMMAND", metavar="command")
    commands.required = True

    gen = commands.add_parser("gen-data", help="Generate a seeded scenario dataset.")
    _add_config(gen)
    gen.add_argument("--seed", type=int, default=None, dest="SEED", help="First scenario seed. Default: world.train_seed")
    gen.add_argument("--count", type=int, default=None, dest="COUNT", help="Number of scenarios. Default: world.train_count")
    gen.add_argument("--out", type=str, required=True, dest="OUT", help="JSON-lines output.")

    vocab = commands.add_parser("build-vocab", help="Cluster sampled trajectories into anchors.")
    _add_config(vocab)
    vocab.add_argument("--k", type=int, default=None, dest="K", help="Number of anchors. Default: vocab.k")
    vocab.add_argument("--seed", type=int, default=None, dest="SEED", help="Default: vocab.seed")
    vocab.add_argument("--out", type=str, required=True, dest="OUT", help="Vocabulary JSON.")

    train = commands.add_parser("train", help="Supervised training; writes a 'sup' checkpoint.")
    _add_config(train)
    train.add_argument("--data", type=str, required=True, dest="DATA", help="Scenario dataset.")
    train.add_argument("--vocab", type=str, required=True, dest="VOCAB", help="Vocabulary JSON.")
    train.add_argument("--epochs", type=int, default=None, dest="EPOCHS", help="Default: train.epochs")
    train.add_argument("--seed", type=int, default=None, dest="SEED", help="Default: run.seed")
    train.add_argument("--out", type=str, required=True, dest="OUT", help="Checkpoint path.")

    grpo = commands.add_parser("grpo-finetune", help="GRPO fine-tuning of the score heads.")
    _add_config(grpo)
    grpo.add_argument("--checkpoint", type=str, required=True, dest="CHECKPOINT", help="Stage 'sup' checkpoint.")
    grpo.add_argument("--data", type=str, required=True, dest="DATA", help="Scenario dataset.")
    grpo.add_argument("--vocab", type=str, default=None, dest="VOCAB", help="Default: the checkpoint's vocabulary.")
    grpo.add_argument("--iterations", type=int, default=None, dest="ITERATIONS", help="Default: grpo.iterations")
    grpo.add_argument("--out", type=str, required=True, dest="OUT", help="Checkpoint path.")

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint or an ensemble.")
    _add_config(evaluate)
    source = evaluate.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", type=str, dest="CHECKPOINT")
    source.add_argument("--ensemble", type=str, dest="ENSEMBLE", help="Ensemble spec JSON.")
    evaluate.add_argument("--data", type=str, required=True, dest="DATA", help="Scenario dataset.")
    evaluate.add_argument("--vocab", type=str, default=None, dest="VOCAB", help="Default: the checkpoint's vocabulary.")
    evaluate.add_argument("--seed", type=int, default=None, dest="SEED", help="Baseline seed. Default: eval.seed")
    evaluate.add_argument("--count", type=int, default=None, dest="COUNT", help="Scenarios used, 0 = all. Default: eval.count")
    evaluate.add_argument("--report", type=str, required=True, dest="REPORT", help="Writes REPORT.csv and REPORT.txt.")

    ensemble = commands.add_parser("ensemble", help="Plan every scenario with an ensemble.")
    _add_config(ensemble)
    ensemble.add_argument("--spec", type=str, required=True, dest="SPEC", help="Ensemble spec JSON.")
    ensemble.add_argument("--data", type=str, required=True, dest="DATA", help="Scenario dataset.")
    ensemble.add_argument("--vocab", type=str, default=None, dest="VOCAB", help="Default: the first member's vocabulary.")
    ensemble.add_argument("--check-hull", action="store_true", dest="CHECK_HULL", help="Verify plans lie in the member hull.")
    ensemble.add_argument("--out", type=str, required=True, dest="OUT", help="JSON-lines plans.")

    gradcheck = commands.add_parser("gradcheck", help="Finite-difference check of the scorer gradients.")
    _add_config(gradcheck)
    gradcheck.add_argument("--seed", type=int, default=None, dest="SEED", help="Scenario and init seed. Default: run.seed")
    gradcheck.add_argument("--k", type=int, default=4, dest="K", help="Anchors. Default: 4")
    gradcheck.add_argument("--sample", type=int, default=3, dest="SAMPLE", help="Entries per parameter, 0 = all. Default: 3")
    gradcheck.add_argument("--tol", type=float, default=1e-4, dest="TOL", help="Relative tolerance. Default: 1e-4")
    return parser


def _vocabulary(path, checkpoint=None):
    if path is not None:
        return TrajectoryVocabulary.load(path)
    if checkpoint is None or "vocabulary" not in checkpoint.extra:
        raise ValueError("No vocabulary given and the checkpoint does not carry one.")
    return TrajectoryVocabulary.from_json(json.dumps(checkpoint.extra["vocabulary"]))


def _select(scenarios, count):
    return scenarios if not count else scenarios[:count]


def gen_data(args, config):
    seed = config.get("world", "train_seed") if args.SEED is None else args.SEED
    count = config.get("world", "train_count") if args.COUNT is None else args.COUNT
    if count < 0:
        raise ValueError("--count must be >= 0, got %s." % count)
    scenarios = generate_scenarios(seed, count)
    write_scenarios(args.OUT, scenarios)
    config.write_resolved(args.OUT)
    histogram = family_histogram(scenarios)
    print(" ".join("%s=%s" % item for item in histogram.items()))
    logger.info("%s scenarios written to %s", count, args.OUT)


def build_vocab(args, config):
    section = config["vocab"]
    trajectories = sample_trajectories(section["seed"], section["count"])
    vocabulary = build_vocabulary(trajectories, section["k"], section["iters"], section["seed"], section["restarts"])
    vocabulary.save(args.OUT)
    config.write_resolved(args.OUT)
    logger.info("vocabulary of %s anchors, inertia %.6f, written to %s", vocabulary.k, vocabulary.source["inertia"], args.OUT)


def train(args, config):
    scenarios = read_scenarios(args.DATA)
    vocabulary = TrajectoryVocabulary.load(args.VOCAB)
    if not scenarios:
        raise ValueError("Dataset %s holds no scenarios." % args.DATA)
    check_horizon(scenarios[0].horizon, vocabulary.horizon, "vocabulary")
    seed = config.get("run", "seed")
    params = MoEScorerParams.init(config.scorer_config(scenarios[0].horizon), seed)
    trainer = SupervisedTrainer(
        params,
        vocabulary,
        scenarios,
        w_bal=config.get("model", "w_bal"),
        epochs=config.get("train", "epochs"),
        lr=config.get("train", "lr"),
        batch=config.get("train", "batch"),
        holdout=config.get("train", "holdout"),
        seed=seed,
    )
    params = trainer.run()
    extra = {"vocabulary": json.loads(vocabulary.to_json()), "w_bal": config.get("model", "w_bal")}
    save_checkpoint(args.OUT, Checkpoint(params, "sup", seed, extra))
    trainer.log.write_to_file("%s.log.csv" % args.OUT)
    config.write_resolved(args.OUT)


def grpo_finetune(args, config):
    checkpoint = load_checkpoint(args.CHECKPOINT, stage="sup")
    vocabulary = _vocabulary(args.VOCAB, checkpoint)
    scenes = prepare_scenes(read_scenarios(args.DATA), vocabulary, checkpoint.metric_names)
    log = CsvTable(GRPO_LOG_COLUMNS)
    tuned = finetune(checkpoint, vocabulary, scenes, config.grpo_config(), log)
    save_checkpoint(args.OUT, tuned)
    log.write_to_file("%s.log.csv" % args.OUT)
    config.write_resolved(args.OUT)


def evaluate(args, config):
    seed = config.get("eval", "seed")
    count = config.get("eval", "count")
    if args.CHECKPOINT:
        checkpoint = load_checkpoint(args.CHECKPOINT)
        vocabulary = _vocabulary(args.VOCAB, checkpoint)
        scenes = prepare_scenes(_select(read_scenarios(args.DATA), count), vocabulary, checkpoint.metric_names)
        records = model_records(checkpoint.params, vocabulary, scenes, seed)
    else:
        spec = EnsembleSpec.load(args.ENSEMBLE)
        vocabulary = _vocabulary(args.VOCAB, load_checkpoint(spec.paths[0]) if args.VOCAB is None else None)
        checkpoints = load_members(spec, vocabulary)
        scenes = prepare_scenes(_select(read_scenarios(args.DATA), count), vocabulary)
        records = ensemble_records(spec, vocabulary, scenes, checkpoints, seed)
    if not scenes:
        raise ValueError("Dataset %s holds no scenarios." % args.DATA)
    write_report(summarize(records), args.REPORT)
    config.write_resolved(args.REPORT)


def ensemble(args, config):
    spec = EnsembleSpec.load(args.SPEC)
    vocabulary = _vocabulary(args.VOCAB, load_checkpoint(spec.paths[0]) if args.VOCAB is None else None)
    checkpoints = load_members(spec, vocabulary)
    with open(args.OUT, "w") as f:
        for position, scenario in enumerate(read_scenarios(args.DATA)):
            plan, reports = ensemble_plan(scenario, spec, vocabulary, checkpoints)
            if args.CHECK_HULL:
                outside = check_hull(plan, [vocabulary[r.selected] for r in reports])
                if outside:
                    raise ValueError("Plan of scenario %s leaves the member hull at steps %s." % (position, outside))
            line = {
                "scenario": scenario.seed if scenario.seed is not None else position,
                "plan": plan.poses.tolist(),
                "members": [r.as_dict() for r in reports],
            }
            f.write(json.dumps(line, sort_keys=True))
            f.write("\n")
    config.write_resolved(args.OUT)


def gradcheck(args, config):
    seed = config.get("run", "seed")
    scenario = generate_scenario(seed)
    trajectories = sample_trajectories(seed, max(64, 4 * args.K))
    vocabulary = build_vocabulary(trajectories, args.K, 10, seed)
    params = MoEScorerParams.init(config.scorer_config(scenario.horizon), seed)
    features = scene_features(scenario)
    targets = label_array(vocabulary, scenario)
    routing = score_vocabulary(features, vocabulary, params).routing
    w_bal = config.get("model", "w_bal")
    report = nx.grad_check(
        lambda tensors: supervised_objective(
            tensors, features, vocabulary, params.config, targets, w_bal, routing
        ),
        params.arrays,
        tol=args.TOL,
        sample=args.SAMPLE or None,
        seed=seed,
    )
    print(report)
    for name, error in sorted(report.per_parameter().items()):
        logger.debug("%s: max error %.3e", name, error)
    if not report.passed:
        for entry in report.failures()[:10]:
            logger.error("%s%s: analytic %.6e, numeric %.6e", entry.name, list(entry.index), entry.analytic, entry.numeric)
        raise nx.DivergenceError("Gradient check failed, max error %.3e." % report.max_error)


COMMANDS = {
    "gen-data": (gen_data, {"SEED": "world.train_seed", "COUNT": "world.train_count"}),
    "build-vocab": (build_vocab, {"K": "vocab.k", "SEED": "vocab.seed"}),
    "train": (train, {"EPOCHS": "train.epochs", "SEED": "run.seed"}),
    "grpo-finetune": (grpo_finetune, {"ITERATIONS": "grpo.iterations"}),
    "eval": (evaluate, {"SEED": "eval.seed", "COUNT": "eval.count"}),
    "ensemble": (ensemble, {}),
    "gradcheck": (gradcheck, {"SEED": "run.seed"}),
}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.VERBOSE else logging.INFO,
        stream=sys.stdout,
        format="%(levelname)s %(name)s: %(message)s",
    )
    command, flag_keys = COMMANDS[args.COMMAND]
    try:
        flags = {key: getattr(args, name) for name, key in flag_keys.items()}
        config = RunConfig.resolve(args.CONFIG, flags)
        command(args, config)
    except FloatingPointError as error:
        logger.error("numeric divergence: %s", error)
        return EXIT_DIVERGENCE
    except OSError as error:
        logger.error("I/O failure: %s", error)
        return EXIT_IO
    except (ValueError, TypeError, KeyError) as error:
        logger.error("%s", error)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
