import argparse
from functools import lru_cache
from itertools import product
from logging import INFO, basicConfig, getLogger
from multiprocessing import Pool, cpu_count
from pathlib import Path
from time import time
from typing import List

from trajmoe.csv_table import CsvTable
from trajmoe.evaluation import model_records, summarize
from trajmoe.model import MoEScorerParams, ScorerConfig
from trajmoe.training import SupervisedTrainer, prepare_scenes
from trajmoe.vocab import build_vocabulary, sample_trajectories
from trajmoe.world import generate_scenarios

logger = getLogger("run")

TRAIN_SEED = 0
EVAL_SEED = 10000
VOCAB_SEED = 7
RESULT_COLUMNS = [
    "variant",
    "seed",
    "parameters",
    "train_time",
    "model",
    "random",
    "oracle_best",
    "mean_abs_err",
]


@lru_cache(maxsize=None)
def vocabulary(k: int = 256, count: int = 4096):
    """The shared anchor set of every benchmark run."""
    return build_vocabulary(sample_trajectories(VOCAB_SEED, count), k, 30, VOCAB_SEED)


@lru_cache(maxsize=None)
def eval_scenes(count: int):
    """Held-out scenarios, disjoint from the training seeds."""
    return prepare_scenes(generate_scenarios(EVAL_SEED, count), vocabulary())


@lru_cache(maxsize=None)
def train_variant(variant: str, seed: int, train_count: int = 200, epochs: int = 10):
    """Supervised scorer with ``ffn=variant`` ("moe" or "dense")."""
    params = MoEScorerParams.init(ScorerConfig(ffn=variant), seed)
    trainer = SupervisedTrainer(
        params,
        vocabulary(),
        generate_scenarios(TRAIN_SEED, train_count),
        epochs=epochs,
        seed=seed,
    )
    return trainer.run()


def run_single(variant: str, seed: int, train_count: int = 200, eval_count: int = 200, epochs: int = 10):
    "Trains one variant and scores it, with the baselines, on the held-out suite"
    logger.info("Running %s with seed %s", variant, seed)
    start = time()
    params = train_variant(variant, seed, train_count, epochs)
    train_time = round(time() - start, 2)
    summary = summarize(model_records(params, vocabulary(), eval_scenes(eval_count), seed)).set_index("policy")
    return {
        "variant": variant,
        "seed": seed,
        "parameters": params.num_parameters(),
        "train_time": train_time,
        "model": summary.loc["model", "aggregate"],
        "random": summary.loc["random", "aggregate"],
        "oracle_best": summary.loc["oracle_best", "aggregate"],
        "mean_abs_err": summary.loc["model", "mean_abs_err"],
    }


def _parallel_wrapper(input_tuple):
    return run_single(*input_tuple)


def run(variants: List[str], seeds: List[int], train_count, eval_count, epochs, series=False, cpus=0):
    """Runs every (variant, seed) pair, in series or on a process pool."""
    iterate_over = [(v, s, train_count, eval_count, epochs) for v, s in product(variants, seeds)]
    if series:
        rows = [_parallel_wrapper(item) for item in iterate_over]
    else:
        with Pool(processes=cpus or cpu_count()) as pool:
            rows = pool.map(_parallel_wrapper, iterate_over)
    table = CsvTable(RESULT_COLUMNS, float_format="%.6f")
    for row in rows:
        table.add_row(row)
    return table


def main():
    parser = argparse.ArgumentParser(description="Run planning benchmarks.")
    parser.add_argument(
        "--variants",
        "-v",
        nargs="+",
        dest="VARIANTS",
        default=["moe", "dense"],
        help="Feed-forward variants to train: moe, dense. Default: moe dense",
    )
    parser.add_argument(
        "--seeds",
        "-s",
        nargs="+",
        type=int,
        dest="SEEDS",
        default=[0, 1, 2],
        help="Initialisation seeds. Default: 0 1 2",
    )
    parser.add_argument(
        "--train-count", type=int, default=200, dest="TRAIN_COUNT", help="Training scenarios. Default: 200"
    )
    parser.add_argument(
        "--eval-count", type=int, default=200, dest="EVAL_COUNT", help="Held-out scenarios. Default: 200"
    )
    parser.add_argument("--epochs", "-e", type=int, default=10, dest="EPOCHS", help="Default: 10")
    parser.add_argument(
        "--series", action="store_true", dest="SERIES", help="Run in series instead of in parallel."
    )
    parser.add_argument(
        "--cpu-count", "-cpu", type=int, default=0, dest="CPU_COUNT", help="Number of cpus to use. Default: all."
    )
    parser.add_argument(
        "--output",
        "-o",
        type=str,
        default="benchmarks/results/planning.csv",
        dest="OUTPUT",
        help="Result table. Default: benchmarks/results/planning.csv",
    )
    args = parser.parse_args()
    basicConfig(level=INFO)
    table = run(args.VARIANTS, args.SEEDS, args.TRAIN_COUNT, args.EVAL_COUNT, args.EPOCHS, args.SERIES, args.CPU_COUNT)
    table.write_to_file(Path(args.OUTPUT))
    print(table.get_df().to_string(index=False))


if __name__ == "__main__":
    main()
