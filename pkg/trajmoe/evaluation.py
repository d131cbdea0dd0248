"""Evaluation on a seeded scenario suite.

Every policy picks one plan per scenario; the report gives the mean oracle
sub-scores and aggregate of those plans. Rows: the evaluated model (or
ensemble), a seeded random-anchor baseline, and the best anchor by oracle
aggregate as an upper bound.
"""
import logging

import numpy as np
from pandas import DataFrame

from trajmoe.checks import check_seed
from trajmoe.csv_table import CsvTable
from trajmoe.ensemble import ensemble_plan
from trajmoe.model import score_vocabulary, select_trajectory
from trajmoe.world import METRIC_NAMES, oracle_scores

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["policy", "rows"] + METRIC_NAMES + ["aggregate", "mean_abs_err"]


def _record(policy, labels, aggregate, mean_abs_err=np.nan):
    record = {"policy": policy, "aggregate": float(aggregate), "mean_abs_err": float(mean_abs_err)}
    record.update(zip(METRIC_NAMES, (float(v) for v in labels)))
    return record


def _baselines(scene, random_state):
    records = []
    choice = int(random_state.randint(len(scene.aggregates)))
    records.append(_record("random", scene.labels[choice], scene.aggregates[choice]))
    best = int(np.argmax(scene.aggregates))
    records.append(_record("oracle_best", scene.labels[best], scene.aggregates[best]))
    return records


def model_records(params, vocabulary, scenes, seed):
    """Per-scenario records of the model and the baselines."""
    random_state = check_seed(seed)
    records = []
    for scene in scenes:
        mu = score_vocabulary(scene.features, vocabulary, params).mu.value
        choice = select_trajectory(mu, metric_names=params.config.metric_names)
        error = float(np.mean(np.abs(0.5 * (1.0 + np.tanh(0.5 * mu)) - scene.targets)))
        records.append(_record("model", scene.labels[choice], scene.aggregates[choice], error))
        records.extend(_baselines(scene, random_state))
    return records


def ensemble_records(spec, vocabulary, scenes, checkpoints, seed):
    """Per-scenario records of the ensemble plan and the baselines."""
    random_state = check_seed(seed)
    records = []
    for scene in scenes:
        plan, _ = ensemble_plan(scene.scenario, spec, vocabulary, checkpoints)
        metrics = oracle_scores(scene.scenario.to_world(plan), scene.scenario)
        records.append(_record("ensemble", metrics.as_array(), metrics.aggregate))
        records.extend(_baselines(scene, random_state))
    return records


def summarize(records):
    """Mean per policy, in first-seen policy order."""
    frame = DataFrame(records)
    grouped = frame.groupby("policy", sort=False)
    summary = grouped[METRIC_NAMES + ["aggregate", "mean_abs_err"]].mean()
    summary.insert(0, "rows", grouped.size())
    return summary.reset_index()[REPORT_COLUMNS]


def write_report(summary, path):
    """Writes ``<path>.csv`` and a fixed-width ``<path>.txt``."""
    table = CsvTable(REPORT_COLUMNS, float_format="%.6f")
    for row in summary.to_dict("records"):
        if np.isnan(row["mean_abs_err"]):
            row["mean_abs_err"] = None
        table.add_row(row)
    table.write_to_file("%s.csv" % path)
    text = summary.to_string(index=False, float_format=lambda v: "%.4f" % v, na_rep="")
    with open("%s.txt" % path, "w") as f:
        f.write(text)
        f.write("\n")
    logger.info("\n%s", text)
    return table
