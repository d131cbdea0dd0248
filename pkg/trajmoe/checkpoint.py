"""Scorer checkpoints.

A checkpoint is one JSON document: a header (architecture, metric names,
seed, stage tag, shape manifest) and one base64 blob of little-endian
float64 values per named parameter.
"""
import base64
import json
import logging

import numpy as np

from trajmoe.checks import check_stage
from trajmoe.model import MoEScorerParams, ScorerConfig

logger = logging.getLogger(__name__)

FORMAT = "trajmoe-checkpoint"
VERSION = 1
STAGES = ["sup", "grpo"]


class Checkpoint:
    """Parameters plus provenance.

    Args:
        params (MoEScorerParams): Scorer parameters.
        stage (str): "sup" or "grpo".
        seed (int, optional): Initialisation seed. Defaults to None.
        extra (dict, optional): JSON-serialisable run metadata. Defaults to None.
    """

    def __init__(self, params: MoEScorerParams, stage: str, seed=None, extra=None):
        if stage not in STAGES:
            raise ValueError("Stage %s is not valid. Pick one among %s" % (stage, STAGES))
        self.params = params
        self.stage = stage
        self.seed = seed
        self.extra = dict(extra or {})

    @property
    def config(self) -> ScorerConfig:
        return self.params.config

    @property
    def metric_names(self):
        return self.params.config.metric_names

    def to_json(self):
        arrays = self.params.arrays
        header = {
            "format": FORMAT,
            "version": VERSION,
            "config": self.config.to_dict(),
            "metric_names": self.metric_names,
            "seed": self.seed,
            "stage": self.stage,
            "extra": self.extra,
            "shapes": {name: list(value.shape) for name, value in arrays.items()},
        }
        header["params"] = {
            name: base64.b64encode(np.ascontiguousarray(value, dtype="<f8").tobytes()).decode("ascii")
            for name, value in arrays.items()
        }
        return json.dumps(header, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as error:
            raise ValueError("Checkpoint is not valid JSON: %s" % error)
        if payload.get("format") != FORMAT or payload.get("version") != VERSION:
            raise ValueError(
                "Unsupported checkpoint format %s v%s"
                % (payload.get("format"), payload.get("version"))
            )
        config = ScorerConfig.from_dict(payload["config"])
        if payload["metric_names"] != config.metric_names:
            raise ValueError("Metric names in header disagree with the architecture.")
        manifest = MoEScorerParams.shapes(config)
        shapes = {name: tuple(shape) for name, shape in payload["shapes"].items()}
        if shapes != manifest:
            bad = sorted(set(shapes.items()) ^ set(manifest.items()))
            raise ValueError("Shape manifest does not match the architecture: %s" % bad[:5])
        arrays = {}
        for name, shape in manifest.items():
            raw = base64.b64decode(payload["params"][name])
            expected = int(np.prod(shape)) * 8
            if len(raw) != expected:
                raise ValueError(
                    "Parameter %s holds %s bytes, manifest requires %s" % (name, len(raw), expected)
                )
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        return cls(
            MoEScorerParams(config, arrays),
            payload["stage"],
            payload.get("seed"),
            payload.get("extra"),
        )


def save_checkpoint(path, checkpoint: Checkpoint):
    with open(path, "w") as f:
        f.write(checkpoint.to_json())
    logger.info("Checkpoint (stage %s) saved to %s", checkpoint.stage, path)


def load_checkpoint(path, stage: str = None) -> Checkpoint:
    """Reads a checkpoint; with ``stage`` the stage tag must match."""
    with open(path) as f:
        checkpoint = Checkpoint.from_json(f.read())
    if stage is not None:
        check_stage(checkpoint.stage, stage)
    logger.debug("Loaded %s checkpoint from %s", checkpoint.stage, path)
    return checkpoint
