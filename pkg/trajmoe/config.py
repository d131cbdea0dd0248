"""Run configuration: built-in defaults, a YAML file, environment and flags."""
import logging
import os
from copy import deepcopy

import yaml

from trajmoe.grpo import GrpoConfig
from trajmoe.model import ScorerConfig

logger = logging.getLogger(__name__)

SEED_VARIABLE = "TRAJMOE_SEED"

DEFAULTS = {
    "run": {"seed": 0},
    "world": {"train_seed": 0, "train_count": 200, "eval_seed": 10000, "eval_count": 100},
    "vocab": {"k": 256, "iters": 30, "count": 4096, "seed": 7, "restarts": 10},
    "model": {
        "blocks": 2,
        "dim": 64,
        "experts": 4,
        "top_k": 2,
        "heads": 4,
        "expert_hidden": 128,
        "ffn": "moe",
        "moe_blocks": "all",
        "w_bal": 0.01,
        "sigma_min": 0.01,
    },
    "train": {"epochs": 10, "lr": 1e-3, "batch": 8, "holdout": 0.2},
    "grpo": {
        "group_size": 16,
        "clip": 0.2,
        "kl_coeff": 0.01,
        "loss_kl_coeff": 0.01,
        "iterations": 200,
        "lr": 1e-2,
        "batch": 32,
        "advantage_mode": "per_sample",
        "max_grad_norm": 1.0,
        "updates_per_iteration": 1,
    },
    "eval": {"seed": 20000, "count": 0},
}


class ConfigError(ValueError):
    """Every problem found in a configuration, reported together."""

    def __init__(self, errors):
        self.errors = list(errors)
        super(ConfigError, self).__init__(
            "Invalid configuration:\n  " + "\n  ".join(self.errors)
        )


def _coerce(default, raw):
    if isinstance(default, bool):
        lowered = str(raw).strip().lower()
        if lowered not in ["true", "false", "1", "0", "yes", "no"]:
            raise ValueError("expected a boolean")
        return lowered in ["true", "1", "yes"]
    if isinstance(default, int):
        return int(str(raw).strip())
    if isinstance(default, float):
        return float(str(raw).strip())
    return str(raw).strip()


class RunConfig:
    """Resolved configuration of one command.

    Args:
        values (dict, optional): section -> key -> value on top of the defaults.
    """

    def __init__(self, values=None):
        self.values = deepcopy(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: dict, origin: str = "overrides"):
        """Applies section -> key -> raw value; all bad entries raise one ConfigError."""
        errors = []
        for section, entries in values.items():
            if section not in DEFAULTS:
                errors.append("%s: unknown section [%s]" % (origin, section))
                continue
            for key, raw in entries.items():
                if key not in DEFAULTS[section]:
                    errors.append("%s: unknown key %s.%s" % (origin, section, key))
                    continue
                try:
                    self.values[section][key] = _coerce(DEFAULTS[section][key], raw)
                except ValueError:
                    errors.append(
                        "%s: %s.%s=%r is not a valid %s"
                        % (origin, section, key, raw, type(DEFAULTS[section][key]).__name__)
                    )
        if errors:
            raise ConfigError(errors)
        return self

    @classmethod
    def from_file(cls, path):
        """Reads a YAML mapping of section -> key -> value."""
        with open(path) as f:
            try:
                values = yaml.safe_load(f)
            except yaml.YAMLError as error:
                raise ConfigError(["%s: %s" % (path, error)])
        if values is None:
            values = {}
        if not isinstance(values, dict):
            raise ConfigError(["%s: expected a mapping of sections, got %s" % (path, type(values).__name__)])
        errors = [
            "%s: section %s must be a mapping of key: value" % (path, section)
            for section, entries in values.items()
            if not isinstance(entries, dict)
        ]
        if errors:
            raise ConfigError(errors)
        return cls().update(values, str(path))

    @classmethod
    def resolve(cls, path=None, flags=None, environ=None):
        """defaults < file < TRAJMOE_SEED < flags.

        Args:
            path (str, optional): Config file.
            flags (dict, optional): "section.key" -> raw value; None values are skipped.
            environ (dict, optional): Environment. Defaults to os.environ.
        """
        config = cls.from_file(path) if path else cls()
        environ = os.environ if environ is None else environ
        if environ.get(SEED_VARIABLE):
            config.update({"run": {"seed": environ[SEED_VARIABLE]}}, SEED_VARIABLE)
        overrides = {}
        errors = []
        for dotted, raw in (flags or {}).items():
            if raw is None:
                continue
            if "." not in dotted:
                errors.append("flags: %s is not of the form section.key" % dotted)
                continue
            section, key = dotted.split(".", 1)
            overrides.setdefault(section, {})[key] = raw
        if errors:
            raise ConfigError(errors)
        return config.update(overrides, "flags")

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def to_text(self):
        """YAML text, sections and keys sorted."""
        return yaml.safe_dump(self.values, sort_keys=True, default_flow_style=False)

    def write_resolved(self, output_path):
        """Writes ``<output>.resolved.yaml`` next to a primary output."""
        path = "%s.resolved.yaml" % output_path
        with open(path, "w") as f:
            f.write(self.to_text())
        logger.debug("resolved configuration written to %s", path)
        return path

    def moe_blocks(self):
        raw = self.values["model"]["moe_blocks"]
        if raw == "all":
            return None
        if raw in ["", "none"]:
            return []
        try:
            return [int(part) for part in raw.split(",")]
        except ValueError:
            raise ConfigError(["model.moe_blocks=%r must be 'all', 'none' or a comma list" % raw])

    def scorer_config(self, horizon: int = 8) -> ScorerConfig:
        model = self.values["model"]
        return ScorerConfig(
            horizon=horizon,
            dim=model["dim"],
            blocks=model["blocks"],
            experts=model["experts"],
            top_k=model["top_k"],
            heads=model["heads"],
            expert_hidden=model["expert_hidden"],
            ffn=model["ffn"],
            moe_blocks=self.moe_blocks(),
            sigma_min=model["sigma_min"],
        )

    def grpo_config(self) -> GrpoConfig:
        grpo = self.values["grpo"]
        return GrpoConfig(
            group_size=grpo["group_size"],
            clip=grpo["clip"],
            kl_coeff=grpo["kl_coeff"],
            loss_kl_coeff=grpo["loss_kl_coeff"],
            sigma_min=self.values["model"]["sigma_min"],
            iterations=grpo["iterations"],
            lr=grpo["lr"],
            seed=self.values["run"]["seed"],
            advantage_mode=grpo["advantage_mode"],
            batch=grpo["batch"],
            max_grad_norm=grpo["max_grad_norm"],
            updates_per_iteration=grpo["updates_per_iteration"],
        )
