"""Experiment configuration: JSON-schema validation and resolution of defaults."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigError, TFGuideError
from .guidance import GuidanceConfig
from .losses import GuidanceLoss, loss_from_dict
from .oracles import MixtureModel
from .schedule import NoiseSchedule, make_schedule

SCHEMA_FILES = {
    "config": "experiment_config.schema.json",
    "claim": "claim_report.schema.json",
    "comparison": "comparison_report.schema.json",
    "fig3": "fig3_report.schema.json",
}


def load_schema(name: str) -> dict:
    text = resources.files("tfguide").joinpath("schemas", SCHEMA_FILES[name]).read_text()
    return json.loads(text)


def validate(doc: dict, name: str) -> None:
    """Raise :class:`ConfigError` when ``doc`` violates the named shipped schema."""
    try:
        jsonschema.validate(doc, load_schema(name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{name} document invalid at {where}: {exc.message}") from None


@dataclass
class ExperimentConfig:
    name: str
    model: object
    schedule: NoiseSchedule
    steps: int
    loss: GuidanceLoss | None
    guidance: list
    seed_count: int
    master_seed: int
    out_dir: str | None
    formats: tuple
    raw: dict = field(default_factory=dict)

    @property
    def is_motion(self) -> bool:
        return not isinstance(self.model, MixtureModel)

    def resolved(self) -> dict:
        """The configuration with every default made explicit."""
        return {
            "name": self.name,
            "model": self.model.to_dict(),
            "schedule": {"kind": self.schedule.kind, "T": self.schedule.T, "steps": self.steps},
            "loss": self.loss.to_dict() if self.loss is not None else None,
            "guidance": [g.to_dict() if g is not None else None for g in self.guidance],
            "seeds": {"count": self.seed_count, "master": self.master_seed},
            "outputs": {"directory": self.out_dir, "formats": list(self.formats)},
        }


def parse_config(doc: dict) -> ExperimentConfig:
    validate(doc, "config")
    try:
        mspec = doc["model"]
        if mspec.get("kind") == "trajectory":
            from .motion import TrajectoryPrior

            model = TrajectoryPrior.from_dict(mspec)
        else:
            model = MixtureModel.from_dict(mspec)
        sspec = doc.get("schedule", {})
        schedule = make_schedule(sspec.get("kind", "linear-beta"), sspec.get("T", 1000))
        steps = int(sspec.get("steps", 100))
        if steps > schedule.T:
            raise ConfigError(f"steps ({steps}) exceed schedule length T={schedule.T}")
        loss = loss_from_dict(doc["loss"], model) if "loss" in doc else None
        guidance = [GuidanceConfig.from_dict(g) if g is not None else None
                    for g in doc.get("guidance", [None])]
        if loss is None and any(g is not None for g in guidance):
            raise ConfigError("guided cells need a 'loss'")
        if loss is not None and loss.kind == "motion" and not hasattr(model, "frames"):
            raise ConfigError("the motion loss needs a trajectory model")
        outputs = doc.get("outputs", {})
        seeds = doc["seeds"]
        return ExperimentConfig(
            name=doc.get("name", "experiment"), model=model, schedule=schedule, steps=steps,
            loss=loss, guidance=guidance, seed_count=int(seeds["count"]),
            master_seed=int(seeds.get("master", 0)), out_dir=outputs.get("directory"),
            formats=tuple(outputs.get("formats", ("csv", "json", "svg"))), raw=doc)
    except TFGuideError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return parse_config(doc)
