"""TOML configuration for the counting pipeline and the simulator.

Keys are grouped by stage (``flow.window``, ``tracker.gate``,
``correct.depth_factor`` ...). Every key is optional; unknown keys are an
error so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .correct import CorrectionConfig
from .flow import FlowConfig
from .ingest import DEFAULT_MIN_AREA
from .localize import LocalizeConfig, MaskingConfig
from .simulate import DropoutGaps, SceneConfig
from .track import KalmanConfig, TrackerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    flow: FlowConfig = field(default_factory=FlowConfig)
    flow_provider: str = "lk"
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)
    correct: CorrectionConfig = field(default_factory=CorrectionConfig)
    min_area: int = DEFAULT_MIN_AREA
    enable_correction: bool = True
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.flow_provider not in ("lk", "truth"):
            raise ConfigError(f"flow.provider must be 'lk' or 'truth', got {self.flow_provider!r}")
        if self.min_area < 1:
            raise ConfigError("pipeline.min_area must be >= 1")

    def describe(self) -> dict:
        """Flat, JSON-friendly view of the effective settings."""
        return {
            "flow.window": self.flow.window,
            "flow.pyramid_levels": self.flow.pyramid_levels,
            "flow.max_iterations": self.flow.max_iterations,
            "flow.epsilon": self.flow.epsilon,
            "flow.provider": self.flow_provider,
            "tracker.q_diag": [float(x) for x in self.kalman.Q.diagonal()],
            "tracker.r_diag": [float(x) for x in self.kalman.R.diagonal()],
            "tracker.p0_diag": [float(x) for x in self.kalman.P0.diagonal()],
            "tracker.gate": self.tracker.gate,
            "tracker.age_fraction": self.tracker.age_fraction,
            "tracker.min_count_age": self.tracker.min_count_age,
            "tracker.overlap_frames": self.tracker.overlap_frames,
            "localize.margin": self.localize.masking.margin,
            "localize.blur_window": self.localize.masking.blur_window,
            "localize.min_features_per_frame": self.localize.min_features_per_frame,
            "localize.reproj_threshold": self.localize.reproj_threshold,
            "localize.min_angle_deg": self.localize.min_angle_deg,
            "correct.size_lower": self.correct.size_lower,
            "correct.size_upper": self.correct.size_upper,
            "correct.depth_factor": self.correct.depth_factor,
            "correct.merge_radius_factor": self.correct.merge_radius_factor,
            "correct.merge_radius_abs": self.correct.merge_radius_abs,
            "pipeline.min_area": self.min_area,
            "pipeline.enable_correction": self.enable_correction,
        }


_SECTIONS = {
    "flow": {"window", "pyramid_levels", "max_iterations", "epsilon", "provider", "min_eigenvalue", "max_displacement"},
    "tracker": {"q_diag", "r_diag", "p0_diag", "gate", "age_fraction", "min_count_age", "overlap_frames"},
    "localize": {"margin", "blur_window", "min_features_per_frame", "reproj_threshold", "min_angle_deg"},
    "correct": {"size_lower", "size_upper", "depth_factor", "merge_radius_factor", "merge_radius_abs"},
    "pipeline": {"min_area", "enable_correction"},
    "scene": {f.name for f in fields(SceneConfig)},
}


def read_toml(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        with p.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def _check_keys(doc: dict, allowed_sections) -> None:
    for section, body in doc.items():
        if section not in allowed_sections:
            raise ConfigError(f"unknown config section '{section}'")
        if not isinstance(body, dict):
            raise ConfigError(f"'{section}' must be a table")
        unknown = set(body) - _SECTIONS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")


def pipeline_config(doc: dict | None = None) -> PipelineConfig:
    """Build a PipelineConfig from a parsed TOML document (``scene`` ignored)."""
    doc = {k: v for k, v in (doc or {}).items() if k != "scene"}
    _check_keys(doc, ("flow", "tracker", "localize", "correct", "pipeline"))
    fl = dict(doc.get("flow", {}))
    tr = dict(doc.get("tracker", {}))
    lo = dict(doc.get("localize", {}))
    co = dict(doc.get("correct", {}))
    pi = dict(doc.get("pipeline", {}))
    try:
        provider = fl.pop("provider", "lk")
        kalman_kw = {}
        for key, name in (("q_diag", "Q"), ("r_diag", "R"), ("p0_diag", "P0")):
            if key in tr:
                kalman_kw[name] = [float(x) for x in tr.pop(key)]
        masking = MaskingConfig(**{k: lo.pop(k) for k in ("margin", "blur_window") if k in lo})
        return PipelineConfig(
            flow=FlowConfig(**fl),
            flow_provider=provider,
            kalman=KalmanConfig(**kalman_kw),
            tracker=TrackerConfig(**tr),
            localize=LocalizeConfig(masking=masking, **lo),
            correct=CorrectionConfig(**co),
            **pi,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def scene_config(doc: dict | None = None) -> SceneConfig:
    """Build a SceneConfig from the ``[scene]`` table of a parsed document."""
    body = dict((doc or {}).get("scene", {}))
    _check_keys({"scene": body}, ("scene",))
    try:
        occ = body.pop("occlusion", None)
        if occ is not None and not isinstance(occ, dict):
            raise ConfigError("scene.occlusion must be a table with gap_length and affected_fraction")
        if "feature_length" in body:
            body["feature_length"] = tuple(int(x) for x in body["feature_length"])
        cfg = SceneConfig(**body, occlusion=DropoutGaps(**occ) if occ else None)
        cfg.validate()
        return cfg
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_pipeline_config(path=None, **overrides) -> PipelineConfig:
    cfg = pipeline_config(read_toml(path) if path else None)
    return replace(cfg, **overrides) if overrides else cfg


def load_scene_config(path=None, **overrides) -> SceneConfig:
    cfg = scene_config(read_toml(path) if path else None)
    return replace(cfg, **overrides) if overrides else cfg
