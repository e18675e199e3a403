"""TOML run configuration: [scorer], [cil], [owl], [report], [synth] sections.

Unknown sections or keys are hard errors so sweep typos fail fast.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cil import TrainConfig
from .errors import ConfigError
from .ood import ScorerConfig
from .owl import OwlConfig
from .synth import ScenarioSpec, SessionSpec

_SCORER_KEYS = {
    "method",
    "temperature",
    "vim_variance_target",
    "vim_dim_override",
    "knn_k",
    "shrinkage_scale",
}
_CIL_KEYS = {
    "strategy",
    "epochs",
    "lr",
    "weight_decay",
    "batch_size",
    "lambda_lwf",
    "kd_temperature",
    "lambda_ewc",
    "replay_budget_m",
    "head_kind",
    "cosine_scale",
    "seed",
}
_OWL_KEYS = {"target_tpr", "ncd_k", "include_pseudo_id", "full_refit", "seed"}
_REPORT_KEYS = {"near", "far"}
_SYNTH_KEYS = {
    "dim",
    "base_classes",
    "separation",
    "sigma",
    "samples_per_class",
    "seed",
    "sessions",
}
_SYNTH_SESSION_KEYS = {"novel_classes", "known_fraction", "samples_per_class"}
_SECTIONS = {"scorer", "cil", "owl", "report", "synth"}


def _check_keys(section: str, table: dict, allowed: set[str]) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys: {sorted(unknown)}")


def load_config(path: str | Path) -> dict:
    """Parse and validate a TOML config; returns a dict of config objects."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: invalid TOML: {exc}") from exc
    unknown = set(doc) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    try:
        scorer_tbl = doc.get("scorer", {})
        _check_keys("scorer", scorer_tbl, _SCORER_KEYS)
        scorer = ScorerConfig(**scorer_tbl)

        cil_tbl = doc.get("cil", {})
        _check_keys("cil", cil_tbl, _CIL_KEYS)
        cil_cfg = TrainConfig(**cil_tbl)
        cil_cfg.validate()

        owl_tbl = doc.get("owl", {})
        _check_keys("owl", owl_tbl, _OWL_KEYS)
        owl_cfg = OwlConfig(scorer=scorer, cil=cil_cfg, **owl_tbl)
        owl_cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{p}: {exc}") from exc

    report_tbl = doc.get("report", {})
    _check_keys("report", report_tbl, _REPORT_KEYS)
    report = {
        "near": list(report_tbl.get("near", [])),
        "far": list(report_tbl.get("far", [])),
    }

    synth_spec = None
    if "synth" in doc:
        synth_tbl = dict(doc["synth"])
        _check_keys("synth", synth_tbl, _SYNTH_KEYS)
        raw_sessions = synth_tbl.pop("sessions", [])
        sessions = []
        for i, s in enumerate(raw_sessions):
            _check_keys(f"synth.sessions[{i}]", s, _SYNTH_SESSION_KEYS)
            sessions.append(SessionSpec(**s))
        try:
            synth_spec = ScenarioSpec(sessions=sessions, **synth_tbl)
            synth_spec.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{p}: [synth] {exc}") from exc

    return {"owl": owl_cfg, "report": report, "synth": synth_spec}


def override_seed(owl_cfg: OwlConfig, seed: int | None) -> OwlConfig:
    if seed is None:
        return owl_cfg
    return dataclasses.replace(owl_cfg, seed=int(seed))
