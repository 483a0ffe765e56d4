"""Run configuration: a strict JSON document with sim / mode / policies /
ego / metrics sections. Unknown keys are rejected by name."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from ..core import Episode, Pose2, SemanticMap, SimState, load_map
from ..engine import (
    BrakeToStopEgo,
    ConstantVelocityEgo,
    LogReplayEgo,
    PolicyEgo,
    SimConfig,
)
from ..initstate import ProceduralConfig
from ..metrics import PlannerThresholds
from ..policies import (
    ConstantVelocityPolicy,
    FeatureExtractor,
    LogReplayPolicy,
    MlpPolicy,
    ReactiveFollowPolicy,
    TrainConfig,
    load_mlp,
)


class ConfigError(Exception):
    """Malformed run configuration (reported as a usage error, exit 1)."""


SCHEMA = {
    "sim": {"dt", "horizon", "seed", "noise", "roi_radius", "interrupt_on_collision"},
    "mode": {
        "name",
        "map",
        "episodes",
        "location",
        "source_log",
        "source_frame",
        "dataset_dir",
        "anchor_radius",
        "procedural",
        "paths",
    },
    "policies": {"default", "overrides", "weights", "reactive", "train"},
    "ego": {"controller", "params"},
    "metrics": {
        "horizons",
        "d_thresh",
        "window_s",
        "kappa",
        "g_free",
        "l_thresh",
        "suite",
    },
}
PROCEDURAL_KEYS = {"agents_mean", "min_gap", "speed_range"}
REACTIVE_KEYS = {"a_max", "b", "s0", "t_headway", "v0"}
TRAIN_KEYS = {"lr", "batch", "epochs", "hidden", "history_s"}
SUITE_KEYS = {"scenes", "gap_range", "speed_range"}
POLICY_NAMES = ("constant", "reactive_follow", "log_replay", "mlp")
EGO_NAMES = ("constant", "log_replay", "reactive_follow", "brake_stop")


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"section {where!r} must be an object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown config key: {where}.{key}")


def load_run_config(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    for key in doc:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
    for section, allowed in SCHEMA.items():
        if section in doc:
            _reject_unknown(doc[section], allowed, section)
    mode = doc.get("mode", {})
    if "procedural" in mode:
        _reject_unknown(mode["procedural"], PROCEDURAL_KEYS, "mode.procedural")
    policies = doc.get("policies", {})
    if "reactive" in policies:
        _reject_unknown(policies["reactive"], REACTIVE_KEYS, "policies.reactive")
    if "train" in policies:
        _reject_unknown(policies["train"], TRAIN_KEYS, "policies.train")
    metrics = doc.get("metrics", {})
    if "suite" in metrics:
        _reject_unknown(metrics["suite"], SUITE_KEYS, "metrics.suite")
    return doc


class RunSetup:
    """Everything a command needs, resolved from a config document.

    Relative paths in the config resolve against the config file's
    directory."""

    def __init__(self, doc: dict, base_dir: Path, seed_override: Optional[int] = None, jobs: int = 1):
        self.doc = doc
        self.base_dir = base_dir
        sim = doc.get("sim", {})
        self.sim_config = SimConfig(
            dt=float(sim.get("dt", 0.1)),
            horizon_steps=int(sim.get("horizon", 50)),
            seed=int(seed_override if seed_override is not None else sim.get("seed", 0)),
            interrupt_on_ego_collision=bool(sim.get("interrupt_on_collision", True)),
            control_noise=tuple(sim.get("noise", (0.0, 0.0))),
            roi_radius=float(sim.get("roi_radius", 200.0)),
            workers=max(1, int(jobs)),
        )
        self.mode = doc.get("mode", {})
        self.mode_name = self.mode.get("name", "scenario")
        self._map: Optional[SemanticMap] = None
        self._source: Optional[Episode] = None

    def _resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def smap(self) -> SemanticMap:
        if self._map is None:
            if "map" not in self.mode:
                raise ConfigError("mode.map is required")
            self._map = load_map(self._resolve(self.mode["map"]))
        return self._map

    @property
    def source_episode(self) -> Episode:
        if self._source is None:
            if "source_log" not in self.mode:
                raise ConfigError("mode.source_log is required for this mode/policy")
            from .logs import read_episode_log

            self._source = read_episode_log(self._resolve(self.mode["source_log"]))
        return self._source

    def initial_state(self) -> Optional[SimState]:
        """The scenario/behaviour seed state. Its original step index is
        kept so log-replay policies stay aligned with the source."""
        if self.mode_name not in ("scenario", "behaviour"):
            return None
        frame = int(self.mode.get("source_frame", 0))
        source = self.source_episode
        return source.state_at(source.states[0].step_index + frame)

    def location(self) -> Optional[Pose2]:
        if "location" not in self.mode:
            return None
        x, y, yaw = self.mode["location"]
        return Pose2(float(x), float(y), float(yaw))

    def dataset(self) -> Optional[list[Episode]]:
        if "dataset_dir" not in self.mode:
            return None
        from .logs import read_episode_dir

        return read_episode_dir(self._resolve(self.mode["dataset_dir"]))

    def procedural_config(self) -> ProceduralConfig:
        proc = self.mode.get("procedural", {})
        return ProceduralConfig(
            agents_mean=float(proc.get("agents_mean", 5.0)),
            min_gap=float(proc.get("min_gap", 8.0)),
            speed_range=tuple(proc.get("speed_range", (0.0, 12.0))),
        )

    def forced_paths(self) -> dict[str, np.ndarray]:
        return {
            agent_id: np.asarray(path, dtype=float)
            for agent_id, path in self.mode.get("paths", {}).items()
        }

    def _make_policy(self, name: str):
        cfg = self.doc.get("policies", {})
        if name == "constant":
            return ConstantVelocityPolicy()
        if name == "reactive_follow":
            reactive = cfg.get("reactive", {})
            return ReactiveFollowPolicy(
                dt=self.sim_config.dt,
                a_max=float(reactive.get("a_max", 1.5)),
                b=float(reactive.get("b", 2.0)),
                s0=float(reactive.get("s0", 2.0)),
                t_headway=float(reactive.get("t_headway", 1.5)),
                v0=float(reactive.get("v0", 10.0)),
            )
        if name == "log_replay":
            return LogReplayPolicy(self.source_episode)
        if name == "mlp":
            if "weights" not in cfg:
                raise ConfigError("policies.weights is required for the mlp policy")
            mlp = load_mlp(self._resolve(cfg["weights"]))
            return MlpPolicy(mlp, FeatureExtractor(dt=self.sim_config.dt))
        raise ConfigError(f"unknown policy {name!r} (expected one of {POLICY_NAMES})")

    def policies_factory(self):
        cfg = self.doc.get("policies", {})
        default_name = cfg.get("default", "constant")
        overrides = cfg.get("overrides", {})

        def make(state: SimState) -> dict:
            table = {}
            for agent in state.agents:
                if agent.id == state.ego_id:
                    continue
                table[agent.id] = self._make_policy(overrides.get(agent.id, default_name))
            return table

        return make

    def ego_factory(self):
        cfg = self.doc.get("ego", {})
        name = cfg.get("controller", "constant")
        params = cfg.get("params", {})
        dt = self.sim_config.dt

        def make(state: SimState):
            if name == "constant":
                return ConstantVelocityEgo(dt)
            if name == "log_replay":
                return LogReplayEgo(self.source_episode)
            if name == "reactive_follow":
                return PolicyEgo(self._make_policy("reactive_follow"), self.smap, dt)
            if name == "brake_stop":
                return BrakeToStopEgo(dt, decel=float(params.get("decel", 2.5)))
            raise ConfigError(f"unknown ego controller {name!r} (expected one of {EGO_NAMES})")

        return make

    def train_config(self) -> TrainConfig:
        train = self.doc.get("policies", {}).get("train", {})
        return TrainConfig(
            lr=float(train.get("lr", 1e-3)),
            batch=int(train.get("batch", 64)),
            epochs=int(train.get("epochs", 30)),
            seed=self.sim_config.seed,
            hidden=tuple(train.get("hidden", (32, 32))),
        )

    def history_s(self) -> float:
        return float(self.doc.get("policies", {}).get("train", {}).get("history_s", 1.0))

    def planner_thresholds(self) -> PlannerThresholds:
        m = self.doc.get("metrics", {})
        return PlannerThresholds(
            d_thresh=float(m.get("d_thresh", 5.0)),
            window_s=float(m.get("window_s", 3.0)),
            kappa=float(m.get("kappa", 0.5)),
            g_free=float(m.get("g_free", 10.0)),
            l_thresh=float(m.get("l_thresh", 2.0)),
        )

    def horizons(self) -> list[float]:
        return [float(h) for h in self.doc.get("metrics", {}).get("horizons", (0.5, 1, 2, 3, 4, 5))]

    def suite_params(self) -> dict:
        suite = self.doc.get("metrics", {}).get("suite", {})
        return {
            "n_scenes": int(suite.get("scenes", 100)),
            "gap_range": tuple(suite.get("gap_range", (10.0, 40.0))),
            "speed_range": tuple(suite.get("speed_range", (5.0, 12.0))),
            "seed": self.sim_config.seed,
            "horizon_s": self.sim_config.horizon_steps * self.sim_config.dt,
        }
