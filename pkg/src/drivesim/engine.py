"""Markov forward simulator.

Each step advances every agent from the frozen previous state only, so
per-agent evaluations are order-free and can run on any number of worker
threads without changing the result. Randomness comes from counter-based
streams keyed by (seed, agent id, step index).
"""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import combinations
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .core import (
    AgentState,
    Episode,
    Pose2,
    SemanticMap,
    SimState,
    agent_obb,
    obb_overlap,
)
from .kinematics import Control, advance
from .policies import PolicyDecision, policy_act

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    """Engine knobs. horizon_steps counts forward transitions, so an
    episode holds at most horizon_steps + 1 states including the seed."""

    dt: float = 0.1
    horizon_steps: int = 50
    seed: int = 0
    interrupt_on_ego_collision: bool = True
    control_noise: tuple[float, float] = (0.0, 0.0)  # (sigma_phi, sigma_v)
    roi_radius: float = 200.0
    workers: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.horizon_steps < 1:
            raise ValueError(f"horizon_steps must be >= 1, got {self.horizon_steps}")


def stream_rng(seed: int, tag: str, counter: int = 0) -> np.random.Generator:
    """Counter-based stream: independent of call order and thread count."""
    digest = hashlib.sha256(f"{seed}|{tag}|{counter}".encode("utf-8")).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


def agent_step_rng(seed: int, agent_id: str, step_index: int) -> np.random.Generator:
    """The rng stream a policy sees for one (agent, step) evaluation."""
    return stream_rng(seed, f"agent:{agent_id}", step_index)


# ---------------------------------------------------------------------------
# Ego controllers: deterministic callables (prev_state, ego) -> ego at t


class LogReplayEgo:
    """Drive the ego exactly along a recorded episode."""

    def __init__(self, source: Episode):
        self.source = source

    def __call__(self, prev_state: SimState, ego: AgentState) -> AgentState:
        first = self.source.states[0].step_index
        last = self.source.states[-1].step_index
        t = min(max(prev_state.step_index + 1, first), last)
        recorded = self.source.state_at(t).agent(ego.id)
        return replace(ego, pose=recorded.pose, speed=recorded.speed)


class ConstantVelocityEgo:
    """Hold speed and heading."""

    def __init__(self, dt: float):
        self.dt = dt

    def __call__(self, prev_state: SimState, ego: AgentState) -> AgentState:
        return advance(ego, Control(0.0, ego.speed), self.dt)


class PolicyEgo:
    """Drive the ego with an agent policy. The policy must be
    deterministic (it receives no rng stream)."""

    def __init__(self, policy, smap: SemanticMap, dt: float):
        self.policy = policy
        self.smap = smap
        self.dt = dt

    def __call__(self, prev_state: SimState, ego: AgentState) -> AgentState:
        decision = policy_act(self.policy, ego.id, prev_state, self.smap, None)
        return _apply_decision(ego, decision, self.dt)


class BrakeToStopEgo:
    """Scripted probe: decelerate straight ahead to a stop and stay put."""

    def __init__(self, dt: float, decel: float = 2.5):
        self.dt = dt
        self.decel = decel

    def __call__(self, prev_state: SimState, ego: AgentState) -> AgentState:
        return advance(ego, Control(0.0, max(0.0, ego.speed - self.decel * self.dt)), self.dt)


# ---------------------------------------------------------------------------
# Stepping


def _apply_decision(agent: AgentState, decision: PolicyDecision, dt: float) -> AgentState:
    if decision.pose_override is not None:
        return replace(agent, pose=decision.pose_override, speed=decision.control.v)
    return advance(agent, decision.control, dt)


def _advance_agent(
    agent: AgentState,
    policies: Mapping[str, object],
    prev: SimState,
    smap: SemanticMap,
    cfg: SimConfig,
    t: int,
) -> AgentState:
    try:
        policy = policies[agent.id]
    except KeyError:
        raise ValueError(f"no policy assigned for agent {agent.id!r}") from None
    rng = agent_step_rng(cfg.seed, agent.id, t)
    decision = policy_act(policy, agent.id, prev, smap, rng)
    sigma_phi, sigma_v = cfg.control_noise
    if decision.pose_override is None and (sigma_phi > 0 or sigma_v > 0):
        c = decision.control
        phi = c.phi + sigma_phi * rng.standard_normal()
        v = max(0.0, c.v + sigma_v * rng.standard_normal())
        decision = PolicyDecision(Control(phi, v))
    return _apply_decision(agent, decision, cfg.dt)


def step(
    prev: SimState,
    policies: Mapping[str, object],
    ego_controller: Callable[[SimState, AgentState], AgentState],
    smap: SemanticMap,
    cfg: SimConfig,
    t: int,
    pool: Optional[ThreadPoolExecutor] = None,
) -> SimState:
    """One synchronous transition: every agent advances off the frozen
    previous state; the ego advances via its controller. Agents whose
    centers leave the region of interest around the new ego deactivate."""
    ego_prev = prev.ego
    new_ego = ego_controller(prev, ego_prev)
    if new_ego.id != ego_prev.id:
        raise ValueError("ego controller must not change the ego id")
    if new_ego.extent != ego_prev.extent:
        raise ValueError("ego controller must not change the ego extent")

    movers = [a for a in prev.agents if a.active and a.id != prev.ego_id]

    def advance_one(agent):
        return _advance_agent(agent, policies, prev, smap, cfg, t)

    advanced = pool.map(advance_one, movers) if pool is not None else map(advance_one, movers)
    moved = {a.id: a for a in advanced}

    agents = []
    for a in prev.agents:
        if a.id == prev.ego_id:
            agents.append(new_ego)
            continue
        nxt = moved.get(a.id, a)
        if nxt.active:
            dx = nxt.pose.x - new_ego.pose.x
            dy = nxt.pose.y - new_ego.pose.y
            if math.hypot(dx, dy) > cfg.roi_radius:
                nxt = replace(nxt, active=False)
        agents.append(nxt)
    return SimState(step_index=t, agents=tuple(agents), ego_id=prev.ego_id)


def ego_collides(state: SimState) -> bool:
    """Whether the ego rectangle overlaps any active agent rectangle."""
    ego = state.ego
    ego_box = agent_obb(ego)
    return any(
        obb_overlap(ego_box, agent_obb(a))
        for a in state.agents
        if a.active and a.id != state.ego_id
    )


def _log_agent_collisions(state: SimState) -> None:
    if not log.isEnabledFor(logging.DEBUG):
        return
    actives = [a for a in state.active_agents() if a.id != state.ego_id]
    for a, b in combinations(actives, 2):
        if obb_overlap(agent_obb(a), agent_obb(b)):
            log.debug("agent-agent overlap at step %d: %s / %s", state.step_index, a.id, b.id)


def unroll(
    s1: SimState,
    policies: Mapping[str, object],
    ego_controller: Callable[[SimState, AgentState], AgentState],
    smap: SemanticMap,
    cfg: SimConfig,
) -> Episode:
    """Roll the state forward horizon_steps transitions, truncating with
    termination "ego_collision" if the ego rectangle contacts an agent."""
    states = [s1]
    termination = "completed"
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for k in range(1, cfg.horizon_steps + 1):
            t = s1.step_index + k
            state = step(states[-1], policies, ego_controller, smap, cfg, t, pool=pool)
            states.append(state)
            _log_agent_collisions(state)
            if cfg.interrupt_on_ego_collision and ego_collides(state):
                termination = "ego_collision"
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return Episode(dt=cfg.dt, map_id=smap.map_id, states=tuple(states), termination=termination)


def assign_policies(
    state: SimState,
    default_policy,
    overrides: Optional[Mapping[str, object]] = None,
) -> dict[str, object]:
    """Policy table for every non-ego agent: default plus per-id overrides."""
    table = {a.id: default_policy for a in state.agents if a.id != state.ego_id}
    for agent_id, policy in (overrides or {}).items():
        if agent_id not in table:
            raise ValueError(f"policy override for unknown agent {agent_id!r}")
        table[agent_id] = policy
    return table


def run_mode(
    mode: str,
    *,
    smap: SemanticMap,
    cfg: SimConfig,
    make_policies: Callable[[SimState], Mapping[str, object]],
    ego_factory: Callable[[SimState], Callable[[SimState, AgentState], AgentState]],
    location: Optional[Pose2] = None,
    s1: Optional[SimState] = None,
    dataset: Optional[Sequence[Episode]] = None,
    proc_cfg=None,
    anchor_radius: float = math.inf,
    forced_paths: Optional[Mapping[str, np.ndarray]] = None,
) -> Episode:
    """Generate one episode in one of the four configurations.

    full: sample an ego location, then an initial state, then unroll.
    journey: fixed location, sampled initial state.
    scenario: unroll from a given initial state.
    behaviour: scenario, with listed agents forced onto fixed paths while
    their speed stays with the underlying policy.
    """
    from . import initstate
    from .policies import PathOverridePolicy

    if mode not in ("full", "journey", "scenario", "behaviour"):
        raise ValueError(f"unknown mode {mode!r}")

    if mode in ("full", "journey"):
        if mode == "full":
            location = initstate.sample_location(smap, stream_rng(cfg.seed, "location"))
        elif location is None:
            raise ValueError("journey mode needs a fixed ego location")
        state_rng = stream_rng(cfg.seed, "initstate")
        if dataset:
            s1 = initstate.sample_state_empirical(dataset, location, anchor_radius, state_rng)
        else:
            s1 = initstate.sample_state_procedural(
                smap, location, proc_cfg or initstate.ProceduralConfig(), state_rng
            )
    elif s1 is None:
        raise ValueError(f"{mode} mode needs an initial state")

    policies = dict(make_policies(s1))
    if mode == "behaviour":
        if not forced_paths:
            raise ValueError("behaviour mode needs (agent id, path) pairs")
        for agent_id, path in forced_paths.items():
            if agent_id not in policies:
                raise ValueError(f"forced path for unknown agent {agent_id!r}")
            policies[agent_id] = PathOverridePolicy(policies[agent_id], path)
    return unroll(s1, policies, ego_factory(s1), smap, cfg)
