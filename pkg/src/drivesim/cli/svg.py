"""Deterministic SVG renders of episodes: per-frame snapshots and a
whole-episode trajectory overview. No timestamps, fixed float formatting."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

from ..core import AgentState, Episode, SemanticMap, agent_obb, obb_corners

AGENT_COLORS = ("#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
EGO_COLOR = "#d62728"
LANE_COLOR = "#c0c0c0"
CROSSWALK_COLOR = "#e8d8a0"


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _agent_color(episode: Episode, agent_id: str) -> str:
    if agent_id == episode.ego_id:
        return EGO_COLOR
    ids = sorted(a.id for a in episode.states[0].agents if a.id != episode.ego_id)
    return AGENT_COLORS[ids.index(agent_id) % len(AGENT_COLORS)]


def _bounds(episode: Episode, smap: Optional[SemanticMap], margin: float = 10.0):
    xs, ys = [], []
    for state in episode.states:
        for a in state.agents:
            xs.append(a.pose.x)
            ys.append(a.pose.y)
    if smap is not None:
        for lane in smap.lanes:
            xs.extend(lane.centerline[:, 0])
            ys.extend(lane.centerline[:, 1])
    return min(xs) - margin, min(ys) - margin, max(xs) + margin, max(ys) + margin


def _open_svg(x0: float, y0: float, x1: float, y1: float) -> list[str]:
    w, h = x1 - x0, y1 - y0
    # flip y so north is up
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(w * 8)}" height="{_fmt(h * 8)}" '
        f'viewBox="{_fmt(x0)} {_fmt(-y1)} {_fmt(w)} {_fmt(h)}">',
        f'<g transform="scale(1,-1)">',
    ]


def _close_svg(parts: list[str]) -> str:
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _map_elements(smap: Optional[SemanticMap]) -> list[str]:
    if smap is None:
        return []
    parts = []
    for poly in smap.crosswalks:
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in poly)
        parts.append(f'<polygon points="{pts}" fill="{CROSSWALK_COLOR}" stroke="none"/>')
    for lane in sorted(smap.lanes, key=lambda l: l.id):
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in lane.centerline)
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{LANE_COLOR}" '
            f'stroke-width="{_fmt(lane.width)}" stroke-linecap="round" opacity="0.7"/>'
        )
    return parts


def _agent_rect(agent: AgentState, color: str, opacity: float = 1.0) -> str:
    corners = obb_corners(agent_obb(agent))
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in corners)
    return (
        f'<polygon points="{pts}" fill="{color}" fill-opacity="{_fmt(opacity)}" '
        f'stroke="#303030" stroke-width="0.15"/>'
    )


def _trail(points: list[tuple[float, float]], color: str) -> str:
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="0.3" opacity="0.8"/>'


def render_frame_svg(episode: Episode, frame: int, smap: Optional[SemanticMap] = None) -> str:
    """One state, with each agent's trail up to that frame."""
    parts = _open_svg(*_bounds(episode, smap))
    parts += _map_elements(smap)
    state = episode.states[frame]
    for agent in state.agents:
        color = _agent_color(episode, agent.id)
        trail = [
            (s.agent(agent.id).pose.x, s.agent(agent.id).pose.y)
            for s in episode.states[: frame + 1]
        ]
        if len(trail) >= 2:
            parts.append(_trail(trail, color))
        parts.append(_agent_rect(agent, color, opacity=1.0 if agent.active else 0.25))
    return _close_svg(parts)


def render_overview_svg(episode: Episode, smap: Optional[SemanticMap] = None) -> str:
    """Full trajectories of every agent plus start/end rectangles."""
    parts = _open_svg(*_bounds(episode, smap))
    parts += _map_elements(smap)
    for agent0 in episode.states[0].agents:
        color = _agent_color(episode, agent0.id)
        trail = [
            (s.agent(agent0.id).pose.x, s.agent(agent0.id).pose.y) for s in episode.states
        ]
        if len(trail) >= 2:
            parts.append(_trail(trail, color))
        parts.append(_agent_rect(agent0, color, opacity=0.3))
        parts.append(_agent_rect(episode.states[-1].agent(agent0.id), color, opacity=1.0))
    return _close_svg(parts)


def write_episode_svgs(
    episode: Episode,
    out_dir: str | Path,
    every_n: int = 10,
    smap: Optional[SemanticMap] = None,
    prefix: str = "frame",
) -> list[Path]:
    """Write frame_<k>.svg snapshots every n frames plus overview.svg."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(0, len(episode.states), every_n):
        path = out_dir / f"{prefix}_{k:05d}.svg"
        path.write_text(render_frame_svg(episode, k, smap), encoding="utf-8", newline="\n")
        paths.append(path)
    overview = out_dir / "overview.svg"
    overview.write_text(render_overview_svg(episode, smap), encoding="utf-8", newline="\n")
    paths.append(overview)
    return paths
