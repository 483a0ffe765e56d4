"""Bird's-eye-view occupancy rendering and its inverse (grid -> agents).

A grid is anchored at a center pose: grid-frame u runs along the center
yaw, v to its left. Pixel (row, col) centers map to world points; row 0 is
the +v (left) edge. Channels are binary uint8 planes named lanes,
crosswalks, ego, agents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Obb, Pose2, SemanticMap, SimState, agent_obb, normalize_angle

CHANNEL_NAMES = ("lanes", "crosswalks", "ego", "agents")

DEFAULT_RESOLUTION = 0.5  # m / pixel
DEFAULT_SIZE_PX = 64


@dataclass(frozen=True, eq=False)
class Grid:
    """Multi-channel binary occupancy grid in a center-anchored frame."""

    width_px: int
    height_px: int
    resolution: float
    center: Pose2
    channels: dict[str, np.ndarray]

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0 or self.resolution <= 0:
            raise ValueError("grid dimensions and resolution must be positive")
        for name, plane in self.channels.items():
            if plane.shape != (self.height_px, self.width_px):
                raise ValueError(f"channel {name!r} shape {plane.shape} mismatches grid")
            if not np.isin(plane, (0, 1)).all():
                raise ValueError(f"channel {name!r} must be binary")

    def pixel_centers_world(self) -> np.ndarray:
        """World coordinates of all pixel centers, shape (H, W, 2)."""
        cols = np.arange(self.width_px)
        rows = np.arange(self.height_px)
        u = (cols + 0.5 - self.width_px / 2.0) * self.resolution
        v = (self.height_px / 2.0 - (rows + 0.5)) * self.resolution
        uu, vv = np.meshgrid(u, v)
        c, s = math.cos(self.center.yaw), math.sin(self.center.yaw)
        x = self.center.x + c * uu - s * vv
        y = self.center.y + s * uu + c * vv
        return np.stack([x, y], axis=-1)

    def pixels_to_world(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """World coordinates of the given pixel centers, shape (N, 2)."""
        u = (np.asarray(cols) + 0.5 - self.width_px / 2.0) * self.resolution
        v = (self.height_px / 2.0 - (np.asarray(rows) + 0.5)) * self.resolution
        c, s = math.cos(self.center.yaw), math.sin(self.center.yaw)
        return np.stack(
            [self.center.x + c * u - s * v, self.center.y + s * u + c * v], axis=-1
        )


def _mark_obb_footprint(plane: np.ndarray, centers: np.ndarray, obb: Obb) -> None:
    """Set pixels whose centers fall inside the rectangle (inclusive)."""
    rel = centers - np.asarray(obb.center)
    c, s = math.cos(obb.yaw), math.sin(obb.yaw)
    local_x = rel[..., 0] * c + rel[..., 1] * s
    local_y = -rel[..., 0] * s + rel[..., 1] * c
    hx, hy = obb.half_extents
    plane[(np.abs(local_x) <= hx) & (np.abs(local_y) <= hy)] = 1


def _mark_polyline_band(
    plane: np.ndarray, centers: np.ndarray, pts: np.ndarray, half_width: float
) -> None:
    """Set pixels whose centers lie within half_width of the polyline."""
    flat = centers.reshape(-1, 2)
    a = pts[:-1]
    d = np.diff(pts, axis=0)
    len2 = np.einsum("ij,ij->i", d, d)
    rel = flat[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pij,ij->pi", rel, d) / len2, 0.0, 1.0)
    diff = rel - t[..., None] * d[None, :, :]
    d2 = np.einsum("pij,pij->pi", diff, diff).min(axis=1)
    plane.ravel()[d2 <= half_width * half_width] = 1


def _mark_polygon(plane: np.ndarray, centers: np.ndarray, poly: np.ndarray) -> None:
    """Even-odd fill: set pixels whose centers lie inside the polygon."""
    flat = centers.reshape(-1, 2)
    x, y = flat[:, 0], flat[:, 1]
    inside = np.zeros(len(flat), dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < np.where(crosses, xi, 0.0))
    plane.ravel()[inside] = 1


def render(
    state: SimState,
    smap: SemanticMap,
    center: Pose2,
    resolution: float = DEFAULT_RESOLUTION,
    size_px: int = DEFAULT_SIZE_PX,
    sim_time: float = 0.0,
) -> Grid:
    """Rasterize a state over the map into a square multi-channel grid.

    Lanes controlled by a light that is red at sim_time are left blank.
    The ego footprint goes to the ego channel, all other active agents to
    the agents channel; anything outside the grid is clipped.
    """
    if size_px <= 0 or resolution <= 0:
        raise ValueError("size_px and resolution must be positive")
    shape = (size_px, size_px)
    channels = {name: np.zeros(shape, dtype=np.uint8) for name in CHANNEL_NAMES}
    grid = Grid(size_px, size_px, resolution, center, channels)
    centers = grid.pixel_centers_world()

    for lane in smap.lanes:
        if smap.lane_red_at(lane.id, sim_time):
            continue
        _mark_polyline_band(channels["lanes"], centers, lane.centerline, lane.width / 2.0)
    for poly in smap.crosswalks:
        _mark_polygon(channels["crosswalks"], centers, poly)
    for agent in state.agents:
        if not agent.active:
            continue
        name = "ego" if agent.id == state.ego_id else "agents"
        _mark_obb_footprint(channels[name], centers, agent_obb(agent))
    return grid


def connected_components(channel: np.ndarray) -> list[np.ndarray]:
    """Maximal 8-connected components of 1-pixels.

    Each component is an (K, 2) array of (row, col) indices in row-major
    order; components are ordered by their smallest row-major index.
    """
    plane = np.asarray(channel)
    labels, count = ndimage.label(plane != 0, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return []
    first_seen = {}
    for idx, lab in enumerate(labels.ravel()):
        if lab and lab not in first_seen:
            first_seen[lab] = idx
    order = sorted(first_seen, key=first_seen.get)
    return [np.argwhere(labels == lab) for lab in order]


@dataclass(frozen=True)
class ExtractedAgent:
    """One vectorized blob: world centroid, minimum-area box, pixel count."""

    centroid: tuple[float, float]
    bbox: Obb
    pixel_count: int


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; handles collinear input (returns the hull
    or the extreme segment)."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def build(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = build(pts)
    upper = build(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    return hull if len(hull) >= 2 else pts[:1]


def min_area_rect(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Minimum-area enclosing rectangle of a point set.

    Sweeps the convex-hull edge directions (rotating-calipers candidates).
    Returns (center, extents, angle) with extents possibly zero for
    degenerate inputs.
    """
    hull = _convex_hull(np.asarray(points, dtype=float))
    if len(hull) == 1:
        return hull[0].copy(), np.zeros(2), 0.0
    best = None
    edges = np.diff(np.vstack([hull, hull[:1]]), axis=0) if len(hull) > 2 else hull[1:] - hull[:1]
    for edge in edges:
        angle = math.atan2(edge[1], edge[0])
        c, s = math.cos(angle), math.sin(angle)
        rot = hull @ np.array([(c, -s), (s, c)])  # coords in the edge-aligned frame
        lo, hi = rot.min(axis=0), rot.max(axis=0)
        extents = hi - lo
        area = extents[0] * extents[1]
        if best is None or area < best[0]:
            mid = (lo + hi) / 2.0
            center = np.array([mid[0] * c - mid[1] * s, mid[0] * s + mid[1] * c])
            best = (area, center, extents, angle)
    return best[1], best[2], best[3]


def extract_from_channel(grid: Grid, channel: str, min_pixels: int = 3) -> list[ExtractedAgent]:
    """Vectorize one channel: connected components -> centroid + min box.

    Boxes are expanded half a pixel per side so a rendered rectangle
    recovers its footprint; the longer box side defines the yaw, folded to
    (-pi/2, pi/2] since a blob has no front/back.
    """
    out = []
    for comp in connected_components(grid.channels[channel]):
        if len(comp) < min_pixels:
            continue
        world = grid.pixels_to_world(comp[:, 0], comp[:, 1])
        centroid = world.mean(axis=0)
        center, extents, angle = min_area_rect(world)
        extents = extents + grid.resolution  # half-pixel margin per side
        if extents[0] >= extents[1]:
            length, width, yaw = extents[0], extents[1], angle
        else:
            length, width, yaw = extents[1], extents[0], angle + math.pi / 2.0
        yaw = normalize_angle(yaw)
        if yaw <= -math.pi / 2.0:
            yaw += math.pi
        elif yaw > math.pi / 2.0:
            yaw -= math.pi
        out.append(
            ExtractedAgent(
                centroid=(float(centroid[0]), float(centroid[1])),
                bbox=Obb(
                    center=(float(center[0]), float(center[1])),
                    half_extents=(float(length) / 2.0, float(width) / 2.0),
                    yaw=yaw,
                ),
                pixel_count=len(comp),
            )
        )
    return out


def extract_agents(grid: Grid, min_pixels: int = 3) -> list[ExtractedAgent]:
    """Vectorize the agents channel."""
    return extract_from_channel(grid, "agents", min_pixels=min_pixels)


def write_grid_pgm(grid: Grid, prefix: str | Path) -> list[Path]:
    """Dump each channel as a binary PGM (P5) named <prefix>_<channel>.pgm."""
    prefix = Path(prefix)
    paths = []
    for name in sorted(grid.channels):
        plane = (grid.channels[name] * 255).astype(np.uint8)
        path = prefix.parent / f"{prefix.name}_{name}.pgm"
        header = f"P5\n{grid.width_px} {grid.height_px}\n255\n".encode("ascii")
        path.write_bytes(header + plane.tobytes())
        paths.append(path)
    return paths
