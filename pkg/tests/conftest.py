import math

import numpy as np
import pytest

from drivesim.core import Lane, SemanticMap, TrafficLight


@pytest.fixture
def straight_map():
    """One straight 200 m lane along +x."""
    lane = Lane(id="main", centerline=np.array([[0.0, 0.0], [200.0, 0.0]]), width=3.5)
    return SemanticMap(lanes=(lane,), map_id="straight")


@pytest.fixture
def two_lane_map():
    """Two parallel lanes along +x, ids chosen to test tie-breaking."""
    a = Lane(id="a", centerline=np.array([[0.0, 0.0], [100.0, 0.0]]), width=3.5)
    b = Lane(id="b", centerline=np.array([[0.0, 2.0], [100.0, 2.0]]), width=3.5)
    return SemanticMap(lanes=(a, b), map_id="parallel")


@pytest.fixture
def lit_map():
    """A 60 m approach lane feeding a crossing lane controlled by a light
    that is red from t=10s to t=20s."""
    approach = Lane(
        id="approach",
        centerline=np.array([[0.0, 0.0], [60.0, 0.0]]),
        width=3.5,
        successors=("crossing",),
    )
    crossing = Lane(
        id="crossing",
        centerline=np.array([[60.0, 0.0], [90.0, 0.0]]),
        width=3.5,
        light_id="l1",
    )
    light = TrafficLight(id="l1", schedule=((0.0, 10.0, "green"), (10.0, 20.0, "red")))
    return SemanticMap(lanes=(approach, crossing), lights=(light,), map_id="lit")


def sample_obb_oracle(a, b, grid_n=100):
    """Point-containment sampling oracle for rectangle overlap.

    Exact circle bounds short-circuit the clear cases; ambiguous pairs are
    decided by testing a boundary-inclusive grid of each rectangle's points
    against the other. Independent of the separating-axis code path.
    """
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    d = math.hypot(dx, dy)
    if d > math.hypot(*a.half_extents) + math.hypot(*b.half_extents):
        return False
    if d < min(a.half_extents) + min(b.half_extents):
        return True

    def points_of(obb, n):
        u = np.linspace(-obb.half_extents[0], obb.half_extents[0], n)
        v = np.linspace(-obb.half_extents[1], obb.half_extents[1], n)
        uu, vv = np.meshgrid(u, v)
        c, s = math.cos(obb.yaw), math.sin(obb.yaw)
        x = obb.center[0] + c * uu - s * vv
        y = obb.center[1] + s * uu + c * vv
        return np.stack([x.ravel(), y.ravel()], axis=1)

    def any_inside(points, obb):
        rel = points - np.asarray(obb.center)
        c, s = math.cos(obb.yaw), math.sin(obb.yaw)
        lx = rel[:, 0] * c + rel[:, 1] * s
        ly = -rel[:, 0] * s + rel[:, 1] * c
        return bool(
            np.any((np.abs(lx) <= obb.half_extents[0]) & (np.abs(ly) <= obb.half_extents[1]))
        )

    return any_inside(points_of(a, grid_n), b) or any_inside(points_of(b, grid_n), a)
