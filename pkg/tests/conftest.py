"""Shared fixtures: small hand-built rooms and their rendered maps."""
from __future__ import annotations

import numpy as np
import pytest

from panoroom.layout import LayoutModel
from panoroom.maps import render_gt_maps
from panoroom.sphere import EquirectGrid, ManhattanFrame

MAP_GRID = EquirectGrid(128, 64)


def box_room(half_x=2.0, half_y=1.5, cx=0.3, cy=-0.2, ceiling=1.2, yaw=0.0) -> LayoutModel:
    """Rectangle with the camera offset by ``(cx, cy)`` from its centre."""
    poly = np.array([[-half_x, -half_y], [half_x, -half_y], [half_x, half_y], [-half_x, half_y]]) - [cx, cy]
    return LayoutModel(poly, -1.0, ceiling, ManhattanFrame.from_yaw(yaw))


def l_room(yaw=0.0) -> LayoutModel:
    poly = np.array([[-2.0, -1.5], [2.5, -1.5], [2.5, 0.5], [1.0, 0.5], [1.0, 2.0], [-2.0, 2.0]])
    return LayoutModel(poly, -1.0, 1.1, ManhattanFrame.from_yaw(yaw))


@pytest.fixture
def box():
    return box_room()


@pytest.fixture
def lroom():
    return l_room()


@pytest.fixture
def box_maps(box):
    return render_gt_maps(box, MAP_GRID)
