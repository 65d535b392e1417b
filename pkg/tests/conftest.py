"""
测试公共夹具

小地图、小相机和固定种子的随机数发生器，所有测试只依赖这里的场景。
"""

import math

import numpy as np
import pytest

from app.models.sensing import CameraModel
from app.services.citymap_service import build_ground_graph, make_city_map

BLOCK = [(40.0, 40.0), (60.0, 40.0), (60.0, 60.0), (40.0, 60.0)]


@pytest.fixture
def open_city():
    """100 m × 100 m 空地图"""
    return make_city_map((0.0, 0.0, 100.0, 100.0), [], altitude_cap=50.0, name="open")


@pytest.fixture
def block_city():
    """中央一栋 20 m × 20 m、高 30 m 的建筑"""
    return make_city_map((0.0, 0.0, 100.0, 100.0), [(BLOCK, 30.0)], altitude_cap=50.0, name="block")


@pytest.fixture
def open_graph(open_city):
    return build_ground_graph(open_city, spacing=10.0)


@pytest.fixture
def block_graph(block_city):
    return build_ground_graph(block_city, spacing=10.0)


@pytest.fixture
def camera():
    return CameraModel(fov=math.pi / 2, width=16, height=16, d_max=500.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
