"""히트맵 표현, 다항분포 샘플링, 신뢰도 규칙과 최대우도 2D 포즈 추출"""

from dataclasses import dataclass

import numpy as np

from body import CROP_SIZE, to_normalized
from errors import DegenerateHeatmapError

GRID_WIDTH = 48
GRID_HEIGHT = 64
CELL_WIDTH = CROP_SIZE / GRID_WIDTH
CELL_HEIGHT = CROP_SIZE / GRID_HEIGHT

DISCARD_THRESHOLD = 0.05
VISIBLE_THRESHOLD = 0.5
UNCERTAIN_THRESHOLD = 0.7


@dataclass
class JointStatus:
    visible: np.ndarray
    uncertain: np.ndarray
    inside_crop: np.ndarray
    max_confidence: np.ndarray

    @property
    def invisible(self):
        """크롭 밖이거나 최대 신뢰도가 0.5 미만인 관절"""
        return ~self.visible | ~self.inside_crop


@dataclass
class HeatmapSamples:
    """관절 하나의 히트맵 샘플: [-1,1] 좌표와 원래 셀 신뢰도"""

    points: np.ndarray
    confidences: np.ndarray


def cell_to_crop(gx, gy):
    """격자 셀 중심을 크롭 픽셀 좌표로 바꾸는 함수"""
    return (np.asarray(gx) + 0.5) * CELL_WIDTH, (np.asarray(gy) + 0.5) * CELL_HEIGHT


def crop_to_cell(x, y):
    """크롭 픽셀 좌표를 (연속) 격자 좌표로 바꾸는 함수. 셀 중심이 정수 값이 된다."""
    return np.asarray(x) / CELL_WIDTH - 0.5, np.asarray(y) / CELL_HEIGHT - 0.5


def argmax_pose(heatmap):
    """관절별 최대값 셀을 크롭 좌표로 옮긴 2D 포즈와 신뢰도, 유효 여부를 돌려주는 함수"""
    heatmap = np.asarray(heatmap)
    flat = heatmap.reshape(heatmap.shape[0], -1)
    # np.argmax 는 동점일 때 가장 작은 선형 인덱스를 고른다
    best = np.argmax(flat, axis=1)
    confidence = flat[np.arange(len(flat)), best].astype(np.float64)
    gy, gx = np.unravel_index(best, heatmap.shape[1:])
    x, y = cell_to_crop(gx, gy)
    valid = confidence > 0.0
    return np.stack([x, y], axis=-1), confidence, valid


def retained_mass(grid, threshold=DISCARD_THRESHOLD):
    grid = np.asarray(grid, dtype=np.float64)
    return np.where(grid >= threshold, grid, 0.0)


def sample_heatmap(grid, n, rng, threshold=DISCARD_THRESHOLD):
    """히트맵 하나를 다항분포로 보고 n 개의 셀을 뽑아 셀 안에서 균등하게 흔드는 함수"""
    mass = retained_mass(grid, threshold).reshape(-1)
    total = mass.sum()
    if total <= 0.0:
        raise DegenerateHeatmapError(f"신뢰도 {threshold} 이상인 셀이 없습니다")
    cells = rng.choice(mass.size, size=n, p=mass / total)
    gy, gx = np.unravel_index(cells, np.shape(grid))
    jitter = rng.uniform(0.0, 1.0, size=(n, 2))
    x = (gx + jitter[:, 0]) * CELL_WIDTH
    y = (gy + jitter[:, 1]) * CELL_HEIGHT
    points = to_normalized(np.stack([x, y], axis=-1))
    return HeatmapSamples(points=points, confidences=np.asarray(grid).reshape(-1)[cells].astype(np.float64))


def sample_all_joints(heatmap, n, rng, threshold=DISCARD_THRESHOLD):
    """모든 관절에서 n 개씩 뽑고, 질량이 없는 관절은 valid=False 로 표시하는 함수"""
    heatmap = np.asarray(heatmap)
    points = np.zeros((heatmap.shape[0], n, 2))
    valid = np.zeros(heatmap.shape[0], dtype=bool)
    for k, grid in enumerate(heatmap):
        if grid.max() < threshold:
            continue
        points[k] = sample_heatmap(grid, n, rng, threshold).points
        valid[k] = True
    return points, valid


def classify_joints(heatmap, gt2d, crop_size=CROP_SIZE):
    """최대 신뢰도로 가시성(>=0.5)과 불확실성(<0.7)을, 정답 위치로 크롭 내부 여부를 판정하는 함수"""
    heatmap = np.asarray(heatmap)
    max_conf = heatmap.reshape(heatmap.shape[0], -1).max(axis=1).astype(np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    inside = np.all((gt2d >= 0.0) & (gt2d < crop_size), axis=-1)
    return JointStatus(
        visible=max_conf >= VISIBLE_THRESHOLD,
        uncertain=max_conf < UNCERTAIN_THRESHOLD,
        inside_crop=inside,
        max_confidence=max_conf,
    )


def gaussian_blob(center_x, center_y, sigma, amplitude):
    """격자 좌표 (center_x, center_y) 에 놓인 2D 가우시안 격자"""
    gy, gx = np.mgrid[0:GRID_HEIGHT, 0:GRID_WIDTH]
    d2 = (gx - center_x) ** 2 + (gy - center_y) ** 2
    return amplitude * np.exp(-d2 / (2.0 * sigma ** 2))
