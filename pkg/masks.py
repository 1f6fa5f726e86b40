"""사람 마스크, 합집합 규칙, 내부 판정, 정확한 유클리드 거리 변환"""

import logging
from dataclasses import dataclass
from functools import reduce

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from body import CROP_SIZE
from errors import EmptyMaskError

logger = logging.getLogger(__name__)

OCCLUSION_TAU = 0.9


@dataclass
class PersonMask:
    """256x256 크롭의 이진 마스크 (행=y, 열=x)"""

    pixels: np.ndarray
    is_union: bool = False
    object_occluded: bool = False

    @property
    def area(self):
        return int(self.pixels.sum())


def empty_mask(size=CROP_SIZE):
    return PersonMask(np.zeros((size, size), dtype=bool))


def union_masks(masks):
    """여러 사람 마스크의 픽셀별 OR"""
    masks = list(masks)
    pixels = reduce(np.logical_or, [m.pixels for m in masks])
    return PersonMask(pixels=pixels.copy(), is_union=True,
                      object_occluded=any(m.object_occluded for m in masks))


def _pixel_index(points):
    points = np.asarray(points, dtype=np.float64)
    return np.floor(points).astype(np.int64)


def inside_many(points, mask):
    """점 배열 (..., 2) 의 마스크 내부 여부. 크롭 밖의 점은 False."""
    q = _pixel_index(points)
    h, w = mask.pixels.shape
    in_bounds = (q[..., 0] >= 0) & (q[..., 0] < w) & (q[..., 1] >= 0) & (q[..., 1] < h)
    result = np.zeros(q.shape[:-1], dtype=bool)
    result[in_bounds] = mask.pixels[q[..., 1][in_bounds], q[..., 0][in_bounds]]
    return result


def inside(point, mask):
    return bool(inside_many(np.asarray(point)[None, :], mask)[0])


class DistanceField:
    """마스크 픽셀까지의 정확한 유클리드 거리 (픽셀 단위), 마스크 위에서는 0"""

    def __init__(self, mask):
        if not mask.pixels.any():
            raise EmptyMaskError("빈 마스크에는 거리 변환을 적용할 수 없습니다")
        self.mask = mask
        self.values = ndimage.distance_transform_edt(~mask.pixels)
        ys, xs = np.nonzero(mask.pixels)
        self._tree = None
        self._coords = np.stack([xs, ys], axis=-1).astype(np.float64)

    def lookup(self, points):
        """점이 속한 픽셀의 거리값. 크롭 밖 픽셀은 같은 정의로 마스크 픽셀까지 직접 계산한다."""
        q = _pixel_index(points)
        h, w = self.values.shape
        in_bounds = (q[..., 0] >= 0) & (q[..., 0] < w) & (q[..., 1] >= 0) & (q[..., 1] < h)
        out = np.empty(q.shape[:-1], dtype=np.float64)
        out[in_bounds] = self.values[q[..., 1][in_bounds], q[..., 0][in_bounds]]
        if not np.all(in_bounds):
            if self._tree is None:
                self._tree = cKDTree(self._coords)
            dist, _ = self._tree.query(q[~in_bounds].astype(np.float64))
            out[~in_bounds] = dist
        return out


def distance_transform(mask):
    return DistanceField(mask)


def detect_object_occlusion(body_points_2d, mask, tau=OCCLUSION_TAU, crop_size=CROP_SIZE):
    """크롭 안의 정답 신체 점 중 마스크 안에 든 비율이 tau 미만이면 물체 가림으로 판정하는 함수"""
    points = np.asarray(body_points_2d, dtype=np.float64).reshape(-1, 2)
    in_crop = np.all((points >= 0.0) & (points < crop_size), axis=-1)
    if not in_crop.any():
        logger.warning("크롭 안에 투영된 신체 점이 없어 가림 판정을 건너뜁니다")
        return False
    fraction = inside_many(points[in_crop], mask).mean()
    return bool(fraction < tau)


def encode_rle(pixels):
    """행마다 (시작, 길이) 런 목록으로 인코딩하는 함수"""
    rows = []
    for row in np.asarray(pixels, dtype=bool):
        padded = np.concatenate([[False], row, [False]])
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        starts, ends = edges[0::2], edges[1::2]
        rows.append(np.stack([starts, ends - starts], axis=-1).astype(np.uint16))
    return rows


def decode_rle(rows, width=CROP_SIZE):
    pixels = np.zeros((len(rows), width), dtype=bool)
    for y, runs in enumerate(rows):
        for start, length in runs:
            pixels[y, start:start + length] = True
    return pixels
