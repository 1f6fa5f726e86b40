"""모호성을 조절할 수 있는 결정적 합성 장면 생성기와 데이터셋 파일 입출력"""

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from body import (CROP_SIZE, NUM_JOINTS, SKELETON, CameraModel, HIGHLY_ARTICULATED_MASK,
                  dense_body_points, forward_kinematics, matrix_to_rot6d, perspective_to_weak)
from errors import ConfigurationError, DatasetError
from fileio import atomic_write_bytes, atomic_write_json
from heatmaps import GRID_HEIGHT, GRID_WIDTH, crop_to_cell, gaussian_blob
from masks import PersonMask, decode_rle, detect_object_occlusion, encode_rle

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"AFDS"
DATASET_VERSION = 1
IMAGE_SIZE = np.array([1280.0, 960.0])
CONTEXT_DIM = 16

# 관절별 회전 표준편차 (라디안, 축 x/y/z)
POSE_SPREAD = np.array([
    [0.10, 0.60, 0.10],
    [0.15, 0.10, 0.10],
    [0.15, 0.15, 0.10],
    [0.20, 0.30, 0.15],
    [0.35, 0.10, 0.15],
    [0.00, 0.00, 0.00],
    [0.20, 0.10, 0.10],
    [0.35, 0.10, 0.15],
    [0.00, 0.00, 0.00],
    [0.20, 0.10, 0.10],
    [0.30, 0.40, 0.50],
    [0.00, 0.00, 0.00],
    [0.30, 0.20, 0.20],
    [0.30, 0.40, 0.50],
    [0.00, 0.00, 0.00],
    [0.30, 0.20, 0.20],
])
KNEES = (5, 8)
ELBOWS = (11, 14)

# 캡슐 반지름 (미터): 뼈의 자식 관절 기준
CAPSULE_RADIUS = np.array([0.0, 0.11, 0.08, 0.10, 0.09, 0.065, 0.055, 0.09, 0.065, 0.055,
                           0.07, 0.045, 0.04, 0.07, 0.045, 0.04])


@dataclass
class AmbiguityConfig:
    occlusion_prob: float = 0.5
    person_occluder_prob: float = 0.5
    truncation_prob: float = 0.1
    blur_prob: float = 0.1
    bimodal_prob: float = 0.5
    mask_unavailable_prob: float = 0.2
    heatmap_noise: float = 0.02
    pose_spread: float = 1.0

    def __post_init__(self):
        for name in ("occlusion_prob", "person_occluder_prob", "truncation_prob", "blur_prob",
                     "bimodal_prob", "mask_unavailable_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} 는 [0, 1] 범위여야 합니다: {value}")
        if self.heatmap_noise < 0.0:
            raise ConfigurationError(f"heatmap_noise 는 0 이상이어야 합니다: {self.heatmap_noise}")
        if self.heatmap_noise >= 0.05:
            logger.warning("heatmap_noise %.3f 는 버림 임계값 0.05 이상입니다", self.heatmap_noise)
        if self.pose_spread < 0.0:
            raise ConfigurationError(f"pose_spread 는 0 이상이어야 합니다: {self.pose_spread}")


@dataclass
class Scene:
    seed: int
    theta: np.ndarray
    beta: np.ndarray
    camera: CameraModel
    translation: np.ndarray
    gt2d: np.ndarray
    context: np.ndarray
    heatmap: np.ndarray
    person_mask: PersonMask
    union_mask: PersonMask
    occluders: np.ndarray
    occluded_joints: np.ndarray
    mask_available: bool
    object_occluded: bool

    def joints3d(self):
        return np.asarray(forward_kinematics(self.theta, self.beta))

    def dense_points(self):
        return np.asarray(dense_body_points(self.joints3d()))


def sample_pose(rng, spread=1.0):
    """관절 각도에 대한 부드러운 사전분포에서 포즈를 뽑아 (J*6,) 벡터로 돌려주는 함수"""
    rotvec = rng.normal(0.0, 1.0, size=(NUM_JOINTS, 3)) * POSE_SPREAD * spread
    for k in KNEES:
        rotvec[k] = [-rng.uniform(0.0, 1.4) * spread, 0.0, 0.0]
    for k, side in zip(ELBOWS, (1.0, -1.0)):
        rotvec[k] = [0.0, side * rng.uniform(0.0, 1.8) * spread, 0.0]
    matrices = Rotation.from_rotvec(rotvec).as_matrix()
    return matrix_to_rot6d(matrices).reshape(-1)


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def rasterize_capsules(segments, radii, size=CROP_SIZE):
    """픽셀 중심이 캡슐 안에 드는 픽셀을 채우는 함수"""
    py, px = np.mgrid[0:size, 0:size] + 0.5
    pixels = np.zeros((size, size), dtype=bool)
    for (a, b), r in zip(segments, radii):
        pixels |= _segment_distance(px, py, np.asarray(a), np.asarray(b)) <= r
    return pixels


def _body_silhouette(gt2d, px_per_meter):
    segments, radii = [], []
    for child in range(1, NUM_JOINTS):
        parent = SKELETON.parents[child]
        segments.append((gt2d[parent], gt2d[child]))
        radii.append(max(2.0, CAPSULE_RADIUS[child] * px_per_meter))
    return rasterize_capsules(segments, radii)


def _place_camera(rng, joints, config):
    focal = rng.uniform(900.0, 1500.0)
    depth = rng.uniform(4.0, 7.0)
    u = rng.uniform(0.3, 0.7) * IMAGE_SIZE[0]
    v = rng.uniform(0.35, 0.65) * IMAGE_SIZE[1]
    translation = np.array([(u - IMAGE_SIZE[0] / 2) * depth / focal,
                            (v - IMAGE_SIZE[1] / 2) * depth / focal, depth])
    cam = joints + translation
    full = focal * cam[:, :2] / cam[:, 2:3] + IMAGE_SIZE / 2
    lo, hi = full.min(axis=0), full.max(axis=0)
    center = (lo + hi) / 2
    box = 1.2 * float(np.max(hi - lo))
    truncated = rng.uniform() < config.truncation_prob
    if truncated:
        # 하체가 크롭 밖으로 나가도록 위쪽으로 좁힌다
        shrink = rng.uniform(0.55, 0.75)
        center = center - np.array([0.0, box * (1.0 - shrink) / 2])
        box *= shrink
    bbox = np.array([center[0], center[1], box])
    pi_w = perspective_to_weak(translation, bbox, focal, IMAGE_SIZE)
    return CameraModel(pi_w=pi_w, bbox=bbox, focal=float(focal), image_size=IMAGE_SIZE.copy()), truncated


def _place_occluders(rng, gt2d, config):
    """관절을 가리는 물체 사각형과 두 번째 사람 실루엣을 배치하는 함수"""
    rects = []
    person = np.zeros((CROP_SIZE, CROP_SIZE), dtype=bool)
    if rng.uniform() >= config.occlusion_prob:
        return np.zeros((0, 5)), person
    inside = np.all((gt2d >= 0) & (gt2d < CROP_SIZE), axis=-1)
    candidates = np.flatnonzero(HIGHLY_ARTICULATED_MASK & inside)
    if not len(candidates):
        return np.zeros((0, 5)), person
    count = int(rng.integers(1, 3))
    targets = rng.choice(candidates, size=min(count, len(candidates)), replace=False)
    for k in targets:
        center = gt2d[k] + rng.normal(0.0, 4.0, size=2)
        if rng.uniform() < config.person_occluder_prob:
            angle = rng.uniform(0.0, np.pi)
            direction = np.array([np.cos(angle), np.sin(angle)])
            length = rng.uniform(60.0, 140.0)
            radius = rng.uniform(14.0, 24.0)
            capsule = rasterize_capsules([(center - direction * length / 2, center + direction * length / 2)],
                                         [radius])
            if not capsule.any():
                continue
            person |= capsule
            ys, xs = np.nonzero(capsule)
            rects.append([xs.min(), ys.min(), xs.max() + 1.0, ys.max() + 1.0, 1.0])
        else:
            half = rng.uniform(15.0, 30.0, size=2)
            rects.append([center[0] - half[0], center[1] - half[1], center[0] + half[0], center[1] + half[1], 0.0])
    return np.array(rects, dtype=np.float64), person


def _rect_pixels(rects):
    py, px = np.mgrid[0:CROP_SIZE, 0:CROP_SIZE] + 0.5
    pixels = np.zeros((CROP_SIZE, CROP_SIZE), dtype=bool)
    for x0, y0, x1, y1, is_person in rects:
        if not is_person:
            pixels |= (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
    return pixels


def _render_heatmap(rng, gt2d, occluded, inside, config):
    heatmap = np.zeros((NUM_JOINTS, GRID_HEIGHT, GRID_WIDTH))
    for k in range(NUM_JOINTS):
        if not inside[k]:
            continue
        cx, cy = crop_to_cell(gt2d[k, 0], gt2d[k, 1])
        if occluded[k]:
            bimodal = rng.uniform() < config.bimodal_prob
            angle = rng.uniform(0.0, 2.0 * np.pi)
            offset = rng.uniform(4.0, 7.0) * np.array([np.cos(angle), np.sin(angle)])
            modes = np.clip(np.array([cx, cy]) + np.outer([1.0, -1.0], offset),
                            [3.0, 3.0], [GRID_WIDTH - 4.0, GRID_HEIGHT - 4.0])
            amplitudes = rng.uniform(0.25, 0.45, size=2)
            # 격자 가장자리에서 두 모드가 붙으면 최대값이 0.5 를 넘으므로 퍼진 블롭으로 대신한다
            if bimodal and np.linalg.norm(modes[0] - modes[1]) >= 8.0:
                for (mx, my), amplitude in zip(modes, amplitudes):
                    heatmap[k] += gaussian_blob(mx, my, 2.5, amplitude)
            else:
                shift = rng.normal(0.0, 2.0, size=2)
                heatmap[k] += gaussian_blob(cx + shift[0], cy + shift[1], rng.uniform(4.0, 6.0),
                                            rng.uniform(0.15, 0.35))
        elif rng.uniform() < config.blur_prob:
            heatmap[k] += gaussian_blob(cx, cy, 3.0, rng.uniform(0.55, 0.66))
        else:
            heatmap[k] += gaussian_blob(cx, cy, 2.0, rng.uniform(0.8, 1.0))
    if config.heatmap_noise > 0.0:
        heatmap += rng.uniform(0.0, config.heatmap_noise, size=heatmap.shape)
    return np.clip(heatmap, 0.0, 1.0).astype(np.float32)


def _context_features(rng, rects, camera, truncated, theta):
    root = Rotation.from_matrix(
        np.stack([theta[0:3], theta[3:6], np.cross(theta[0:3], theta[3:6])], axis=-1))
    yaw = root.as_rotvec()[1]
    context = np.zeros(CONTEXT_DIM)
    context[0] = np.sum(rects[:, 4] == 0.0) / 2.0 if len(rects) else 0.0
    context[1] = np.sum(rects[:, 4] == 1.0) / 2.0 if len(rects) else 0.0
    for slot, rect in enumerate(rects[:2]):
        context[2 + 4 * slot:6 + 4 * slot] = rect[:4] / CROP_SIZE
    context[10] = np.sin(yaw) + rng.normal(0.0, 0.05)
    context[11] = np.cos(yaw) + rng.normal(0.0, 0.05)
    context[12] = camera.translation()[2] / 10.0
    context[13] = float(truncated)
    context[14:] = rng.normal(0.0, 0.1, size=2)
    return context


def generate_scene(seed, config=None):
    """시드 하나로부터 정답 포즈, 카메라, 히트맵, 사람 마스크를 갖는 장면을 만드는 함수"""
    config = config or AmbiguityConfig()
    rng = np.random.default_rng(seed)
    theta = sample_pose(rng, config.pose_spread)
    beta = rng.normal(0.0, 0.05, size=4)
    joints = np.asarray(forward_kinematics(theta, beta))
    camera, truncated = _place_camera(rng, joints, config)
    gt2d = camera.project(joints)
    dense2d = camera.project(np.asarray(dense_body_points(joints)))
    inside = np.all((gt2d >= 0) & (gt2d < CROP_SIZE), axis=-1)

    rects, second_person = _place_occluders(rng, gt2d, config)
    object_pixels = _rect_pixels(rects)
    q = np.floor(gt2d).astype(int)
    occluded = np.zeros(NUM_JOINTS, dtype=bool)
    occluded[inside] = (object_pixels | second_person)[q[inside, 1], q[inside, 0]]

    px_per_meter = camera.focal * CROP_SIZE / (camera.bbox[2] * camera.translation()[2])
    silhouette = _body_silhouette(gt2d, px_per_meter)
    person_mask = PersonMask(silhouette & ~second_person & ~object_pixels)
    union_mask = PersonMask(person_mask.pixels | second_person, is_union=True)
    object_occluded = detect_object_occlusion(dense2d, union_mask)
    union_mask.object_occluded = object_occluded
    person_mask.object_occluded = object_occluded

    heatmap = _render_heatmap(rng, gt2d, occluded, inside, config)
    context = _context_features(rng, rects, camera, truncated, theta)
    mask_available = bool(rng.uniform() >= config.mask_unavailable_prob)
    return Scene(
        seed=int(seed), theta=theta, beta=beta, camera=camera, translation=camera.translation(),
        gt2d=gt2d, context=context, heatmap=heatmap, person_mask=person_mask, union_mask=union_mask,
        occluders=rects, occluded_joints=occluded, mask_available=mask_available,
        object_occluded=object_occluded,
    )


# ---- 데이터셋 파일 ----

def _pack_rle(pixels):
    parts = []
    for runs in encode_rle(pixels):
        parts.append(struct.pack("<H", len(runs)))
        parts.append(np.ascontiguousarray(runs, dtype="<u2").tobytes())
    return b"".join(parts)


def _f64(array):
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


def encode_scene(scene):
    flags = int(scene.mask_available) | (int(scene.object_occluded) << 1)
    cam = scene.camera
    parts = [
        struct.pack("<QB", scene.seed, flags),
        _f64(scene.theta), _f64(scene.beta), _f64(cam.pi_w), _f64(cam.bbox), _f64([cam.focal]),
        _f64(cam.image_size), _f64(scene.translation), _f64(scene.gt2d), _f64(scene.context),
        np.asarray(scene.occluded_joints, dtype=np.uint8).tobytes(),
        struct.pack("<I", len(scene.occluders)), _f64(scene.occluders),
        np.ascontiguousarray(scene.heatmap, dtype="<f4").tobytes(),
        _pack_rle(scene.person_mask.pixels), _pack_rle(scene.union_mask.pixels),
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, data, offset=0):
        self.data = data
        self.offset = offset

    def unpack(self, fmt):
        try:
            values = struct.unpack_from(fmt, self.data, self.offset)
        except struct.error as exc:
            raise DatasetError("데이터셋 레코드가 잘려 있습니다") from exc
        self.offset += struct.calcsize(fmt)
        return values

    def array(self, dtype, count, shape=None):
        dtype = np.dtype(dtype)
        if self.offset + dtype.itemsize * count > len(self.data):
            raise DatasetError("데이터셋 레코드가 잘려 있습니다")
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset).copy()
        self.offset += dtype.itemsize * count
        return out.reshape(shape) if shape is not None else out

    def rle(self):
        rows = []
        for _ in range(CROP_SIZE):
            (n_runs,) = self.unpack("<H")
            rows.append(self.array("<u2", 2 * n_runs, (n_runs, 2)))
        return decode_rle(rows)


def decode_scene(reader):
    seed, flags = reader.unpack("<QB")
    theta = reader.array("<f8", NUM_JOINTS * 6)
    beta = reader.array("<f8", 4)
    pi_w = reader.array("<f8", 3)
    bbox = reader.array("<f8", 3)
    (focal,) = reader.array("<f8", 1)
    image_size = reader.array("<f8", 2)
    translation = reader.array("<f8", 3)
    gt2d = reader.array("<f8", NUM_JOINTS * 2, (NUM_JOINTS, 2))
    context = reader.array("<f8", CONTEXT_DIM)
    occluded = reader.array("<u1", NUM_JOINTS).astype(bool)
    (n_rects,) = reader.unpack("<I")
    rects = reader.array("<f8", n_rects * 5, (n_rects, 5))
    heatmap = reader.array("<f4", NUM_JOINTS * GRID_HEIGHT * GRID_WIDTH, (NUM_JOINTS, GRID_HEIGHT, GRID_WIDTH))
    object_occluded = bool(flags & 2)
    person_mask = PersonMask(reader.rle(), object_occluded=object_occluded)
    union_mask = PersonMask(reader.rle(), is_union=True, object_occluded=object_occluded)
    camera = CameraModel(pi_w=pi_w, bbox=bbox, focal=float(focal), image_size=image_size)
    return Scene(seed=int(seed), theta=theta, beta=beta, camera=camera, translation=translation, gt2d=gt2d,
                 context=context, heatmap=heatmap, person_mask=person_mask, union_mask=union_mask,
                 occluders=rects, occluded_joints=occluded, mask_available=bool(flags & 1),
                 object_occluded=object_occluded)


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_dataset(path, scenes, seed=None, config=None):
    """장면 목록을 이진 레코드 파일과 JSON 매니페스트로 저장하고 내용 다이제스트를 돌려주는 함수"""
    body = b"".join([DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(scenes))]
                    + [encode_scene(scene) for scene in scenes])
    digest = hashlib.sha256(body).hexdigest()
    atomic_write_bytes(path, body)
    manifest = {
        "format_version": DATASET_VERSION,
        "count": len(scenes),
        "seed": seed,
        "seeds": [scene.seed for scene in scenes],
        "config": asdict(config) if config is not None else None,
        "skeleton": SKELETON.to_manifest(),
        "heatmap": {"width": GRID_WIDTH, "height": GRID_HEIGHT, "dtype": "float32", "order": "row-major"},
        "crop_size": CROP_SIZE,
        "mask_encoding": "rle-rows-u16",
        "sha256": digest,
    }
    atomic_write_json(manifest_path(path), manifest)
    logger.info("데이터셋 저장: %s (장면 %d개)", path, len(scenes))
    return digest


def read_dataset(path):
    """데이터셋 파일과 매니페스트를 읽어 (매니페스트, 장면 목록) 을 돌려주는 함수"""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"데이터셋 파일이 없습니다: {path}")
    data = path.read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise DatasetError(f"AFDS 데이터셋이 아닙니다: {path}")
    if len(data) < 12:
        raise DatasetError(f"데이터셋 헤더가 잘려 있습니다: {path}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != DATASET_VERSION:
        raise DatasetError(f"지원하지 않는 데이터셋 버전 {version}: {path}")
    manifest = {}
    if manifest_path(path).exists():
        manifest = json.loads(manifest_path(path).read_text(encoding="utf-8"))
        if manifest.get("count") != count:
            raise DatasetError(f"매니페스트 장면 수 {manifest.get('count')} 와 레코드 수 {count} 가 다릅니다")
    reader = _Reader(data, 12)
    scenes = [decode_scene(reader) for _ in range(count)]
    if reader.offset != len(data):
        raise DatasetError(f"데이터셋 끝에 알 수 없는 데이터가 있습니다: {path}")
    return manifest, scenes


def generate_dataset(n_scenes, seed, path, config=None, threads=1):
    """seed+i 시드로 장면 n 개를 만들어 저장하는 함수"""
    config = config or AmbiguityConfig()
    seeds = [seed + i for i in range(n_scenes)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scenes = list(pool.map(lambda s: generate_scene(s, config), seeds))
    else:
        scenes = [generate_scene(s, config) for s in seeds]
    return write_dataset(path, scenes, seed=seed, config=config)
