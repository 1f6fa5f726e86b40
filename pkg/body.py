"""SMPL 대신 쓰는 책상 규모 운동학적 신체 모델과 카메라"""

from dataclasses import dataclass

import numpy as np

import diffcore as dc
from errors import ProjectionError, RotationError

CROP_SIZE = 256

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "left_hip", "left_knee", "left_ankle",
    "right_hip", "right_knee", "right_ankle",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
)
PARENTS = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 2, 10, 11, 2, 13, 14])
NUM_JOINTS = len(JOINT_NAMES)
POSE_DIM = NUM_JOINTS * 6
# 모든 관절이 단위 회전인 6D 포즈
REST_POSE_6D = np.tile([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], NUM_JOINTS)

# 휴지 자세 뼈 오프셋 (미터, 카메라 좌표계: x 오른쪽, y 아래, z 앞)
REST_OFFSETS = np.array([
    [0.00, 0.00, 0.00],
    [0.00, -0.25, 0.00],
    [0.00, -0.25, 0.00],
    [0.00, -0.15, 0.00],
    [0.10, 0.05, 0.00],
    [0.00, 0.42, 0.00],
    [0.00, 0.40, 0.00],
    [-0.10, 0.05, 0.00],
    [0.00, 0.42, 0.00],
    [0.00, 0.40, 0.00],
    [0.17, 0.03, 0.00],
    [0.28, 0.00, 0.00],
    [0.25, 0.00, 0.00],
    [-0.17, 0.03, 0.00],
    [-0.28, 0.00, 0.00],
    [-0.25, 0.00, 0.00],
])

SHAPE_GROUPS = ("torso", "arms", "legs", "head")
# 관절별 뼈 길이 그룹 (루트는 오프셋이 0 이라 그룹이 의미 없음)
JOINT_GROUP = np.array([0, 0, 0, 3, 0, 2, 2, 0, 2, 2, 0, 1, 1, 0, 1, 1])
SHAPE_DIM = len(SHAPE_GROUPS)

HIGHLY_ARTICULATED = ("left_knee", "left_ankle", "right_knee", "right_ankle",
                      "left_elbow", "left_wrist", "right_elbow", "right_wrist")
HIGHLY_ARTICULATED_MASK = np.array([name in HIGHLY_ARTICULATED for name in JOINT_NAMES])

DENSE_FRACTIONS = np.array([0.2, 0.4, 0.6, 0.8])
BONE_CHILDREN = np.arange(1, NUM_JOINTS)
BONE_PARENTS = PARENTS[1:]
NUM_DENSE_POINTS = NUM_JOINTS + len(BONE_CHILDREN) * len(DENSE_FRACTIONS)


@dataclass(frozen=True)
class KinematicTree:
    names: tuple = JOINT_NAMES
    parents: np.ndarray = PARENTS
    offsets: np.ndarray = REST_OFFSETS
    groups: np.ndarray = JOINT_GROUP
    highly_articulated: np.ndarray = HIGHLY_ARTICULATED_MASK

    def to_manifest(self):
        return {
            "joints": list(self.names),
            "parents": [int(p) for p in self.parents],
            "rest_offsets_m": [[float(v) for v in row] for row in self.offsets],
            "shape_groups": list(SHAPE_GROUPS),
            "joint_group": [int(g) for g in self.groups],
            "highly_articulated": [n for n, h in zip(self.names, self.highly_articulated) if h],
        }


SKELETON = KinematicTree()


def _check_seeds(r):
    a1, a2 = r[..., 0:3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    if np.any(n1 < 1e-9):
        raise RotationError("6D 회전의 첫 번째 시드 벡터 길이가 0 입니다")
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.abs(np.sum(a1 * a2, axis=-1)) / (n1 * n2)
    if np.any(~(cos <= 1.0 - 1e-9)):
        raise RotationError("6D 회전의 두 시드 벡터가 평행합니다")


def rot6d_to_matrix(r):
    """그람-슈미트로 6D 시드 두 개를 회전행렬의 열 (b1, b2, b3) 로 바꾸는 함수"""
    _check_seeds(np.asarray(dc.value_of(r)))
    a1, a2 = r[..., 0:3], r[..., 3:6]
    b1 = a1 / dc.sqrt(dc.sqnorm(a1, axis=-1, keepdims=True))
    u2 = a2 - dc.sum_reduce(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = u2 / dc.sqrt(dc.sqnorm(u2, axis=-1, keepdims=True))
    return dc.stack([b1, b2, cross(b1, b2)], axis=-1)


def matrix_to_rot6d(rotation):
    rotation = np.asarray(rotation, dtype=np.float64)
    return np.concatenate([rotation[..., :, 0], rotation[..., :, 1]], axis=-1)


def cross(a, b):
    return dc.stack([
        a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
        a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
        a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
    ], axis=-1)


def decode_pose(theta):
    """(..., J*6) 포즈 벡터를 (..., J, 3, 3) 국소 회전으로 바꾸는 함수"""
    shape = np.shape(dc.value_of(theta))
    return rot6d_to_matrix(dc.reshape(theta, shape[:-1] + (NUM_JOINTS, 6)))


def forward_kinematics(theta, beta, tree=SKELETON):
    """골반을 원점으로 하는 관절 3D 위치 (..., J, 3) 를 계산하는 함수"""
    local = decode_pose(theta)
    scales = dc.exp(dc.take(beta, tree.groups, axis=-1))
    bones = dc.reshape(scales, np.shape(dc.value_of(scales)) + (1,)) * tree.offsets
    lead = np.shape(dc.value_of(local))[:-3]
    bone_lead = np.shape(dc.value_of(bones))[:-2]
    positions = [np.zeros(lead + (3,))]
    rotations = [local[..., 0, :, :]]
    for i in range(1, len(tree.parents)):
        p = tree.parents[i]
        offset = dc.reshape(bones[..., i, :], bone_lead + (3, 1))
        positions.append(positions[p] + dc.matmul(rotations[p], offset)[..., 0])
        rotations.append(dc.matmul(rotations[p], local[..., i, :, :]))
    return dc.stack(positions, axis=-2)


def bone_lengths(joints, tree=SKELETON):
    joints = np.asarray(joints)
    return np.linalg.norm(joints[..., 1:, :] - joints[..., tree.parents[1:], :], axis=-1)


def dense_body_points(joints):
    """관절 16개와 뼈마다 4개의 보간점, 모두 76개의 조밀한 신체 점을 만드는 함수"""
    parent = dc.take(joints, BONE_PARENTS, axis=-2)
    child = dc.take(joints, BONE_CHILDREN, axis=-2)
    lead = np.shape(dc.value_of(parent))[:-2]
    n_bones = len(BONE_CHILDREN)
    t = DENSE_FRACTIONS.reshape(1, -1, 1)
    a = dc.reshape(parent, lead + (n_bones, 1, 3))
    b = dc.reshape(child, lead + (n_bones, 1, 3))
    interp = a * (1.0 - t) + b * t
    return dc.concat([joints, dc.reshape(interp, lead + (n_bones * len(DENSE_FRACTIONS), 3))], axis=-2)


def bbox_feature(bbox, focal):
    """c_B = [c_x, c_y, b] / f"""
    return np.asarray(bbox, dtype=np.float64) / np.asarray(focal, dtype=np.float64)[..., None]


def weak_to_perspective(pi_w, bbox, focal, image_size):
    """약원근 [s, t_x, t_y] 를 원본 영상의 원근 이동 (t_x', t_y', t_z') 로 바꾸는 함수"""
    bbox = np.asarray(bbox, dtype=np.float64)
    focal = np.asarray(focal, dtype=np.float64)
    image_size = np.asarray(image_size, dtype=np.float64)
    s = pi_w[..., 0]
    sb = s * bbox[..., 2]
    if np.any(np.asarray(dc.value_of(sb)) < 1e-6):
        raise ProjectionError("약원근 스케일 s*b 가 너무 작습니다")
    tz = 2.0 * focal / sb
    tx = pi_w[..., 1] + 2.0 * (bbox[..., 0] - image_size[..., 0] / 2.0) / sb
    ty = pi_w[..., 2] + 2.0 * (bbox[..., 1] - image_size[..., 1] / 2.0) / sb
    return dc.stack([tx, ty, tz], axis=-1)


def perspective_to_weak(translation, bbox, focal, image_size):
    """weak_to_perspective 의 역변환"""
    translation = np.asarray(translation, dtype=np.float64)
    bbox = np.asarray(bbox, dtype=np.float64)
    image_size = np.asarray(image_size, dtype=np.float64)
    s = 2.0 * np.asarray(focal, dtype=np.float64) / (bbox[..., 2] * translation[..., 2])
    sb = s * bbox[..., 2]
    tx = translation[..., 0] - 2.0 * (bbox[..., 0] - image_size[..., 0] / 2.0) / sb
    ty = translation[..., 1] - 2.0 * (bbox[..., 1] - image_size[..., 1] / 2.0) / sb
    return np.stack([s, tx, ty], axis=-1)


def project(points, translation, focal, bbox, image_size, crop_size=CROP_SIZE):
    """원본 영상의 핀홀 투영 후 256x256 크롭 픽셀 좌표로 옮기는 함수

    translation, focal, bbox, image_size 는 같은 선행 형태 L 을 가지고 points 는 (L..., P, 3) 이다.
    """
    focal = np.asarray(focal, dtype=np.float64)[..., None]
    bbox = np.asarray(bbox, dtype=np.float64)[..., None, :]
    image_size = np.asarray(image_size, dtype=np.float64)[..., None, :]
    t_shape = np.shape(dc.value_of(translation))
    cam = points + dc.reshape(translation, t_shape[:-1] + (1, 3))
    depth = cam[..., 2]
    depth_value = np.asarray(dc.value_of(depth))
    if np.any(depth_value <= 1e-6):
        bad = np.argwhere(depth_value <= 1e-6)
        raise ProjectionError(f"카메라 뒤에 있는 점: {bad.tolist()}", indices=bad.tolist())
    u_full = focal * cam[..., 0] / depth + image_size[..., 0] / 2.0
    v_full = focal * cam[..., 1] / depth + image_size[..., 1] / 2.0
    scale = crop_size / bbox[..., 2]
    u = (u_full - bbox[..., 0]) * scale + crop_size / 2.0
    v = (v_full - bbox[..., 1]) * scale + crop_size / 2.0
    return dc.stack([u, v], axis=-1)


def unproject(uv, depth, translation, focal, bbox, image_size, crop_size=CROP_SIZE):
    """크롭 픽셀과 카메라 깊이로부터 골반 기준 3D 점을 복원하는 함수"""
    uv = np.asarray(uv, dtype=np.float64)
    translation = np.asarray(translation, dtype=np.float64)
    bbox = np.asarray(bbox, dtype=np.float64)
    image_size = np.asarray(image_size, dtype=np.float64)
    scale = crop_size / bbox[..., 2]
    u_full = (uv[..., 0] - crop_size / 2.0) / scale + bbox[..., 0]
    v_full = (uv[..., 1] - crop_size / 2.0) / scale + bbox[..., 1]
    x = (u_full - image_size[..., 0] / 2.0) * depth / focal
    y = (v_full - image_size[..., 1] / 2.0) * depth / focal
    return np.stack([x, y, depth], axis=-1) - translation


def to_normalized(px, crop_size=CROP_SIZE):
    """크롭 픽셀을 [-1, 1] 범위로 정규화"""
    return px * (2.0 / crop_size) - 1.0


def from_normalized(norm, crop_size=CROP_SIZE):
    return (np.asarray(norm) + 1.0) * (crop_size / 2.0)


@dataclass
class CameraModel:
    """약원근 카메라, 바운딩 박스, 초점 거리와 원본 영상 크기"""

    pi_w: np.ndarray
    bbox: np.ndarray
    focal: float
    image_size: np.ndarray

    @property
    def bbox_feature(self):
        return bbox_feature(self.bbox, self.focal)

    def translation(self):
        return np.asarray(weak_to_perspective(np.asarray(self.pi_w, dtype=np.float64), self.bbox,
                                              self.focal, self.image_size))

    def project(self, points):
        return np.asarray(project(np.asarray(points, dtype=np.float64), self.translation(),
                                  self.focal, self.bbox, self.image_size))

    def project_normalized(self, points):
        return to_normalized(self.project(points))
