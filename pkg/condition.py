"""흐름 조건 c = [c_ctx, c_P, c_B] 구성과 형상/카메라 회귀 헤드"""

import logging
from dataclasses import dataclass

import numpy as np

import diffcore as dc
from body import NUM_JOINTS, SHAPE_DIM, bbox_feature, to_normalized

logger = logging.getLogger(__name__)

CTX_DIM = 16
# 전체 규모 설정은 presets/full_scale.json 에 있다
POSE_EMBED_DIM = 32
EMBED_HIDDEN = 64
HEAD_HIDDEN = 64
BBOX_DIM = 3
POSE_INPUT_DIM = NUM_JOINTS * 3
HEAD_OUTPUT_DIM = SHAPE_DIM + 3
DETECTION_FILTER_PX = 30.0
_LOG2 = np.log(2.0)


@dataclass
class Condition:
    context: np.ndarray
    pose_embedding: np.ndarray
    bbox_feature: np.ndarray

    @property
    def vector(self):
        return np.concatenate([self.context, self.pose_embedding, self.bbox_feature], axis=-1)

    @classmethod
    def split(cls, vector, ctx_dim=CTX_DIM, embed_dim=POSE_EMBED_DIM):
        vector = np.asarray(vector)
        return cls(vector[..., :ctx_dim], vector[..., ctx_dim:ctx_dim + embed_dim],
                   vector[..., ctx_dim + embed_dim:])


def pose_input(keypoints_px, confidences):
    """(..., K, 2) 크롭 좌표와 (..., K) 신뢰도를 관절별 [x, y, conf] 로 펼친 임베딩 입력"""
    keypoints = to_normalized(np.asarray(keypoints_px, dtype=np.float64))
    conf = np.asarray(confidences, dtype=np.float64)[..., None]
    stacked = np.concatenate([keypoints, conf], axis=-1)
    return stacked.reshape(stacked.shape[:-2] + (-1,))


def build_condition(store, embed_layers, context, keypoints_px, confidences, bbox, focal,
                    use_bbox=True, use_pose=True, tape=None):
    """문맥 특징, 최대우도 2D 포즈 임베딩, 정규화된 bbox 특징을 이어 붙이는 함수"""
    context = np.asarray(context, dtype=np.float64)
    lead = context.shape[:-1]
    if use_pose:
        pose_embedding = dc.forward_mlp(pose_input(keypoints_px, confidences), store, embed_layers, tape=tape)
    else:
        pose_embedding = np.zeros(lead + (store.params[embed_layers[-1][1]].shape[0],))
    if use_bbox:
        c_b = bbox_feature(bbox, focal)
    else:
        c_b = np.zeros(lead + (BBOX_DIM,))
    return dc.concat([context, pose_embedding, c_b], axis=-1)


def positive_scale(raw):
    """0 에서 1 이 되는 softplus 형태의 양수 변환"""
    return dc.softplus(raw) / _LOG2 + 1e-6


def regress_shape_camera(store, head_layers, condition, tape=None):
    """조건 벡터로부터 beta 와 약원근 카메라 [s, t_x, t_y] 를 회귀하는 함수"""
    out = dc.forward_mlp(condition, store, head_layers, tape=tape)
    lead = np.shape(dc.value_of(out))[:-1]
    beta = out[..., :SHAPE_DIM]
    scale = dc.reshape(positive_scale(out[..., SHAPE_DIM]), lead + (1,))
    pi_w = dc.concat([scale, out[..., SHAPE_DIM + 1:SHAPE_DIM + 3]], axis=-1)
    return beta, pi_w


def detection_distance(keypoints_px, gt2d, visible):
    """보이는 관절에서 검출기 argmax 포즈와 정답 2D 포즈의 평균 거리"""
    visible = np.asarray(visible, dtype=bool)
    if not visible.any():
        return 0.0
    d = np.linalg.norm(np.asarray(keypoints_px) - np.asarray(gt2d), axis=-1)
    return float(d[visible].mean())


def is_reliable_detection(keypoints_px, gt2d, visible, threshold=DETECTION_FILTER_PX):
    return detection_distance(keypoints_px, gt2d, visible) <= threshold
