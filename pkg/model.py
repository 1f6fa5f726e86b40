"""조건 임베딩, 형상/카메라 헤드, 흐름을 묶은 AmbiFlow 모델과 체크포인트 입출력"""

import logging
from dataclasses import asdict, dataclass

import numpy as np

import diffcore as dc
from body import (NUM_JOINTS, POSE_DIM, REST_POSE_6D, SHAPE_DIM, dense_body_points, forward_kinematics, project,
                  to_normalized, weak_to_perspective)
from condition import (BBOX_DIM, CTX_DIM, EMBED_HIDDEN, HEAD_HIDDEN, HEAD_OUTPUT_DIM, POSE_EMBED_DIM,
                       POSE_INPUT_DIM, build_condition, regress_shape_camera)
from errors import CheckpointError, ConfigurationError
from flow import DEFAULT_ALPHA, FlowModel, HypothesisSet
from heatmaps import argmax_pose

logger = logging.getLogger(__name__)

MODEL_FORMAT = "ambiflow-model/1"


@dataclass
class ModelTopology:
    n_layers: int = 8
    hidden: int = 128
    alpha: float = DEFAULT_ALPHA
    ctx_dim: int = CTX_DIM
    embed_dim: int = POSE_EMBED_DIM
    embed_hidden: int = EMBED_HIDDEN
    head_hidden: int = HEAD_HIDDEN
    volume_preserving: bool = False
    use_bbox_feature: bool = True
    use_pose_condition: bool = True

    def __post_init__(self):
        for name in ("n_layers", "hidden", "ctx_dim", "embed_dim", "embed_hidden", "head_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} 는 1 이상이어야 합니다: {getattr(self, name)}")
        if self.alpha <= 0:
            raise ConfigurationError(f"soft-clamp alpha 는 양수여야 합니다: {self.alpha}")

    @property
    def cond_dim(self):
        return self.ctx_dim + self.embed_dim + BBOX_DIM

    def condition_layout(self):
        return {"context": self.ctx_dim, "pose_embedding": self.embed_dim, "bbox_feature": BBOX_DIM}


@dataclass
class SceneInputs:
    """모델이 한 번에 보는 조건 입력 배치 (선행 축 B)"""

    context: np.ndarray
    keypoints_px: np.ndarray
    confidences: np.ndarray
    bbox: np.ndarray
    focal: np.ndarray
    image_size: np.ndarray

    @classmethod
    def from_scene(cls, scene):
        keypoints, confidence, _ = argmax_pose(scene.heatmap)
        return cls(
            context=np.asarray(scene.context, dtype=np.float64)[None],
            keypoints_px=keypoints[None],
            confidences=confidence[None],
            bbox=np.asarray(scene.camera.bbox, dtype=np.float64)[None],
            focal=np.array([scene.camera.focal], dtype=np.float64),
            image_size=np.asarray(scene.camera.image_size, dtype=np.float64)[None],
        )

    @classmethod
    def stack(cls, scenes):
        parts = [cls.from_scene(scene) for scene in scenes]
        return cls(**{name: np.concatenate([getattr(p, name) for p in parts])
                      for name in ("context", "keypoints_px", "confidences", "bbox", "focal", "image_size")})

    def __len__(self):
        return len(self.focal)

    def row(self, b):
        return SceneInputs(self.context[b:b + 1], self.keypoints_px[b:b + 1], self.confidences[b:b + 1],
                           self.bbox[b:b + 1], self.focal[b:b + 1], self.image_size[b:b + 1])


class AmbiFlowModel:
    """c = [c_ctx, c_P, c_B] 조건 위의 포즈 흐름과 결정적 형상/카메라 헤드"""

    def __init__(self, topology=None, store=None, seed=0, debug=False):
        self.topology = topology or ModelTopology()
        t = self.topology
        fresh = store is None
        self.store = dc.ParamStore() if fresh else store
        self.embed_layers = [(f"embed.{i}.weight", f"embed.{i}.bias") for i in range(2)]
        self.head_layers = [(f"head.{i}.weight", f"head.{i}.bias") for i in range(3)]
        self.flow = FlowModel(self.store, POSE_DIM, t.cond_dim, n_layers=t.n_layers, hidden=t.hidden,
                              alpha=t.alpha, volume_preserving=t.volume_preserving, prefix="flow", debug=debug,
                              offset=REST_POSE_6D)
        if fresh:
            self.init_params(np.random.default_rng(seed))

    def init_params(self, rng):
        t = self.topology
        dc.init_mlp(self.store, "embed", [POSE_INPUT_DIM, t.embed_hidden, t.embed_dim], rng, zero_last=False)
        dc.init_mlp(self.store, "head", [t.cond_dim, t.head_hidden, t.head_hidden, HEAD_OUTPUT_DIM], rng)
        self.flow.init_params(rng)
        logger.debug("모델 파라미터 초기화: %d개 값", self.store.num_values())
        return self

    # ---- 순전파 구성 요소 ----

    def condition(self, inputs, tape=None):
        t = self.topology
        return build_condition(self.store, self.embed_layers, inputs.context, inputs.keypoints_px,
                               inputs.confidences, inputs.bbox, inputs.focal,
                               use_bbox=t.use_bbox_feature, use_pose=t.use_pose_condition, tape=tape)

    def regress(self, condition, tape=None):
        return regress_shape_camera(self.store, self.head_layers, condition, tape=tape)

    def translation(self, pi_w, inputs):
        return weak_to_perspective(pi_w, inputs.bbox, inputs.focal, inputs.image_size)

    def project(self, points, translation, inputs):
        """points (B, [n,] P, 3) 를 크롭 픽셀로 투영. 가설 축 n 이 있으면 카메라를 그 축으로 넓힌다."""
        extra = np.ndim(dc.value_of(points)) - 3
        t_shape = np.shape(dc.value_of(translation))
        pad = (1,) * extra
        return project(points, dc.reshape(translation, t_shape[:1] + pad + t_shape[1:]),
                       inputs.focal.reshape(inputs.focal.shape + pad),
                       inputs.bbox.reshape(inputs.bbox.shape[:1] + pad + (3,)),
                       inputs.image_size.reshape(inputs.image_size.shape[:1] + pad + (2,)))

    # ---- 추론 ----

    def hypotheses(self, inputs, n, rng, latents=None):
        """장면 하나 (B=1) 에 대해 n 개의 가설과 3D 관절, 조밀 점, 2D 투영을 만드는 함수"""
        if len(inputs) != 1:
            raise ConfigurationError(f"hypotheses 는 장면 하나만 받습니다 (B={len(inputs)})")
        c = np.asarray(self.condition(inputs))
        beta, pi_w = self.regress(c)
        hyps = self.flow.sample(c[0], n, rng, latents=latents)
        betas = np.broadcast_to(np.asarray(beta)[0], (n, SHAPE_DIM)).copy()
        joints = np.asarray(forward_kinematics(hyps.poses, betas))
        dense = np.asarray(dense_body_points(joints))
        translation = np.asarray(self.translation(np.asarray(pi_w), inputs))
        hyps.betas = betas
        hyps.keypoints3d = joints
        hyps.dense_points = dense
        hyps.projections = np.asarray(self.project(joints[None], translation, inputs))[0]
        return hyps

    def mode_prediction(self, inputs):
        """근사 최빈값 (잠재 0) 의 포즈, 3D 관절, 조밀 점, 2D 투영을 배치로 돌려주는 함수"""
        c = np.asarray(self.condition(inputs))
        beta, pi_w = (np.asarray(v) for v in self.regress(c))
        pose = self.flow.mode(c)
        joints = np.asarray(forward_kinematics(pose, beta))
        translation = np.asarray(self.translation(pi_w, inputs))
        return HypothesisSet(
            poses=pose,
            latents=np.zeros_like(pose),
            betas=beta,
            keypoints3d=joints,
            dense_points=np.asarray(dense_body_points(joints)),
            projections=np.asarray(self.project(joints, translation, inputs)),
        )

    def normalized_projection(self, points, translation, inputs):
        return to_normalized(self.project(points, translation, inputs))

    # ---- 체크포인트 ----

    def metadata(self, extra=None):
        meta = {
            "format": MODEL_FORMAT,
            "topology": asdict(self.topology),
            "condition_layout": self.topology.condition_layout(),
            "flow": self.flow.topology(),
            "pose_dim": POSE_DIM,
            "shape_dim": SHAPE_DIM,
            "num_joints": NUM_JOINTS,
        }
        meta.update(extra or {})
        return meta

    def save(self, path, extra=None):
        return dc.save_checkpoint(path, self.store, self.metadata(extra))

    @classmethod
    def load(cls, path, debug=False):
        store, metadata = dc.load_checkpoint(path)
        if metadata.get("format") != MODEL_FORMAT:
            raise CheckpointError(f"AmbiFlow 모델 체크포인트가 아닙니다: {path}")
        try:
            topology = ModelTopology(**metadata["topology"])
        except (KeyError, TypeError, ConfigurationError) as exc:
            raise CheckpointError(f"체크포인트 토폴로지를 읽을 수 없습니다: {path} ({exc})") from exc
        reference = cls(topology, seed=0).store
        expected = {name: value.shape for name, value in reference.params.items()}
        found = {name: value.shape for name, value in store.params.items()}
        if expected != found:
            missing = sorted(set(expected) ^ set(found))
            raise CheckpointError(f"체크포인트 파라미터가 토폴로지와 맞지 않습니다: {path} {missing[:5]}")
        return cls(topology, store=store, debug=debug), metadata
