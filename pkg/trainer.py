"""학습 루프, 계층형 실행 설정, 분리형 가중치 감쇠 Adam, 절제 격자"""

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

import diffcore as dc
from body import NUM_JOINTS, POSE_DIM, SKELETON, forward_kinematics, to_normalized
from condition import DETECTION_FILTER_PX, is_reliable_detection
from errors import ConfigurationError, DatasetError, TrainingDivergedError
from heatmaps import argmax_pose, classify_joints, sample_all_joints
from losses import (L2D_VARIANTS, KernelSpec, LossWeights, batch_loss_mask, build_supervision_plan,
                    loss_2d_mode, loss_2d_samples, loss_beta, loss_mmd, loss_nll, loss_orth, total_loss)
from model import AmbiFlowModel, ModelTopology, SceneInputs

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent / "presets"
TERM_NAMES = ("nll", "beta", "kp2d", "kp2d_samples", "orth", "mmd", "mask")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    iterations: int = 10_000
    n_samples: int = 25
    use_mmd: bool = True
    use_mask: bool = True
    l2d_variant: str = "mode_only"
    l2d_sample_weight: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100
    detection_filter_px: float = DETECTION_FILTER_PX
    kernel_bandwidths: list = field(default_factory=lambda: [0.05, 0.20, 0.90])
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelTopology = field(default_factory=ModelTopology)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"학습률은 양수여야 합니다: {self.lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay 는 0 이상이어야 합니다: {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size 는 1 이상이어야 합니다: {self.batch_size}")
        if self.iterations < 1:
            raise ConfigurationError(f"iterations 는 1 이상이어야 합니다: {self.iterations}")
        if self.n_samples < 2:
            raise ConfigurationError(f"n_samples 는 2 이상이어야 합니다: {self.n_samples}")
        if self.l2d_variant not in L2D_VARIANTS:
            raise ConfigurationError(f"알 수 없는 l2d_variant: {self.l2d_variant}")
        if self.l2d_sample_weight < 0:
            raise ConfigurationError(f"l2d_sample_weight 는 0 이상이어야 합니다: {self.l2d_sample_weight}")
        self.kernel = KernelSpec(tuple(self.kernel_bandwidths))

    def to_dict(self):
        data = asdict(self)
        data.pop("kernel", None)
        return data

    @classmethod
    def from_dict(cls, data):
        data = copy.deepcopy(data)
        try:
            weights = LossWeights(**data.pop("weights", {}))
            model = ModelTopology(**data.pop("model", {}))
            return cls(weights=weights, model=model, **data)
        except TypeError as exc:
            raise ConfigurationError(f"알 수 없는 설정 키: {exc}") from exc


# ---- 계층형 설정 ----

def parse_override(text):
    """'key=value' 를 (key, 값) 으로. 값은 가능하면 JSON 리터럴로 읽는다."""
    if "=" not in text:
        raise ConfigurationError(f"덮어쓰기는 key=value 형식이어야 합니다: {text}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(data, overrides):
    """점으로 구분된 키 (예: weights.mmd) 로 중첩 설정 사전을 덮어쓰는 함수"""
    data = copy.deepcopy(data)
    for key, value in dict(overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigurationError(f"알 수 없는 설정 키: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"알 수 없는 설정 키: {key}")
        node[parts[-1]] = value
    return data


def _flatten(data, prefix=""):
    flat = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def load_preset(name, _seen=()):
    """presets/<name>.json 을 읽는 함수. "alias" 키가 있으면 그 이름의 프리셋을 대신 읽는다."""
    path = PRESET_DIR / f"{name}.json"
    if not path.exists():
        available = sorted(p.stem for p in PRESET_DIR.glob("*.json"))
        raise ConfigurationError(f"프리셋 '{name}' 이 없습니다 (사용 가능: {', '.join(available)})")
    data = json.loads(path.read_text(encoding="utf-8"))
    if "alias" in data:
        if name in _seen:
            raise ConfigurationError(f"프리셋 별칭이 순환합니다: {' -> '.join(_seen + (name,))}")
        return load_preset(data["alias"], _seen + (name,))
    return data


def _read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"설정 파일이 없습니다: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"설정 파일을 읽을 수 없습니다: {path} ({exc})") from exc


def layered_config_dict(preset=None, config_path=None, row_overrides=None, overrides=None):
    """기본값 <- 프리셋 <- 설정 파일 <- 격자 행 <- 명령행 덮어쓰기 순으로 합친 설정 사전"""
    data = TrainConfig().to_dict()
    if preset:
        data = apply_overrides(data, _flatten(load_preset(preset).get("config", {})))
    if config_path:
        data = apply_overrides(data, _flatten(_read_config_file(config_path)))
    data = apply_overrides(data, row_overrides)
    return apply_overrides(data, overrides)


def load_train_config(preset=None, config_path=None, overrides=None):
    return TrainConfig.from_dict(layered_config_dict(preset, config_path, overrides=overrides))


def lattice_configs(preset, config_path=None, overrides=None):
    """절제 프리셋의 행마다 (이름, TrainConfig) 를 돌려주는 함수"""
    rows = load_preset(preset).get("rows")
    if not rows:
        raise ConfigurationError(f"프리셋 '{preset}' 에는 절제 행이 없습니다")
    return [(row["name"], TrainConfig.from_dict(
        layered_config_dict(preset, config_path, row.get("overrides"), overrides))) for row in rows]


# ---- 최적화 ----

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_store(cls, store):
        return cls(m={k: np.zeros_like(p) for k, p in store.params.items()},
                   v={k: np.zeros_like(p) for k, p in store.params.items()})


def adam_step(store, state, lr, wd):
    """분리형 가중치 감쇠 후 편향 보정 Adam 갱신, 그래디언트는 0 으로 되돌린다"""
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param in store.params.items():
        grad = store.grads[name]
        if wd:
            param -= lr * wd * param
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    store.zero_grad()
    store.bump_version()
    return state


# ---- 학습 예제 ----

@dataclass
class TrainingExample:
    scene_index: int
    inputs: SceneInputs
    theta: np.ndarray
    beta: np.ndarray
    gt2d: np.ndarray
    heatmap: np.ndarray
    visible: np.ndarray
    invisible: np.ndarray
    sources: np.ndarray
    mask: object
    apply_mask: bool


def prepare_examples(scenes, filter_px=DETECTION_FILTER_PX):
    """장면마다 조건 입력, 관절 상태, 감독 계획을 미리 계산하고 검출이 크게 빗나간 장면은 버리는 함수"""
    examples, dropped = [], 0
    for i, scene in enumerate(scenes):
        status = classify_joints(scene.heatmap, scene.gt2d)
        keypoints, _, _ = argmax_pose(scene.heatmap)
        if not is_reliable_detection(keypoints, scene.gt2d, status.visible & status.inside_crop, filter_px):
            dropped += 1
            continue
        plan = build_supervision_plan(status, SKELETON)
        examples.append(TrainingExample(
            scene_index=i,
            inputs=SceneInputs.from_scene(scene),
            theta=scene.theta,
            beta=scene.beta,
            gt2d=scene.gt2d,
            heatmap=scene.heatmap,
            visible=status.visible & status.inside_crop,
            invisible=status.invisible,
            sources=plan.sources,
            mask=scene.union_mask if scene.mask_available else None,
            apply_mask=bool(scene.mask_available and not scene.object_occluded),
        ))
    if dropped:
        logger.warning("검출 거리 %.0f px 초과로 장면 %d개를 학습에서 제외했습니다", filter_px, dropped)
    return examples, dropped


class BatchSampler:
    """시드로 정해지는 순열을 돌며 배치를 만드는 샘플러 (에폭이 끝나면 다시 섞는다)"""

    def __init__(self, n_examples, batch_size, rng):
        self.n = n_examples
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0

    def next_batch(self):
        picked = []
        while len(picked) < self.batch_size:
            if self._cursor >= len(self._order):
                self._order = self.rng.permutation(self.n)
                self._cursor = 0
            take = min(self.batch_size - len(picked), len(self._order) - self._cursor)
            picked.extend(self._order[self._cursor:self._cursor + take].tolist())
            self._cursor += take
        return picked


def _stack_inputs(examples):
    return SceneInputs(**{name: np.concatenate([getattr(e.inputs, name) for e in examples])
                          for name in ("context", "keypoints_px", "confidences", "bbox", "focal", "image_size")})


def _needs_samples(config):
    return config.use_mmd or config.use_mask or (
        config.l2d_variant != "mode_only" and config.l2d_sample_weight > 0)


def batch_terms(model, config, examples, rng, tape):
    """배치 하나의 손실 항을 테이프 위에서 계산하는 함수 (항 이름 -> 스칼라)"""
    batch = len(examples)
    inputs = _stack_inputs(examples)
    theta_gt = np.stack([e.theta for e in examples])
    beta_gt = np.stack([e.beta for e in examples])
    gt2d = np.stack([e.gt2d for e in examples])
    c = model.condition(inputs, tape=tape)
    beta, pi_w = model.regress(c, tape=tape)
    translation = model.translation(pi_w, inputs)

    terms = {name: 0.0 for name in TERM_NAMES}
    terms["nll"] = loss_nll(model.flow, theta_gt, c, tape=tape)
    terms["beta"] = loss_beta(beta, beta_gt)

    mode_theta, _ = model.flow.forward(np.zeros((batch, POSE_DIM)), c, tape=tape)
    mode_joints = forward_kinematics(mode_theta, beta)
    terms["kp2d"] = loss_2d_mode(model.project(mode_joints, translation, inputs), gt2d)
    orth = loss_orth(dc.reshape(mode_theta, (batch, NUM_JOINTS, 6)))

    if _needs_samples(config):
        n = config.n_samples
        cond_dim = model.topology.cond_dim
        latents = rng.standard_normal((batch, n, POSE_DIM))
        c_wide = dc.mul(dc.reshape(c, (batch, 1, cond_dim)), np.ones((1, n, 1)))
        sample_theta, _ = model.flow.forward(latents, c_wide, tape=tape)
        sample_joints = forward_kinematics(sample_theta, dc.reshape(beta, (batch, 1, -1)))
        sample_px = model.project(sample_joints, translation, inputs)
        sample_norm = to_normalized(sample_px)
        orth = 0.5 * (orth + loss_orth(dc.reshape(sample_theta, (batch, n, NUM_JOINTS, 6))))
        drawn = [sample_all_joints(e.heatmap, n, rng) for e in examples]
        heatmap_samples = np.stack([d[0] for d in drawn])
        heatmap_valid = np.stack([d[1] for d in drawn])
        if config.use_mmd:
            terms["mmd"] = loss_mmd(sample_norm, np.stack([e.sources for e in examples]), heatmap_samples,
                                    to_normalized(gt2d), config.kernel)
        if config.use_mask:
            terms["mask"] = batch_loss_mask(sample_norm, heatmap_samples, heatmap_valid,
                                            [e.mask for e in examples],
                                            np.array([e.apply_mask for e in examples]),
                                            np.stack([e.invisible for e in examples]))
        if config.l2d_variant != "mode_only" and config.l2d_sample_weight > 0:
            terms["kp2d_samples"] = loss_2d_samples(sample_px, gt2d, config.l2d_variant,
                                                    np.stack([e.visible for e in examples]))
    terms["orth"] = orth
    return terms


def term_weights(config):
    weights = config.weights.as_dict()
    weights["kp2d_samples"] = config.l2d_sample_weight
    if not config.use_mmd:
        weights["mmd"] = 0.0
    if not config.use_mask:
        weights["mask"] = 0.0
    return weights


@dataclass
class TrainResult:
    model: AmbiFlowModel
    log: pd.DataFrame
    dropped: int
    examples: int


def train(config, scenes, checkpoint_path=None, show_progress=False):
    """배치마다 조건 구성, 손실 계산, 역전파, Adam 갱신을 반복하고 항별 학습 기록을 남기는 함수"""
    if not scenes:
        raise DatasetError("학습 데이터셋이 비어 있습니다")
    examples, dropped = prepare_examples(scenes, config.detection_filter_px)
    if not examples:
        raise DatasetError(f"검출 거리 필터 이후 남은 장면이 없습니다 (전체 {len(scenes)}개)")
    model = AmbiFlowModel(config.model, seed=config.seed)
    state = AdamState.for_store(model.store)
    rng = np.random.default_rng(config.seed)
    sampler = BatchSampler(len(examples), config.batch_size, rng)
    weights = term_weights(config)
    rows = []
    started = time.perf_counter()
    logger.info("학습 시작: 장면 %d개, 반복 %d회, 배치 %d", len(examples), config.iterations, config.batch_size)

    for it in tqdm(range(1, config.iterations + 1), desc="train", disable=not show_progress):
        batch = [examples[i] for i in sampler.next_batch()]
        tape = dc.Tape()
        terms = batch_terms(model, config, batch, rng, tape)
        total = total_loss(terms, weights)
        values = {name: float(np.asarray(dc.value_of(terms[name]))) for name in TERM_NAMES}
        total_value = float(np.asarray(dc.value_of(total)))
        if not np.isfinite(total_value) or not all(np.isfinite(v) for v in values.values()):
            raise TrainingDivergedError(f"{it}번째 반복에서 손실이 유한하지 않습니다: {values}",
                                        iteration=it, terms=values)
        if isinstance(total, dc.Var):
            tape.backward(total)
        adam_step(model.store, state, config.lr, config.weight_decay)
        rows.append({"iter": it, **values, "total": total_value, "wall_time": time.perf_counter() - started})
        logger.debug("iter %d %s total=%.6f", it, values, total_value)
        if config.log_every and it % config.log_every == 0:
            logger.info("iter %d: total %.4f nll %.4f mmd %.4f mask %.4f", it, total_value,
                        values["nll"], values["mmd"], values["mask"])
        if checkpoint_path and config.checkpoint_every and it % config.checkpoint_every == 0:
            model.save(checkpoint_path, extra={"iteration": it, "train_config": config.to_dict()})

    if checkpoint_path:
        model.save(checkpoint_path, extra={"iteration": config.iterations, "train_config": config.to_dict()})
    log = pd.DataFrame(rows, columns=["iter", *TERM_NAMES, "total", "wall_time"])
    return TrainResult(model=model, log=log, dropped=dropped, examples=len(examples))
