"""학습 목적 함수: NLL, 형상 MSE, 최빈값 2D 재투영, 직교성, 관절별 MMD, 마스크 손실과 가중합"""

import logging
from dataclasses import asdict, dataclass, field
from enum import IntEnum

import numpy as np
from scipy.spatial.distance import cdist

import diffcore as dc
from body import SKELETON, from_normalized
from errors import ConfigurationError, SampleCountError
from heatmaps import DISCARD_THRESHOLD
from masks import inside_many

logger = logging.getLogger(__name__)

L2D_VARIANTS = ("mode_only", "all", "visible")


@dataclass
class LossWeights:
    beta: float = 5e-4
    kp2d: float = 1e-2
    nll: float = 1e-1
    orth: float = 1e-1
    mmd: float = 5e-2
    mask: float = 1e-1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigurationError(f"손실 가중치 {name} 는 음수일 수 없습니다: {value}")

    def as_dict(self):
        return asdict(self)

    def scaled(self, factor):
        return LossWeights(**{k: v * factor for k, v in asdict(self).items()})


@dataclass(frozen=True)
class KernelSpec:
    bandwidths: tuple = (0.05, 0.20, 0.90)

    def __post_init__(self):
        if not self.bandwidths or any(a <= 0 for a in self.bandwidths):
            raise ConfigurationError("커널 대역폭은 모두 양수여야 합니다")


DEFAULT_KERNEL = KernelSpec()


class SampleSource(IntEnum):
    HEATMAP_SAMPLES = 0
    DUPLICATED_GROUND_TRUTH = 1
    EXCLUDED = 2


@dataclass
class SupervisionPlan:
    sources: np.ndarray
    reasons: list = field(default_factory=list)

    @property
    def included(self):
        return self.sources != SampleSource.EXCLUDED

    @property
    def uses_heatmap(self):
        return self.sources == SampleSource.HEATMAP_SAMPLES


def imq_kernel(s, s_hat, spec=DEFAULT_KERNEL):
    """역 다중이차 커널 혼합: sum_a a^2 / (a^2 + |s - s_hat|^2)"""
    d2 = dc.sqnorm(s - s_hat, axis=-1)
    total = 0.0
    for a in spec.bandwidths:
        total = total + (a * a) / (d2 + a * a)
    return total


def _gram(a, b, spec):
    sa, sb = np.shape(dc.value_of(a)), np.shape(dc.value_of(b))
    left = dc.reshape(a, sa[:-2] + (sa[-2], 1, sa[-1]))
    right = dc.reshape(b, sb[:-2] + (1, sb[-2], sb[-1]))
    return imq_kernel(left, right, spec)


def mmd(samples, targets, spec=DEFAULT_KERNEL):
    """집합 내부 항은 i != j 의 비편향 평균, 교차 항은 대각을 포함한 2/n^2 합"""
    shape_s, shape_t = np.shape(dc.value_of(samples)), np.shape(dc.value_of(targets))
    n = shape_s[-2]
    if n < 2:
        raise SampleCountError(f"MMD 에는 2개 이상의 샘플이 필요합니다 (n={n})")
    if shape_t[-2] != n:
        raise SampleCountError(f"두 샘플 집합의 크기가 다릅니다: {n} != {shape_t[-2]}")
    diagonal = n * len(spec.bandwidths)
    within_s = (dc.sum_reduce(_gram(samples, samples, spec), axis=(-1, -2)) - diagonal) / (n * (n - 1))
    within_t = (dc.sum_reduce(_gram(targets, targets, spec), axis=(-1, -2)) - diagonal) / (n * (n - 1))
    cross = dc.sum_reduce(_gram(samples, targets, spec), axis=(-1, -2)) * (2.0 / (n * n))
    return within_s + within_t - cross


def build_supervision_plan(status, tree=SKELETON):
    """관절별 MMD 목표 샘플 출처를 정하는 함수"""
    sources = np.empty(len(status.visible), dtype=np.int64)
    reasons = []
    for k in range(len(sources)):
        if not status.inside_crop[k]:
            sources[k], reason = SampleSource.EXCLUDED, "gt_outside_crop"
        elif tree.highly_articulated[k] and status.uncertain[k]:
            if status.max_confidence[k] < DISCARD_THRESHOLD:
                sources[k], reason = SampleSource.EXCLUDED, "empty_heatmap"
            else:
                sources[k], reason = SampleSource.HEATMAP_SAMPLES, "uncertain_articulated"
        elif tree.highly_articulated[k]:
            sources[k], reason = SampleSource.DUPLICATED_GROUND_TRUTH, "certain_articulated"
        elif status.visible[k]:
            sources[k], reason = SampleSource.DUPLICATED_GROUND_TRUTH, "visible"
        else:
            sources[k], reason = SampleSource.EXCLUDED, "invisible"
        reasons.append(reason)
    return SupervisionPlan(sources=sources, reasons=reasons)


def mmd_targets(sources, heatmap_samples, gt2d_norm):
    """계획에 따라 관절별 목표 집합 (..., K, n, 2) 을 만드는 함수"""
    heatmap_samples = np.asarray(heatmap_samples, dtype=np.float64)
    n = heatmap_samples.shape[-2]
    duplicated = np.repeat(np.asarray(gt2d_norm, dtype=np.float64)[..., None, :], n, axis=-2)
    use_heatmap = (np.asarray(sources) == SampleSource.HEATMAP_SAMPLES)[..., None, None]
    return np.where(use_heatmap, heatmap_samples, duplicated)


def loss_mmd(projections, sources, heatmap_samples, gt2d_norm, spec=DEFAULT_KERNEL):
    """포함된 관절의 MMD 평균, 배치 평균

    projections: (B, n, K, 2) 정규화 좌표, sources: (B, K), heatmap_samples: (B, K, n, 2),
    gt2d_norm: (B, K, 2). 배치 축이 없으면 하나짜리 배치로 다룬다.
    """
    if np.ndim(dc.value_of(projections)) == 3:
        projections = dc.reshape(projections, (1,) + np.shape(dc.value_of(projections)))
        sources = np.asarray(sources)[None]
        heatmap_samples = np.asarray(heatmap_samples)[None]
        gt2d_norm = np.asarray(gt2d_norm)[None]
    weights = (np.asarray(sources) != SampleSource.EXCLUDED).astype(np.float64)
    if not weights.any():
        return 0.0
    per_joint = mmd(dc.transpose(projections, (0, 2, 1, 3)),
                    mmd_targets(sources, heatmap_samples, gt2d_norm), spec)
    counts = np.maximum(weights.sum(axis=-1), 1.0)
    per_example = dc.sum_reduce(per_joint * weights, axis=-1) / counts
    return dc.mean(per_example)


def batch_loss_mask(projections, heatmap_samples, heatmap_valid, masks, apply, invisible):
    """가려진 관절의 NF 샘플 중 마스크 밖에 있는 것을 마스크 안 히트맵 샘플 중 가장 가까운 것으로 당기는 l1 손실

    예제별로 바깥 샘플들의 l1 을 기여 샘플 수로 평균하고, 배치 전체 (기여가 없는 예제는 0) 로 평균한다.
    """
    proj_value = np.asarray(dc.value_of(projections))
    batch = proj_value.shape[0]
    rows, cols, joints, targets, weights = [], [], [], [], []
    for b in range(batch):
        if not apply[b] or masks[b] is None:
            continue
        example_rows = []
        for k in np.flatnonzero(invisible[b]):
            if not heatmap_valid[b, k]:
                continue
            candidates = heatmap_samples[b, k]
            candidates = candidates[inside_many(from_normalized(candidates), masks[b])]
            if not len(candidates):
                continue
            points = proj_value[b, :, k]
            outside = np.flatnonzero(~inside_many(from_normalized(points), masks[b]))
            if not len(outside):
                continue
            nearest = cdist(points[outside], candidates, "cityblock").argmin(axis=1)
            example_rows.extend((i, k) for i in outside)
            targets.append(candidates[nearest])
        if not example_rows:
            continue
        rows.extend([b] * len(example_rows))
        cols.extend(i for i, _ in example_rows)
        joints.extend(k for _, k in example_rows)
        weights.extend([1.0 / (len(example_rows) * batch)] * len(example_rows))
    if not rows:
        return 0.0
    key = (np.array(rows), np.array(cols), np.array(joints))
    gathered = dc.index(projections, key)
    l1 = dc.sum_reduce(dc.absolute(gathered - np.concatenate(targets)), axis=-1)
    return dc.sum_reduce(l1 * np.array(weights))


def loss_mask(projections, heatmap_samples, mask, occluded_by_object):
    """예제 하나: projections (n, K_inv, 2), heatmap_samples (K_inv, m, 2), 모두 정규화 좌표"""
    if occluded_by_object:
        return 0.0
    proj_shape = np.shape(dc.value_of(projections))
    k_inv = proj_shape[1]
    return batch_loss_mask(
        dc.reshape(projections, (1,) + proj_shape),
        np.asarray(heatmap_samples)[None],
        np.ones((1, k_inv), dtype=bool),
        [mask],
        np.array([True]),
        np.ones((1, k_inv), dtype=bool),
    )


def loss_nll(flow_model, theta, condition, tape=None):
    """-log p(theta | c) 의 배치 평균"""
    return -dc.mean(flow_model.log_prob(theta, condition, tape=tape))


def loss_beta(beta, beta_gt):
    return dc.mean(dc.sqnorm(beta - beta_gt, axis=-1))


def loss_2d(projections, gt2d, weights=None):
    """관절별 l1 (x, y 합) 의 평균. 가중치 합이 0 이면 0."""
    per_joint = dc.sum_reduce(dc.absolute(projections - gt2d), axis=-1)
    if weights is None:
        return dc.mean(per_joint)
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), np.shape(dc.value_of(per_joint)))
    total = weights.sum()
    if total <= 0.0:
        return 0.0
    return dc.sum_reduce(per_joint * weights) / total


def loss_2d_mode(mode_projections, gt2d):
    """근사 최빈값의 투영에만 적용하는 2D 재투영 손실"""
    return loss_2d(mode_projections, gt2d)


def loss_2d_samples(sample_projections, gt2d, variant, visible=None):
    """무작위 가설에 대한 2D 손실 (all: 모든 관절, visible: 보이는 관절만)"""
    if variant not in L2D_VARIANTS:
        raise ConfigurationError(f"알 수 없는 L2D 변형: {variant}")
    if variant == "mode_only":
        return 0.0
    gt = np.asarray(gt2d)[..., None, :, :]
    if variant == "all":
        return loss_2d(sample_projections, gt)
    return loss_2d(sample_projections, gt, np.asarray(visible, dtype=np.float64)[..., None, :])


def loss_orth(raw6d):
    """그람-슈미트 이전의 원시 시드가 정규직교가 되도록 하는 벌점의 관절 평균"""
    a1, a2 = raw6d[..., 0:3], raw6d[..., 3:6]
    penalty = (dc.square(dc.sqnorm(a1, axis=-1) - 1.0)
               + dc.square(dc.sqnorm(a2, axis=-1) - 1.0)
               + dc.square(dc.sum_reduce(a1 * a2, axis=-1)))
    return dc.mean(penalty)


def total_loss(terms, weights):
    """가중합. weights 는 LossWeights 또는 항 이름 -> 가중치 사전."""
    if isinstance(weights, LossWeights):
        weights = weights.as_dict()
    total = 0.0
    for name, value in terms.items():
        w = weights.get(name, 0.0)
        if w:
            total = total + value * w
    return total
