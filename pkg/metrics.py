"""다중 가설 평가: 정확도(MPJPE, PA-MPJPE, PVE), 2D 일관성, 다양성, 마스크 타당성, 가설 수 스윕"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

from body import HIGHLY_ARTICULATED_MASK, from_normalized
from errors import ConfigurationError
from fileio import atomic_write_frame, atomic_write_json
from heatmaps import classify_joints, sample_all_joints
from masks import DistanceField, inside_many
from model import SceneInputs

logger = logging.getLogger(__name__)

MM = 1000.0
METRIC_NAMES = ("mpjpe", "pa_mpjpe", "pve")
PA_MAX_ITERATIONS = 100
PA_TOLERANCE = 1e-10
PA_RESIDUAL_FLOOR = 1e-9
REPORT_COLUMNS = [
    "scene", "seed", "n_hypotheses",
    "mode_mpjpe", "mode_pa_mpjpe", "mode_pve",
    "min_mpjpe", "min_pa_mpjpe", "min_pve",
    "kp2d_mode", "kp2d_samples", "spread_visible", "spread_invisible",
    "perc_in", "min_dist", "spread_ratio",
]


def _root_aligned(points):
    points = np.asarray(points, dtype=np.float64)
    return points - points[..., :1, :]


def mpjpe(pred, gt):
    """골반(루트) 정렬 후 관절별 유클리드 거리의 평균. 선행 축은 그대로 남는다."""
    return np.linalg.norm(_root_aligned(pred) - _root_aligned(gt), axis=-1).mean(axis=-1)


def _similarity_fit(pred, gt, weights):
    """가중 최소제곱 상사 변환 (Umeyama) 으로 맞춘 좌표와 퇴화 여부"""
    w = weights / weights.sum()
    mu_p, mu_g = w @ pred, w @ gt
    x, y = pred - mu_p, gt - mu_g
    var_p = float(np.sum(w * np.sum(x * x, axis=-1)))
    cov = (y * w[:, None]).T @ x
    if var_p < 1e-12 or np.linalg.matrix_rank(cov, tol=1e-12 * max(1.0, np.abs(cov).max())) < 2:
        return x + mu_g, True
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(u) * np.linalg.det(vt)) or 1.0
    rotation = (u * d) @ vt
    scale = np.sum(s * d) / var_p
    return scale * x @ rotation.T + mu_g, False


def procrustes_align(pred, gt, weights=None):
    """SVD 상사 변환 (회전, 이동, 스케일) 으로 pred 를 gt 에 맞춘 좌표. 반사는 부호 보정으로 막는다."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    weights = np.ones(len(pred)) if weights is None else np.asarray(weights, dtype=np.float64)
    aligned, degenerate = _similarity_fit(pred, gt, weights)
    if degenerate:
        logger.warning("교차 공분산 계수가 부족해 이동만 맞춥니다")
    return aligned


def _mean_error(aligned, gt):
    return float(np.linalg.norm(aligned - gt, axis=-1).mean())


def _refine_alignment(pred, gt, aligned):
    """잔차의 역수를 가중치로 한 Procrustes 를 반복해 평균 거리를 줄이는 함수. 줄어드는 단계만 받아들인다."""
    best = _mean_error(aligned, gt)
    for _ in range(PA_MAX_ITERATIONS):
        residual = np.linalg.norm(aligned - gt, axis=-1)
        candidate, _ = _similarity_fit(pred, gt, 1.0 / np.maximum(residual, PA_RESIDUAL_FLOOR))
        error = _mean_error(candidate, gt)
        if not error < best:
            break
        gain = best - error
        aligned, best = candidate, error
        if gain <= PA_TOLERANCE * max(best, 1.0):
            break
    return best


def pa_mpjpe(pred, gt):
    """평균 관절 거리가 가장 작은 상사 정렬 후의 오차

    최소제곱 Procrustes 해와 골반 이동 정렬에서 각각 가중 반복을 시작해 작은 쪽을 쓴다.
    골반 이동 정렬의 오차가 MPJPE 이므로 결과는 MPJPE 를 넘지 않는다.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim > 2:
        return np.array([pa_mpjpe(p, gt) for p in pred])
    if len(pred) < 3:
        raise ConfigurationError("PA-MPJPE 에는 관절이 3개 이상 필요합니다")
    gt = np.asarray(gt, dtype=np.float64)
    starts = (procrustes_align(pred, gt), pred - pred[0] + gt[0])
    return min(_refine_alignment(pred, gt, start) for start in starts)


def pve(pred_dense, gt_dense, aligned=True):
    """조밀 신체 점 오차. 첫 점이 골반이다."""
    if aligned:
        return mpjpe(pred_dense, gt_dense)
    return np.linalg.norm(np.asarray(pred_dense) - np.asarray(gt_dense), axis=-1).mean(axis=-1)


def hypothesis_errors(hyps, gt_joints, gt_dense, pve_aligned=True):
    """가설마다 세 지표를 계산해 {이름: (N,)} 으로 돌려주는 함수"""
    return {
        "mpjpe": np.asarray(mpjpe(hyps.keypoints3d, gt_joints)),
        "pa_mpjpe": np.asarray(pa_mpjpe(hyps.keypoints3d, gt_joints)),
        "pve": np.asarray(pve(hyps.dense_points, gt_dense, pve_aligned)),
    }


def min_of_n(errors, n):
    """앞쪽 n 개 가설 중 최소값. 지표마다 따로 최소화한다."""
    if n < 1:
        raise ConfigurationError("n 은 1 이상이어야 합니다")
    if isinstance(errors, dict):
        return {name: float(np.min(values[:n])) for name, values in errors.items()}
    return float(np.min(np.asarray(errors)[:n]))


def kp2d_error(mode_projection, sample_projections, gt2d, visible):
    """보이는 관절에서의 (최빈값 오차, 샘플 평균 오차) 크롭 px. 보이는 관절이 없으면 NaN."""
    visible = np.asarray(visible, dtype=bool)
    if not visible.any():
        return float("nan"), float("nan")
    gt2d = np.asarray(gt2d)
    mode_err = np.linalg.norm(np.asarray(mode_projection) - gt2d, axis=-1)[visible].mean()
    sample_err = np.linalg.norm(np.asarray(sample_projections) - gt2d, axis=-1)[:, visible].mean()
    return float(mode_err), float(sample_err)


def sample_spread(samples):
    """(N, K, d) 샘플의 관절별 평균-중심 거리 평균 (K,)"""
    samples = np.asarray(samples, dtype=np.float64)
    return np.linalg.norm(samples - samples.mean(axis=0), axis=-1).mean(axis=0)


def kp3d_spread(keypoints3d, visible):
    """가시성 집단별 3D 관절 퍼짐 (보이는 관절, 안 보이는 관절). 빈 집단은 NaN."""
    spread = sample_spread(keypoints3d)
    visible = np.asarray(visible, dtype=bool)
    vis = float(spread[visible].mean()) if visible.any() else float("nan")
    invis = float(spread[~visible].mean()) if (~visible).any() else float("nan")
    return vis, invis


def plausibility(projections, mask, field=None):
    """안 보이는 관절 투영 (..., 2) px 의 (PercIn %, MinDist px). MinDist 는 마스크 밖 샘플만 평균한다."""
    points = np.asarray(projections, dtype=np.float64).reshape(-1, 2)
    if not len(points):
        return float("nan"), float("nan")
    inside = inside_many(points, mask)
    perc_in = 100.0 * inside.mean()
    if inside.all():
        return float(perc_in), 0.0
    field = field or DistanceField(mask)
    return float(perc_in), float(field.lookup(points[~inside]).mean())


def spread_ratio(sample_projections, heatmap_samples_px, joints):
    """선택한 관절에서 2D 가설 퍼짐 / 히트맵 샘플 퍼짐 의 평균"""
    joints = np.asarray(joints, dtype=bool)
    if not joints.any():
        return float("nan")
    hyp = sample_spread(np.asarray(sample_projections)[:, joints])
    ref = sample_spread(np.swapaxes(np.asarray(heatmap_samples_px)[joints], 0, 1))
    ok = ref > 1e-9
    if not ok.any():
        return float("nan")
    return float(np.mean(hyp[ok] / ref[ok]))


def scene_rng(seed, index):
    return np.random.default_rng([seed, index])


def evaluate_scene(model, scene, index, n_hypotheses=100, seed=0, pve_aligned=True):
    """장면 하나의 지표 행"""
    rng = scene_rng(seed, index)
    inputs = SceneInputs.from_scene(scene)
    hyps = model.hypotheses(inputs, n_hypotheses, rng)
    mode = model.mode_prediction(inputs)
    gt_joints, gt_dense = scene.joints3d() * MM, scene.dense_points() * MM
    hyps.keypoints3d = hyps.keypoints3d * MM
    hyps.dense_points = hyps.dense_points * MM
    errors = hypothesis_errors(hyps, gt_joints, gt_dense, pve_aligned)
    best = min_of_n(errors, n_hypotheses)

    status = classify_joints(scene.heatmap, scene.gt2d)
    visible = status.visible & status.inside_crop
    occluded = ~status.visible & status.inside_crop
    kp_mode, kp_samples = kp2d_error(mode.projections[0], hyps.projections, scene.gt2d, visible)
    spread_vis, spread_invis = kp3d_spread(hyps.keypoints3d, visible)

    perc_in, min_dist = float("nan"), float("nan")
    if scene.mask_available and occluded.any():
        perc_in, min_dist = plausibility(hyps.projections[:, occluded], scene.union_mask)

    heatmap_samples, valid = sample_all_joints(scene.heatmap, n_hypotheses, rng)
    uncertain = HIGHLY_ARTICULATED_MASK & status.uncertain & status.inside_crop & valid
    ratio = spread_ratio(hyps.projections, from_normalized(heatmap_samples), uncertain)

    return {
        "scene": index,
        "seed": scene.seed,
        "n_hypotheses": n_hypotheses,
        "mode_mpjpe": float(mpjpe(mode.keypoints3d[0] * MM, gt_joints)),
        "mode_pa_mpjpe": pa_mpjpe(mode.keypoints3d[0] * MM, gt_joints),
        "mode_pve": float(pve(mode.dense_points[0] * MM, gt_dense, pve_aligned)),
        "min_mpjpe": best["mpjpe"],
        "min_pa_mpjpe": best["pa_mpjpe"],
        "min_pve": best["pve"],
        "kp2d_mode": kp_mode,
        "kp2d_samples": kp_samples,
        "spread_visible": spread_vis,
        "spread_invisible": spread_invis,
        "perc_in": perc_in,
        "min_dist": min_dist,
        "spread_ratio": ratio,
    }


def _parallel_map(fn, items, threads, show_progress, desc):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(tqdm(pool.map(fn, items), total=len(items), desc=desc, disable=not show_progress))
    return [fn(item) for item in tqdm(items, desc=desc, disable=not show_progress)]


@dataclass
class MetricsReport:
    scenes: pd.DataFrame
    aggregate: dict
    n_hypotheses: int

    def table(self):
        """장면별 행 뒤에 집계 행을 붙인 평면 표"""
        agg = pd.DataFrame([{**self.aggregate, "scene": "all", "seed": "", "n_hypotheses": self.n_hypotheses}])
        return pd.concat([self.scenes.astype({"scene": object, "seed": object}), agg[REPORT_COLUMNS]],
                         ignore_index=True)

    def to_dict(self):
        rows = self.scenes.astype(object).where(pd.notna(self.scenes), None).to_dict(orient="records")
        aggregate = {k: (None if v is None or (isinstance(v, float) and np.isnan(v)) else v)
                     for k, v in self.aggregate.items()}
        return {"n_hypotheses": self.n_hypotheses, "aggregate": aggregate, "scenes": rows}

    def write(self, path):
        """경로 확장자가 .csv 면 평면 표를, 그 외에는 중첩 JSON 을 쓴다. 둘 다 원자적으로."""
        if str(path).endswith(".csv"):
            return atomic_write_frame(path, self.table())
        return atomic_write_json(path, self.to_dict())


def aggregate_rows(frame):
    """NaN 인 장면은 해당 지표 집계에서 빠진다"""
    numeric = [c for c in REPORT_COLUMNS if c not in ("scene", "seed", "n_hypotheses")]
    excluded = int(frame["kp2d_mode"].isna().sum())
    if excluded:
        logger.warning("보이는 관절이 없는 장면 %d개를 2DKP 집계에서 제외했습니다", excluded)
    return {name: float(frame[name].mean()) for name in numeric}


def evaluate(model, scenes, n_hypotheses=100, seed=0, threads=1, pve_aligned=True, show_progress=False):
    """장면별로 가설을 뽑아 지표를 계산하고 인덱스 순서대로 집계하는 함수"""
    rows = _parallel_map(
        lambda item: evaluate_scene(model, item[1], item[0], n_hypotheses, seed, pve_aligned),
        list(enumerate(scenes)), threads, show_progress, "eval")
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    aggregate = aggregate_rows(frame)
    logger.info("평가 완료: 장면 %d개, min-of-%d PVE %.2f mm", len(frame), n_hypotheses, aggregate["min_pve"])
    return MetricsReport(scenes=frame, aggregate=aggregate, n_hypotheses=n_hypotheses)


def sweep_hypothesis_counts(model, scenes, n_list, seed=0, threads=1, pve_aligned=True, show_progress=False):
    """장면마다 max(N) 개를 한 번 뽑고 앞쪽 N 개로 min-of-N 을 계산한 곡선"""
    n_list = sorted(set(int(n) for n in n_list))
    if not n_list or n_list[0] < 1:
        raise ConfigurationError("N 목록은 1 이상의 정수여야 합니다")
    n_max = n_list[-1]

    def scene_curve(item):
        index, scene = item
        hyps = model.hypotheses(SceneInputs.from_scene(scene), n_max, scene_rng(seed, index))
        hyps.keypoints3d = hyps.keypoints3d * MM
        hyps.dense_points = hyps.dense_points * MM
        errors = hypothesis_errors(hyps, scene.joints3d() * MM, scene.dense_points() * MM, pve_aligned)
        return [min_of_n(errors, n) for n in n_list]

    curves = _parallel_map(scene_curve, list(enumerate(scenes)), threads, show_progress, "sweep")
    rows = []
    for j, n in enumerate(n_list):
        rows.append({"n": n, **{f"min_{name}": float(np.mean([c[j][name] for c in curves]))
                                for name in METRIC_NAMES}})
    return pd.DataFrame(rows, columns=["n", "min_mpjpe", "min_pa_mpjpe", "min_pve"])
