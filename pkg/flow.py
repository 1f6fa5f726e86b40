"""포즈 파라미터에 대한 조건부 RealNVP 정규화 흐름"""

import logging
from dataclasses import dataclass, field

import numpy as np

import diffcore as dc
from errors import ConfigurationError, FlowError

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 2.0
LOG_2PI = np.log(2.0 * np.pi)


def soft_clamp(s_raw, alpha=DEFAULT_ALPHA):
    """로그 스케일을 (-alpha, alpha) 로 부드럽게 제한하는 함수: (2a/pi) * arctan(s/a)"""
    return dc.mul(dc.arctan(dc.mul(s_raw, 1.0 / alpha)), 2.0 * alpha / np.pi)


@dataclass
class CouplingLayer:
    active: np.ndarray
    passive: np.ndarray
    scale_layers: list
    shift_layers: list
    alpha: float = DEFAULT_ALPHA
    volume_preserving: bool = False
    inverse_perm: np.ndarray = field(init=False)

    def __post_init__(self):
        order = np.concatenate([self.passive, self.active])
        self.inverse_perm = np.argsort(order)

    def _scale_shift(self, passive, c, store, tape):
        h = dc.concat([passive, c], axis=-1)
        shift = dc.forward_mlp(h, store, self.shift_layers, tape=tape)
        if self.volume_preserving:
            return None, shift
        scale = soft_clamp(dc.forward_mlp(h, store, self.scale_layers, tape=tape), self.alpha)
        return scale, shift

    def _merge(self, passive, active):
        return dc.take(dc.concat([passive, active], axis=-1), self.inverse_perm, axis=-1)

    def forward(self, x, c, store, tape=None):
        passive = dc.take(x, self.passive, axis=-1)
        active = dc.take(x, self.active, axis=-1)
        scale, shift = self._scale_shift(passive, c, store, tape)
        if scale is None:
            return self._merge(passive, active + shift), np.zeros(np.shape(dc.value_of(x))[:-1])
        y_active = active * dc.exp(scale) + shift
        return self._merge(passive, y_active), dc.sum_reduce(scale, axis=-1)

    def inverse(self, y, c, store, tape=None):
        passive = dc.take(y, self.passive, axis=-1)
        active = dc.take(y, self.active, axis=-1)
        scale, shift = self._scale_shift(passive, c, store, tape)
        if scale is None:
            return self._merge(passive, active - shift), np.zeros(np.shape(dc.value_of(y))[:-1])
        x_active = (active - shift) * dc.exp(-scale)
        return self._merge(passive, x_active), -dc.sum_reduce(scale, axis=-1)

    def log_scales(self, x, c, store):
        """디버그 점검용: 이 층에서 실현되는 로그 스케일 값"""
        scale, _ = self._scale_shift(dc.take(x, self.passive, axis=-1), c, store, None)
        return np.zeros(0) if scale is None else scale


@dataclass
class HypothesisSet:
    """조건 하나에서 뽑은 N개의 포즈 가설과 파생 값들"""

    poses: np.ndarray
    latents: np.ndarray
    betas: np.ndarray = None
    keypoints3d: np.ndarray = None
    dense_points: np.ndarray = None
    projections: np.ndarray = None

    def __len__(self):
        return len(self.poses)


class FlowModel:
    """L 개의 결합층을 쌓은 조건부 흐름 z -> theta"""

    def __init__(self, store, dim, cond_dim, n_layers=8, hidden=128, alpha=DEFAULT_ALPHA,
                 volume_preserving=False, prefix="flow", debug=False, offset=None):
        if dim < 2:
            raise ConfigurationError("흐름 차원은 2 이상이어야 합니다")
        self.store = store
        self.dim = dim
        self.cond_dim = cond_dim
        self.n_layers = n_layers
        self.hidden = hidden
        self.alpha = alpha
        self.volume_preserving = volume_preserving
        self.prefix = prefix
        self.debug = debug
        # 잠재 0 이 보낼 기준 출력 (없으면 원점)
        self.offset = None if offset is None else np.asarray(offset, dtype=np.float64)
        even, odd = np.arange(0, dim, 2), np.arange(1, dim, 2)
        self.layers = []
        for l in range(n_layers):
            # 짝수/홀수 좌표가 층마다 번갈아 변환된다
            active, passive = (even, odd) if l % 2 == 0 else (odd, even)
            scale = [(f"{prefix}.{l}.scale.{i}.weight", f"{prefix}.{l}.scale.{i}.bias") for i in range(3)]
            shift = [(f"{prefix}.{l}.shift.{i}.weight", f"{prefix}.{l}.shift.{i}.bias") for i in range(3)]
            self.layers.append(CouplingLayer(active, passive, scale, shift, alpha, volume_preserving))

    def topology(self):
        return {
            "n_layers": self.n_layers,
            "dim": self.dim,
            "cond_dim": self.cond_dim,
            "hidden": self.hidden,
            "alpha": self.alpha,
            "volume_preserving": self.volume_preserving,
        }

    def init_params(self, rng):
        for l, layer in enumerate(self.layers):
            sizes = [len(layer.passive) + self.cond_dim, self.hidden, self.hidden, len(layer.active)]
            dc.init_mlp(self.store, f"{self.prefix}.{l}.scale", sizes, rng)
            dc.init_mlp(self.store, f"{self.prefix}.{l}.shift", sizes, rng)
        return self

    def _check(self, x, layer_index, direction):
        if not np.all(np.isfinite(dc.value_of(x))):
            raise FlowError(f"{direction} {layer_index}번째 층에서 유한하지 않은 값이 발생했습니다",
                            layer=layer_index)

    def _check_bound(self, x, c, layer):
        if self.debug:
            scales = dc.value_of(layer.log_scales(dc.value_of(x), dc.value_of(c), self.store))
            assert np.all(np.abs(scales) < self.alpha + 1e-12), "soft-clamp 범위를 벗어났습니다"

    def _check_dims(self, x, c):
        if np.shape(dc.value_of(x))[-1] != self.dim or np.shape(dc.value_of(c))[-1] != self.cond_dim:
            raise ConfigurationError(
                f"흐름 입력 차원 불일치: x {np.shape(dc.value_of(x))}, c {np.shape(dc.value_of(c))}"
            )

    def forward(self, z, c, tape=None):
        """z -> theta 와 전방향 로그 야코비안"""
        self._check_dims(z, c)
        x, log_det = z, 0.0
        for l, layer in enumerate(self.layers):
            self._check_bound(x, c, layer)
            x, ld = layer.forward(x, c, self.store, tape)
            log_det = log_det + ld
            self._check(x, l, "forward")
        if self.offset is not None:
            x = x + self.offset
        return x, log_det

    def inverse(self, theta, c, tape=None):
        """theta -> z 와 역방향 로그 야코비안"""
        self._check_dims(theta, c)
        x, log_det = theta, 0.0
        if self.offset is not None:
            x = x - self.offset
        for l in reversed(range(self.n_layers)):
            x, ld = self.layers[l].inverse(x, c, self.store, tape)
            log_det = log_det + ld
            self._check(x, l, "inverse")
        return x, log_det

    def log_prob(self, theta, c, tape=None):
        z, log_det_inv = self.inverse(theta, c, tape=tape)
        base = dc.mul(dc.sqnorm(z, axis=-1), -0.5) - 0.5 * self.dim * LOG_2PI
        return base + log_det_inv

    def sample(self, c, n, rng, latents=None):
        """표준정규 잠재 벡터 n 개를 흐름에 통과시켜 가설을 뽑는 함수"""
        if n < 1:
            raise ConfigurationError("샘플 수는 1 이상이어야 합니다")
        c = np.asarray(c, dtype=np.float64)
        if latents is None:
            latents = rng.standard_normal((n, self.dim))
        latents = np.asarray(latents, dtype=np.float64).reshape(n, self.dim)
        poses, _ = self.forward(latents, np.broadcast_to(c, (n, self.cond_dim)))
        return HypothesisSet(poses=np.asarray(poses), latents=latents)

    def mode(self, c):
        """모든 성분이 0 인 잠재 벡터의 출력 (근사 최빈값)"""
        c = np.asarray(c, dtype=np.float64)
        zeros = np.zeros(c.shape[:-1] + (self.dim,))
        theta, _ = self.forward(zeros, c)
        return np.asarray(theta)
