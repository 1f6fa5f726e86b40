"""테이프 기반 역방향 자동미분 커널

flow, 조건 임베딩, 회귀 헤드, 순기구학과 투영을 미분하는 데 필요한 닫힌 연산 집합만 제공한다.
모든 연산은 numpy 배열을 그대로 받을 수도 있다. 입력 중 Var 가 없으면 테이프에 기록하지 않고
numpy 결과를 바로 돌려준다. 정밀도는 float64 로 고정한다.
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from errors import CheckpointError, ConfigurationError, GradCheckError, TapeConsumedError
from fileio import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AFCK"
CHECKPOINT_VERSION = 1


class ParamStore:
    """이름 붙은 파라미터 배열과 같은 형태의 그래디언트 버퍼를 보관하는 저장소"""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.version = 0

    def add(self, name, value):
        if name in self.params:
            raise ConfigurationError(f"파라미터 '{name}' 가 이미 존재합니다")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def set(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ConfigurationError(
                f"파라미터 '{name}' 형태 불일치: {value.shape} != {self.params[name].shape}"
            )
        self.params[name][...] = value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def names(self, prefix=""):
        return [name for name in self.params if name.startswith(prefix)]

    def zero_grad(self):
        for grad in self.grads.values():
            grad.fill(0.0)

    def bump_version(self):
        self.version += 1
        return self.version

    def copy(self):
        clone = ParamStore()
        for name, value in self.params.items():
            clone.add(name, value)
            clone.grads[name][...] = self.grads[name]
        clone.version = self.version
        return clone

    def num_values(self):
        return int(sum(value.size for value in self.params.values()))


class Var:
    """테이프에 기록되는 값. numpy 연산자는 Var 쪽 구현으로 위임된다."""

    __array_ufunc__ = None
    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Var(index={self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_reduce(self, axis=axis, keepdims=keepdims)


@dataclass(frozen=True)
class _Op:
    name: str
    output: int
    parents: tuple
    vjp: object


class Tape:
    """기본 연산의 순서 있는 기록. 역전파는 기록의 역순으로 정확히 한 번만 수행된다."""

    def __init__(self):
        self.ops = []
        self.consumed = False
        self._count = 0
        self._inputs = []
        self._params = []

    def _next_index(self):
        index_ = self._count
        self._count += 1
        return index_

    def variable(self, value):
        var = Var(np.array(value, dtype=np.float64), self, self._next_index())
        self._inputs.append(var)
        return var

    def param(self, store, name):
        var = Var(store.params[name], self, self._next_index())
        self._params.append((var, store, name))
        return var

    def record(self, name, value, parents, vjp):
        var = Var(value, self, self._next_index())
        parent_ids = tuple(p.index if isinstance(p, Var) else None for p in parents)
        self.ops.append(_Op(name, var.index, parent_ids, vjp))
        return var

    def backward(self, output, output_grad=None):
        """출력 그래디언트를 역전파하여 파라미터 버퍼에 누적하고 입력 그래디언트를 돌려준다"""
        if self.consumed:
            raise TapeConsumedError("이 테이프는 이미 역전파에 사용되었습니다")
        self.consumed = True
        grads = {}
        if isinstance(output, Var):
            if output.tape is not self:
                raise ConfigurationError("다른 테이프의 출력으로 역전파할 수 없습니다")
            if output_grad is None:
                seed = np.ones_like(output.value)
            else:
                seed = np.broadcast_to(np.asarray(output_grad, dtype=np.float64), output.shape).copy()
            grads[output.index] = seed
        for op in reversed(self.ops):
            grad = grads.pop(op.output, None)
            if grad is None:
                continue
            for parent, parent_grad in zip(op.parents, op.vjp(grad)):
                if parent is None or parent_grad is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + parent_grad
                else:
                    grads[parent] = parent_grad
        for var, store, name in self._params:
            grad = grads.get(var.index)
            if grad is not None:
                store.grads[name] += grad
        return [np.array(grads.get(v.index, np.zeros_like(v.value))) for v in self._inputs]


def value_of(x):
    return x.value if isinstance(x, Var) else x


def tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ConfigurationError("서로 다른 테이프의 변수를 섞을 수 없습니다")
    return tape


def _emit(name, value, parents, vjp):
    tape = tape_of(*parents)
    if tape is None:
        return value
    return tape.record(name, value, parents, vjp)


def _unbroadcast(grad, shape):
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---- 기본 연산 ----

def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit("add", av + bv, (a, b),
                 lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))))


def add_bias(x, b):
    xv, bv = value_of(x), value_of(b)
    return _emit("add_bias", xv + bv, (x, b),
                 lambda g: (g, _unbroadcast(g, np.shape(bv))))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit("sub", av - bv, (a, b),
                 lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(-g, np.shape(bv))))


def neg(x):
    return _emit("neg", -value_of(x), (x,), lambda g: (-g,))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv

    def vjp(g):
        ga = _unbroadcast(g / bv, np.shape(av)) if isinstance(a, Var) else None
        gb = _unbroadcast(-g * out / bv, np.shape(bv)) if isinstance(b, Var) else None
        return ga, gb

    return _emit("div", out, (a, b), vjp)


def linear(x, weight):
    """x @ W.T (W 형태: 출력 x 입력)"""
    xv, wv = value_of(x), value_of(weight)
    out = xv @ wv.T

    def vjp(g):
        gx = g @ wv if isinstance(x, Var) else None
        gw = None
        if isinstance(weight, Var):
            gw = g.reshape(-1, wv.shape[0]).T @ xv.reshape(-1, wv.shape[1])
        return gx, gw

    return _emit("linear", out, (x, weight), vjp)


def relu(x):
    xv = value_of(x)
    # x == 0 에서의 부분미분은 0
    return _emit("relu", np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0.0),))


def arctan(x):
    xv = value_of(x)
    return _emit("arctan", np.arctan(xv), (x,), lambda g: (g / (1.0 + xv * xv),))


def exp(x):
    out = np.exp(value_of(x))
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x):
    xv = value_of(x)
    return _emit("log", np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x):
    out = np.sqrt(value_of(x))
    return _emit("sqrt", out, (x,), lambda g: (g / (2.0 * out),))


def absolute(x):
    xv = value_of(x)
    return _emit("abs", np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def square(x):
    xv = value_of(x)
    return _emit("square", xv * xv, (x,), lambda g: (2.0 * xv * g,))


def softplus(x):
    xv = value_of(x)
    return _emit("softplus", np.logaddexp(0.0, xv), (x,), lambda g: (g * expit(xv),))


def sum_reduce(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    axes = _normalize_axes(axis, xv.ndim)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, xv.shape),)

    return _emit("sum", out, (x,), vjp)


def sqnorm(x, axis=-1, keepdims=False):
    xv = value_of(x)
    out = np.sum(xv * xv, axis=axis, keepdims=keepdims)
    axes = _normalize_axes(axis, xv.ndim)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (2.0 * xv * g,)

    return _emit("sqnorm", out, (x,), vjp)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ConfigurationError("matmul 은 2차원 이상의 배열만 지원합니다")
    out = av @ bv

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), np.shape(av)) if isinstance(a, Var) else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, np.shape(bv)) if isinstance(b, Var) else None
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def concat(xs, axis=-1):
    values = [np.asarray(value_of(x), dtype=np.float64) for x in xs]
    out = np.concatenate(values, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _emit("concat", out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs, axis=-1):
    out = np.stack([value_of(x) for x in xs], axis=axis)
    return _emit("stack", out, tuple(xs),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))))


def _is_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def index(x, key):
    xv = value_of(x)
    out = xv[key]
    basic = _is_basic_key(key)

    def vjp(g):
        full = np.zeros_like(xv)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _emit("index", out, (x,), vjp)


def take(x, indices, axis=-1):
    xv = value_of(x)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(xv, indices, axis=axis)
    axis_ = axis % xv.ndim

    def vjp(g):
        full = np.zeros_like(xv)
        np.add.at(np.moveaxis(full, axis_, 0), indices, np.moveaxis(g, axis_, 0))
        return (full,)

    return _emit("take", out, (x,), vjp)


def reshape(x, shape):
    xv = value_of(x)
    return _emit("reshape", np.reshape(xv, shape), (x,), lambda g: (np.reshape(g, xv.shape),))


def transpose(x, axes):
    xv = value_of(x)
    inverse = np.argsort(axes)
    return _emit("transpose", np.transpose(xv, axes), (x,), lambda g: (np.transpose(g, inverse),))


# ---- 합성 연산 ----

def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    count = np.prod([xv.shape[a] for a in _normalize_axes(axis, xv.ndim)]) if xv.ndim else 1
    return mul(sum_reduce(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def forward_mlp(x, store, layers, activation="relu", tape=None):
    """아핀 사상 사이에만 활성화를 넣은 MLP 순전파 (마지막 층 뒤에는 활성화 없음)"""
    if activation != "relu":
        raise ConfigurationError(f"지원하지 않는 활성화 함수: {activation}")
    if not layers:
        raise ConfigurationError("MLP 에 층이 없습니다")
    width = np.shape(value_of(x))[-1]
    for weight_name, bias_name in layers:
        weight, bias = store.params[weight_name], store.params[bias_name]
        if weight.ndim != 2 or weight.shape[1] != width or bias.shape != (weight.shape[0],):
            raise ConfigurationError(
                f"MLP 층 '{weight_name}' 형태 {weight.shape} 가 입력 폭 {width} 과 맞지 않습니다"
            )
        width = weight.shape[0]
    tape = tape or tape_of(x)
    h = x
    for i, (weight_name, bias_name) in enumerate(layers):
        if tape is None:
            weight, bias = store.params[weight_name], store.params[bias_name]
        else:
            weight, bias = tape.param(store, weight_name), tape.param(store, bias_name)
        h = add_bias(linear(h, weight), bias)
        if i < len(layers) - 1:
            h = relu(h)
    return h


def init_mlp(store, prefix, sizes, rng, zero_last=True):
    """안쪽 층은 ±1/sqrt(fan_in) 균등분포, 마지막 층은 0 으로 초기화하는 함수"""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weight_name, bias_name = f"{prefix}.{i}.weight", f"{prefix}.{i}.bias"
        last = i == len(sizes) - 2
        if last and zero_last:
            store.add(weight_name, np.zeros((fan_out, fan_in)))
            store.add(bias_name, np.zeros(fan_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            store.add(weight_name, rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            store.add(bias_name, rng.uniform(-bound, bound, size=fan_out))
        layers.append((weight_name, bias_name))
    return layers


# ---- 그래디언트 검사 ----

def check_gradient(value_fn, grad_fn, point, h=1e-5):
    """해석적 그래디언트와 중심 차분의 최대 상대 오차를 계산하는 함수"""
    point = np.array(point, dtype=np.float64)
    analytic = np.asarray(grad_fn(point.copy()), dtype=np.float64).reshape(point.shape)
    if not np.all(np.isfinite(analytic)):
        bad = int(np.flatnonzero(~np.isfinite(analytic))[0])
        raise GradCheckError(f"좌표 {bad} 의 해석적 그래디언트가 유한하지 않습니다", coordinate=bad)
    flat = point.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        f_plus = float(np.sum(value_fn(plus.reshape(point.shape))))
        f_minus = float(np.sum(value_fn(minus.reshape(point.shape))))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise GradCheckError(f"좌표 {i} 에서 함수값이 유한하지 않습니다", coordinate=i)
        central = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, abs(analytic.flat[i] - central) / max(1.0, abs(central)))
    return worst


def grad_check(f, point, h=1e-5, gradient=None):
    """스칼라 함수 f 를 테이프로 미분하여 중심 차분과 비교하는 함수

    f 는 Var 또는 numpy 배열 하나를 받아 스칼라를 돌려준다. gradient 를 주면 테이프 대신 사용한다.
    """

    def value_fn(p):
        return value_of(f(p))

    def tape_grad(p):
        tape = Tape()
        x = tape.variable(p)
        out = f(x)
        if not isinstance(out, Var):
            return np.zeros_like(p)
        (grad,) = tape.backward(out)
        return grad

    return check_gradient(value_fn, gradient or tape_grad, point, h=h)


# ---- 체크포인트 ----

def save_checkpoint(path, store, metadata=None):
    """AFCK 형식(매직, 버전, JSON 메타데이터, 파라미터, CRC32)으로 저장하는 함수"""
    meta = dict(metadata or {})
    meta.setdefault("store_version", store.version)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(meta_bytes)),
        meta_bytes,
        struct.pack("<I", len(store.params)),
    ]
    for name, value in store.params.items():
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    body = b"".join(parts)
    atomic_write_bytes(path, body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    logger.info("체크포인트 저장: %s (파라미터 %d개)", path, len(store.params))
    return Path(path)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"체크포인트 파일이 없습니다: {path}")
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"AFCK 체크포인트가 아닙니다: {path}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"CRC 불일치: {path}")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"지원하지 않는 체크포인트 버전 {version}: {path}")
    (meta_len,) = struct.unpack_from("<I", body, 8)
    offset = 12
    metadata = json.loads(body[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", body, offset)
    offset += 4
    store = ParamStore()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, offset)
        offset += 4
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", body, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", body, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        value = np.frombuffer(body, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        store.add(name, value.astype(np.float64))
    if offset != len(body):
        raise CheckpointError(f"체크포인트 끝에 알 수 없는 데이터가 있습니다: {path}")
    store.version = int(metadata.get("store_version", 0))
    return store, metadata
