# Heightfusion_lib/tensor_core.py
"""
Minimal dense-tensor engine with reverse-mode automatic differentiation.

Only the operations the height-regression network needs are provided:
conv2d, relu, max_pool2d, adaptive_avg_pool2d, bilinear_upsample, concat,
slice_axis, add, mul, scale, sum and smooth_l1_loss. Every sample is float64.
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, GraphError, ShapeError

logger = logging.getLogger(__name__)


# ==============================================================================
# == 1. TENSOR AND GRAPH NODES
# ==============================================================================

class Tensor:
    """
    Row-major float64 array with an optional gradient buffer.

    Tensors produced by a differentiable op keep a reference to the op node
    (`_ctx`) that created them; leaves have `_ctx = None`.
    """

    def __init__(self, data, requires_grad: bool = False, _ctx: Optional["Function"] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        backward(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Function:
    """
    A node of the compute graph: op identifier, input references and backward rule.

    `forward` receives the raw arrays of the inputs; `backward` receives the
    gradient of the root with respect to this node's output and returns one
    gradient (or None) per input.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    @property
    def op(self) -> str:
        return type(self).__name__

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{self.op} has no forward rule")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{self.op} has no backward rule")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _ctx=fn if requires_grad else None)


ComputeGraphNode = Function


def backward(root: Tensor):
    """
    Accumulate d(root)/d(leaf) into the `.grad` of every requires-grad leaf.

    Repeated calls on the same graph keep adding to the leaf gradients.
    """
    if root.ndim != 0:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward called on a root that is detached from any graph")

    # Post-order traversal; each node is emitted exactly once.
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in visited:
            continue
        if expanded:
            visited.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

    grads: Dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        input_grads = node._ctx.backward(g)
        for parent, pg in zip(node._ctx.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ==============================================================================
# == 2. ELEMENTWISE AND STRUCTURAL OPS
# ==============================================================================

def _check_same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} do not match")


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    def forward(self, a, factor):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Sum(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.sum())

    def backward(self, grad):
        return (np.full(self.in_shape, float(grad)),)


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.extents = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        offsets = np.cumsum(self.extents)[:-1]
        return tuple(np.split(grad, offsets, axis=self.axis))


class SliceAxis(Function):
    def forward(self, a, axis, start, stop):
        self.in_shape, self.axis, self.start, self.stop = a.shape, axis, start, stop
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, stop)
        return a[tuple(index)]

    def backward(self, grad):
        full = np.zeros(self.in_shape)
        index = [slice(None)] * len(self.in_shape)
        index[self.axis] = slice(self.start, self.stop)
        full[tuple(index)] = grad
        return (full,)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def tensor_sum(a: Tensor) -> Tensor:
    return Sum.apply(a)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(inputs: Sequence[Tensor], axis: int) -> Tensor:
    """Join tensors along `axis`; every other extent must agree."""
    if not inputs:
        raise ShapeError("concat needs at least one tensor")
    ref = inputs[0]
    axis = _normalize_axis(axis, ref.ndim)
    for t in inputs[1:]:
        if t.ndim != ref.ndim:
            raise ShapeError(f"concat: rank mismatch between {ref.shape} and {t.shape}")
        for d in range(ref.ndim):
            if d != axis and t.shape[d] != ref.shape[d]:
                raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    return Concat.apply(*inputs, axis=axis)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = _normalize_axis(axis, x.ndim)
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}) outside extent {x.shape[axis]} on axis {axis}")
    return SliceAxis.apply(x, axis=axis, start=start, stop=stop)


# ==============================================================================
# == 3. SPATIAL OPS (NCHW)
# ==============================================================================

def _require_nchw(x: Tensor, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an NCHW tensor, got shape {x.shape}")


class Conv2d(Function):
    def forward(self, x, weight, *maybe_bias, stride, padding):
        self.stride, self.padding = stride, padding
        self.x_shape = x.shape
        self.weight = weight
        self.has_bias = bool(maybe_bias)
        kh, kw = weight.shape[2:]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.xp_shape = xp.shape
        # (N, C, H', W', kH, kW) view of every receptive field
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        self.windows = windows
        out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))  # N, H', W', O
        out = out.transpose(0, 3, 1, 2)
        if self.has_bias:
            out = out + maybe_bias[0][None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad):
        s = self.stride
        _, _, oh, ow = grad.shape
        kh, kw = self.weight.shape[2:]
        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(self.xp_shape)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, self.weight[:, :, i, j], axes=([1], [0]))  # N, H', W', C
                gxp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
        p = self.padding
        grad_x = gxp[:, :, p:p + self.x_shape[2], p:p + self.x_shape[3]] if p else gxp
        if self.has_bias:
            return grad_x, grad_w, grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIHW weight, plus optional bias."""
    _require_nchw(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be OIHW, got shape {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}/{padding}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} has {x.shape[1]} channels, weight {weight.shape} expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    kh, kw = weight.shape[2:]
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: zero-extent output for input {x.shape} and weight {weight.shape} (padding {padding})")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(*inputs, stride=stride, padding=padding)


class MaxPool2d(Function):
    def forward(self, x, kernel, stride):
        self.x_shape, self.kernel, self.stride = x.shape, kernel, stride
        windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = windows.reshape(windows.shape[:4] + (kernel * kernel,))
        # np.argmax keeps the first occurrence, i.e. row-major tie-break
        self.argmax = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, oh, ow = grad.shape
        k, s = self.kernel, self.stride
        rows = np.arange(oh)[:, None] * s + self.argmax // k
        cols = np.arange(ow)[None, :] * s + self.argmax % k
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        gx = np.zeros(self.x_shape)
        np.add.at(gx, (nn, cc, rows, cols), grad)
        return (gx,)


def max_pool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    _require_nchw(x, "max_pool2d")
    if kernel < 1 or stride < 1:
        raise ShapeError(f"max_pool2d needs kernel, stride >= 1, got {kernel}/{stride}")
    if kernel > x.shape[2] or kernel > x.shape[3]:
        raise ShapeError(f"max_pool2d: kernel {kernel} larger than input {x.shape}")
    return MaxPool2d.apply(x, kernel=kernel, stride=stride)


def _adaptive_bins(extent: int, bins: int) -> List[Tuple[int, int]]:
    # bin i covers [floor(i*H/out), ceil((i+1)*H/out))
    return [((i * extent) // bins, -((-(i + 1) * extent) // bins)) for i in range(bins)]


class AdaptiveAvgPool2d(Function):
    def forward(self, x, out_h, out_w):
        self.x_shape = x.shape
        self.row_bins = _adaptive_bins(x.shape[2], out_h)
        self.col_bins = _adaptive_bins(x.shape[3], out_w)
        out = np.empty(x.shape[:2] + (out_h, out_w))
        for i, (r0, r1) in enumerate(self.row_bins):
            for j, (c0, c1) in enumerate(self.col_bins):
                out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
        return out

    def backward(self, grad):
        gx = np.zeros(self.x_shape)
        for i, (r0, r1) in enumerate(self.row_bins):
            for j, (c0, c1) in enumerate(self.col_bins):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += (grad[:, :, i, j] / area)[:, :, None, None]
        return (gx,)


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require_nchw(x, "adaptive_avg_pool2d")
    if not (1 <= out_h <= x.shape[2] and 1 <= out_w <= x.shape[3]):
        raise ShapeError(f"adaptive_avg_pool2d: invalid target {out_h}x{out_w} for input {x.shape}")
    return AdaptiveAvgPool2d.apply(x, out_h=out_h, out_w=out_w)


def _half_pixel_taps(in_size: int, out_size: int):
    """Source indices and lerp fractions for align-corners=false sampling."""
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    frac[i0 == i1] = 0.0
    return i0, i1, frac


def _tap_matrix(i0, i1, frac, in_size):
    m = np.zeros((len(i0), in_size))
    rows = np.arange(len(i0))
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


class BilinearUpsample(Function):
    def forward(self, x, out_h, out_w):
        h, w = x.shape[2:]
        r0, r1, fy = _half_pixel_taps(h, out_h)
        c0, c1, fx = _half_pixel_taps(w, out_w)
        self.wy = _tap_matrix(r0, r1, fy, h)
        self.wx = _tap_matrix(c0, c1, fx, w)
        # lerp form a + t*(b - a) keeps constant planes exact
        top = x[:, :, r0, :]
        rows = top + fy[:, None] * (x[:, :, r1, :] - top)
        left = rows[:, :, :, c0]
        return left + fx * (rows[:, :, :, c1] - left)

    def backward(self, grad):
        g_rows = grad @ self.wx
        return (np.matmul(self.wy.T, g_rows),)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation with half-pixel centres; only upscaling is accepted."""
    _require_nchw(x, "bilinear_upsample")
    if out_h < x.shape[2] or out_w < x.shape[3]:
        raise ShapeError(f"bilinear_upsample rejects downscaling {x.shape[2]}x{x.shape[3]} -> {out_h}x{out_w}")
    return BilinearUpsample.apply(x, out_h=out_h, out_w=out_w)


# ==============================================================================
# == 4. LOSS
# ==============================================================================

class SmoothL1Loss(Function):
    def forward(self, pred, target, beta):
        self.beta = beta
        self.diff = pred - target
        absd = np.abs(self.diff)
        self.quadratic = absd < beta
        per_elem = np.where(self.quadratic, 0.5 * self.diff ** 2 / beta, absd - 0.5 * beta)
        return np.asarray(per_elem.mean())

    def backward(self, grad):
        local = np.where(self.quadratic, self.diff / self.beta, np.sign(self.diff))
        return grad * local / self.diff.size, None


def smooth_l1_loss(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss: 0.5*d^2/beta below beta, |d| - 0.5*beta above."""
    _check_same_shape(pred, target, "smooth_l1_loss")
    if beta <= 0:
        raise ConfigError(f"smooth_l1_loss beta must be positive, got {beta}")
    if target.requires_grad:
        raise GraphError("smooth_l1_loss target must not require a gradient")
    return SmoothL1Loss.apply(pred, target, beta=float(beta))


# ==============================================================================
# == 5. OPTIMIZERS
# ==============================================================================

def _grad_of(name: str, p: Tensor) -> np.ndarray:
    if p.grad is None:
        raise GraphError(f"parameter '{name}' has no gradient")
    return p.grad


def sgd_step(params: Dict[str, Tensor], lr: float, momentum: float = 0.0,
             velocity: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """v <- momentum*v + g; p <- p - lr*v; gradients are zeroed afterwards."""
    if lr < 0 or not 0.0 <= momentum < 1.0:
        raise ConfigError(f"sgd_step needs lr >= 0 and momentum in [0, 1), got {lr}/{momentum}")
    velocity = {} if velocity is None else velocity
    grads = {name: _grad_of(name, p) for name, p in params.items()}
    for name, p in params.items():
        v = velocity.get(name)
        v = grads[name].copy() if v is None else momentum * v + grads[name]
        velocity[name] = v
        p.data -= lr * v
        p.zero_grad()
    return velocity


def adam_step(params: Dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, state: Optional[dict] = None) -> dict:
    """Adam update with bias correction; `state` carries moments and the step count."""
    if lr < 0 or not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0) or eps <= 0:
        raise ConfigError(f"adam_step got invalid hyperparameters lr={lr} betas=({beta1}, {beta2}) eps={eps}")
    state = {"t": 0, "m": {}, "v": {}} if state is None else state
    grads = {name: _grad_of(name, p) for name, p in params.items()}
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state["m"].get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state["v"].get(name, 0.0) + (1.0 - beta2) * g * g
        state["m"][name], state["v"][name] = m, v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()
    return state


class Optimizer:
    def __init__(self, params: Dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self):
        raise NotImplementedError

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {}


class SGD(Optimizer):
    def __init__(self, params, lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self):
        sgd_step(self.params, self.lr, self.momentum, self.velocity)

    def state_arrays(self):
        return self.velocity


class Adam(Optimizer):
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {"t": 0, "m": {}, "v": {}}

    def step(self):
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps, self.state)

    def state_arrays(self):
        return {**{f"m.{k}": v for k, v in self.state["m"].items()},
                **{f"v.{k}": v for k, v in self.state["v"].items()}}


# ==============================================================================
# == 6. INITIALISATION AND GRADIENT CHECKING
# ==============================================================================

def kaiming_uniform(shape: Tuple[int, ...], rng: np.random.Generator) -> Tensor:
    """Fan-in Kaiming-uniform init for ReLU networks: U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def numerical_gradient(f: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                       eps: float = 1e-4) -> List[np.ndarray]:
    """Central finite differences of scalar `f(*tensors)` w.r.t. every input array."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    result = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            plus = f(*[Tensor(a) for a in arrays]).item()
            flat[idx] = orig - eps
            minus = f(*[Tensor(a) for a in arrays]).item()
            flat[idx] = orig
            gflat[idx] = (plus - minus) / (2.0 * eps)
        result.append(g)
    return result


def analytic_gradient(f: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> List[np.ndarray]:
    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    f(*tensors).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradient_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-4) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    analytic = analytic_gradient(f, inputs)
    numeric = numerical_gradient(f, inputs, eps)
    errors = [relative_error(a, n) for a, n in zip(analytic, numeric)]
    logger.debug("gradient_check errors: %s", errors)
    return max(errors)
