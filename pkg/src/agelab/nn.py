"""Minimal reverse-mode neural network engine.

Tensors are plain numpy arrays (float32 by default). Every layer works on a
batch with a leading sample axis: images are ``(N, C, H, W)`` and vectors
``(N, features)``. The module-level ``*_forward`` helpers also accept a single
unbatched sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32
BCE_EPS = 1e-7

BCE = "bce"
MAE = "mae"
CATEGORICAL_CE = "ce"
LOSS_KINDS = (BCE, MAE, CATEGORICAL_CE)


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Layer:
    kind = "Layer"
    has_weights = False

    def __init__(self, name: str | None = None):
        self.name = name or self.kind
        self._cache = None

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def hyper(self) -> dict:
        return {}

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called without a preceding forward pass")
        cache, self._cache = self._cache, None
        return cache

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.hyper().items())
        return f"{self.kind}({args})"


class WeightLayer(Layer):
    has_weights = True

    def __init__(self, name=None):
        super().__init__(name)
        self.weights = None
        self.bias = None
        self.grad_weights = None
        self.grad_bias = None
        self.frozen = False
        # set by replace_top: layer still needs random initialisation
        self.pending_init = True

    def weight_shape(self) -> tuple:
        raise NotImplementedError

    def bias_shape(self) -> tuple:
        raise NotImplementedError

    def fans(self) -> tuple[int, int]:
        raise NotImplementedError

    def allocate(self, dtype=DTYPE):
        self.weights = np.zeros(self.weight_shape(), dtype=dtype)
        self.bias = np.zeros(self.bias_shape(), dtype=dtype)

    def zero_grad(self):
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)

    def params(self):
        return [("weights", self.weights), ("bias", self.bias)]

    def grads(self):
        return [("weights", self.grad_weights), ("bias", self.grad_bias)]

    def _check_ready(self):
        if self.weights is None:
            raise StateError(f"{self.name}: weights are not initialised")


class Conv2D(WeightLayer):
    kind = "Conv2D"

    def __init__(self, in_channels, filters, kernel_size=3, stride=1, padding=1, name=None):
        super().__init__(name)
        if min(in_channels, filters, kernel_size, stride) < 1 or padding < 0:
            raise ConfigError(f"invalid Conv2D settings: {in_channels=} {filters=} "
                              f"{kernel_size=} {stride=} {padding=}")
        self.in_channels = int(in_channels)
        self.filters = int(filters)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)

    def hyper(self):
        return {"in_channels": self.in_channels, "filters": self.filters,
                "kernel_size": self.kernel_size, "stride": self.stride,
                "padding": self.padding}

    def weight_shape(self):
        k = self.kernel_size
        return (self.filters, self.in_channels, k, k)

    def bias_shape(self):
        return (self.filters,)

    def fans(self):
        k2 = self.kernel_size ** 2
        return self.in_channels * k2, self.filters * k2

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"{self.name}: {k}x{k} kernel does not fit a {h}x{w} input "
                             f"with padding {p}")
        return (self.filters, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def _offsets(self):
        k = self.kernel_size
        return [(i, j) for i in range(k) for j in range(k)]

    def forward(self, x, training=False, rng=None):
        self._check_ready()
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected (N, C, H, W) input, got shape {x.shape}")
        n, c = x.shape[:2]
        _, oh, ow = self.output_shape(x.shape[1:])
        s, p = self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # columns laid out (N, C*k*k, oh*ow) so the matmul output is already NCHW
        cols = np.stack([xp[:, :, i:i + s * oh:s, j:j + s * ow:s] for i, j in self._offsets()],
                        axis=2).reshape(n, -1, oh * ow)
        wmat = self.weights.reshape(self.filters, -1)
        out = np.matmul(wmat, cols) + self.bias[:, None]
        self._cache = (cols, xp.shape, x.shape)
        return out.reshape(n, self.filters, oh, ow)

    def backward(self, grad, need_input_grad=True):
        cols, padded_shape, in_shape = self._take_cache()
        n, f, oh, ow = grad.shape
        g = grad.reshape(n, f, oh * ow)
        if self.frozen:
            self.zero_grad()
        else:
            self.grad_weights = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(
                self.weight_shape())
            self.grad_bias = g.sum(axis=(0, 2))
        if not need_input_grad:
            return None
        s, p = self.stride, self.padding
        kk = self.kernel_size ** 2
        dcols = np.matmul(self.weights.reshape(f, -1).T, g).reshape(n, self.in_channels, kk, oh, ow)
        dxp = np.zeros(padded_shape, dtype=grad.dtype)
        for t, (i, j) in enumerate(self._offsets()):
            dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, t]
        h, w = in_shape[2:]
        return dxp[:, :, p:p + h, p:p + w]


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2; the first maximal cell of a window wins."""

    kind = "MaxPool2D"

    def __init__(self, pool=2, name=None):
        super().__init__(name)
        if pool != 2:
            raise ConfigError("only 2x2 pooling with stride 2 is supported")
        self.pool = pool

    def hyper(self):
        return {"pool": self.pool}

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if h % 2 or w % 2:
            raise ShapeError(f"{self.name}: spatial dims must be even, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected (N, C, H, W) input, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        cells = [x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]]
        out = np.maximum(np.maximum(cells[0], cells[1]), np.maximum(cells[2], cells[3]))
        self._cache = (x, out)
        return out

    def backward(self, grad):
        x, out = self._take_cache()
        dx = np.zeros(x.shape, dtype=grad.dtype)
        # route the gradient to the first maximal cell in scan order
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in ((0, 0), (0, 1), (1, 0), (1, 1)):
            m = x[:, :, i::2, j::2] == out
            m &= ~taken
            taken |= m
            dx[:, :, i::2, j::2] = grad * m
        return dx


class Dense(WeightLayer):
    kind = "Dense"

    def __init__(self, in_features, units, name=None):
        super().__init__(name)
        if in_features < 1 or units < 1:
            raise ConfigError(f"invalid Dense settings: {in_features=} {units=}")
        self.in_features = int(in_features)
        self.units = int(units)

    def hyper(self):
        return {"in_features": self.in_features, "units": self.units}

    def weight_shape(self):
        return (self.units, self.in_features)

    def bias_shape(self):
        return (self.units,)

    def fans(self):
        return self.in_features, self.units

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"{self.name}: expected {self.in_features} input features, "
                             f"got shape {tuple(input_shape)}")
        return (self.units,)

    def forward(self, x, training=False, rng=None):
        self._check_ready()
        if x.ndim != 2:
            raise ShapeError(f"{self.name}: expected (N, features) input, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        self._cache = x
        return x @ self.weights.T + self.bias

    def backward(self, grad, need_input_grad=True):
        x = self._take_cache()
        if self.frozen:
            self.zero_grad()
        else:
            self.grad_weights = grad.T @ x
            self.grad_bias = grad.sum(axis=0)
        return grad @ self.weights if need_input_grad else None


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, training=False, rng=None):
        out = np.maximum(x, x.dtype.type(0))
        self._cache = out
        return out

    def backward(self, grad):
        return grad * (self._take_cache() > 0)


class Dropout(Layer):
    """Inverted dropout: survivors are rescaled at train time, eval is identity."""

    kind = "Dropout"

    def __init__(self, rate=0.5, name=None):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)

    def hyper(self):
        return {"rate": self.rate}

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._cache = 1
            return x
        if rng is None:
            raise StateError(f"{self.name}: training-mode dropout needs a random generator")
        keep = rng.random(x.shape) >= self.rate
        mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.rate))
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._take_cache()


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._take_cache())


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, x, training=False, rng=None):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, grad):
        p = self._take_cache()
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, MaxPool2D, Dense, ReLU, Dropout, Flatten, Softmax)}


def make_layer(kind: str, **hyper) -> Layer:
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ConfigError(f"unknown layer kind {kind!r}") from None
    return cls(**hyper)


# -- single-call helpers -----------------------------------------------------

def _batched(x, ndim):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == ndim - 1 else (x, False)


def conv2d_forward(x, layer: Conv2D):
    xb, single = _batched(x, 4)
    out = layer.forward(xb.astype(layer.weights.dtype, copy=False))
    layer._cache = None
    return out[0] if single else out


def maxpool_forward(x):
    xb, single = _batched(x, 4)
    out = MaxPool2D().forward(xb)
    return out[0] if single else out


def dense_forward(x, layer: Dense):
    xb, single = _batched(x, 2)
    out = layer.forward(xb.astype(layer.weights.dtype, copy=False))
    layer._cache = None
    return out[0] if single else out


def relu(x):
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def dropout_forward(x, rate, training, rng):
    x = np.asarray(x)
    return Dropout(rate).forward(x, training=training, rng=rng)


def softmax(x):
    x = np.asarray(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- losses ------------------------------------------------------------------

def _check_pair(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    return pred, target


def loss_and_grad(pred, target, kind=MAE):
    """Return ``(loss, dloss/dpred)``.

    MAE and BCE are averaged over every entry. Categorical cross-entropy is
    summed over the class axis and averaged over samples.
    """
    pred, target = _check_pair(pred, target)
    p64 = pred.astype(np.float64)
    t64 = target.astype(np.float64)
    if kind == MAE:
        diff = p64 - t64
        value = np.abs(diff).mean() if diff.size else 0.0
        grad = np.sign(diff) / max(diff.size, 1)
    elif kind == BCE:
        pc = np.clip(p64, BCE_EPS, 1 - BCE_EPS)
        value = -(t64 * np.log(pc) + (1 - t64) * np.log(1 - pc)).mean()
        grad = (-t64 / pc + (1 - t64) / (1 - pc)) / pred.size
    elif kind == CATEGORICAL_CE:
        pc = np.clip(p64, BCE_EPS, 1.0)
        n = pred.shape[0] if pred.ndim > 1 else 1
        value = -(t64 * np.log(pc)).sum() / n
        grad = -t64 / pc / n
    else:
        raise ConfigError(f"unknown loss kind {kind!r}")
    return float(value), grad.astype(pred.dtype)


def loss(pred, target, kind=MAE) -> float:
    return loss_and_grad(pred, target, kind)[0]


# -- Adadelta ----------------------------------------------------------------

@dataclass
class AdadeltaState:
    rho: float = 0.95
    epsilon: float = 1e-6
    accum_grad_sq: list = field(default_factory=list)
    accum_update_sq: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ConfigError(f"rho must lie in (0, 1), got {self.rho}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


def adadelta_step(params, grads, state: AdadeltaState):
    """Apply one Adadelta update in place and return ``params``.

    Accumulators are created lazily on the first call, shape-matched to
    ``params``.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.accum_grad_sq:
        state.accum_grad_sq = [np.zeros_like(p) for p in params]
        state.accum_update_sq = [np.zeros_like(p) for p in params]
    rho, eps = state.rho, state.epsilon
    for p, g, eg, ex in zip(params, grads, state.accum_grad_sq, state.accum_update_sq):
        if p.shape != g.shape or p.shape != eg.shape:
            raise ShapeError(f"parameter shape {p.shape} vs gradient shape {g.shape}")
        g = g.astype(p.dtype, copy=False)
        eg *= rho
        eg += (1 - rho) * np.square(g)
        delta = np.sqrt(ex + eps)
        delta /= np.sqrt(eg + eps)
        delta *= g
        ex *= rho
        ex += (1 - rho) * np.square(delta)
        p -= delta
    return params


class Adadelta:
    """Adadelta over a model's unfrozen weight layers.

    Frozen layers are skipped entirely, so their parameters stay bit-identical.
    """

    def __init__(self, rho=0.95, epsilon=1e-6):
        self.rho = rho
        self.epsilon = epsilon
        self.states: dict[int, AdadeltaState] = {}

    def step(self, model):
        for i, layer in enumerate(model.weight_layers()):
            if layer.frozen:
                continue
            state = self.states.get(i)
            if state is None:
                state = self.states[i] = AdadeltaState(self.rho, self.epsilon)
            adadelta_step([layer.weights, layer.bias],
                          [layer.grad_weights, layer.grad_bias], state)
