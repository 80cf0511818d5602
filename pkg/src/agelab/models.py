"""Model construction, transfer-learning surgery and checkpoint files."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import ConfigError, ShapeError

HEAD_SIZES = {"gender": 2, "age": 81}
MAGIC = b"AGELAB-CKPT 1\n"
PREPROCESS_MODES = ("standardize", "zero_center", "raw")


class DepthError(ShapeError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class Preprocess:
    """Pixel normalisation baked into a model so eval reuses training stats."""

    mode: str = "raw"
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.mode not in PREPROCESS_MODES:
            raise ConfigError(f"unknown input mode {self.mode!r}")

    def apply(self, pixels):
        x = np.asarray(pixels, dtype=np.float32)
        if self.mode == "standardize":
            return ((x - np.float32(self.mean)) / np.float32(self.std)).astype(np.float32)
        if self.mode == "zero_center":
            return (x - np.float32(self.mean)).astype(np.float32)
        return x


class ModelSpec:
    """An ordered stack of layers plus its freeze mask and output head.

    Shapes are validated when the spec is built, so a spec that exists can
    always run forward on a correctly sized input.
    """

    def __init__(self, input_shape, layers, head=None, preprocess=None, meta=None):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.head = head
        self.preprocess = preprocess or Preprocess()
        self.meta = dict(meta or {})
        if head is not None and head not in HEAD_SIZES:
            raise ConfigError(f"unknown head {head!r}; expected one of {sorted(HEAD_SIZES)}")
        self.shapes = self._validate()

    def _validate(self):
        shapes = [self.input_shape]
        for layer in self.layers:
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise type(exc)(f"layer {layer.name!r}: {exc}") from None
        if self.head is not None:
            want = HEAD_SIZES[self.head]
            if shapes[-1] != (want,):
                raise ShapeError(f"{self.head} head needs {want} outputs, final layer "
                                 f"{self.layers[-1].name!r} gives {shapes[-1]}")
        return shapes

    @property
    def output_shape(self):
        return self.shapes[-1]

    def weight_layers(self):
        return [layer for layer in self.layers if layer.has_weights]

    @property
    def freeze_mask(self):
        return [layer.frozen for layer in self.weight_layers()]

    def flatten_index(self):
        for i, layer in enumerate(self.layers):
            if layer.kind == "Flatten":
                return i
        raise ConfigError("model has no Flatten layer separating backbone and top")

    def param_count(self, trainable_only=False):
        total = 0
        for layer in self.weight_layers():
            if trainable_only and layer.frozen:
                continue
            total += int(np.prod(layer.weight_shape())) + int(np.prod(layer.bias_shape()))
        return total

    @property
    def dtype(self):
        wl = self.weight_layers()
        return wl[0].weights.dtype if wl and wl[0].weights is not None else nn.DTYPE

    def forward(self, x, training=False, rng=None):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"model expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, grad):
        """Backpropagate ``dloss/doutput``; fills ``grad_*`` on every weight layer.

        Propagation stops below the lowest unfrozen weight layer; frozen
        layers get all-zero gradients.
        """
        trainable = [i for i, layer in enumerate(self.layers) if layer.has_weights and not layer.frozen]
        stop = trainable[0] if trainable else len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i < stop:
                if layer._cache is None:
                    raise nn.StateError(f"{layer.name}: backward called without a preceding forward pass")
                layer._cache = None
                if layer.has_weights:
                    layer.zero_grad()
                continue
            if i == stop and layer.has_weights:
                grad = layer.backward(grad, need_input_grad=i > 0)
            else:
                grad = layer.backward(grad)
        return [layer.grads() for layer in self.weight_layers()]

    def predict(self, x, batch_size=250):
        outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        self.clear_cache()
        return np.concatenate(outs) if outs else np.zeros((0,) + self.output_shape, self.dtype)

    def clear_cache(self):
        for layer in self.layers:
            layer._cache = None

    def astype(self, dtype):
        other = self.copy()
        for layer in other.weight_layers():
            if layer.weights is not None:
                layer.weights = layer.weights.astype(dtype)
                layer.bias = layer.bias.astype(dtype)
        return other

    def copy(self):
        self.clear_cache()
        return copy.deepcopy(self)

    def summary(self):
        lines = []
        for layer, shape in zip(self.layers, self.shapes[1:]):
            flag = " (frozen)" if layer.has_weights and layer.frozen else ""
            lines.append(f"{layer.name:<14}{layer.kind:<10}{str(shape):<16}{flag}")
        lines.append(f"parameters: {self.param_count()} ({self.param_count(True)} trainable)")
        return "\n".join(lines)


def build_backbone(stacks, input_shape=(1, 64, 64)) -> ModelSpec:
    """Conv stacks of 3x3 same-padding convolutions + ReLU, each closed by a
    2x2 max-pool, ending in Flatten.

    Every pooling step halves the spatial dims, so height and width must be
    divisible by ``2 ** len(stacks)``.
    """
    stacks = [tuple(s) for s in stacks]
    if not stacks:
        raise ConfigError("backbone needs at least one stack")
    c, h, w = input_shape
    if h % 2 ** len(stacks) or w % 2 ** len(stacks):
        raise DepthError(f"{len(stacks)} stacks need height and width divisible by "
                         f"{2 ** len(stacks)}; got {h}x{w}")
    layers = []
    channels = c
    for si, (filters, n_conv) in enumerate(stacks, start=1):
        if filters < 1 or n_conv < 1:
            raise ConfigError(f"stack {si}: filter and layer counts must be positive")
        for ci in range(1, n_conv + 1):
            layers.append(nn.Conv2D(channels, filters, 3, 1, 1, name=f"conv{si}_{ci}"))
            layers.append(nn.ReLU(name=f"relu{si}_{ci}"))
            channels = filters
        layers.append(nn.MaxPool2D(name=f"pool{si}"))
    layers.append(nn.Flatten(name="flatten"))
    return ModelSpec(input_shape, layers)


def replace_top(spec: ModelSpec, dense_sizes, dropout_rate=0.5, head="gender") -> ModelSpec:
    """Drop everything after Flatten and attach a fresh dense top.

    The returned spec deep-copies the backbone, so ``spec`` is left intact.
    """
    dense_sizes = [int(s) for s in dense_sizes]
    if not dense_sizes or min(dense_sizes) < 1:
        raise ConfigError(f"dense sizes must be a non-empty list of positive ints: {dense_sizes}")
    if not 0 <= dropout_rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
    if head not in HEAD_SIZES:
        raise ConfigError(f"unknown head {head!r}")
    spec.clear_cache()
    cut = spec.flatten_index()
    layers = copy.deepcopy(spec.layers[:cut + 1])
    width = spec.shapes[cut + 1][0]
    for i, size in enumerate(dense_sizes, start=1):
        layers += [nn.Dense(width, size, name=f"fc{i}"), nn.ReLU(name=f"relu_fc{i}"),
                   nn.Dropout(dropout_rate, name=f"dropout{i}")]
        width = size
    layers += [nn.Dense(width, HEAD_SIZES[head], name="output"), nn.Softmax(name="softmax")]
    return ModelSpec(spec.input_shape, layers, head, copy.deepcopy(spec.preprocess), spec.meta)


def set_freeze(spec: ModelSpec, mask) -> ModelSpec:
    layers = spec.weight_layers()
    mask = [bool(m) for m in mask]
    if len(mask) != len(layers):
        raise ShapeError(f"freeze mask has {len(mask)} entries but the model has "
                         f"{len(layers)} weight layers")
    for layer, frozen in zip(layers, mask):
        layer.frozen = frozen
    return spec


def backbone_mask(spec: ModelSpec):
    """Freeze mask that freezes every weight layer before Flatten."""
    cut = spec.flatten_index()
    return [i < cut for i, layer in enumerate(spec.layers) if layer.has_weights]


def init_random(spec: ModelSpec, seed=0, only_pending=False) -> ModelSpec:
    """Glorot-uniform weights, zero biases.

    Each layer draws from its own stream keyed by (seed, layer position), so
    re-initialising a new top does not depend on the backbone.
    """
    for i, layer in enumerate(spec.weight_layers()):
        if only_pending and not layer.pending_init and layer.weights is not None:
            continue
        rng = np.random.default_rng([int(seed), i])
        fan_in, fan_out = layer.fans()
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layer.weights = rng.uniform(-bound, bound, layer.weight_shape()).astype(nn.DTYPE)
        layer.bias = np.zeros(layer.bias_shape(), dtype=nn.DTYPE)
        layer.pending_init = False
    return spec


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    """Structural manifest plus one flat float32 blob per parameter tensor."""

    manifest: dict
    blobs: list = field(default_factory=list)

    @classmethod
    def from_model(cls, spec: ModelSpec, **meta) -> "Checkpoint":
        layers, blobs, offset = [], [], 0
        for layer in spec.layers:
            entry = {"kind": layer.kind, "name": layer.name, "hyper": layer.hyper()}
            if layer.has_weights:
                if layer.weights is None:
                    raise nn.StateError(f"{layer.name}: cannot checkpoint uninitialised weights")
                entry["frozen"] = layer.frozen
                entry["params"] = {}
                for pname, arr in layer.params():
                    flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
                    entry["params"][pname] = {"shape": list(arr.shape), "offset": offset,
                                              "length": int(flat.size)}
                    offset += flat.nbytes
                    blobs.append(flat.copy())
            layers.append(entry)
        manifest = {
            "format": "agelab-checkpoint",
            "version": 1,
            "input_shape": list(spec.input_shape),
            "head": spec.head,
            "preprocess": asdict(spec.preprocess),
            "layers": layers,
            "meta": {**spec.meta, **meta},
            "blob_bytes": offset,
        }
        return cls(manifest, blobs)

    def to_bytes(self) -> bytes:
        text = json.dumps(self.manifest, indent=1, sort_keys=True).encode("utf-8")
        body = b"".join(np.asarray(b, dtype="<f4").tobytes() for b in self.blobs)
        return MAGIC + f"{len(text)}\n".encode() + text + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(MAGIC):
            raise FormatError("not an agelab checkpoint (bad magic line)")
        rest = data[len(MAGIC):]
        nl = rest.find(b"\n")
        try:
            mlen = int(rest[:nl])
            manifest = json.loads(rest[nl + 1:nl + 1 + mlen].decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise FormatError(f"unreadable checkpoint manifest: {exc}") from None
        body = rest[nl + 1 + mlen:]
        if len(body) != manifest.get("blob_bytes"):
            raise FormatError(f"blob section is {len(body)} bytes, manifest declares "
                              f"{manifest.get('blob_bytes')} (truncated or corrupted file)")
        blobs = []
        for entry in manifest["layers"]:
            for pname, info in entry.get("params", {}).items():
                if int(np.prod(info["shape"])) != info["length"]:
                    raise FormatError(f"{entry['name']}.{pname}: length {info['length']} does not "
                                      f"match shape {info['shape']}")
                start = info["offset"]
                chunk = body[start:start + 4 * info["length"]]
                if len(chunk) != 4 * info["length"]:
                    raise FormatError(f"{entry['name']}.{pname}: blob runs past end of file")
                blobs.append(np.frombuffer(chunk, dtype="<f4").copy())
        return cls(manifest, blobs)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def to_model(self, expect: ModelSpec | None = None) -> ModelSpec:
        m = self.manifest
        layers = []
        for entry in m["layers"]:
            layer = nn.make_layer(entry["kind"], **entry["hyper"])
            layer.name = entry["name"]
            layers.append(layer)
        if expect is not None:
            _check_compatible(expect, layers)
        blobs = iter(self.blobs)
        for entry, layer in zip(m["layers"], layers):
            if not layer.has_weights:
                continue
            for pname, info in entry["params"].items():
                want = layer.weight_shape() if pname == "weights" else layer.bias_shape()
                if tuple(info["shape"]) != tuple(want):
                    raise ShapeError(f"layer {layer.name!r}: stored {pname} shape {info['shape']} "
                                     f"!= declared {list(want)}")
                setattr(layer, pname, next(blobs).reshape(want).astype(nn.DTYPE))
            layer.frozen = bool(entry["frozen"])
            layer.pending_init = False
        spec = ModelSpec(m["input_shape"], layers, m["head"], Preprocess(**m["preprocess"]),
                         m.get("meta", {}))
        if expect is not None:
            set_freeze(spec, expect.freeze_mask)
        return spec


def _check_compatible(expect: ModelSpec, layers):
    if len(expect.layers) != len(layers):
        raise ShapeError(f"checkpoint has {len(layers)} layers, target architecture has "
                         f"{len(expect.layers)}")
    for want, got in zip(expect.layers, layers):
        if want.kind != got.kind:
            raise ShapeError(f"layer {want.name!r}: checkpoint has {got.kind}, expected {want.kind}")
        if want.has_weights and (want.weight_shape() != got.weight_shape()
                                 or want.bias_shape() != got.bias_shape()):
            raise ShapeError(f"layer {want.name!r}: checkpoint weights {got.weight_shape()} "
                             f"do not fit declared {want.weight_shape()}")


def save_checkpoint(spec: ModelSpec, path, **meta):
    Checkpoint.from_model(spec, **meta).save(path)


def load_checkpoint(path, expect: ModelSpec | None = None) -> ModelSpec:
    return Checkpoint.load(path).to_model(expect)
