"""Network layers, the declarative network spec, and the model builder.

A network is an ordered list of layer descriptors validated against the
input shape at build time.  Fully connected layers flatten their input,
so an FC over a [C,1,1] feature map is exactly a 1x1 convolution.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import NonFiniteError, ShapeMismatch, Tensor, conv2d
from .pooling import (PARAM_NAMES, SHARING_MODES, LstmPoolParams,
                      fixed_pool_forward, init_pool_params, lstm_pool_fused)

CHECKPOINT_MAGIC = b"LPCK"
CHECKPOINT_VERSION = 1


# -- layer descriptors --------------------------------------------------------

@dataclass
class Conv2dSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    type: str = field(default="conv2d", init=False)


@dataclass
class ActivationSpec:
    kind: str  # relu | leaky_relu | tanh | sigmoid
    alpha: float = 0.0
    type: str = field(default="activation", init=False)


@dataclass
class PoolSpec:
    kind: str  # max | avg | lstm
    k: int
    stride: int
    sharing: str = "per_layer"
    type: str = field(default="pool", init=False)


@dataclass
class FcSpec:
    out_units: int
    type: str = field(default="fc", init=False)


@dataclass
class DropoutSpec:
    rate: float
    type: str = field(default="dropout", init=False)


@dataclass
class BatchNormSpec:
    momentum: float = 0.9
    eps: float = 1e-5
    type: str = field(default="batchnorm", init=False)


@dataclass
class SoftmaxXentSpec:
    classes: int
    type: str = field(default="softmax_xent", init=False)


_SPEC_TYPES = {
    "conv2d": Conv2dSpec,
    "activation": ActivationSpec,
    "pool": PoolSpec,
    "fc": FcSpec,
    "dropout": DropoutSpec,
    "batchnorm": BatchNormSpec,
    "softmax_xent": SoftmaxXentSpec,
}


@dataclass
class NetworkSpec:
    layers: list
    input_shape: tuple = (3, 32, 32)

    def to_json(self) -> str:
        out = {"input_shape": list(self.input_shape), "layers": []}
        for l in self.layers:
            d = {f.name: getattr(l, f.name) for f in fields(l)}
            out["layers"].append(d)
        return json.dumps(out, indent=2)

    @staticmethod
    def from_json(text: str) -> "NetworkSpec":
        doc = json.loads(text)
        layers = []
        for d in doc["layers"]:
            d = dict(d)
            cls = _SPEC_TYPES[d.pop("type")]
            layers.append(cls(**d))
        return NetworkSpec(layers=layers, input_shape=tuple(doc["input_shape"]))


def validate_shapes(spec: NetworkSpec):
    """Walk the layer list, returning the shape after each layer.

    Raises ShapeMismatch naming the first layer index that breaks the chain.
    """
    shape = tuple(spec.input_shape)  # (C,H,W) or (units,)
    shapes = []
    for idx, l in enumerate(spec.layers):
        if isinstance(l, Conv2dSpec):
            if len(shape) != 3:
                raise ShapeMismatch(f"layer {idx} (conv2d)", shape, ("C", "H", "W"))
            c, h, w = shape
            oh = (h + 2 * l.pad - l.kernel) // l.stride + 1
            ow = (w + 2 * l.pad - l.kernel) // l.stride + 1
            if oh <= 0 or ow <= 0:
                raise ShapeMismatch(f"layer {idx} (conv2d)", shape, (l.kernel, l.kernel))
            shape = (l.out_channels, oh, ow)
        elif isinstance(l, PoolSpec):
            if len(shape) != 3:
                raise ShapeMismatch(f"layer {idx} (pool)", shape, ("C", "H", "W"))
            c, h, w = shape
            if h < l.k or w < l.k or (h - l.k) % l.stride or (w - l.k) % l.stride:
                raise ShapeMismatch(f"layer {idx} (pool)", shape, (l.k, l.k))
            shape = (c, (h - l.k) // l.stride + 1, (w - l.k) // l.stride + 1)
        elif isinstance(l, FcSpec):
            shape = (l.out_units,)
        elif isinstance(l, BatchNormSpec):
            if len(shape) != 3:
                raise ShapeMismatch(f"layer {idx} (batchnorm)", shape, ("C", "H", "W"))
        elif isinstance(l, (ActivationSpec, DropoutSpec)):
            pass
        elif isinstance(l, SoftmaxXentSpec):
            n = shape[0] if len(shape) == 1 else int(np.prod(shape))
            if n != l.classes:
                raise ShapeMismatch(f"layer {idx} (softmax_xent)", shape, (l.classes,))
        else:
            raise TypeError(f"unknown layer spec at index {idx}: {l!r}")
        shapes.append(shape)
    return shapes


# -- fused batch norm ---------------------------------------------------------

class BatchNormState:
    """Per-channel affine params plus running statistics (not trainable)."""

    def __init__(self, channels: int, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm_forward(x: Tensor, st: BatchNormState, train: bool) -> Tensor:
    """NCHW batch norm. Train mode uses batch stats and updates the running
    averages in place; eval mode is a fixed affine map."""
    c = x.shape[1]
    bc = (1, c, 1, 1)
    if not train:
        scale = (st.gamma.data / np.sqrt(st.running_var + st.eps)).reshape(bc)
        shift = st.beta.data.reshape(bc) - st.running_mean.reshape(bc) * scale
        out = x.data * scale + shift

        def vjp_x(g):
            return g * scale

        def vjp_gamma(g):
            xhat = (x.data - st.running_mean.reshape(bc)) / np.sqrt(st.running_var.reshape(bc) + st.eps)
            return (g * xhat).sum(axis=(0, 2, 3))

        return Tensor._make(out, "batchnorm", [
            (x, vjp_x), (st.gamma, vjp_gamma),
            (st.beta, lambda g: g.sum(axis=(0, 2, 3))),
        ])

    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + st.eps)
    xhat = (x.data - mu.reshape(bc)) * inv.reshape(bc)
    out = st.gamma.data.reshape(bc) * xhat + st.beta.data.reshape(bc)
    m = st.momentum
    st.running_mean = (m * st.running_mean + (1 - m) * mu).astype(st.running_mean.dtype)
    st.running_var = (m * st.running_var + (1 - m) * var * n / max(n - 1, 1)).astype(st.running_var.dtype)

    def vjp_x(g):
        gg = g * st.gamma.data.reshape(bc)  # d xhat
        s1 = gg.sum(axis=axes).reshape(bc)
        s2 = (gg * xhat).sum(axis=axes).reshape(bc)
        return inv.reshape(bc) * (gg - s1 / n - xhat * s2 / n)

    return Tensor._make(out, "batchnorm", [
        (x, vjp_x),
        (st.gamma, lambda g: (g * xhat).sum(axis=axes)),
        (st.beta, lambda g: g.sum(axis=axes)),
    ])


# -- losses -------------------------------------------------------------------

def loss_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatch("softmax_xent", logits.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    logp = z - logsum
    loss = -logp[np.arange(b), labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[np.arange(b), labels] -= 1.0
        return (g * d / b).astype(z.dtype)

    return Tensor._make(np.asarray(loss, dtype=z.dtype), "softmax_xent", [(logits, vjp)])


def loss_mae(pred: Tensor, target) -> Tensor:
    """Mean absolute error."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeMismatch("mae", pred.shape, target.shape)
    return (pred - target).abs().mean()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- model --------------------------------------------------------------------

class Model:
    """A built network: parameters plus a forward graph builder."""

    def __init__(self, spec: NetworkSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.layer_shapes = validate_shapes(spec)
        rng = np.random.default_rng(seed)
        self.conv_params = {}    # layer idx -> (W, b)
        self.fc_params = {}      # layer idx -> (W, b)
        self.bn_states = {}      # layer idx -> BatchNormState
        self.pool_units = {}     # layer idx -> LstmPoolParams (may alias)
        self._psi = {}           # layer idx -> (kind, alpha) for lstm pools

        shared_unit = None
        in_shape = tuple(spec.input_shape)
        for idx, l in enumerate(spec.layers):
            if isinstance(l, Conv2dSpec):
                cin = in_shape[0]
                fan_in = cin * l.kernel * l.kernel
                limit = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-limit, limit, size=(l.out_channels, cin, l.kernel, l.kernel))
                self.conv_params[idx] = (
                    Tensor(w.astype(dtype), requires_grad=True),
                    Tensor(np.zeros(l.out_channels, dtype=dtype), requires_grad=True),
                )
            elif isinstance(l, FcSpec):
                fan_in = int(np.prod(in_shape))
                limit = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-limit, limit, size=(fan_in, l.out_units))
                self.fc_params[idx] = (
                    Tensor(w.astype(dtype), requires_grad=True),
                    Tensor(np.zeros(l.out_units, dtype=dtype), requires_grad=True),
                )
            elif isinstance(l, BatchNormSpec):
                self.bn_states[idx] = BatchNormState(in_shape[0], l.momentum, l.eps, dtype)
            elif isinstance(l, PoolSpec) and l.kind == "lstm":
                if l.sharing not in SHARING_MODES:
                    raise ValueError(f"unknown sharing mode {l.sharing!r}")
                if l.sharing == "global_shared":
                    if shared_unit is None:
                        shared_unit = init_pool_params(rng, dtype=dtype)
                    self.pool_units[idx] = shared_unit
                elif l.sharing == "per_region":
                    oh = (in_shape[1] - l.k) // l.stride + 1
                    ow = (in_shape[2] - l.k) // l.stride + 1
                    self.pool_units[idx] = init_pool_params(rng, shape=(oh, ow), dtype=dtype)
                else:
                    self.pool_units[idx] = init_pool_params(rng, dtype=dtype)
                self._psi[idx] = self._surrounding_activation(idx)
            in_shape = self.layer_shapes[idx]

    def _surrounding_activation(self, pool_idx: int):
        """ψ defaults to the activation family used by the conv layers."""
        for l in self.spec.layers:
            if isinstance(l, ActivationSpec):
                return (l.kind, l.alpha)
        return ("relu", 0.0)

    def set_pool_activation(self, kind: str, alpha: float = 0.0):
        for idx in self._psi:
            self._psi[idx] = (kind, alpha)

    # -- parameters ----------------------------------------------------------
    def named_parameters(self):
        """Unique trainable tensors in spec order (shared units appear once)."""
        out = []
        seen = set()
        for idx, l in enumerate(self.spec.layers):
            if idx in self.conv_params:
                w, b = self.conv_params[idx]
                out += [(f"layer{idx}.conv.W", w), (f"layer{idx}.conv.b", b)]
            elif idx in self.fc_params:
                w, b = self.fc_params[idx]
                out += [(f"layer{idx}.fc.W", w), (f"layer{idx}.fc.b", b)]
            elif idx in self.bn_states:
                st = self.bn_states[idx]
                out += [(f"layer{idx}.bn.gamma", st.gamma), (f"layer{idx}.bn.beta", st.beta)]
            elif idx in self.pool_units:
                unit = self.pool_units[idx]
                if id(unit) in seen:
                    continue
                seen.add(id(unit))
                out += [(f"layer{idx}.pool.{n}", getattr(unit, n)) for n in PARAM_NAMES]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def pooling_units(self):
        """Unique LSTM pooling units, for constraint projection."""
        out, seen = [], set()
        for unit in self.pool_units.values():
            if id(unit) not in seen:
                seen.add(id(unit))
                out.append(unit)
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    # -- forward ---------------------------------------------------------------
    def forward(self, batch, train_mode: bool = False, rng=None,
                check_finite: bool = False) -> Tensor:
        """Run the network on [B, *input_shape]; returns logits [B, classes].

        train_mode samples dropout masks (requires rng) and updates
        batchnorm running statistics; eval mode is deterministic.
        """
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeMismatch("forward", x.shape, ("B",) + tuple(self.spec.input_shape))
        for idx, l in enumerate(self.spec.layers):
            if isinstance(l, Conv2dSpec):
                w, b = self.conv_params[idx]
                x = conv2d(x, w, b, stride=l.stride, pad=l.pad)
            elif isinstance(l, ActivationSpec):
                if l.kind == "relu":
                    x = x.relu()
                elif l.kind == "leaky_relu":
                    x = x.leaky_relu(l.alpha)
                elif l.kind == "tanh":
                    x = x.tanh()
                elif l.kind == "sigmoid":
                    x = x.sigmoid()
                else:
                    raise ValueError(f"unknown activation {l.kind!r}")
            elif isinstance(l, PoolSpec):
                if l.kind == "lstm":
                    kind, alpha = self._psi[idx]
                    x = lstm_pool_fused(x, l.k, l.stride, self.pool_units[idx], kind, alpha)
                else:
                    x = fixed_pool_forward(x, l.k, l.stride, l.kind)
            elif isinstance(l, FcSpec):
                w, b = self.fc_params[idx]
                if x.ndim > 2:
                    x = x.reshape((x.shape[0], -1))
                x = x @ w + b
            elif isinstance(l, DropoutSpec):
                if train_mode and l.rate > 0:
                    if rng is None:
                        raise ValueError("train-mode dropout needs an rng")
                    keep = (rng.random(x.shape) >= l.rate) / (1.0 - l.rate)
                    x = x * Tensor(keep.astype(x.dtype))
            elif isinstance(l, BatchNormSpec):
                x = batchnorm_forward(x, self.bn_states[idx], train_mode)
            elif isinstance(l, SoftmaxXentSpec):
                if x.ndim > 2:
                    x = x.reshape((x.shape[0], -1))
            if check_finite:
                try:
                    x.assert_finite(f"layer {idx} ({l.type})")
                except NonFiniteError:
                    raise
        return x

    # -- checkpointing ---------------------------------------------------------
    def _state_arrays(self):
        """All persistent arrays in spec order: trainables plus bn running stats.

        Shared pooling units are written once, at their first pooling layer.
        """
        out = []
        seen = set()
        for idx, l in enumerate(self.spec.layers):
            if idx in self.conv_params:
                w, b = self.conv_params[idx]
                out += [(f"layer{idx}.conv.W", w.data), (f"layer{idx}.conv.b", b.data)]
            elif idx in self.fc_params:
                w, b = self.fc_params[idx]
                out += [(f"layer{idx}.fc.W", w.data), (f"layer{idx}.fc.b", b.data)]
            elif idx in self.bn_states:
                st = self.bn_states[idx]
                out += [(f"layer{idx}.bn.gamma", st.gamma.data),
                        (f"layer{idx}.bn.beta", st.beta.data),
                        (f"layer{idx}.bn.running_mean", st.running_mean),
                        (f"layer{idx}.bn.running_var", st.running_var)]
            elif idx in self.pool_units:
                unit = self.pool_units[idx]
                if id(unit) in seen:
                    continue
                seen.add(id(unit))
                out += [(f"layer{idx}.pool.{n}", getattr(unit, n).data) for n in PARAM_NAMES]
        return out

    def save(self, path):
        """Binary container: magic, version, spec JSON, then f32 blobs in spec order."""
        spec_json = self.spec.to_json().encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(spec_json)))
            fh.write(spec_json)
            for _, arr in self._state_arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @staticmethod
    def load(path, dtype=np.float32) -> "Model":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"bad checkpoint magic {magic!r}")
            version, jlen = struct.unpack("<II", fh.read(8))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            spec = NetworkSpec.from_json(fh.read(jlen).decode())
            model = Model(spec, seed=0, dtype=dtype)
            for name, arr in model._state_arrays():
                raw = fh.read(arr.size * 4)
                if len(raw) != arr.size * 4:
                    raise ValueError(f"truncated checkpoint at {name}")
                arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
            extra = fh.read()
            if extra:
                raise ValueError(f"{len(extra)} trailing bytes in checkpoint")
        return model


def build_network(spec: NetworkSpec, seed: int, dtype=np.float32) -> Model:
    """Validate the spec, initialize deterministically from seed."""
    return Model(spec, seed, dtype=dtype)


# -- presets --------------------------------------------------------------------

def conv_preset(n: int, pool_kind: str = "max", sharing: str = "per_layer",
                leak: float = 0.3, classes: int = 10,
                dropout_rate: float = 0.5) -> NetworkSpec:
    """Two stacks of two 3x3 convs (n units) with 4x4 then 8x8 pooling,
    two FC(n) layers with dropout, FC(classes) + softmax. Input [3,32,32]."""
    act = ActivationSpec("leaky_relu", leak)
    layers = [
        Conv2dSpec(n, 3, 1, 1), BatchNormSpec(), act,
        Conv2dSpec(n, 3, 1, 1), BatchNormSpec(), act,
        PoolSpec(pool_kind, 4, 4, sharing),
        Conv2dSpec(n, 3, 1, 1), BatchNormSpec(), act,
        Conv2dSpec(n, 3, 1, 1), BatchNormSpec(), act,
        PoolSpec(pool_kind, 8, 8, sharing),
        FcSpec(n), act, DropoutSpec(dropout_rate),
        FcSpec(n), act, DropoutSpec(dropout_rate),
        FcSpec(classes),
        SoftmaxXentSpec(classes),
    ]
    return NetworkSpec(layers=layers)


def vgg16_preset(pool_kind: str = "max", sharing: str = "per_layer",
                 classes: int = 10, leak: float = 0.1,
                 channel_mult: float = 1.0) -> NetworkSpec:
    """VGG16-style stack for 32x32 inputs, optionally channel-scaled down."""
    act = ActivationSpec("leaky_relu", leak)

    def ch(c):
        return max(1, int(round(c * channel_mult)))

    layers = []
    for reps, c in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]:
        for _ in range(reps):
            layers += [Conv2dSpec(ch(c), 3, 1, 1), BatchNormSpec(), act]
        layers += [PoolSpec(pool_kind, 2, 2, sharing), DropoutSpec(0.3)]
    fc = ch(512)
    layers += [FcSpec(fc), act, DropoutSpec(0.5),
               FcSpec(fc), act, DropoutSpec(0.5),
               FcSpec(classes), SoftmaxXentSpec(classes)]
    return NetworkSpec(layers=layers)
