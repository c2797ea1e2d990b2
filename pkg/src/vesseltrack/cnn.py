"""Dilated 3D convolutional network with hand-written backpropagation.

Feature maps are channels-last arrays of shape (batch, x, y, z, channels).
Every layer is ``conv -> batch norm -> activation``; convolutions are valid
(unpadded), so a patch as wide as the receptive field yields a single output
voxel and larger inputs give a dense output map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import (
    HeaderError,
    LengthMismatchError,
    ShapeMismatchError,
    TruncatedPayloadError,
    ValidationError,
    VersionError,
)
from .volume import PatchSpec

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
HEADS = ("tracker", "proximity")


@dataclass(frozen=True)
class LayerSpec:
    kernel_width: int
    dilation: int
    in_channels: int
    out_channels: int
    batch_norm: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ValidationError("kernel width must be odd")
        if self.dilation < 1 or (self.kernel_width == 1 and self.dilation != 1):
            raise ValidationError("dilation must be >= 1, and 1 for 1-wide kernels")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("channel counts must be positive")
        if self.activation not in ("relu", "none"):
            raise ValidationError(f"unknown activation {self.activation!r}")

    @property
    def shrink(self) -> int:
        return self.dilation * (self.kernel_width - 1)

    def param_count(self) -> int:
        return self.kernel_width ** 3 * self.in_channels * self.out_channels + self.out_channels


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    head: str = "tracker"
    num_directions: int = 0
    # proximity targets are regressed divided by this factor
    output_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.head not in HEADS:
            raise ValidationError(f"unknown head {self.head!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ValidationError("layer channel counts do not chain")
        expected = self.num_directions + 1 if self.head == "tracker" else 1
        if self.layers[-1].out_channels != expected:
            raise ValidationError(
                f"{self.head} head needs {expected} output channels, got {self.layers[-1].out_channels}")

    @property
    def field_width(self) -> int:
        return receptive_field(self.layers)

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels


def receptive_field(layers) -> int:
    return 1 + sum(layer.dilation * (layer.kernel_width - 1) for layer in layers)


def field_widths(layers) -> list[int]:
    return [receptive_field(layers[: i + 1]) for i in range(len(layers))]


TABLE1_KERNELS = (3, 3, 3, 3, 3, 1, 1)
TABLE1_DILATIONS = (1, 1, 2, 4, 1, 1, 1)
TABLE1_CHANNELS = (32, 32, 32, 32, 64, 64)


def table1_spec(num_directions: int, channels=TABLE1_CHANNELS, head: str = "tracker",
                output_scale: float = 1.0) -> NetworkSpec:
    """The seven-layer dilated stack; ``channels`` sets the six hidden widths."""
    if head == "tracker" and num_directions < 4:
        raise ValidationError("need at least 4 directions")
    outs = list(channels) + [num_directions + 1 if head == "tracker" else 1]
    ins = [1] + outs[:-1]
    layers = tuple(
        LayerSpec(k, d, ci, co, batch_norm=True, activation="relu" if i < 6 else "none")
        for i, (k, d, ci, co) in enumerate(zip(TABLE1_KERNELS, TABLE1_DILATIONS, ins, outs))
    )
    return NetworkSpec(layers, head=head, num_directions=num_directions if head == "tracker" else 0,
                       output_scale=output_scale)


@dataclass
class NetworkParams:
    spec: NetworkSpec
    layers: list[dict]
    patch: PatchSpec = field(default_factory=PatchSpec)
    meta: dict = field(default_factory=dict)

    TRAINABLE = ("W", "b", "gamma", "beta")

    def trainable(self):
        """Yield (layer index, name, array) for every trainable tensor."""
        for i, layer in enumerate(self.layers):
            for name in self.TRAINABLE:
                if name in layer:
                    yield i, name, layer[name]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, [{k: v.copy() for k, v in layer.items()} for layer in self.layers],
                             self.patch, dict(self.meta))

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.spec, [{k: v.astype(dtype) for k, v in layer.items()} for layer in self.layers],
                             self.patch, dict(self.meta))

    @property
    def dtype(self):
        return self.layers[0]["W"].dtype


def init_params(spec: NetworkSpec, rng: np.random.Generator, patch: PatchSpec | None = None,
                dtype=np.float32) -> NetworkParams:
    layers = []
    for ls in spec.layers:
        k = ls.kernel_width
        fan_in = k ** 3 * ls.in_channels
        layer = {
            "W": (rng.standard_normal((k, k, k, ls.in_channels, ls.out_channels)) * np.sqrt(2.0 / fan_in)).astype(dtype),
            "b": np.zeros(ls.out_channels, dtype),
        }
        if ls.batch_norm:
            layer.update(gamma=np.ones(ls.out_channels, dtype), beta=np.zeros(ls.out_channels, dtype),
                         mean=np.zeros(ls.out_channels, dtype), var=np.ones(ls.out_channels, dtype))
        layers.append(layer)
    return NetworkParams(spec, layers, patch or PatchSpec(width=spec.field_width))


# --------------------------------------------------------------------------
# convolution


def _windows(x: np.ndarray, k: int, dilation: int, out_shape) -> np.ndarray:
    """Read-only view of shape (n, sx, sy, sz, k, k, k, c) over every kernel window."""
    s = x.strides
    return as_strided(x, (x.shape[0], *out_shape, k, k, k, x.shape[-1]),
                      (s[0], s[1], s[2], s[3], s[1] * dilation, s[2] * dilation, s[3] * dilation, s[4]),
                      writeable=False)


def conv3d_dilated(x: np.ndarray, w: np.ndarray, dilation: int = 1, bias: np.ndarray | None = None) -> np.ndarray:
    """Valid cross-correlation of a channels-last batch with a (k, k, k, cin, cout) kernel."""
    x = np.ascontiguousarray(x)
    k = w.shape[0]
    span = dilation * (k - 1)
    if x.ndim != 5 or x.shape[-1] != w.shape[3]:
        raise ShapeMismatchError(f"input shape {x.shape} does not match kernel {w.shape}")
    out_shape = [s - span for s in x.shape[1:4]]
    if min(out_shape) < 1:
        raise ShapeMismatchError(f"input extent {x.shape[1:4]} smaller than kernel span {span + 1}")
    sx, sy, sz = out_shape
    cin, cout = w.shape[3], w.shape[4]
    dtype = np.result_type(x, w)
    if k == 1:
        out = x @ w[0, 0, 0]
    elif cin * k ** 3 <= _IM2COL_MAX_K:
        # few input channels: one GEMM over unrolled windows beats per-tap products
        cols = _windows(x, k, dilation, out_shape).reshape(-1, k ** 3 * cin)
        out = (cols @ w.reshape(-1, cout)).reshape(x.shape[0], sx, sy, sz, cout)
    else:
        out = np.zeros((x.shape[0], sx, sy, sz, cout), dtype=dtype)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    oa, ob, oc = a * dilation, b * dilation, c * dilation
                    out += x[:, oa:oa + sx, ob:ob + sy, oc:oc + sz, :] @ w[a, b, c]
    if bias is not None:
        out += bias
    return out


_IM2COL_MAX_K = 64


def conv3d_backward(x: np.ndarray, w: np.ndarray, dilation: int, dout: np.ndarray, need_dx: bool = True):
    """Gradients of :func:`conv3d_dilated` with respect to input, kernel and bias."""
    x = np.ascontiguousarray(x)
    dout = np.ascontiguousarray(dout)
    k = w.shape[0]
    out_shape = dout.shape[1:4]
    sx, sy, sz = out_shape
    cin, cout = w.shape[3], w.shape[4]
    flat_dout = dout.reshape(-1, cout)
    db = flat_dout.sum(axis=0)
    if k == 1:
        dw = (x.reshape(-1, cin).T @ flat_dout).reshape(w.shape)
        dx = (dout @ w[0, 0, 0].T) if need_dx else None
        return dx, dw, db
    if cin * k ** 3 <= _IM2COL_MAX_K:
        cols = _windows(x, k, dilation, out_shape).reshape(-1, k ** 3 * cin)
        dw = (cols.T @ flat_dout).reshape(w.shape)
    else:
        dw = np.empty_like(w)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    oa, ob, oc = a * dilation, b * dilation, c * dilation
                    xs = np.ascontiguousarray(x[:, oa:oa + sx, ob:ob + sy, oc:oc + sz, :])
                    dw[a, b, c] = xs.reshape(-1, cin).T @ flat_dout
    dx = None
    if need_dx:
        # transposed convolution = valid correlation of the zero-padded
        # output gradient with the flipped, channel-swapped kernel
        span = dilation * (k - 1)
        padded = np.pad(dout, ((0, 0), (span, span), (span, span), (span, span), (0, 0)))
        flipped = np.ascontiguousarray(w[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
        dx = conv3d_dilated(padded, flipped, dilation)
    return dx, dw.astype(w.dtype, copy=False), db


# --------------------------------------------------------------------------
# forward / backward


def _as_batch(x: np.ndarray, spec: NetworkSpec) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim == 4:
        x = x[..., None]
    if x.ndim != 5 or x.shape[-1] != spec.in_channels:
        raise ShapeMismatchError(f"expected input with {spec.in_channels} channel(s), got shape {x.shape}")
    return x


def forward(params: NetworkParams, x: np.ndarray, train: bool = False):
    """Run the network; returns ``(output, cache)``.

    ``x`` may be (x, y, z), (n, x, y, z) or (n, x, y, z, c). In training mode
    batch statistics are used and running statistics updated in place; the
    cache then holds what :func:`backward` needs. In inference mode the cache
    is ``None``.
    """
    spec = params.spec
    h = _as_batch(x, spec).astype(params.dtype, copy=False)
    cache = [] if train else None
    for ls, layer in zip(spec.layers, params.layers):
        inp = h
        z = conv3d_dilated(h, layer["W"], ls.dilation, layer["b"])
        entry = {"x": inp}
        if ls.batch_norm:
            if train:
                axes = (0, 1, 2, 3)
                mu = z.mean(axis=axes)
                var = z.var(axis=axes)
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (z - mu) * inv_std
                m = z.size // z.shape[-1]
                unbiased = var * m / max(m - 1, 1)
                layer["mean"] *= BN_MOMENTUM
                layer["mean"] += (1 - BN_MOMENTUM) * mu.astype(layer["mean"].dtype)
                layer["var"] *= BN_MOMENTUM
                layer["var"] += (1 - BN_MOMENTUM) * unbiased.astype(layer["var"].dtype)
                entry.update(xhat=xhat, inv_std=inv_std)
            else:
                xhat = (z - layer["mean"]) / np.sqrt(layer["var"] + BN_EPS)
            z = xhat * layer["gamma"] + layer["beta"]
        if ls.activation == "relu":
            z = np.maximum(z, 0)
            if train:
                entry["mask"] = z > 0
        h = z
        if train:
            cache.append(entry)
    return h, cache


def backward(params: NetworkParams, cache: list, dout: np.ndarray) -> list[dict]:
    """Backpropagate ``dout`` (gradient of the loss w.r.t. the network output)."""
    grads: list[dict] = [None] * len(params.layers)
    g = dout
    for i in reversed(range(len(params.layers))):
        ls, layer, entry = params.spec.layers[i], params.layers[i], cache[i]
        if ls.activation == "relu":
            g = g * entry["mask"]
        grad = {}
        if ls.batch_norm:
            xhat, inv_std = entry["xhat"], entry["inv_std"]
            axes = (0, 1, 2, 3)
            grad["gamma"] = (g * xhat).sum(axis=axes)
            grad["beta"] = g.sum(axis=axes)
            dxhat = g * layer["gamma"]
            m = g.size // g.shape[-1]
            g = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        dx, grad["W"], grad["b"] = conv3d_backward(entry["x"], layer["W"], ls.dilation, g, need_dx=i > 0)
        grads[i] = grad
        g = dx
    return grads


def infer(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    return forward(params, x, train=False)[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class TrackerOutput:
    logits: np.ndarray
    radius: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits.astype(np.float64))


def split_tracker_output(params: NetworkParams, out: np.ndarray) -> TrackerOutput:
    nd = params.spec.num_directions
    return TrackerOutput(out[..., :nd], out[..., nd])


def proximity_values(params: NetworkParams, out: np.ndarray) -> np.ndarray:
    return out[..., 0].astype(np.float64) * params.spec.output_scale


# --------------------------------------------------------------------------
# losses


def weight_decay(params: NetworkParams) -> float:
    return float(sum(np.sum(layer["W"].astype(np.float64) ** 2) for layer in params.layers))


def tracker_loss(params: NetworkParams, out: np.ndarray, ref_probs, ref_radius, lam_r: float = 10.0,
                 lam_w: float = 0.001, radius_weight=None):
    """Batch mean of cross-entropy + lam_r * squared radius error, plus lam_w * ||W||^2.

    ``out`` is the (n, 1, 1, 1, |D|+1) network output. ``radius_weight``
    optionally masks the radius term per sample. Returns
    ``(loss, dout, parts)`` where ``dout`` is the gradient w.r.t. ``out``.
    """
    nd = params.spec.num_directions
    flat = out.reshape(out.shape[0], -1)
    if flat.shape[1] != nd + 1:
        raise ShapeMismatchError("tracker loss expects a single output voxel per sample")
    n = flat.shape[0]
    ref_probs = np.asarray(ref_probs, dtype=np.float64).reshape(n, nd)
    ref_radius = np.asarray(ref_radius, dtype=np.float64).reshape(n)
    rw = np.ones(n) if radius_weight is None else np.asarray(radius_weight, dtype=np.float64).reshape(n)
    logits = flat[:, :nd].astype(np.float64)
    radius = flat[:, nd].astype(np.float64)
    logp = log_softmax(logits)
    ce = float(-(ref_probs * logp).sum() / n)
    diff = radius - ref_radius
    reg = float((rw * diff ** 2).sum() / n)
    wd = weight_decay(params)
    loss = ce + lam_r * reg + lam_w * wd
    dflat = np.empty((n, nd + 1))
    dflat[:, :nd] = (np.exp(logp) * ref_probs.sum(axis=1, keepdims=True) - ref_probs) / n
    dflat[:, nd] = 2.0 * lam_r * rw * diff / n
    return loss, dflat.reshape(out.shape).astype(out.dtype), {"ce": ce, "radius": reg, "decay": wd}


def proximity_loss(params: NetworkParams, out: np.ndarray, target, lam_r: float = 10.0, lam_w: float = 0.001):
    """lam_r * mean squared error on scaled proximity values, plus weight decay."""
    scale = params.spec.output_scale
    pred = out[..., 0].astype(np.float64)
    t = np.asarray(target, dtype=np.float64).reshape(pred.shape) / scale
    diff = pred - t
    mse = float(np.mean(diff ** 2))
    wd = weight_decay(params)
    dout = np.zeros(out.shape)
    dout[..., 0] = 2.0 * lam_r * diff / diff.size
    return lam_r * mse + lam_w * wd, dout.astype(out.dtype), {"mse": mse, "decay": wd}


def add_weight_decay_grad(params: NetworkParams, grads: list[dict], lam_w: float) -> None:
    for layer, grad in zip(params.layers, grads):
        grad["W"] = grad["W"] + (2.0 * lam_w) * layer["W"]


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: NetworkParams, grads: list[dict], state: AdamState, lr: float) -> None:
    """In-place Adam update of every trainable tensor."""
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    for i, name, p in params.trainable():
        g = grads[i][name]
        key = (i, name)
        m = state.m.setdefault(key, np.zeros_like(p))
        v = state.v.setdefault(key, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# --------------------------------------------------------------------------
# persistence

WEIGHTS_MAGIC = "VTW1"
WEIGHTS_VERSION = 1
LAYER_ORDER = "conv-bn-relu"


def _tensor_names(ls: LayerSpec):
    return ("W", "b", "gamma", "beta", "mean", "var") if ls.batch_norm else ("W", "b")


def save_weights(params: NetworkParams, path) -> None:
    spec = params.spec
    lines = [
        WEIGHTS_MAGIC,
        f"version {WEIGHTS_VERSION}",
        f"head {spec.head}",
        f"ndirs {spec.num_directions}",
        f"patch {params.patch.width} {float(params.patch.voxel_mm)!r} {float(params.patch.pad_value)!r}",
        f"output_scale {float(spec.output_scale)!r}",
        f"order {LAYER_ORDER}",
        f"layers {len(spec.layers)}",
    ]
    for ls in spec.layers:
        lines.append(f"layer {ls.kernel_width} {ls.dilation} {ls.in_channels} {ls.out_channels} "
                     f"{int(ls.batch_norm)} {ls.activation}")
    for key in sorted(params.meta):
        lines.append(f"meta {key} {params.meta[key]}")
    chunks = []
    for ls, layer in zip(spec.layers, params.layers):
        for name in _tensor_names(ls):
            chunks.append(np.ascontiguousarray(layer[name], dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("ascii"))
        for chunk in chunks:
            fh.write(chunk)


def load_weights(path, expect_ndirs: int | None = None, expect_head: str | None = None) -> NetworkParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(WEIGHTS_MAGIC.encode() + b"\n"):
        raise HeaderError(f"{path}: not a {WEIGHTS_MAGIC} weights file")
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise HeaderError("weights header terminator not found")
    lines = blob[:sep].decode("ascii", errors="replace").split("\n")[1:]
    fields: dict[str, list[str]] = {}
    layer_rows, meta = [], {}
    for line in lines:
        key, _, rest = line.partition(" ")
        if key == "layer":
            layer_rows.append(rest.split())
        elif key == "meta":
            mk, _, mv = rest.partition(" ")
            meta[mk] = mv
        else:
            fields[key] = rest.split()
    try:
        version = int(fields["version"][0])
        if version != WEIGHTS_VERSION:
            raise VersionError(f"weights version {version} unsupported (expected {WEIGHTS_VERSION})")
        if fields["order"][0] != LAYER_ORDER:
            raise HeaderError(f"unsupported layer order {fields['order'][0]!r}")
        head = fields["head"][0]
        ndirs = int(fields["ndirs"][0])
        w, v, pad = fields["patch"]
        patch = PatchSpec(int(w), float(v), float(pad))
        scale = float(fields["output_scale"][0])
        nlayers = int(fields["layers"][0])
        layers = tuple(LayerSpec(int(r[0]), int(r[1]), int(r[2]), int(r[3]), bool(int(r[4])), r[5])
                       for r in layer_rows)
    except (KeyError, IndexError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise HeaderError(f"invalid weights header: {exc}") from exc
        raise HeaderError(f"malformed weights header: {exc!r}") from exc
    if len(layers) != nlayers:
        raise HeaderError(f"header declares {nlayers} layers but lists {len(layers)}")
    if expect_head is not None and head != expect_head:
        raise ShapeMismatchError(f"weights have head {head!r}, expected {expect_head!r}")
    if expect_ndirs is not None and ndirs != expect_ndirs:
        raise ShapeMismatchError(f"weights were trained for |D|={ndirs}, codebook has {expect_ndirs}")
    spec = NetworkSpec(layers, head=head, num_directions=ndirs, output_scale=scale)
    payload = np.frombuffer(blob, dtype="<f4", offset=sep + 2) if (len(blob) - sep - 2) % 4 == 0 else None
    shapes = []
    for ls in layers:
        k = ls.kernel_width
        for name in _tensor_names(ls):
            shapes.append((name, (k, k, k, ls.in_channels, ls.out_channels) if name == "W" else (ls.out_channels,)))
    total = sum(int(np.prod(s)) for _, s in shapes)
    nbytes = len(blob) - sep - 2
    if nbytes < total * 4:
        raise TruncatedPayloadError(f"weights payload has {nbytes} bytes, expected {total * 4}")
    if nbytes != total * 4 or payload is None:
        raise LengthMismatchError(f"weights payload has {nbytes} bytes, expected {total * 4}")
    out_layers, pos, it = [], 0, iter(shapes)
    for ls in layers:
        layer = {}
        for _ in _tensor_names(ls):
            name, shape = next(it)
            size = int(np.prod(shape))
            layer[name] = payload[pos:pos + size].reshape(shape).astype(np.float32)
            pos += size
        out_layers.append(layer)
    return NetworkParams(spec, out_layers, patch, meta)


def with_spec(params: NetworkParams, **changes) -> NetworkParams:
    return NetworkParams(replace(params.spec, **changes), params.layers, params.patch, params.meta)
