"""Model construction and execution on the autodiff tape.

A model is built from a list of layer spec dicts (see the spec constructor
helpers ``conv``/``dense``/...), validated shape-by-shape, and initialized
deterministically from a seed.  Includes the two surgery operations the
experiments rely on: ``substitute_pvlu`` (swap every ReLU for a fresh
channel-wise PVLU) and ``set_trainable`` (freeze policies), plus a binary
checkpoint format.
"""

from __future__ import annotations

import json
import struct
import warnings

import numpy as np

from . import activations
from .autodiff import Graph, Parameter
from .errors import BuildError, ContractError, FormatError, NumericError, ShapeError

CHECKPOINT_MAGIC = b"PVLU"
CHECKPOINT_VERSION = 1

# Freeze-policy categories -> Parameter.kind tags.
PARAM_CATEGORIES = {
    "pvlu-params": ("pvlu_alpha", "pvlu_beta"),
    "batchnorm": ("bn_gamma", "bn_beta"),
    "conv": ("conv_w", "conv_b"),
    "dense": ("dense_w", "dense_b"),
    "prelu": ("prelu_slope",),
}


# ---------------------------------------------------------------------------
# Layer spec constructors.  Specs are plain dicts so the checkpoint header
# can store them as JSON unchanged.

def conv(filters, k, stride=1, pad="same", trainable=True):
    return {"kind": "conv", "filters": int(filters), "k": int(k),
            "stride": int(stride), "pad": pad, "trainable": bool(trainable)}


def dense(units, trainable=True):
    return {"kind": "dense", "units": int(units), "trainable": bool(trainable)}


def maxpool(window, stride=None):
    return {"kind": "maxpool", "window": int(window),
            "stride": int(window if stride is None else stride)}


def dropout(rate):
    return {"kind": "dropout", "rate": float(rate)}


def batchnorm(trainable=True):
    return {"kind": "batchnorm", "trainable": bool(trainable)}


def activation(kind, **kwargs):
    return {"kind": "activation", "act": {"kind": kind, **kwargs}}


def residual(inner, projection="auto"):
    return {"kind": "residual", "inner": list(inner), "projection": projection}


def flatten():
    return {"kind": "flatten"}


def softmax_classifier():
    return {"kind": "softmax_classifier"}


# ---------------------------------------------------------------------------
# Layer implementations.  Each knows its output shape, its Parameters in a
# fixed order, and how to record itself on a Graph.

class Layer:
    kind = "?"

    def __init__(self):
        self.name = self.kind
        self.shape_in = None
        self.shape_out = None

    def params(self) -> list[Parameter]:
        return []

    def buffers(self) -> list[np.ndarray]:
        """Non-trainable state that still belongs in a checkpoint."""
        return []

    def set_buffers(self, arrays):
        pass

    def forward(self, graph: Graph, node, mode, rng):
        raise NotImplementedError

    def table_entry(self) -> dict:
        """Spec dict that reconstructs this layer's structure."""
        raise NotImplementedError


def _he_normal(rng, shape, fan_in, dtype):
    # draw in float64 then cast: identical values whatever the model dtype
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    std = np.sqrt(2.0 / fan_in)
    return (rng.normal(0.0, std, size=shape)).astype(dtype)


class ConvLayer(Layer):
    kind = "conv"

    def __init__(self, spec, shape_in, rng, dtype):
        super().__init__()
        if len(shape_in) != 3:
            raise BuildError(f"conv needs [C,H,W] input, got {shape_in}")
        c, h, w = shape_in
        f, k, self.stride, self.pad = spec["filters"], spec["k"], spec["stride"], spec["pad"]
        if self.pad not in ("same", "valid"):
            raise BuildError(f"conv pad must be 'same' or 'valid', got {self.pad!r}")
        if self.pad == "valid" and (k > h or k > w):
            raise BuildError(f"conv kernel {k} exceeds input {h}x{w}")
        self.w = Parameter(_he_normal(rng, (f, c, k, k), c * k * k, dtype),
                           name="conv_w", kind="conv_w", trainable=spec.get("trainable", True))
        self.b = Parameter(np.zeros(f, dtype=dtype),
                           name="conv_b", kind="conv_b", trainable=spec.get("trainable", True))
        if self.pad == "same":
            oh = (h - 1) // self.stride + 1
            ow = (w - 1) // self.stride + 1
        else:
            oh = (h - k) // self.stride + 1
            ow = (w - k) // self.stride + 1
        self.shape_in, self.shape_out = shape_in, (f, oh, ow)

    def params(self):
        return [self.w, self.b]

    def forward(self, graph, node, mode, rng):
        out = graph.conv2d(node, graph.leaf(self.w), stride=self.stride, padding=self.pad)
        return graph.bias_add(out, graph.leaf(self.b))

    def table_entry(self):
        return {"kind": "conv", "filters": self.w.value.shape[0], "k": self.w.value.shape[2],
                "stride": self.stride, "pad": self.pad, "trainable": self.w.trainable}


class DenseLayer(Layer):
    kind = "dense"

    def __init__(self, spec, shape_in, rng, dtype):
        super().__init__()
        if len(shape_in) != 1:
            raise BuildError(f"dense needs flattened input, got {shape_in}")
        fan_in, units = shape_in[0], spec["units"]
        self.w = Parameter(_he_normal(rng, (fan_in, units), fan_in, dtype),
                           name="dense_w", kind="dense_w", trainable=spec.get("trainable", True))
        self.b = Parameter(np.zeros(units, dtype=dtype),
                           name="dense_b", kind="dense_b", trainable=spec.get("trainable", True))
        self.shape_in, self.shape_out = shape_in, (units,)

    def params(self):
        return [self.w, self.b]

    def forward(self, graph, node, mode, rng):
        out = graph.matmul(node, graph.leaf(self.w))
        return graph.bias_add(out, graph.leaf(self.b))

    def table_entry(self):
        return {"kind": "dense", "units": self.w.value.shape[1], "trainable": self.w.trainable}


class MaxPoolLayer(Layer):
    kind = "maxpool"

    def __init__(self, spec, shape_in):
        super().__init__()
        if len(shape_in) != 3:
            raise BuildError(f"maxpool needs [C,H,W] input, got {shape_in}")
        c, h, w = shape_in
        self.window, self.stride = spec["window"], spec["stride"]
        if self.window > h or self.window > w:
            raise BuildError(f"maxpool window {self.window} exceeds input {h}x{w}")
        oh = (h - self.window) // self.stride + 1
        ow = (w - self.window) // self.stride + 1
        self.shape_in, self.shape_out = shape_in, (c, oh, ow)

    def forward(self, graph, node, mode, rng):
        return graph.maxpool2d(node, self.window, self.stride)

    def table_entry(self):
        return {"kind": "maxpool", "window": self.window, "stride": self.stride}


class DropoutLayer(Layer):
    kind = "dropout"

    def __init__(self, spec, shape_in):
        super().__init__()
        rate = spec["rate"]
        if not 0.0 <= rate < 1.0:
            raise BuildError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self.shape_in = self.shape_out = shape_in

    def forward(self, graph, node, mode, rng):
        if mode == "eval" or self.rate == 0.0:
            return node
        if rng is None:
            raise ContractError("train-mode forward through dropout needs an rng")
        return graph.dropout(node, self.rate, rng)

    def table_entry(self):
        return {"kind": "dropout", "rate": self.rate}


class BatchNormLayer(Layer):
    """Per-channel normalization; running stats momentum 0.9, eps 1e-5.

    Batch statistics use biased variance and 64-bit accumulation; running
    buffers are kept in float64 and updated only by train-mode forwards.
    """

    kind = "batchnorm"
    momentum = 0.9
    eps = 1e-5

    def __init__(self, spec, shape_in, dtype):
        super().__init__()
        if len(shape_in) not in (1, 3):
            raise BuildError(f"batchnorm needs [C,H,W] or flat input, got {shape_in}")
        c = shape_in[0]
        self.gamma = Parameter(np.ones(c, dtype=dtype), name="bn_gamma", kind="bn_gamma",
                               trainable=spec.get("trainable", True))
        self.beta = Parameter(np.zeros(c, dtype=dtype), name="bn_beta", kind="bn_beta",
                              trainable=spec.get("trainable", True))
        self.running_mean = np.zeros(c, dtype=np.float64)
        self.running_var = np.ones(c, dtype=np.float64)
        self.shape_in = self.shape_out = shape_in

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def set_buffers(self, arrays):
        self.running_mean, self.running_var = (np.asarray(a, dtype=np.float64) for a in arrays)

    def forward(self, graph, node, mode, rng):
        x = node.value
        dtype = x.dtype
        axes = (0,) + tuple(range(2, x.ndim))
        m = x.size // x.shape[1]

        def cview(v):
            return v.reshape((1, x.shape[1]) + (1,) * (x.ndim - 2))

        if mode == "train":
            mean64 = x.mean(axis=axes, dtype=np.float64)
            var64 = np.square(x.astype(np.float64) - cview(mean64)).mean(axis=axes)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean64
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var64
        else:
            mean64, var64 = self.running_mean, self.running_var
        inv = cview((1.0 / np.sqrt(var64 + self.eps)).astype(dtype))
        xhat = (x - cview(mean64.astype(dtype))) * inv
        gv, bv = self.gamma.value, self.beta.value
        y = xhat * cview(gv) + cview(bv)
        gnode, bnode = graph.leaf(self.gamma), graph.leaf(self.beta)

        def vjp(up):
            dgamma = (up * xhat).sum(axis=axes, dtype=np.float64).astype(gv.dtype)
            dbeta = up.sum(axis=axes, dtype=np.float64).astype(bv.dtype)
            ginv = cview(gv) * inv
            if mode == "train":
                up_mean = cview((up.sum(axis=axes, dtype=np.float64) / m).astype(dtype))
                ux_mean = cview(((up * xhat).sum(axis=axes, dtype=np.float64) / m).astype(dtype))
                dx = ginv * (up - up_mean - xhat * ux_mean)
            else:
                dx = ginv * up
            return dx, dgamma, dbeta

        return graph.record("batchnorm", (node, gnode, bnode), y, vjp)

    def table_entry(self):
        return {"kind": "batchnorm", "trainable": self.gamma.trainable}


class ActLayer(Layer):
    kind = "activation"

    def __init__(self, spec, shape_in, dtype):
        super().__init__()
        act_spec = dict(spec["act"])
        kind = act_spec.pop("kind")
        if kind in ("prelu", "pvlu"):
            act_spec.setdefault("channels", shape_in[0])
        self.act = activations.make(kind, dtype=dtype, **act_spec)
        self.shape_in = self.shape_out = shape_in
        self.last_z = None

    def params(self):
        return self.act.params()

    def forward(self, graph, node, mode, rng):
        self.last_z = node.value  # kept for the dying-unit probe
        return self.act.apply(graph, node)

    def table_entry(self):
        return {"kind": "activation", "act": self.act.clone_spec()}


class FlattenLayer(Layer):
    kind = "flatten"

    def __init__(self, shape_in):
        super().__init__()
        self.shape_in = shape_in
        self.shape_out = (int(np.prod(shape_in)),)

    def forward(self, graph, node, mode, rng):
        return graph.flatten(node)

    def table_entry(self):
        return {"kind": "flatten"}


class SoftmaxLayer(Layer):
    """Final classifier head: marks its input as the pre-softmax logits (the
    loss consumes those through the fused cross-entropy op) and emits class
    probabilities."""

    kind = "softmax_classifier"

    def __init__(self, shape_in):
        super().__init__()
        if len(shape_in) != 1:
            raise BuildError(f"softmax classifier needs flat input, got {shape_in}")
        self.shape_in = self.shape_out = shape_in

    def forward(self, graph, node, mode, rng):
        graph.presoftmax = node
        return graph.softmax(node)

    def table_entry(self):
        return {"kind": "softmax_classifier"}


class ResidualLayer(Layer):
    """Skip connection around an inner layer chain; a 1x1 projection conv is
    inserted automatically when the inner chain changes the shape."""

    kind = "residual"

    def __init__(self, spec, shape_in, rng, dtype, path):
        super().__init__()
        if len(shape_in) != 3:
            raise BuildError(f"residual block needs [C,H,W] input, got {shape_in}")
        self.inner = _instantiate(spec["inner"], shape_in, rng, dtype, path=path + "/")
        inner_out = self.inner[-1].shape_out if self.inner else shape_in
        if len(inner_out) != 3:
            raise BuildError(f"residual inner chain must keep [C,H,W] shape, got {inner_out}")
        want_proj = spec.get("projection", "auto")
        if want_proj == "auto":
            want_proj = inner_out != shape_in
        self.projection = None
        if want_proj:
            c1, h1, w1 = shape_in
            c2, h2, w2 = inner_out
            sh = max(1, (h1 - 1) // max(h2 - 1, 1)) if h2 > 1 else h1
            if (h1 - 1) // sh + 1 != h2 or (w1 - 1) // sh + 1 != w2:
                raise BuildError(
                    f"residual projection cannot map {shape_in} onto {inner_out}")
            self.projection = ConvLayer(conv(c2, 1, stride=sh, pad="same"), shape_in, rng, dtype)
        elif inner_out != shape_in:
            raise BuildError(
                f"residual block shape mismatch {shape_in} -> {inner_out} without projection")
        self.shape_in, self.shape_out = shape_in, inner_out

    def params(self):
        out = []
        for lay in self.inner:
            out.extend(lay.params())
        if self.projection is not None:
            out.extend(self.projection.params())
        return out

    def buffers(self):
        out = []
        for lay in self.inner:
            out.extend(lay.buffers())
        return out

    def set_buffers(self, arrays):
        arrays = list(arrays)
        for lay in self.inner:
            need = len(lay.buffers())
            lay.set_buffers(arrays[:need])
            arrays = arrays[need:]

    def forward(self, graph, node, mode, rng):
        h = node
        for lay in self.inner:
            h = lay.forward(graph, h, mode, rng)
        skip = node
        if self.projection is not None:
            skip = self.projection.forward(graph, node, mode, rng)
        return graph.add(h, skip)

    def table_entry(self):
        return {"kind": "residual",
                "inner": [lay.table_entry() for lay in self.inner],
                "projection": self.projection is not None}


def _instantiate(specs, shape_in, rng, dtype, path=""):
    layers = []
    shape = tuple(shape_in)
    counts = {}
    for i, spec in enumerate(specs):
        kind = spec.get("kind")
        try:
            if kind == "conv":
                lay = ConvLayer(spec, shape, rng, dtype)
            elif kind == "dense":
                lay = DenseLayer(spec, shape, rng, dtype)
            elif kind == "maxpool":
                lay = MaxPoolLayer(spec, shape)
            elif kind == "dropout":
                lay = DropoutLayer(spec, shape)
            elif kind == "batchnorm":
                lay = BatchNormLayer(spec, shape, dtype)
            elif kind == "activation":
                lay = ActLayer(spec, shape, dtype)
            elif kind == "flatten":
                lay = FlattenLayer(shape)
            elif kind == "softmax_classifier":
                lay = SoftmaxLayer(shape)
            elif kind == "residual":
                lay = ResidualLayer(spec, shape, rng, dtype, path=f"{path}{i}")
            else:
                raise BuildError(f"unknown layer kind {kind!r}")
        except BuildError as e:
            raise BuildError(f"layer {path}{i} ({kind}): {e}") from None
        n = counts.get(lay.kind, 0) + 1
        counts[lay.kind] = n
        lay.name = f"{path}{i}:{lay.kind}{n}"
        layers.append(lay)
        shape = lay.shape_out
    return layers


class Model:
    """An ordered layer pipeline plus its Parameter registry."""

    def __init__(self, layers, input_shape, dtype):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.last_nodes = None

    @property
    def output_shape(self):
        return self.layers[-1].shape_out if self.layers else self.input_shape

    def params(self) -> list[Parameter]:
        out = []
        for lay in self.layers:
            out.extend(lay.params())
        return out

    def buffers(self) -> list[np.ndarray]:
        out = []
        for lay in self.layers:
            out.extend(lay.buffers())
        return out

    def set_buffers(self, arrays):
        arrays = list(arrays)
        if len(arrays) != len(self.buffers()):
            raise ContractError(
                f"expected {len(self.buffers())} buffers, got {len(arrays)}")
        for lay in self.layers:
            need = len(lay.buffers())
            lay.set_buffers(arrays[:need])
            arrays = arrays[need:]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, x, mode="eval", rng=None):
        """Run a batch through the pipeline, recording the tape.

        Returns (output node, graph); ``graph.presoftmax`` holds the logits
        node when the model ends in a softmax classifier.
        """
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"batch shape {x.shape} does not match input shape [N,{self.input_shape}]")
        graph = Graph()
        node = graph.constant(x.astype(self.dtype, copy=False))
        trace = []
        for lay in self.layers:
            try:
                node = lay.forward(graph, node, mode, rng)
            except NumericError as e:
                raise NumericError(f"layer {lay.name}: {e}") from None
            trace.append((lay.name, node))
        self.last_nodes = trace
        if graph.presoftmax is None:
            graph.presoftmax = node
        final = graph.presoftmax.value
        if not np.all(np.isfinite(final)):
            for name, n in trace:
                if not np.all(np.isfinite(n.value)):
                    raise NumericError(f"non-finite values first appear in layer {name}")
            raise NumericError("non-finite values in model output")
        graph.output = node
        return node, graph

    def table(self):
        return [lay.table_entry() for lay in self.layers]


def build(specs, input_shape, seed, dtype=np.float32) -> Model:
    """Instantiate a spec chain with seeded He-style initialization."""
    rng = np.random.default_rng(seed)
    layers = _instantiate(specs, input_shape, rng, np.dtype(dtype))
    return Model(layers, input_shape, dtype)


def _walk_act_layers(layers):
    for lay in layers:
        if isinstance(lay, ActLayer):
            yield lay
        elif isinstance(lay, ResidualLayer):
            yield from _walk_act_layers(lay.inner)
            if lay.projection is not None:
                yield from _walk_act_layers([lay.projection])


def substitute_pvlu(model: Model, init="finetune") -> Model:
    """Replace every ReLU activation with a fresh channel-wise PVLU, in place.

    All other Parameters keep their identities and values; with the finetune
    protocol (alpha=0) the swapped model's forward is exactly the old one's.
    """
    swapped = 0
    for lay in _walk_act_layers(model.layers):
        if lay.act.name == "relu":
            channels = lay.shape_in[0]
            lay.act = activations.make_pvlu_params(channels, init=init, dtype=model.dtype)
            swapped += 1
    if swapped == 0:
        warnings.warn("substitute_pvlu: model contains no ReLU activations; nothing replaced")
    return model


def set_trainable(model: Model, policy) -> Model:
    """Set Parameter trainability: "all", a collection of category names
    (see PARAM_CATEGORIES), or a predicate over Parameters."""
    params = model.params()
    if policy == "all":
        selector = lambda p: True
    elif callable(policy):
        selector = policy
    else:
        if isinstance(policy, str):
            policy = (policy,)
        kinds = set()
        for cat in policy:
            if cat not in PARAM_CATEGORIES:
                raise ContractError(
                    f"unknown parameter category {cat!r}; options: {sorted(PARAM_CATEGORIES)}")
            kinds.update(PARAM_CATEGORIES[cat])
        selector = lambda p: p.kind in kinds
    flags = [bool(selector(p)) for p in params]
    if not any(flags):
        raise ContractError("trainability policy matched zero Parameters")
    for p, f in zip(params, flags):
        p.trainable = f
    return model


# ---------------------------------------------------------------------------
# Checkpoint format (little endian):
#   magic "PVLU" | u32 version | u32 header length | JSON header
#   | one float32 blob per Parameter in registry order
#   | one float32 blob per buffer in registry order
# The JSON header stores dtype, input shape, the layer table, and per-
# parameter trainability flags.

def save_checkpoint(model: Model, path):
    header = {
        "dtype": model.dtype.name,
        "input_shape": list(model.input_shape),
        "layers": model.table(),
        "trainable": [int(p.trainable) for p in model.params()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in model.params():
            f.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
        for b in model.buffers():
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"checkpoint truncated at byte {f.tell()}: expected {n} bytes of {what}")
    return data


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} at byte 0")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        except ValueError as e:
            raise FormatError(f"unparseable checkpoint header: {e}") from None
        dtype = np.dtype(header["dtype"])
        layers = _instantiate(header["layers"], header["input_shape"], None, dtype)
        model = Model(layers, header["input_shape"], dtype)
        params = model.params()
        if len(header["trainable"]) != len(params):
            raise FormatError(
                f"trainable flag count {len(header['trainable'])} != parameter count {len(params)}")
        for p, flag in zip(params, header["trainable"]):
            raw = _read_exact(f, 4 * p.value.size, f"parameter {p.name}")
            p.value = np.frombuffer(raw, dtype="<f4").reshape(p.value.shape).astype(dtype)
            p.grad = np.zeros_like(p.value)
            p.trainable = bool(flag)
        for lay in model.layers:
            bufs = lay.buffers()
            if not bufs:
                continue
            loaded = []
            for b in bufs:
                raw = _read_exact(f, 4 * b.size, f"buffer of {lay.name}")
                loaded.append(np.frombuffer(raw, dtype="<f4").reshape(b.shape))
            lay.set_buffers(loaded)
        extra = f.read(1)
        if extra:
            raise FormatError(f"trailing bytes after checkpoint payload at byte {f.tell() - 1}")
    return model
