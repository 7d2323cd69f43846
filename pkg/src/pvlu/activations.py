"""The activation family: ReLU and its variants, including VLU/PVLU.

VLU(x) = ReLU(x) + alpha*sin(beta*x) with fixed hyperparameters; PVLU makes
alpha and beta channel-wise trainable parameters.  Derivatives use the step
convention H(0) = 0, so ReLU'(0) = 0 (the x <= 0 branch applies at the
kink for every piecewise kind).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, Node, Parameter
from .errors import ConfigError, ContractError, ShapeError


def heaviside(z):
    """Step function with H(0) = 0."""
    return (z > 0).astype(np.asarray(z).dtype)


def _channel_view(p, z):
    """Reshape a [C] parameter vector for broadcasting over [N,C,...]."""
    return p.reshape((1, p.shape[0]) + (1,) * (z.ndim - 2))


def _channel_sum(x, dtype):
    """Sum over batch and spatial axes, keeping the channel axis; 64-bit
    accumulation regardless of storage dtype."""
    axes = (0,) + tuple(range(2, x.ndim))
    return x.sum(axis=axes, dtype=np.float64).astype(dtype)


class Activation:
    """Base: elementwise forward, local derivative, parameter gradients."""

    name = "?"
    param_names: tuple[str, ...] = ()

    def params(self) -> list[Parameter]:
        return []

    def forward(self, z):
        raise NotImplementedError

    def derivative(self, z):
        """d out / d z, elementwise (used by backward and the dying-unit probe)."""
        raise NotImplementedError

    def backward(self, z, upstream):
        """Return (dz, {param name: gradient}) for upstream of z's shape."""
        if upstream.shape != z.shape:
            raise ShapeError(f"upstream shape {upstream.shape} != input shape {z.shape}")
        return upstream * self.derivative(z), {}

    def check_input(self, z):
        pass

    def apply(self, graph: Graph, z_node: Node) -> Node:
        """Record this activation on the tape."""
        z = z_node.value
        self.check_input(z)
        out = self.forward(z)
        pnodes = tuple(graph.leaf(p) for p in self.params())

        def vjp(up):
            dz, dparams = self.backward(z, up)
            return (dz,) + tuple(dparams[n] for n in self.param_names)

        return graph.record(f"act:{self.name}", (z_node,) + pnodes, out, vjp)

    def clone_spec(self):
        """(name, kwargs) pair sufficient to rebuild this activation."""
        raise NotImplementedError


class ReLU(Activation):
    name = "relu"

    def forward(self, z):
        return np.maximum(z, 0)

    def derivative(self, z):
        return heaviside(z)

    def clone_spec(self):
        return {"kind": "relu"}


class LeakyReLU(Activation):
    name = "leaky_relu"

    def __init__(self, slope=0.3):
        self.slope = float(slope)

    def forward(self, z):
        return np.where(z > 0, z, z * np.asarray(self.slope, dtype=z.dtype))

    def derivative(self, z):
        one = np.asarray(1.0, dtype=z.dtype)
        return np.where(z > 0, one, np.asarray(self.slope, dtype=z.dtype))

    def clone_spec(self):
        return {"kind": "leaky_relu", "slope": self.slope}


class ELU(Activation):
    name = "elu"

    def __init__(self, a=1.0):
        self.a = float(a)

    def forward(self, z):
        a = np.asarray(self.a, dtype=z.dtype)
        return np.where(z > 0, z, a * np.expm1(np.minimum(z, 0)))

    def derivative(self, z):
        a = np.asarray(self.a, dtype=z.dtype)
        one = np.asarray(1.0, dtype=z.dtype)
        return np.where(z > 0, one, a * np.exp(np.minimum(z, 0)))

    def clone_spec(self):
        return {"kind": "elu", "a": self.a}


class SineReLU(Activation):
    """x for x > 0, eps*(sin x - cos x) otherwise."""

    name = "sine_relu"

    def __init__(self, eps=0.0025):
        self.eps = float(eps)

    def forward(self, z):
        eps = np.asarray(self.eps, dtype=z.dtype)
        return np.where(z > 0, z, eps * (np.sin(z) - np.cos(z)))

    def derivative(self, z):
        eps = np.asarray(self.eps, dtype=z.dtype)
        one = np.asarray(1.0, dtype=z.dtype)
        return np.where(z > 0, one, eps * (np.cos(z) + np.sin(z)))

    def clone_spec(self):
        return {"kind": "sine_relu", "eps": self.eps}


class VLU(Activation):
    """ReLU(x) + alpha*sin(beta*x) with fixed scalar hyperparameters."""

    name = "vlu"

    def __init__(self, alpha=0.5, beta=1.0):
        self.alpha = float(alpha)
        self.beta = float(beta)

    def forward(self, z):
        a = np.asarray(self.alpha, dtype=z.dtype)
        b = np.asarray(self.beta, dtype=z.dtype)
        return np.maximum(z, 0) + a * np.sin(b * z)

    def derivative(self, z):
        a = np.asarray(self.alpha, dtype=z.dtype)
        b = np.asarray(self.beta, dtype=z.dtype)
        return a * b * np.cos(b * z) + heaviside(z)

    def clone_spec(self):
        return {"kind": "vlu", "alpha": self.alpha, "beta": self.beta}


class ChannelwiseActivation(Activation):
    """Base for kinds with one parameter vector entry per channel."""

    def __init__(self, channels):
        if channels < 1:
            raise ContractError(f"channel count must be >= 1, got {channels}")
        self.channels = int(channels)

    def check_input(self, z):
        if z.ndim < 2 or z.shape[1] != self.channels:
            raise ShapeError(
                f"{self.name}: expected [N,{self.channels},...] input, got {z.shape}"
            )


class PReLU(ChannelwiseActivation):
    """Leaky ReLU with a trainable per-channel negative slope (init 0.25)."""

    name = "prelu"
    param_names = ("slope",)

    def __init__(self, channels, init=0.25, dtype=np.float64):
        super().__init__(channels)
        self.init0 = float(init)
        self.slope = Parameter(
            np.full(channels, init, dtype=dtype), name="prelu_slope", kind="prelu_slope"
        )

    def params(self):
        return [self.slope]

    def forward(self, z):
        self.check_input(z)
        s = _channel_view(self.slope.value, z)
        return np.where(z > 0, z, s * z)

    def derivative(self, z):
        s = np.broadcast_to(_channel_view(self.slope.value, z), z.shape)
        one = np.asarray(1.0, dtype=z.dtype)
        return np.where(z > 0, one, s)

    def backward(self, z, upstream):
        self.check_input(z)
        dz = upstream * self.derivative(z)
        dslope = _channel_sum(np.where(z > 0, np.zeros((), dtype=z.dtype), upstream * z),
                              self.slope.value.dtype)
        return dz, {"slope": dslope}

    def clone_spec(self):
        return {"kind": "prelu", "channels": self.channels, "init": self.init0}


class PVLU(ChannelwiseActivation):
    """ReLU(x) + alpha_c*sin(beta_c*x) with trainable channel-wise alpha, beta.

    dz   = upstream * (alpha_c*beta_c*cos(beta_c*z) + H(z))
    d alpha_c = sum over batch/spatial of upstream * sin(beta_c*z)
    d beta_c  = sum over batch/spatial of upstream * alpha_c * z * cos(beta_c*z)
    """

    name = "pvlu"
    param_names = ("alpha", "beta")

    def __init__(self, channels, alpha0=0.5, beta0=1.0, dtype=np.float64):
        super().__init__(channels)
        self.alpha0, self.beta0 = float(alpha0), float(beta0)
        self.alpha = Parameter(
            np.full(channels, alpha0, dtype=dtype), name="pvlu_alpha", kind="pvlu_alpha"
        )
        self.beta = Parameter(
            np.full(channels, beta0, dtype=dtype), name="pvlu_beta", kind="pvlu_beta"
        )

    def params(self):
        return [self.alpha, self.beta]

    def forward(self, z):
        self.check_input(z)
        a = _channel_view(self.alpha.value, z).astype(z.dtype, copy=False)
        b = _channel_view(self.beta.value, z).astype(z.dtype, copy=False)
        return np.maximum(z, 0) + a * np.sin(b * z)

    def derivative(self, z):
        a = _channel_view(self.alpha.value, z).astype(z.dtype, copy=False)
        b = _channel_view(self.beta.value, z).astype(z.dtype, copy=False)
        return a * b * np.cos(b * z) + heaviside(z)

    def backward(self, z, upstream):
        self.check_input(z)
        a = _channel_view(self.alpha.value, z).astype(z.dtype, copy=False)
        b = _channel_view(self.beta.value, z).astype(z.dtype, copy=False)
        bz = b * z
        dz = upstream * (a * b * np.cos(bz) + heaviside(z))
        dalpha = _channel_sum(upstream * np.sin(bz), self.alpha.value.dtype)
        dbeta = _channel_sum(upstream * a * z * np.cos(bz), self.beta.value.dtype)
        return dz, {"alpha": dalpha, "beta": dbeta}

    def clone_spec(self):
        return {"kind": "pvlu", "channels": self.channels,
                "init": (self.alpha0, self.beta0)}


def make_pvlu_params(channels, init="scratch", dtype=np.float64) -> PVLU:
    """Build a PVLU head: "finetune" (alpha=0, beta=1, an exact ReLU at init),
    "scratch" (alpha=0.5, beta=1), or a custom (alpha0, beta0) pair."""
    if init == "finetune":
        alpha0, beta0 = 0.0, 1.0
    elif init == "scratch":
        alpha0, beta0 = 0.5, 1.0
    elif isinstance(init, (tuple, list)) and len(init) == 2:
        alpha0, beta0 = float(init[0]), float(init[1])
    else:
        raise ConfigError(f"unknown init protocol {init!r}")
    return PVLU(channels, alpha0=alpha0, beta0=beta0, dtype=dtype)


_SIMPLE = {
    "relu": ReLU,
    "leaky_relu": LeakyReLU,
    "elu": ELU,
    "sine_relu": SineReLU,
    "vlu": VLU,
}

KIND_NAMES = ("relu", "leaky_relu", "elu", "prelu", "sine_relu", "vlu", "pvlu")


def make(name, channels=None, dtype=np.float64, **kwargs) -> Activation:
    """Activation factory; channel-wise kinds need the channel count."""
    if name in _SIMPLE:
        return _SIMPLE[name](**kwargs)
    if name == "prelu":
        if channels is None:
            raise ContractError("prelu needs a channel count")
        return PReLU(channels, dtype=dtype, **kwargs)
    if name == "pvlu":
        if channels is None:
            raise ContractError("pvlu needs a channel count")
        init = kwargs.pop("init", "scratch")
        return make_pvlu_params(channels, init=init, dtype=dtype)
    raise ConfigError(f"unknown activation kind {name!r}")


def act_forward(kind: Activation, z):
    """Elementwise forward; channel-wise parameters broadcast over batch and
    spatial axes."""
    z = np.asarray(z)
    kind.check_input(z)
    return kind.forward(z)


def act_backward(kind: Activation, z, upstream):
    """Analytic backward: (dz, per-channel parameter gradients where applicable)."""
    z = np.asarray(z)
    upstream = np.asarray(upstream)
    kind.check_input(z)
    return kind.backward(z, upstream)
