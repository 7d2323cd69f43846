"""Finite-difference verification of every analytic gradient path.

Each case compares an analytic derivative against central differences of
the matching forward function only, so a bug in a backward rule cannot
hide.  Probe points are drawn uniformly from [-3, 3] with a +/-1e-3
exclusion band around z = 0, where the piecewise activations are not
differentiable and the comparison is meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import activations, layers
from .autodiff import finite_diff

TOLERANCE = 1e-4
KINK_BAND = 1e-3
_H = 1e-6


@dataclass
class CaseResult:
    name: str
    samples: int
    max_err: float

    @property
    def passed(self):
        return self.max_err < TOLERANCE


def _probe(rng, shape):
    """Uniform[-3,3] samples with the kink band around 0 rejected."""
    z = rng.uniform(-3.0, 3.0, size=shape)
    while np.any(np.abs(z) < KINK_BAND):
        bad = np.abs(z) < KINK_BAND
        z[bad] = rng.uniform(-3.0, 3.0, size=int(bad.sum()))
    return z


def _rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(numeric), 1.0)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _corruption(name, corrupt):
    # Test hook: scale the analytic side so the named case must fail.
    return 1.01 if corrupt == name else 1.0


def _check_dz(kind, rng, corrupt):
    channelwise = kind in ("prelu", "pvlu")
    if channelwise:
        act = activations.make(kind, channels=4)
        z = _probe(rng, (250, 4))
    else:
        act = activations.make(kind)
        z = _probe(rng, (1000,))
    numeric = (act.forward(z + _H) - act.forward(z - _H)) / (2.0 * _H)
    analytic = act.derivative(z) * _corruption(f"{kind}-dz", corrupt)
    return CaseResult(f"{kind}-dz", z.size, _rel_err(analytic, numeric))


def _check_channel_param(kind, param_name, rng, corrupt):
    act = activations.make(kind, channels=4)
    z = _probe(rng, (250, 4))
    upstream = rng.normal(size=z.shape)
    param = getattr(act, param_name)
    _, grads = act.backward(z, upstream)
    name = f"{kind}-d{param_name}"
    analytic = grads[param_name] * _corruption(name, corrupt)
    numeric = finite_diff(lambda: float((upstream * act.forward(z)).sum()), param)
    return CaseResult(name, z.size, _rel_err(analytic, numeric))


def _check_model(rng, corrupt):
    """Whole-model check: analytic backward vs finite differences of the
    cross-entropy loss for every parameter of a small conv net."""
    specs = [
        layers.conv(3, 3),
        layers.batchnorm(),
        layers.activation("pvlu"),
        layers.maxpool(2),
        layers.flatten(),
        layers.dense(2),
        layers.softmax_classifier(),
    ]
    model = layers.build(specs, (1, 6, 6), seed=9, dtype=np.float64)
    x = rng.normal(size=(4, 1, 6, 6))
    labels = rng.integers(0, 2, size=4)

    def loss():
        # Snapshot running stats so repeated train-mode probes do not drift.
        saved = [b.copy() for b in model.buffers()]
        _, g = model.forward(x, "train")
        out = float(g.cross_entropy_logits(g.presoftmax, labels).value)
        model.set_buffers(saved)
        return out

    model.zero_grad()
    _, g = model.forward(x, "train")
    node = g.cross_entropy_logits(g.presoftmax, labels)
    saved = [b.copy() for b in model.buffers()]
    g.backward(node)
    model.set_buffers(saved)
    worst = 0.0
    count = 0
    factor = _corruption("model-all-params", corrupt)
    for p in model.params():
        numeric = finite_diff(loss, p)
        worst = max(worst, _rel_err(p.grad * factor, numeric))
        count += p.value.size
    return CaseResult("model-all-params", count, worst)


def run_suite(corrupt: str | None = None, seed: int = 1234) -> list[CaseResult]:
    """Run every case; ``corrupt`` names one case whose analytic side is
    deliberately perturbed (fault-injection hook for the exit-code tests)."""
    rng = np.random.default_rng(seed)
    results = []
    for kind in activations.KIND_NAMES:
        results.append(_check_dz(kind, rng, corrupt))
    results.append(_check_channel_param("prelu", "slope", rng, corrupt))
    results.append(_check_channel_param("pvlu", "alpha", rng, corrupt))
    results.append(_check_channel_param("pvlu", "beta", rng, corrupt))
    results.append(_check_model(rng, corrupt))
    return results


def format_report(results) -> str:
    lines = [
        "gradient check: analytic backward vs central differences (h=1e-6)",
        f"probe points uniform in [-3, 3]; kink band |z| < {KINK_BAND:g} excluded",
        "",
        f"{'case':<20} {'samples':>8} {'max rel err':>12}  status",
    ]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<20} {r.samples:>8} {r.max_err:>12.3e}  {status}")
    failing = [r.name for r in results if not r.passed]
    lines.append("")
    if failing:
        lines.append(f"FAILED ({len(failing)}/{len(results)} cases, "
                     f"tolerance {TOLERANCE:g}): {', '.join(failing)}")
    else:
        lines.append(f"all {len(results)} cases ok (tolerance {TOLERANCE:g})")
    return "\n".join(lines)
