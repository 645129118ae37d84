"""Finite-difference gradient check suites for the kernel ops and the model.

Two precisions are supported.  ``wide`` evaluates everything in float64 with a
small step; ``standard`` runs the float32 kernels with a step large enough to
rise above float32 rounding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .model import ModelConfig, build_model, variant_config
from .tensor import GradSlot, GradcheckReport


@dataclass(frozen=True)
class Precision:
    name: str
    dtype: type
    eps: float
    kink_tol: float
    threshold: float


PRECISIONS = {
    "wide": Precision("wide", np.float64, 1e-5, 1e-6, 1e-6),
    "standard": Precision("standard", np.float32, 1e-2, 1e-2, 1e-2),
}


def precision(name: str) -> Precision:
    try:
        return PRECISIONS[name]
    except KeyError:
        raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}, got {name!r}") from None


def micro_config(scale: int = 2) -> ModelConfig:
    """Two blocks of eight channels: small enough for exhaustive checks."""
    return variant_config("custom", scale, n_blocks=2, channels=8)


def parse_config(text: str) -> ModelConfig:
    """``micro`` or a comma list such as ``L=3,C=4,p=3`` (keys L/blocks, C/channels, p/scale)."""
    if text == "micro":
        return micro_config()
    aliases = {"l": "n_blocks", "blocks": "n_blocks", "c": "channels", "channels": "channels",
               "p": "scale", "scale": "scale"}
    values = {"n_blocks": 2, "channels": 8, "scale": 2}
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, sep, val = item.partition("=")
        if not sep or key.strip().lower() not in aliases:
            raise ConfigurationError(f"cannot parse model config item {item!r}")
        try:
            values[aliases[key.strip().lower()]] = int(val)
        except ValueError:
            raise ConfigurationError(f"config value for {key} must be an integer") from None
    return variant_config("custom", values.pop("scale"), **values)


def _objective(forward: Callable, backward: Callable, weights: np.ndarray):
    """f() = <forward(), weights>, accumulating analytic grads through ``backward``."""
    def f():
        out = forward()
        backward(weights.astype(out.dtype))
        return float(np.sum(out.astype(np.float64) * weights))
    return f


def _rand(rng, shape, dtype):
    return rng.standard_normal(shape).astype(dtype)


def op_cases(seed: int, dtype) -> dict[str, tuple[Callable, dict[str, GradSlot]]]:
    """One seeded random instance per op: name -> (objective, slots)."""
    rng = np.random.default_rng(seed)
    cases = {}

    for k in (1, 3):
        x = GradSlot(_rand(rng, (2, 3, 5, 4), dtype))
        w = GradSlot(_rand(rng, (4, 3, k, k), dtype) * dtype(0.5))
        b = GradSlot(_rand(rng, (4,), dtype))
        r = rng.standard_normal((2, 4, 5, 4))

        def fwd(x=x, w=w, b=b):
            return T.conv2d(x.value, w.value, b.value)

        def bwd(g, x=x, w=w, b=b):
            gx, gw, gb = T.conv2d_backward(g, x.value, w.value)
            x.accumulate(gx), w.accumulate(gw), b.accumulate(gb)

        cases[f"conv2d_k{k}"] = (_objective(fwd, bwd, r), {"x": x, "weight": w, "bias": b})

    def unary(name, fwd_op, bwd_op, shape=(2, 3, 4, 4)):
        x = GradSlot(_rand(rng, shape, dtype))
        r = rng.standard_normal(shape)
        cases[name] = (_objective(lambda: fwd_op(x.value), lambda g: x.accumulate(bwd_op(g, x.value)), r), {"x": x})

    unary("relu", T.relu, T.relu_backward)
    unary("sigmoid", T.sigmoid, lambda g, x: T.sigmoid_backward(g, T.sigmoid(x)))

    a, b = GradSlot(_rand(rng, (2, 3, 3, 3), dtype)), GradSlot(_rand(rng, (2, 3, 3, 3), dtype))
    r = rng.standard_normal((2, 3, 3, 3))

    def add_bwd(g):
        ga, gb = T.add_backward(g)
        a.accumulate(ga), b.accumulate(gb)

    cases["add"] = (_objective(lambda: T.add(a.value, b.value), add_bwd, r), {"a": a, "b": b})

    x = GradSlot(_rand(rng, (2, 3, 4, 5), dtype))
    r = rng.standard_normal((2, 3, 1, 1))
    cases["global_avg_pool"] = (
        _objective(lambda: T.global_avg_pool(x.value),
                   lambda g: x.accumulate(T.global_avg_pool_backward(g, x.value.shape)), r),
        {"x": x},
    )

    xs = GradSlot(_rand(rng, (1, 12, 3, 2), dtype))
    r = rng.standard_normal((1, 3, 6, 4))
    cases["pixel_shuffle"] = (
        _objective(lambda: T.pixel_shuffle(xs.value, 2),
                   lambda g: xs.accumulate(T.pixel_shuffle_backward(g, 2)), r),
        {"x": xs},
    )

    parts = [GradSlot(_rand(rng, (2, c, 3, 3), dtype)) for c in (1, 3, 2)]
    r = rng.standard_normal((2, 6, 3, 3))

    def concat_bwd(g):
        for slot, piece in zip(parts, T.channel_split(g, [1, 3, 2])):
            slot.accumulate(piece)

    cases["channel_concat"] = (
        _objective(lambda: T.channel_concat([p.value for p in parts]), concat_bwd, r),
        {f"part{i}": p for i, p in enumerate(parts)},
    )

    xc = GradSlot(_rand(rng, (2, 3, 4, 4), dtype))
    s = GradSlot(_rand(rng, (2, 3, 1, 1), dtype))
    r = rng.standard_normal((2, 3, 4, 4))

    def scale_bwd(g):
        gx, gs = T.channel_scale_backward(g, xc.value, s.value)
        xc.accumulate(gx), s.accumulate(gs)

    cases["channel_scale"] = (_objective(lambda: T.channel_scale(xc.value, s.value), scale_bwd, r),
                              {"x": xc, "s": s})

    ops = [GradSlot(_rand(rng, (1, 2, 3, 3), dtype)) for _ in range(3)]
    lams = [GradSlot(_rand(rng, (1,), dtype)) for _ in range(3)]
    r = rng.standard_normal((1, 2, 3, 3))

    def ws_fwd():
        return T.weighted_sum3(*(o.value for o in ops), *(T.scalar(l) for l in lams))

    def ws_bwd(g):
        grads = T.weighted_sum3_backward(g, *(o.value for o in ops), *(T.scalar(l) for l in lams))
        for slot, gr in zip(ops + lams, grads):
            slot.accumulate(np.reshape(gr, slot.value.shape))

    cases["weighted_sum3"] = (
        _objective(ws_fwd, ws_bwd, r),
        {**{f"in{i}": o for i, o in enumerate(ops)}, **{f"lambda{i}": l for i, l in enumerate(lams)}},
    )
    return cases


def op_gradcheck(seed: int, prec: Precision | str = "wide") -> dict[str, GradcheckReport]:
    prec = precision(prec) if isinstance(prec, str) else prec
    return {
        name: T.gradcheck_report(f, slots, eps=prec.eps, seed=seed, kink_tol=prec.kink_tol)
        for name, (f, slots) in op_cases(seed, prec.dtype).items()
    }


def model_gradcheck(
    config: ModelConfig,
    seed: int = 0,
    prec: Precision | str = "wide",
    size: int = 8,
    max_samples: int = 256,
) -> GradcheckReport:
    """Check every model parameter (sampled) on a random ``size`` x ``size`` input."""
    prec = precision(prec) if isinstance(prec, str) else prec
    model = build_model(config, seed=seed).astype(prec.dtype)
    rng = np.random.default_rng(10_000 + seed)
    x = rng.random((1, 3, size, size)).astype(prec.dtype)
    p = config.scale
    r = rng.standard_normal((1, 3, size * p, size * p))

    cache: dict = {}

    def f():
        cache.clear()
        out = model.forward(x, cache)
        model.backward(r.astype(out.dtype), cache)
        return float(np.sum(out.astype(np.float64) * r))

    return T.gradcheck_report(f, dict(model.named_parameters()), eps=prec.eps,
                              max_samples=max_samples, seed=seed, kink_tol=prec.kink_tol)
