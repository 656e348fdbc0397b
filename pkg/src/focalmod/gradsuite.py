"""Finite-difference gradient checks for every kernel, the modulation block and a small model.

Each check projects the kernel output onto a fixed random tensor to get a
scalar objective, then compares the analytic backward pass against central
differences over every input and parameter coordinate.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import ModelConfig, build_model, preset
from .modulation import FocalModConfig, init_params, modulation_backward, modulation_forward
from .tensor import GradCheckReport, PadMode, grad_check

TOLERANCE = 1e-4
EPS = 1e-5
# Central differences at EPS on an O(1) loss resolve about 1e-11 absolute, so a
# whole-model entry near 1e-8 cannot be judged relatively; below this it is judged
# on absolute error (1e-4 * 1e-6 = 1e-10).
MODEL_FLOOR = 1e-6


def _projected(forward, backward, inputs: dict, rng, op: str) -> GradCheckReport:
    """Check ``sum(forward(**inputs) * R)`` for a fixed random R."""
    out = forward(**inputs)
    R = rng.normal(size=np.shape(out[0]))
    analytic = backward(R, out[1])

    def f():
        return float((forward(**inputs)[0] * R).sum())

    return grad_check(f, inputs, analytic, eps=EPS, op=op)


def check_linear(rng, shape):
    *lead, cin, cout = shape
    inputs = {"x": rng.normal(size=(*lead, cin)), "W": rng.normal(size=(cin, cout)), "b": rng.normal(size=cout)}

    def bwd(R, cache):
        dx, dW, db = T.linear_backward(R, cache)
        return {"x": dx, "W": dW, "b": db}

    return _projected(T.linear_forward, bwd, inputs, rng, f"linear{tuple(shape)}")


def check_dwconv(rng, shape, k, pad):
    B, H, W, C = shape
    inputs = {"x": rng.normal(size=shape), "w": rng.normal(size=(k, k, C)), "b": rng.normal(size=C)}

    def fwd(x, w, b):
        return T.dwconv2d_forward(x, w, b, pad)

    def bwd(R, cache):
        dx, dw, db = T.dwconv2d_backward(R, cache)
        return {"x": dx, "w": dw, "b": db}

    return _projected(fwd, bwd, inputs, rng, f"dwconv2d{tuple(shape)} k={k} {pad.value}")


def check_conv2d(rng, shape, k, stride, padding, cout):
    B, H, W, C = shape
    inputs = {"x": rng.normal(size=shape), "w": rng.normal(size=(k, k, C, cout)), "b": rng.normal(size=cout)}

    def fwd(x, w, b):
        return T.conv2d_forward(x, w, b, stride, padding)

    def bwd(R, cache):
        dx, dw, db = T.conv2d_backward(R, cache)
        return {"x": dx, "w": dw, "b": db}

    return _projected(fwd, bwd, inputs, rng, f"conv2d{tuple(shape)} k={k} s={stride} p={padding}")


def check_gelu(rng, shape=None):
    """Random-shape check, or with ``shape=None`` a scalar sweep over [-4, 4]."""
    if shape is not None:
        return _projected(T.gelu_forward, lambda R, c: {"x": T.gelu_backward(R, c)},
                          {"x": rng.normal(scale=2.0, size=shape)}, rng, f"gelu{tuple(shape)}")
    worst = GradCheckReport(op="gelu[-4,4]", max_rel_err=0.0, worst_index=-1, eps=EPS)
    for i, v in enumerate(np.linspace(-4.0, 4.0, 81)):
        x = np.array([v])
        r = grad_check(lambda: float(T.gelu(x)[0]), {"x": x}, {"x": T.gelu_backward(np.ones(1), T.gelu_forward(x)[1])},
                       eps=EPS)
        worst.n_checked += 1
        if r.max_rel_err > worst.max_rel_err or worst.worst_index < 0:
            worst.max_rel_err, worst.worst_index, worst.worst_param = r.max_rel_err, i, "x"
    return worst


def check_global_avg_pool(rng, shape):
    return _projected(T.global_avg_pool_forward,
                      lambda R, c: {"x": T.global_avg_pool_backward(R, c)},
                      {"x": rng.normal(size=shape)}, rng, f"global_avg_pool{tuple(shape)}")


def check_avg_pool(rng, shape, k, pad):
    def fwd(x):
        return T.avg_pool_same_forward(x, k, pad)

    return _projected(fwd, lambda R, c: {"x": T.avg_pool_same_backward(R, c)},
                      {"x": rng.normal(size=shape)}, rng, f"avg_pool{tuple(shape)} k={k} {pad.value}")


def check_layer_norm(rng, shape):
    C = shape[-1]
    inputs = {"x": rng.normal(size=shape), "gamma": rng.normal(size=C), "beta": rng.normal(size=C)}

    def bwd(R, cache):
        dx, dg, db = T.layer_norm_backward(R, cache)
        return {"x": dx, "gamma": dg, "beta": db}

    return _projected(T.layer_norm_forward, bwd, inputs, rng, f"layer_norm{tuple(shape)}")


def check_softmax_ce(rng, B, K, smoothing):
    logits = rng.normal(size=(B, K))
    labels = rng.integers(0, K, size=B)
    _, grad = T.softmax_cross_entropy(logits, labels, smoothing)

    def f():
        return T.softmax_cross_entropy(logits, labels, smoothing)[0]

    return grad_check(f, {"logits": logits}, {"logits": grad}, eps=EPS,
                      op=f"softmax_cross_entropy({B}x{K}, smoothing={smoothing})")


def check_modulation(rng, shape=(1, 8, 8, 8), levels=2, scale=0.5, **switches):
    cfg = FocalModConfig(dim=shape[-1], levels=levels, **switches)
    params = init_params(cfg, 0)
    for a in params.named().values():
        a[...] = rng.normal(scale=scale, size=a.shape)
    x = rng.normal(size=shape)
    R = rng.normal(size=shape)
    _, cache, _ = modulation_forward(params, cfg, x)
    dx, grads = modulation_backward(R, cache)
    inputs = dict(params.named())
    inputs["x"] = x
    grads["x"] = dx
    tag = ",".join(f"{k}={v}" for k, v in switches.items())

    def f():
        return float((modulation_forward(params, cfg, x)[0] * R).sum())

    return grad_check(f, inputs, grads, eps=EPS, op=f"focal_modulation{tuple(shape)} L={levels} {tag}".rstrip())


def check_model(rng, config: ModelConfig | None = None, resolution: int = 32, scale: float = 0.3,
                train: bool = False, seed: int = 0):
    """Whole-model check on the cross-entropy loss.

    Weights get extra random noise of size ``scale`` so gradients are not
    dominated by the tiny initialization scale.
    """
    config = config or preset("micro", dims=(8, 16))
    model = build_model(config, seed=seed)
    for a in model.params.values():
        a += rng.normal(scale=scale, size=a.shape)
    x = rng.normal(size=(1, resolution, resolution, config.in_chans))
    y = np.array([int(rng.integers(config.num_classes))])
    # same drop-path masks on every call: rebuild the rng from a fixed seed
    loss, grads, _ = model.loss_and_grads(x, y, train=train, rng=seed)
    inputs = dict(model.params)

    def f():
        logits = model.forward(x, train=train, rng=seed)
        return T.softmax_cross_entropy(logits, y)[0]

    return grad_check(f, inputs, grads, eps=EPS, op=f"model{tuple(config.dims)}@{resolution}",
                      floor=MODEL_FLOOR)


def kernel_checks(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    out = []
    for shape in [(3, 4), (2, 3, 5), (1, 2, 2, 6, 3)]:
        out.append(check_linear(rng, shape))
    for shape, k, pad in [((1, 5, 5, 2), 3, PadMode.ZERO_SAME), ((2, 4, 6, 3), 5, PadMode.ZERO_SAME),
                          ((1, 3, 3, 2), 7, PadMode.ZERO_SAME), ((1, 5, 4, 2), 3, PadMode.CIRCULAR_SAME),
                          ((1, 3, 3, 2), 5, PadMode.CIRCULAR_SAME)]:
        out.append(check_dwconv(rng, shape, k, pad))
    for shape, k, s, p, co in [((1, 8, 8, 3), 4, 4, 0, 4), ((2, 4, 4, 2), 2, 2, 0, 3),
                               ((1, 8, 8, 2), 7, 4, 2, 3), ((1, 4, 6, 2), 3, 2, 1, 2)]:
        out.append(check_conv2d(rng, shape, k, s, p, co))
    out.append(check_gelu(rng))
    for shape in [(7,), (3, 4), (2, 3, 3, 2)]:
        out.append(check_gelu(rng, shape))
    for shape in [(1, 2, 2, 1), (2, 3, 4, 3), (1, 5, 5, 2)]:
        out.append(check_global_avg_pool(rng, shape))
    for shape, k, pad in [((1, 4, 4, 2), 3, PadMode.ZERO_SAME), ((2, 5, 3, 1), 5, PadMode.ZERO_SAME),
                          ((1, 4, 4, 2), 3, PadMode.CIRCULAR_SAME)]:
        out.append(check_avg_pool(rng, shape, k, pad))
    for shape in [(5,), (3, 4), (2, 3, 3, 6)]:
        out.append(check_layer_norm(rng, shape))
    for B, K, s in [(2, 3, 0.0), (4, 5, 0.1), (1, 2, 0.3)]:
        out.append(check_softmax_ce(rng, B, K, s))
    return out


def block_checks(seed: int = 0) -> list[GradCheckReport]:
    from .modulation import Aggregator

    rng = np.random.default_rng(seed)
    return [
        check_modulation(rng, (1, 8, 8, 8), 2),
        check_modulation(rng, (2, 5, 6, 4), 3),
        check_modulation(rng, (1, 4, 4, 3), 0),
        check_modulation(rng, (1, 6, 6, 4), 2, pad=PadMode.CIRCULAR_SAME),
        check_modulation(rng, (1, 6, 6, 4), 2, additive_modulation=True),
        check_modulation(rng, (1, 6, 6, 4), 2, use_global_pool=False),
        check_modulation(rng, (1, 6, 6, 4), 3, top_only=True),
        check_modulation(rng, (1, 6, 6, 4), 2, use_gating=False),
        check_modulation(rng, (1, 6, 6, 4), 2, aggregator=Aggregator.AVGPOOL),
    ]


def model_checks(seed: int = 0, config: ModelConfig | None = None) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    return [check_model(rng, config)]


def run_all(seed: int = 0, config: ModelConfig | None = None) -> list[GradCheckReport]:
    return kernel_checks(seed) + block_checks(seed) + model_checks(seed, config)
