"""FocalNet model builders.

A model is a flat, ordered ``name -> ndarray`` parameter dict plus a list of
stateless layers. Each layer reads its weights from that dict by prefix,
returns a cache from ``forward`` and consumes it in ``backward``; nothing is
stored on the layer, so a built model can serve concurrent forward calls.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import fmt1
from .exceptions import ConfigError, DimensionError, InputError
from .modulation import (
    Aggregator,
    FocalModConfig,
    FocalModulationParams,
    default_kernels,
    init_params,
    modulation_backward,
    modulation_forward,
    trunc_normal,
)
from .tensor import (
    PadMode,
    conv2d_backward,
    conv2d_forward,
    dwconv2d_backward,
    dwconv2d_forward,
    gelu_backward,
    gelu_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    softmax_cross_entropy,
    tally,
)


class Variant(enum.Enum):
    FOCALNET = "focalnet"
    DW_CONVNET = "dw_convnet"
    POOL_AGG = "pool_agg"
    GLOBAL_POOL_AGG = "global_pool_agg"


@dataclass(frozen=True)
class ModelConfig:
    depths: tuple[int, ...] = (2, 2, 6, 2)
    dims: tuple[int, ...] = (96, 192, 384, 768)
    focal_levels: tuple[int, ...] = (2, 2, 2, 2)
    focal_kernels: tuple[int, ...] = (3, 3, 3, 3)
    num_classes: int = 1000
    in_chans: int = 3
    patch_size: int = 4
    overlapped: bool = False
    monolithic: bool = False
    variant: Variant = Variant.FOCALNET
    mlp_ratio: float = 4.0
    drop_path: float = 0.0
    layer_scale_init: float | None = None
    dropout: float = 0.0
    additive_modulation: bool = False
    use_global_pool: bool = True
    top_only: bool = False
    use_gating: bool = True
    pad: PadMode = PadMode.ZERO_SAME
    kernel_growth: int = 0
    # fixed input standardization (x - mean) / std, not learned
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        for name in ("depths", "dims", "focal_levels", "focal_kernels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        n = len(self.depths)
        if not (len(self.dims) == len(self.focal_levels) == len(self.focal_kernels) == n):
            raise ConfigError(
                f"inconsistent stage lists: depths={self.depths} dims={self.dims} "
                f"focal_levels={self.focal_levels} focal_kernels={self.focal_kernels}")
        if n == 0:
            raise ConfigError("need at least one stage")
        if self.monolithic and n != 1:
            raise ConfigError(f"monolithic models have exactly one stage, got {n}")
        if any(d < 0 for d in self.depths) or any(c < 1 for c in self.dims):
            raise ConfigError("depths must be >= 0 and dims >= 1")
        if self.num_classes < 1 or self.in_chans < 1 or self.patch_size < 1:
            raise ConfigError("num_classes, in_chans and patch_size must be positive")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"drop_path must lie in [0, 1), got {self.drop_path}")
        if not self.input_std > 0.0:
            raise ConfigError(f"input_std must be positive, got {self.input_std}")

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    @property
    def stem(self) -> tuple[int, int, int]:
        """(kernel, stride, padding) of the stem patch embedding."""
        if self.overlapped and not self.monolithic:
            return 7, 4, 2
        return self.patch_size, self.patch_size, 0

    @property
    def downsample(self) -> tuple[int, int, int]:
        return (3, 2, 1) if self.overlapped else (2, 2, 0)

    @property
    def total_stride(self) -> int:
        return self.stem[1] * self.downsample[1] ** (self.n_stages - 1)

    def modulation_config(self, stage: int) -> FocalModConfig:
        levels = self.focal_levels[stage]
        aggregator = Aggregator.DWCONV
        if self.variant is Variant.GLOBAL_POOL_AGG:
            levels = 0
        elif self.variant is Variant.POOL_AGG:
            aggregator = Aggregator.AVGPOOL
        kernels = tuple(k + self.kernel_growth for k in default_kernels(levels, self.focal_kernels[stage]))
        return FocalModConfig(
            dim=self.dims[stage], levels=levels, kernel_sizes=kernels,
            additive_modulation=self.additive_modulation,
            use_global_pool=self.use_global_pool or self.variant is Variant.GLOBAL_POOL_AGG,
            top_only=self.top_only, use_gating=self.use_gating, dropout=self.dropout,
            pad=self.pad, aggregator=aggregator)

    # flat key=value text form -------------------------------------------------

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, enum.Enum):
                v = v.value
            elif v is None:
                v = "none"
            out[f.name] = str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        base = asdict(cls())
        unknown = set(kv) - set(types)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        out = {}
        for key, raw in kv.items():
            raw = raw.strip()
            default = base[key]
            if isinstance(default, tuple):
                out[key] = tuple(int(v) for v in raw.split(",") if v.strip())
            elif isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
                out[key] = raw.lower() in ("true", "1", "yes")
            elif key == "variant":
                out[key] = Variant(raw.lower())
            elif key == "pad":
                out[key] = PadMode(raw.lower())
            elif key == "layer_scale_init":
                out[key] = None if raw.lower() in ("none", "") else float(raw)
            elif isinstance(default, int):
                out[key] = int(raw)
            else:
                out[key] = float(raw)
        return cls(**out)


def _four_stage(depths, dim, levels, **kw) -> ModelConfig:
    return ModelConfig(depths=depths, dims=(dim, 2 * dim, 4 * dim, 8 * dim),
                       focal_levels=(levels,) * 4, focal_kernels=(3,) * 4, **kw)


def _monolithic(dim, **kw) -> ModelConfig:
    return ModelConfig(depths=(12,), dims=(dim,), focal_levels=(3,), focal_kernels=(3,),
                       patch_size=16, monolithic=True, **kw)


PRESETS = {
    "focalnet-t-srf": lambda: _four_stage((2, 2, 6, 2), 96, 2),
    "focalnet-t-lrf": lambda: _four_stage((2, 2, 6, 2), 96, 3),
    "focalnet-s-srf": lambda: _four_stage((2, 2, 18, 2), 96, 2),
    "focalnet-s-lrf": lambda: _four_stage((2, 2, 18, 2), 96, 3),
    "focalnet-b-srf": lambda: _four_stage((2, 2, 18, 2), 128, 2),
    "focalnet-b-lrf": lambda: _four_stage((2, 2, 18, 2), 128, 3),
    "focalnet-l-srf": lambda: _four_stage((2, 2, 18, 2), 192, 2),
    "focalnet-l-lrf": lambda: _four_stage((2, 2, 18, 2), 192, 3),
    "focalnet-t-srf-overlap": lambda: _four_stage((2, 2, 6, 2), 96, 2, overlapped=True),
    "focalnet-s-srf-overlap": lambda: _four_stage((2, 2, 18, 2), 96, 2, overlapped=True),
    "focalnet-b-srf-overlap": lambda: _four_stage((2, 2, 18, 2), 128, 2, overlapped=True),
    "focalnet-t-srf-deep": lambda: _four_stage((3, 3, 16, 3), 64, 2),
    "focalnet-s-srf-deep": lambda: _four_stage((4, 4, 28, 4), 64, 2),
    "focalnet-b-srf-deep": lambda: _four_stage((4, 4, 28, 4), 96, 2),
    "focalnet-t16": lambda: _monolithic(192),
    "focalnet-s16": lambda: _monolithic(384),
    "focalnet-b16": lambda: _monolithic(768),
    "micro": lambda: ModelConfig(depths=(1, 1), dims=(16, 32), focal_levels=(2, 2),
                                 focal_kernels=(3, 3), num_classes=3, input_mean=0.5, input_std=0.25),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# layers


def _weight(rng, shape, dtype):
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    return trunc_normal(rng, shape).astype(dtype)


def _linear_flops(n, cin, cout, bias=True):
    return n * cin * cout + (n * cout if bias else 0)


@dataclass
class _Ctx:
    train: bool = False
    rng: np.random.Generator | None = None
    capture: bool = False


class PatchEmbed:
    """Strided convolution followed by layer norm."""

    def __init__(self, prefix, cin, cout, kernel, stride, padding):
        self.prefix, self.cin, self.cout = prefix, cin, cout
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def init(self, rng, dtype):
        p, k = self.prefix, self.kernel
        return {
            f"{p}proj.weight": _weight(rng, (k, k, self.cin, self.cout), dtype),
            f"{p}proj.bias": np.zeros(self.cout, dtype=dtype),
            f"{p}norm.weight": np.ones(self.cout, dtype=dtype),
            f"{p}norm.bias": np.zeros(self.cout, dtype=dtype),
        }

    def out_hw(self, H, W):
        return ((H + 2 * self.padding - self.kernel) // self.stride + 1,
                (W + 2 * self.padding - self.kernel) // self.stride + 1)

    def forward(self, P, x, ctx):
        p = self.prefix
        y, c_conv = conv2d_forward(x, P[f"{p}proj.weight"], P[f"{p}proj.bias"], self.stride, self.padding)
        out, c_norm = layer_norm_forward(y, P[f"{p}norm.weight"], P[f"{p}norm.bias"])
        return out, (c_conv, c_norm), None

    def backward(self, P, dy, cache):
        p = self.prefix
        c_conv, c_norm = cache
        dy, dg, db = layer_norm_backward(dy, c_norm)
        dx, dw, dcb = conv2d_backward(dy, c_conv)
        return dx, {f"{p}proj.weight": dw, f"{p}proj.bias": dcb,
                    f"{p}norm.weight": dg, f"{p}norm.bias": db}

    def flops(self, B, H, W):
        Ho, Wo = self.out_hw(H, W)
        n = B * Ho * Wo
        return _linear_flops(n, self.kernel * self.kernel * self.cin, self.cout) + 5 * n * self.cout, (Ho, Wo)


class FocalMixer:
    def __init__(self, prefix, cfg: FocalModConfig):
        self.prefix, self.cfg = prefix, cfg

    def params(self, P) -> FocalModulationParams:
        return FocalModulationParams.from_named(P, self.prefix)

    def init(self, rng, dtype):
        return init_params(self.cfg, rng, dtype, zeros=rng is None).named(self.prefix)

    def forward(self, P, x, ctx):
        y, cache, trace = modulation_forward(self.params(P), self.cfg, x, capture=ctx.capture,
                                             train=ctx.train, rng=ctx.rng)
        return y, cache, trace

    def backward(self, P, dy, cache):
        dx, grads = modulation_backward(dy, cache)
        return dx, {self.prefix + k: v for k, v in grads.items()}

    def core_count(self, P) -> int:
        return self.params(P).core_count()

    def flops(self, B, H, W):
        return modulation_flops(self.cfg, B, H, W), (H, W)


def modulation_flops(cfg: FocalModConfig, B: int, H: int, W: int, include_out: bool = True) -> int:
    """Analytic FLOPs of one modulation forward, matching the kernel tallies."""
    n, C = B * H * W, cfg.dim
    f = _linear_flops(n, C, 2 * C + cfg.gate_width)
    for k in cfg.kernel_sizes:
        if cfg.aggregator is Aggregator.DWCONV:
            f += n * C * k * k + n * C + n * C
        else:
            f += n * C * k * k
    if cfg.use_global_pool:
        f += n * C + (B * C if cfg.aggregator is Aggregator.DWCONV else 0)
    f += 2 * n * C * cfg.n_aggregated
    f += _linear_flops(n, C, C) + n * C
    if include_out:
        f += _linear_flops(n, C, C)
    return f


class DWConvMixer:
    """Depth-wise ConvNet token mixer: pj_out(q(GeLU(h(z^L)))) with z^0 = pj_in(x)."""

    def __init__(self, prefix, cfg: FocalModConfig):
        self.prefix, self.cfg = prefix, cfg

    def init(self, rng, dtype):
        p, C = self.prefix, self.cfg.dim
        out = {f"{p}pj_in.weight": _weight(rng, (C, C), dtype),
               f"{p}pj_in.bias": np.zeros(C, dtype=dtype)}
        for i, k in enumerate(self.cfg.kernel_sizes):
            out[f"{p}hc.{i}.weight"] = _weight(rng, (k, k, C), dtype)
            out[f"{p}hc.{i}.bias"] = np.zeros(C, dtype=dtype)
        for name in ("pj_cxt", "q", "pj_out"):
            out[f"{p}{name}.weight"] = _weight(rng, (C, C), dtype)
            out[f"{p}{name}.bias"] = np.zeros(C, dtype=dtype)
        return out

    def forward(self, P, x, ctx):
        p = self.prefix
        z, c_in = linear_forward(x, P[f"{p}pj_in.weight"], P[f"{p}pj_in.bias"])
        levels = []
        for i in range(self.cfg.levels):
            a, c_conv = dwconv2d_forward(z, P[f"{p}hc.{i}.weight"], P[f"{p}hc.{i}.bias"], self.cfg.pad)
            z, c_act = gelu_forward(a)
            levels.append((c_conv, c_act))
        h, c_h = linear_forward(z, P[f"{p}pj_cxt.weight"], P[f"{p}pj_cxt.bias"])
        a, c_a = gelu_forward(h)
        q, c_q = linear_forward(a, P[f"{p}q.weight"], P[f"{p}q.bias"])
        out, c_out = linear_forward(q, P[f"{p}pj_out.weight"], P[f"{p}pj_out.bias"])
        return out, (c_in, levels, c_h, c_a, c_q, c_out), None

    def backward(self, P, dy, cache):
        p = self.prefix
        c_in, levels, c_h, c_a, c_q, c_out = cache
        g = {}
        dy, g[f"{p}pj_out.weight"], g[f"{p}pj_out.bias"] = linear_backward(dy, c_out)
        dy, g[f"{p}q.weight"], g[f"{p}q.bias"] = linear_backward(dy, c_q)
        dy = gelu_backward(dy, c_a)
        dy, g[f"{p}pj_cxt.weight"], g[f"{p}pj_cxt.bias"] = linear_backward(dy, c_h)
        for i in reversed(range(len(levels))):
            c_conv, c_act = levels[i]
            dy = gelu_backward(dy, c_act)
            dy, g[f"{p}hc.{i}.weight"], g[f"{p}hc.{i}.bias"] = dwconv2d_backward(dy, c_conv)
        dx, g[f"{p}pj_in.weight"], g[f"{p}pj_in.bias"] = linear_backward(dy, c_in)
        return dx, g

    def core_count(self, P) -> int:
        p = self.prefix
        names = ["pj_in", "pj_cxt", "q"] + [f"hc.{i}" for i in range(self.cfg.levels)]
        return int(sum(P[f"{p}{n}.weight"].size for n in names))

    def flops(self, B, H, W):
        n, C = B * H * W, self.cfg.dim
        f = _linear_flops(n, C, C) * 4 + n * C
        for k in self.cfg.kernel_sizes:
            f += n * C * k * k + 2 * n * C
        return f, (H, W)


class FocalBlock:
    """Pre-norm residual block: x + mixer(LN x), then + MLP(LN x)."""

    def __init__(self, prefix, dim, mixer, mlp_ratio=4.0, drop_prob=0.0, layer_scale_init=None):
        self.prefix, self.dim, self.mixer = prefix, dim, mixer
        self.hidden = int(dim * mlp_ratio)
        self.drop_prob = drop_prob
        self.layer_scale_init = layer_scale_init

    def init(self, rng, dtype):
        p, C, Hd = self.prefix, self.dim, self.hidden
        out = {f"{p}norm1.weight": np.ones(C, dtype=dtype), f"{p}norm1.bias": np.zeros(C, dtype=dtype)}
        out.update(self.mixer.init(rng, dtype))
        out.update({
            f"{p}norm2.weight": np.ones(C, dtype=dtype), f"{p}norm2.bias": np.zeros(C, dtype=dtype),
            f"{p}mlp.fc1.weight": _weight(rng, (C, Hd), dtype),
            f"{p}mlp.fc1.bias": np.zeros(Hd, dtype=dtype),
            f"{p}mlp.fc2.weight": _weight(rng, (Hd, C), dtype),
            f"{p}mlp.fc2.bias": np.zeros(C, dtype=dtype),
        })
        if self.layer_scale_init is not None:
            out[f"{p}gamma1"] = np.full(C, self.layer_scale_init, dtype=dtype)
            out[f"{p}gamma2"] = np.full(C, self.layer_scale_init, dtype=dtype)
        return out

    def _drop_mask(self, x, ctx):
        if not ctx.train or self.drop_prob == 0.0:
            return None
        if ctx.rng is None:
            raise ConfigError("stochastic depth in train mode needs an rng")
        keep = 1.0 - self.drop_prob
        return ((ctx.rng.random((x.shape[0], 1, 1, 1)) < keep) / keep).astype(x.dtype)

    def _branch(self, P, x, y, gamma_name, ctx):
        gamma = P.get(f"{self.prefix}{gamma_name}")
        scaled = y * gamma if gamma is not None else y
        mask = self._drop_mask(x, ctx)
        if mask is not None:
            scaled = scaled * mask
        tally("residual", x.size * (2 if gamma is not None else 1))
        return x + scaled, (y, gamma, mask)

    @staticmethod
    def _branch_back(dout, cache):
        y, gamma, mask = cache
        d = dout * mask if mask is not None else dout
        dgamma = None
        if gamma is not None:
            dgamma = (d * y).sum(axis=(0, 1, 2))
            d = d * gamma
        return d, dgamma

    def forward(self, P, x, ctx):
        p = self.prefix
        n1, c_n1 = layer_norm_forward(x, P[f"{p}norm1.weight"], P[f"{p}norm1.bias"])
        mix, c_mix, trace = self.mixer.forward(P, n1, ctx)
        x1, c_b1 = self._branch(P, x, mix, "gamma1", ctx)
        n2, c_n2 = layer_norm_forward(x1, P[f"{p}norm2.weight"], P[f"{p}norm2.bias"])
        h, c_fc1 = linear_forward(n2, P[f"{p}mlp.fc1.weight"], P[f"{p}mlp.fc1.bias"])
        a, c_act = gelu_forward(h)
        o, c_fc2 = linear_forward(a, P[f"{p}mlp.fc2.weight"], P[f"{p}mlp.fc2.bias"])
        out, c_b2 = self._branch(P, x1, o, "gamma2", ctx)
        return out, (c_n1, c_mix, c_b1, c_n2, c_fc1, c_act, c_fc2, c_b2), trace

    def backward(self, P, dout, cache):
        p = self.prefix
        c_n1, c_mix, c_b1, c_n2, c_fc1, c_act, c_fc2, c_b2 = cache
        g = {}
        do, dg2 = self._branch_back(dout, c_b2)
        da, g[f"{p}mlp.fc2.weight"], g[f"{p}mlp.fc2.bias"] = linear_backward(do, c_fc2)
        dh = gelu_backward(da, c_act)
        dn2, g[f"{p}mlp.fc1.weight"], g[f"{p}mlp.fc1.bias"] = linear_backward(dh, c_fc1)
        dx1, g[f"{p}norm2.weight"], g[f"{p}norm2.bias"] = layer_norm_backward(dn2, c_n2)
        dx1 = dx1 + dout
        dmix, dg1 = self._branch_back(dx1, c_b1)
        dn1, gm = self.mixer.backward(P, dmix, c_mix)
        g.update(gm)
        dx, g[f"{p}norm1.weight"], g[f"{p}norm1.bias"] = layer_norm_backward(dn1, c_n1)
        if dg1 is not None:
            g[f"{p}gamma1"], g[f"{p}gamma2"] = dg1, dg2
        return dx + dx1, g

    def flops(self, B, H, W):
        n, C = B * H * W, self.dim
        mix, _ = self.mixer.flops(B, H, W)
        res = 2 * n * C * (2 if self.layer_scale_init is not None else 1)
        mlp = _linear_flops(n, C, self.hidden) + n * self.hidden + _linear_flops(n, self.hidden, C)
        return 10 * n * C + mix + mlp + res, (H, W)


class Head:
    """Layer norm, global average pool, linear classifier."""

    def __init__(self, prefix, dim, num_classes):
        self.prefix, self.dim, self.num_classes = prefix, dim, num_classes

    def init(self, rng, dtype):
        p = self.prefix
        return {f"{p}norm.weight": np.ones(self.dim, dtype=dtype),
                f"{p}norm.bias": np.zeros(self.dim, dtype=dtype),
                f"{p}fc.weight": _weight(rng, (self.dim, self.num_classes), dtype),
                f"{p}fc.bias": np.zeros(self.num_classes, dtype=dtype)}

    def features(self, P, x):
        p = self.prefix
        n, c_n = layer_norm_forward(x, P[f"{p}norm.weight"], P[f"{p}norm.bias"])
        pooled, c_pool = global_avg_pool_forward(n)
        return pooled.reshape(x.shape[0], self.dim), (c_n, c_pool)

    def forward(self, P, x, ctx):
        p = self.prefix
        feats, (c_n, c_pool) = self.features(P, x)
        logits, c_fc = linear_forward(feats, P[f"{p}fc.weight"], P[f"{p}fc.bias"])
        return logits, (c_n, c_pool, c_fc), None

    def backward(self, P, dlogits, cache):
        p = self.prefix
        c_n, c_pool, c_fc = cache
        g = {}
        dfeat, g[f"{p}fc.weight"], g[f"{p}fc.bias"] = linear_backward(dlogits, c_fc)
        dn = global_avg_pool_backward(dfeat.reshape(-1, 1, 1, self.dim), c_pool)
        dx, g[f"{p}norm.weight"], g[f"{p}norm.bias"] = layer_norm_backward(dn, c_n)
        return dx, g

    def flops(self, B, H, W):
        n = B * H * W
        return 5 * n * self.dim + n * self.dim + _linear_flops(B, self.dim, self.num_classes), (1, 1)


# ---------------------------------------------------------------------------
# model


class Model:
    def __init__(self, config: ModelConfig, layers, params, stage_of):
        self.config = config
        self.layers = layers
        self.params = params
        self.stage_of = stage_of  # layer index -> stage index (head: -1)

    # --- inspection helpers
    @property
    def blocks(self):
        return [l for l in self.layers if isinstance(l, FocalBlock)]

    def num_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def core_params(self) -> list[int]:
        """Per-block core parameter counts of the token mixers."""
        return [b.mixer.core_count(self.params) for b in self.blocks]

    def check_input(self, images):
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[-1] != self.config.in_chans:
            raise DimensionError(
                f"expected images of shape (B, H, W, {self.config.in_chans}), got {images.shape}")
        m = self.config.total_stride
        H, W = images.shape[1:3]
        if H % m or W % m:
            raise InputError(f"image size {H}x{W} must be a multiple of {m}")
        return images

    def _standardize(self, images):
        dtype = next(iter(self.params.values())).dtype
        x = np.ascontiguousarray(images, dtype=dtype)
        c = self.config
        if c.input_mean != 0.0 or c.input_std != 1.0:
            x = (x - dtype.type(c.input_mean)) / dtype.type(c.input_std)
        return x

    # --- forward/backward
    def forward_cached(self, images, train=False, rng=None, capture=False):
        images = self.check_input(images)
        x = self._standardize(images)
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        ctx = _Ctx(train=train, rng=rng, capture=capture)
        caches, traces = [], []
        for layer in self.layers:
            x, cache, trace = layer.forward(self.params, x, ctx)
            caches.append(cache)
            if capture and isinstance(layer, FocalBlock):
                traces.append((layer.prefix.rstrip("."), trace))
        return x, caches, traces

    def forward(self, images, train=False, rng=None, capture=False):
        logits, _, traces = self.forward_cached(images, train=train, rng=rng, capture=capture)
        return (logits, traces) if capture else logits

    def backward(self, dlogits, caches):
        grads = {}
        dx = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dx, g = layer.backward(self.params, dx, cache)
            grads.update(g)
        return {k: grads[k] for k in self.params}, dx

    def loss_and_grads(self, images, labels, label_smoothing=0.0, train=False, rng=None):
        logits, caches, _ = self.forward_cached(images, train=train, rng=rng)
        loss, dlogits = softmax_cross_entropy(logits, labels, label_smoothing)
        grads, _ = self.backward(dlogits, caches)
        return loss, grads, logits

    def features(self, images):
        """Pooled, normalized features before the classifier."""
        x = self._standardize(self.check_input(images))
        ctx = _Ctx()
        for layer in self.layers[:-1]:
            x, _, _ = layer.forward(self.params, x, ctx)
        return self.layers[-1].features(self.params, x)[0]

    def flops(self, H: int, W: int | None = None, B: int = 1) -> dict:
        """Analytic forward FLOPs, per layer and per stage."""
        W = H if W is None else W
        per_layer, per_stage = [], {}
        h, w = H, W
        for i, layer in enumerate(self.layers):
            f, (h, w) = layer.flops(B, h, w)
            per_layer.append((getattr(layer, "prefix", str(i)), f))
            s = self.stage_of[i]
            per_stage[s] = per_stage.get(s, 0) + f
        return {"total": sum(f for _, f in per_layer), "layers": per_layer, "stages": per_stage}

    def stage_resolutions(self, H: int, W: int | None = None) -> list[tuple[int, int]]:
        W = H if W is None else W
        out, h, w = [], H, W
        for i, layer in enumerate(self.layers):
            if isinstance(layer, PatchEmbed):
                h, w = layer.out_hw(h, w)
                out.append((h, w))
        return out

    # --- persistence
    def save(self, path) -> Path:
        path = Path(path)
        fmt1.save(path, self.params.values())
        manifest = path.with_suffix(path.suffix + ".manifest")
        lines = [f"param {n} {'x'.join(map(str, a.shape))} {a.dtype.name}" for n, a in self.params.items()]
        lines += [f"{k}={v}" for k, v in self.config.to_kv().items()]
        manifest.write_text("\n".join(lines) + "\n")
        return manifest

    @classmethod
    def load(cls, path) -> "Model":
        path = Path(path)
        manifest = path.with_suffix(path.suffix + ".manifest")
        try:
            text = manifest.read_text()
        except OSError as exc:
            raise InputError(f"cannot read checkpoint manifest {manifest}: {exc}") from exc
        names, kv = [], {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("param "):
                names.append(line.split()[1])
            else:
                k, _, v = line.partition("=")
                kv[k.strip()] = v
        model = build_model(ModelConfig.from_kv(kv), seed=0)
        arrays = fmt1.load(path)
        if names != list(model.params) or len(arrays) != len(names):
            raise InputError(f"checkpoint {path} does not match its config")
        for name, arr in zip(names, arrays):
            if arr.shape != model.params[name].shape:
                raise InputError(f"{name}: checkpoint shape {arr.shape} != model shape {model.params[name].shape}")
            model.params[name] = arr.copy()
        return model


def _make_mixer(prefix, config: ModelConfig, stage: int):
    mcfg = config.modulation_config(stage)
    if config.variant is Variant.DW_CONVNET:
        return DWConvMixer(prefix, mcfg)
    return FocalMixer(prefix, mcfg)


def build_model(config: ModelConfig, seed: int | None = 0, dtype=np.float64) -> Model:
    """Build and initialize a model; ``seed=None`` gives all-zero weights (shape-only use)."""
    rng = None if seed is None else np.random.default_rng(seed)
    layers, stage_of = [], []
    n_blocks = sum(config.depths)
    rates = np.linspace(0.0, config.drop_path, n_blocks) if n_blocks else []
    bi = 0
    cin = config.in_chans
    for s in range(config.n_stages):
        k, st, pd = config.stem if s == 0 else config.downsample
        layers.append(PatchEmbed(f"stages.{s}.embed.", cin, config.dims[s], k, st, pd))
        stage_of.append(s)
        for d in range(config.depths[s]):
            prefix = f"stages.{s}.blocks.{d}."
            mixer = _make_mixer(prefix + "mixer.", config, s)
            layers.append(FocalBlock(prefix, config.dims[s], mixer, config.mlp_ratio,
                                     float(rates[bi]), config.layer_scale_init))
            stage_of.append(s)
            bi += 1
        cin = config.dims[s]
    layers.append(Head("head.", config.dims[-1], config.num_classes))
    stage_of.append(-1)
    params = {}
    for layer in layers:
        params.update(layer.init(rng, dtype))
    return Model(config, layers, params, stage_of)


def build_variant(kind: Variant | str, base_config: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    kind = Variant(kind) if not isinstance(kind, Variant) else kind
    return build_model(replace(base_config, variant=kind), seed=seed, dtype=dtype)


def model_forward(model: Model, images, train_mode: bool = False, rng=None):
    return model.forward(images, train=train_mode, rng=rng)
