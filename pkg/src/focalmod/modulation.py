"""Focal modulation token mixer.

The operator follows the fused-projection layout:

    pj_in   : Linear(C, 2C + G)   -> query q, context z0, gates (G channels)
    hc[l]   : depth-wise conv k_l + GeLU, l = 1..L   (hierarchical context)
    global  : GeLU(spatial mean of the top level)
    m       : sum over levels of gate_l * z_l
    pj_cxt  : 1x1 conv C -> C   (modulator M = pj_cxt(m))
    y       : pj_out(q * M)

``G`` is the number of aggregated levels (L + 1 by default) or 0 when gating
is disabled, in which case every gate is the constant 1.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erf

from .exceptions import ConfigError, DimensionError
from .tensor import (
    PadMode,
    avg_pool_same_backward,
    avg_pool_same_forward,
    dwconv2d_backward,
    dwconv2d_forward,
    gelu_backward,
    gelu_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    linear_backward,
    linear_forward,
    tally,
)


class Aggregator(enum.Enum):
    DWCONV = "dwconv"
    AVGPOOL = "avgpool"


def default_kernels(levels: int, start: int = 3) -> tuple[int, ...]:
    """Kernel schedule growing by 2 per level."""
    return tuple(start + 2 * i for i in range(levels))


@dataclass(frozen=True)
class FocalModConfig:
    dim: int
    levels: int = 2
    kernel_sizes: tuple[int, ...] | None = None
    additive_modulation: bool = False
    use_global_pool: bool = True
    top_only: bool = False
    use_gating: bool = True
    dropout: float = 0.0
    pad: PadMode = PadMode.ZERO_SAME
    aggregator: Aggregator = Aggregator.DWCONV

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.levels < 0:
            raise ConfigError(f"levels must be >= 0, got {self.levels}")
        if self.kernel_sizes is None:
            object.__setattr__(self, "kernel_sizes", default_kernels(self.levels))
        ks = tuple(int(k) for k in self.kernel_sizes)
        object.__setattr__(self, "kernel_sizes", ks)
        if len(ks) != self.levels:
            raise ConfigError(f"expected {self.levels} kernel sizes, got {ks}")
        for k in ks:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {ks}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @classmethod
    def from_start_kernel(cls, dim: int, levels: int, start: int = 3, **kw) -> "FocalModConfig":
        return cls(dim=dim, levels=levels, kernel_sizes=default_kernels(levels, start), **kw)

    @property
    def local_levels(self) -> list[int]:
        """Indices (0-based) of the local levels that enter the weighted sum."""
        if self.top_only:
            return [self.levels - 1] if self.levels else []
        return list(range(self.levels))

    @property
    def n_aggregated(self) -> int:
        return len(self.local_levels) + int(self.use_global_pool)

    @property
    def gate_width(self) -> int:
        return self.n_aggregated if self.use_gating else 0


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) truncated to +-bound*std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


@dataclass
class FocalModulationParams:
    pj_in_w: np.ndarray
    pj_in_b: np.ndarray
    hc_w: list = field(default_factory=list)
    hc_b: list = field(default_factory=list)
    pj_cxt_w: np.ndarray = None
    pj_cxt_b: np.ndarray = None
    pj_out_w: np.ndarray = None
    pj_out_b: np.ndarray = None

    def named(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}pj_in.weight": self.pj_in_w, f"{prefix}pj_in.bias": self.pj_in_b}
        for i, (w, b) in enumerate(zip(self.hc_w, self.hc_b)):
            out[f"{prefix}hc.{i}.weight"] = w
            out[f"{prefix}hc.{i}.bias"] = b
        out[f"{prefix}pj_cxt.weight"] = self.pj_cxt_w
        out[f"{prefix}pj_cxt.bias"] = self.pj_cxt_b
        out[f"{prefix}pj_out.weight"] = self.pj_out_w
        out[f"{prefix}pj_out.bias"] = self.pj_out_b
        return out

    @classmethod
    def from_named(cls, named: dict, prefix: str = "") -> "FocalModulationParams":
        n_hc = sum(1 for k in named if k.startswith(f"{prefix}hc.") and k.endswith(".weight"))
        return cls(
            pj_in_w=named[f"{prefix}pj_in.weight"],
            pj_in_b=named[f"{prefix}pj_in.bias"],
            hc_w=[named[f"{prefix}hc.{i}.weight"] for i in range(n_hc)],
            hc_b=[named[f"{prefix}hc.{i}.bias"] for i in range(n_hc)],
            pj_cxt_w=named[f"{prefix}pj_cxt.weight"],
            pj_cxt_b=named[f"{prefix}pj_cxt.bias"],
            pj_out_w=named[f"{prefix}pj_out.weight"],
            pj_out_b=named[f"{prefix}pj_out.bias"],
        )

    def core_count(self) -> int:
        """Weights of the query/context/gate projection, depth-wise kernels and h.

        Biases and the output projection are excluded.
        """
        return int(self.pj_in_w.size + sum(w.size for w in self.hc_w) + self.pj_cxt_w.size)

    def total_count(self) -> int:
        return int(sum(a.size for a in self.named().values()))


@dataclass
class ModulationTrace:
    Z_levels: list
    G: np.ndarray
    M: np.ndarray
    Z_out: np.ndarray


def init_params(config: FocalModConfig, seed: int | np.random.Generator = 0,
                dtype=np.float64, zeros: bool = False) -> FocalModulationParams:
    """Truncated-normal (std 0.02) weights and zero biases, deterministic per seed.

    ``zeros=True`` skips sampling and allocates zero weights; used when only
    shapes matter (cost accounting of large models).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    C = config.dim
    learn_kernels = config.aggregator is Aggregator.DWCONV

    def w(*shape):
        if zeros:
            return np.zeros(shape, dtype=dtype)
        return trunc_normal(rng, shape).astype(dtype)

    return FocalModulationParams(
        pj_in_w=w(C, 2 * C + config.gate_width),
        pj_in_b=np.zeros(2 * C + config.gate_width, dtype=dtype),
        hc_w=[w(k, k, C) for k in config.kernel_sizes] if learn_kernels else [],
        hc_b=[np.zeros(C, dtype=dtype) for _ in config.kernel_sizes] if learn_kernels else [],
        pj_cxt_w=w(C, C),
        pj_cxt_b=np.zeros(C, dtype=dtype),
        pj_out_w=w(C, C),
        pj_out_b=np.zeros(C, dtype=dtype),
    )


def closed_form_core_params(C: int, L: int, kernels) -> int:
    return 3 * C * C + C * (L + 1) + C * sum(k * k for k in kernels)


# ---------------------------------------------------------------------------
# forward / backward


def _contextualize(params, config, z, caches):
    levels = []
    for i, k in enumerate(config.kernel_sizes):
        if config.aggregator is Aggregator.DWCONV:
            a, c_conv = dwconv2d_forward(z, params.hc_w[i], params.hc_b[i], config.pad)
            z, c_act = gelu_forward(a)
            caches.append((c_conv, c_act))
        else:
            z, c_pool = avg_pool_same_forward(z, k, config.pad)
            caches.append(c_pool)
        levels.append(z)
    return levels


def _global_level(config, z_top):
    pooled, c_gap = global_avg_pool_forward(z_top)
    if config.aggregator is Aggregator.DWCONV:
        zg, c_act = gelu_forward(pooled)
    else:
        zg, c_act = pooled, None
    return zg, (c_gap, c_act)


def hierarchical_contextualize(params: FocalModulationParams, config: FocalModConfig, Z0):
    """Return the L local context maps followed by the pooled global level."""
    if Z0.shape[-1] != config.dim:
        raise DimensionError(f"expected {config.dim} channels, got shape {Z0.shape}")
    levels = _contextualize(params, config, Z0, [])
    zg, _ = _global_level(config, levels[-1] if levels else Z0)
    return levels + [zg]


def gated_aggregate(Z_levels, G):
    """Weighted sum of context levels with one scalar gate per position and level."""
    if G.shape[-1] != len(Z_levels):
        raise DimensionError(f"{len(Z_levels)} levels but gate width {G.shape[-1]}")
    out = np.zeros(G.shape[:-1] + (Z_levels[0].shape[-1],), dtype=G.dtype)
    for i, z in enumerate(Z_levels):
        out = out + z * G[..., i:i + 1]
    return out


def modulation_forward(params: FocalModulationParams, config: FocalModConfig, x,
                       capture: bool = False, train: bool = False, rng=None):
    """Forward pass returning ``(y, cache, trace)``; trace is None unless captured."""
    C = config.dim
    if x.ndim != 4 or x.shape[-1] != C:
        raise DimensionError(f"focal modulation expects (B, H, W, {C}), got shape {x.shape}")
    h, c_in = linear_forward(x, params.pj_in_w, params.pj_in_b)
    q = h[..., :C]
    z0 = h[..., C:2 * C]
    n_agg = config.n_aggregated
    if config.use_gating:
        gates = h[..., 2 * C:2 * C + n_agg]
    else:
        gates = np.ones(x.shape[:-1] + (n_agg,), dtype=x.dtype)

    level_caches: list = []
    levels = _contextualize(params, config, z0, level_caches)

    m = np.zeros_like(z0)
    used = []
    for gi, li in enumerate(config.local_levels):
        m = m + levels[li] * gates[..., gi:gi + 1]
        used.append(levels[li])
    zg = c_glob = None
    if config.use_global_pool:
        zg, c_glob = _global_level(config, levels[-1] if levels else z0)
        m = m + zg * gates[..., n_agg - 1:n_agg]
        used.append(zg)
    tally("aggregate", 2 * m.size * n_agg)

    ctx, c_cxt = linear_forward(m, params.pj_cxt_w, params.pj_cxt_b)
    y = q + ctx if config.additive_modulation else q * ctx
    tally("modulate", y.size)
    out, c_out = linear_forward(y, params.pj_out_w, params.pj_out_b)

    mask = None
    if train and config.dropout > 0.0:
        if rng is None:
            raise ConfigError("dropout in train mode needs an rng")
        keep = 1.0 - config.dropout
        mask = (rng.random(out.shape) < keep).astype(out.dtype) / keep
        out = out * mask

    trace = None
    if capture:
        trace = ModulationTrace(Z_levels=list(levels) + ([zg] if zg is not None else []),
                                G=gates.copy(), M=ctx, Z_out=m)
    cache = (params, config, c_in, q, gates, levels, level_caches, zg, c_glob,
             ctx, c_cxt, c_out, mask, z0.shape)
    return out, cache, trace


def modulation_backward(dout, cache):
    """Backward pass; returns ``(dx, grads)`` with grads keyed like ``params.named()``."""
    (params, config, c_in, q, gates, levels, level_caches, zg, c_glob,
     ctx, c_cxt, c_out, mask, zshape) = cache
    C = config.dim
    n_agg = config.n_aggregated
    if mask is not None:
        dout = dout * mask
    dy, dW_out, db_out = linear_backward(dout, c_out)
    if config.additive_modulation:
        dq, dctx = dy, dy
    else:
        dq, dctx = dy * ctx, dy * q
    dm, dW_cxt, db_cxt = linear_backward(dctx, c_cxt)

    dgates = np.zeros_like(gates)
    dz = np.zeros(zshape, dtype=dout.dtype)
    if config.use_global_pool:
        g = gates[..., n_agg - 1:n_agg]
        dzg = (dm * g).sum(axis=(1, 2), keepdims=True)
        dgates[..., n_agg - 1] = (dm * zg).sum(axis=-1)
        c_gap, c_act = c_glob
        if c_act is not None:
            dzg = gelu_backward(dzg, c_act)
        dz = dz + global_avg_pool_backward(dzg, c_gap)

    gate_of = {li: gi for gi, li in enumerate(config.local_levels)}
    hc_grads: list = [None] * config.levels
    for li in reversed(range(config.levels)):
        if li in gate_of:
            gi = gate_of[li]
            dz = dz + dm * gates[..., gi:gi + 1]
            dgates[..., gi] = (dm * levels[li]).sum(axis=-1)
        if config.aggregator is Aggregator.DWCONV:
            c_conv, c_act = level_caches[li]
            da = gelu_backward(dz, c_act)
            dz, dw, db = dwconv2d_backward(da, c_conv)
            hc_grads[li] = (dw, db)
        else:
            dz = avg_pool_same_backward(dz, level_caches[li])

    parts = [dq, dz]
    if config.use_gating:
        parts.append(dgates)
    dh = np.concatenate(parts, axis=-1)
    dx, dW_in, db_in = linear_backward(dh, c_in)

    grads = {"pj_in.weight": dW_in, "pj_in.bias": db_in}
    if config.aggregator is Aggregator.DWCONV:
        for i, (dw, db) in enumerate(hc_grads):
            grads[f"hc.{i}.weight"] = dw
            grads[f"hc.{i}.bias"] = db
    grads.update({"pj_cxt.weight": dW_cxt, "pj_cxt.bias": db_cxt,
                  "pj_out.weight": dW_out, "pj_out.bias": db_out})
    return dx, grads


def forward(params: FocalModulationParams, config: FocalModConfig, x,
            capture: bool = False, train: bool = False, rng=None):
    """Run the operator; returns ``(y, trace)`` where trace is None unless captured."""
    y, _, trace = modulation_forward(params, config, x, capture=capture, train=train, rng=rng)
    return y, trace


def se_reduction_forward(params: FocalModulationParams, config: FocalModConfig, x):
    """Closed form of the zero-level operator, evaluated without the level loop.

    q(x_i) * h(g(x_i) * GeLU(mean f_z(X))) followed by the output projection.
    The pooled context uses mean(f_z(X)) = f_z(mean X), so it takes a different
    numerical path from :func:`forward`.
    """
    if config.levels != 0:
        raise ConfigError(f"SE reduction needs zero focal levels, got {config.levels}")
    C = config.dim
    Win, bin_ = params.pj_in_w, params.pj_in_b
    q = x @ Win[:, :C] + bin_[:C]
    ctx = np.broadcast_to(params.pj_cxt_b, q.shape)
    if config.use_global_pool:
        xbar = x.mean(axis=(1, 2), keepdims=True)
        zbar = xbar @ Win[:, C:2 * C] + bin_[C:2 * C]
        zbar = 0.5 * zbar * (1.0 + erf(zbar / np.sqrt(2.0)))
        if config.use_gating:
            g = x @ Win[:, 2 * C:2 * C + 1] + bin_[2 * C]
        else:
            g = 1.0
        ctx = (g * zbar) @ params.pj_cxt_w + params.pj_cxt_b
    y = q + ctx if config.additive_modulation else q * ctx
    return y @ params.pj_out_w + params.pj_out_b


def grow_kernels(params: FocalModulationParams, config: FocalModConfig, by: int = 6):
    """Enlarge every depth-wise kernel by ``by`` taps, zero-padding the new entries.

    Returns new ``(params, config)``; the originals are untouched.
    """
    if by < 0 or by % 2:
        raise ConfigError(f"kernel growth must be a non-negative even number, got {by}")
    r = by // 2
    new = FocalModulationParams(**{k: v for k, v in vars(params).items()})
    new.hc_w = [np.pad(w, ((r, r), (r, r), (0, 0))) for w in params.hc_w]
    new.hc_b = [b.copy() for b in params.hc_b]
    cfg = replace(config, kernel_sizes=tuple(k + by for k in config.kernel_sizes))
    return new, cfg
