"""Parameter, FLOP and receptive-field accounting.

FLOP convention: one multiply-accumulate is one FLOP and every other
elementwise operation is one FLOP per element. The closed-form modulation cost
``HW * (3C^2 + C(2L+3) + C * sum k^2)`` leaves out the output projection and
bias adds, so counted numbers are reported alongside it both with and without
those terms.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .backbone import FocalMixer, Model, modulation_flops
from .exceptions import ConfigError
from .modulation import FocalModConfig, closed_form_core_params, init_params, modulation_forward
from .tensor import count_flops, linear_forward

FLOP_CONVENTION = "1 multiply-accumulate = 1 FLOP; other elementwise ops = 1 FLOP per element"


def receptive_field(kernel_sizes) -> list[int]:
    """Cumulative receptive field of a stack of stride-1 convolutions, one entry per level."""
    out, r = [], 1
    for k in kernel_sizes:
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"kernel sizes must be odd and positive, got {tuple(kernel_sizes)}")
        r += k - 1
        out.append(r)
    return out


def closed_form_flops(C: int, L: int, kernels, H: int, W: int) -> int:
    return H * W * (3 * C * C + C * (2 * L + 3) + C * sum(k * k for k in kernels))


def swin_window_flops(C: int, window: int, H: int, W: int) -> int:
    """Window self-attention cost HW * (3C^2 + 2Cw^2), for side-by-side reports."""
    return H * W * (3 * C * C + 2 * C * window * window)


@dataclass
class StageCost:
    name: str
    params: int
    flops: int
    receptive_field: int


@dataclass
class CostReport:
    params_formula: int
    params_enumerated_core: int
    params_total: int
    flops_formula: int
    flops_counted: int
    flops_counted_core: int
    receptive_fields: list[int]
    stages: list[StageCost] = field(default_factory=list)

    def table(self) -> str:
        rows = [("name", "params", "flops", "rL")]
        rows += [(s.name, f"{s.params:,}", f"{s.flops:,}", str(s.receptive_field)) for s in self.stages]
        rows.append(("total", f"{self.params_total:,}", f"{self.flops_counted:,}",
                     ",".join(map(str, self.receptive_fields))))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = [f"# FLOPs: {FLOP_CONVENTION}"]
        for r in rows:
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        lines.append(f"core params: formula {self.params_formula:,} / enumerated {self.params_enumerated_core:,}")
        lines.append(f"modulation FLOPs: formula {self.flops_formula:,} / counted core {self.flops_counted_core:,}")
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "params", "flops", "rL"])
        for s in self.stages:
            w.writerow([s.name, s.params, s.flops, s.receptive_field])
        w.writerow(["total", self.params_total, self.flops_counted, self.receptive_fields[-1] if self.receptive_fields else 0])
        return buf.getvalue()


def modulation_cost(C: int, L: int, kernels=None, H: int = 1, W: int = 1, method: str = "analytic",
                    **switches) -> CostReport:
    """Closed-form and counted cost of one modulation module on an H x W map.

    ``method="trace"`` runs a forward pass under the FLOP tally instead of using
    the analytic per-layer counts.
    """
    cfg = FocalModConfig(dim=C, levels=L, kernel_sizes=kernels, **switches)
    params = init_params(cfg, 0, zeros=True)
    if method == "trace":
        x = np.zeros((1, H, W, C))
        with count_flops() as full:
            modulation_forward(params, cfg, x)
        with count_flops() as out_only:
            linear_forward(np.zeros((1, H, W, C)), params.pj_out_w, params.pj_out_b)
        counted, core = full.total, full.total - out_only.total
    elif method == "analytic":
        counted = modulation_flops(cfg, 1, H, W)
        core = modulation_flops(cfg, 1, H, W, include_out=False)
    else:
        raise ConfigError(f"unknown counting method {method!r}")
    rf = receptive_field(cfg.kernel_sizes)
    return CostReport(
        params_formula=closed_form_core_params(C, L, cfg.kernel_sizes),
        params_enumerated_core=params.core_count(),
        params_total=params.total_count(),
        flops_formula=closed_form_flops(C, L, cfg.kernel_sizes, H, W),
        flops_counted=counted,
        flops_counted_core=core,
        receptive_fields=rf,
        stages=[StageCost("modulation", params.total_count(), counted, rf[-1] if rf else 1)],
    )


def model_summary(model: Model, resolution: int = 224) -> CostReport:
    """Totals plus per-stage breakdown for one forward pass at ``resolution``."""
    cfg = model.config
    fl = model.flops(resolution)
    res = model.stage_resolutions(resolution)
    stage_params: dict[int, int] = {}
    for name, arr in model.params.items():
        s = int(name.split(".")[1]) if name.startswith("stages.") else -1
        stage_params[s] = stage_params.get(s, 0) + arr.size
    formula = core = f_formula = f_core = 0
    for i, layer in enumerate(model.layers):
        mixer = getattr(layer, "mixer", None)
        if isinstance(mixer, FocalMixer):
            mc = mixer.cfg
            h, w = res[model.stage_of[i]]
            formula += closed_form_core_params(mc.dim, mc.levels, mc.kernel_sizes)
            f_formula += closed_form_flops(mc.dim, mc.levels, mc.kernel_sizes, h, w)
            f_core += modulation_flops(mc, 1, h, w, include_out=False)
        if mixer is not None:
            core += mixer.core_count(model.params)
    stages = []
    rfs = []
    for s in range(cfg.n_stages):
        rf = receptive_field(cfg.modulation_config(s).kernel_sizes)
        top = rf[-1] if rf else 1
        rfs.append(top)
        stages.append(StageCost(f"stage{s}", int(stage_params.get(s, 0)), int(fl["stages"].get(s, 0)), top))
    stages.append(StageCost("head", int(stage_params.get(-1, 0)), int(fl["stages"].get(-1, 0)), 0))
    return CostReport(
        params_formula=formula,
        params_enumerated_core=core,
        params_total=model.num_params(),
        flops_formula=f_formula,
        flops_counted=int(fl["total"]),
        flops_counted_core=f_core,
        receptive_fields=rfs,
        stages=stages,
    )
