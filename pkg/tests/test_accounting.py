import csv
import io

import numpy as np
import pytest

from focalmod.accounting import (
    closed_form_flops,
    model_summary,
    modulation_cost,
    receptive_field,
    swin_window_flops,
)
from focalmod.backbone import Variant, build_model, preset
from focalmod.exceptions import ConfigError
from focalmod.modulation import FocalModConfig, init_params, modulation_forward
from focalmod.tensor import count_flops


def test_receptive_field_examples():
    assert receptive_field((3, 5)) == [3, 7]
    assert receptive_field((3, 5, 7))[-1] == 13
    assert receptive_field((13,)) == [13]
    assert receptive_field((3, 5, 7, 9))[-1] == 21
    assert receptive_field(()) == []
    with pytest.raises(ConfigError):
        receptive_field((4,))


def test_receptive_field_strictly_increasing():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ks = list(rng.integers(1, 8, size=rng.integers(1, 6)) * 2 + 1)
        rf = receptive_field(ks)
        assert all(b > a for a, b in zip(rf, rf[1:]))
        i = int(rng.integers(len(ks)))
        bigger = list(ks)
        bigger[i] += 2
        assert all(b >= a for a, b in zip(rf, receptive_field(bigger)))
        assert receptive_field(bigger)[-1] > rf[-1]


def test_modulation_cost_examples():
    r = modulation_cost(96, 2, (3, 5))
    assert r.params_formula == r.params_enumerated_core == 31_200
    assert modulation_cost(1, 0, H=1, W=1).flops_formula == 6
    assert swin_window_flops(96, 7, 56, 56) == 56 * 56 * (3 * 96 * 96 + 2 * 96 * 49)


@pytest.mark.parametrize("C", [8, 64, 96, 128])
@pytest.mark.parametrize("L", [0, 1, 2, 3, 4])
def test_formula_equals_enumerated(C, L):
    r = modulation_cost(C, L)
    assert r.params_formula == r.params_enumerated_core


@pytest.mark.parametrize("C", [64, 96, 128])
@pytest.mark.parametrize("L", [0, 1, 2, 3, 4])
def test_counted_core_flops_within_ten_percent(C, L):
    r = modulation_cost(C, L, H=14, W=14)
    assert abs(r.flops_counted_core - r.flops_formula) <= 0.10 * r.flops_formula
    # the output projection is the documented gap between full and core counts
    assert r.flops_counted - r.flops_counted_core == 14 * 14 * (C * C + C)


@pytest.mark.parametrize("switches", [{}, {"use_gating": False}, {"top_only": True}, {"use_global_pool": False},
                                      {"additive_modulation": True}])
def test_analytic_count_matches_kernel_tally(switches):
    for L in (0, 2, 3):
        a = modulation_cost(16, L, H=6, W=5, **switches)
        t = modulation_cost(16, L, H=6, W=5, method="trace", **switches)
        assert a.flops_counted == t.flops_counted
        assert a.flops_counted_core == t.flops_counted_core


def test_model_flops_match_kernel_tally():
    for cfg in [preset("micro"), preset("micro", variant=Variant.DW_CONVNET),
                preset("micro", variant=Variant.POOL_AGG), preset("micro", layer_scale_init=0.1),
                preset("micro", overlapped=True)]:
        m = build_model(cfg, seed=0)
        with count_flops() as c:
            m.forward(np.zeros((1, 32, 32, 3)))
        assert m.flops(32)["total"] == c.total, cfg


def test_unknown_method():
    with pytest.raises(ConfigError):
        modulation_cost(8, 1, method="magic")


def test_lrf_minus_srf_core_delta():
    for C in (96, 128):
        srf = modulation_cost(C, 2)
        lrf = modulation_cost(C, 3)
        assert lrf.params_enumerated_core - srf.params_enumerated_core == C * (1 + 7 * 7)


def test_model_summary_matches_manifest_walk(tmp_path):
    m = build_model(preset("micro"), seed=0)
    manifest = m.save(tmp_path / "m.fmt")
    total = 0
    for line in manifest.read_text().splitlines():
        if line.startswith("param "):
            total += int(np.prod([int(v) for v in line.split()[2].split("x")]))
    r = model_summary(m, 64)
    assert r.params_total == total
    assert sum(s.params for s in r.stages) == total
    assert sum(s.flops for s in r.stages) == r.flops_counted
    assert r.params_formula == r.params_enumerated_core
    assert r.receptive_fields == [7, 7]


def test_report_table_and_csv():
    r = model_summary(build_model(preset("micro"), seed=None), 64)
    table = r.table()
    assert table.splitlines()[0].startswith("# FLOPs: 1 multiply-accumulate = 1 FLOP")
    assert "stage0" in table and "total" in table
    rows = list(csv.reader(io.StringIO(r.csv())))
    assert rows[0] == ["name", "params", "flops", "rL"]
    assert rows[-1][0] == "total" and int(rows[-1][1]) == r.params_total


def test_closed_form_flops_expression():
    assert closed_form_flops(96, 2, (3, 5), 56, 56) == 56 * 56 * (3 * 96 ** 2 + 96 * 7 + 96 * 34)


def test_trace_counts_only_inside_context():
    cfg = FocalModConfig(dim=4, levels=1)
    p = init_params(cfg)
    with count_flops() as outer:
        with count_flops() as inner:
            modulation_forward(p, cfg, np.zeros((1, 3, 3, 4)))
        modulation_forward(p, cfg, np.zeros((1, 3, 3, 4)))
    assert outer.total == 2 * inner.total
