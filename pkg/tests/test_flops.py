import itertools
import time
from dataclasses import replace

import pytest

from transnext.config import VARIANTS
from transnext.convglu import conv_glu_flops, glu_hidden
from transnext.flops import (aa_flops, attention_delta, count_flops, count_params, mhsa_flops,
                             pfa_flops)


@pytest.mark.parametrize("H,C,k,P", list(itertools.product([7, 14, 56], [24, 96], [1, 3, 5], [1, 49])))
def test_aa_minus_pfa_is_positional_term(H, C, k, P):
    assert attention_delta(H, H, C, k, P) == H * H * k * k * C
    assert aa_flops(H, H, C, k, P) - pfa_flops(H, H, C, k, P) == H * H * k * k * C


def test_pfa_formula():
    H, W, C, k, P = 56, 56, 48, 3, 49
    assert pfa_flops(H, W, C, k, P) == (5 * H * W * C ** 2 + 2 * P * C ** 2 + 2 * H * W * P * C
                                        + 2 * H * W * k * k * C)
    assert mhsa_flops(49, 384) == 4 * 49 * 384 ** 2 + 2 * 49 ** 2 * 384


def test_report_structure():
    rep = count_flops(VARIANTS["micro"], 224)
    assert [r.module for r in rep.rows][:4] == ["stage0.embed", "stage0.mixer", "stage0.mlp",
                                                "stage0.norm"]
    assert rep.total("flop") > rep.total("mac")
    assert sum(rep.stage_totals().values()) == rep.total()
    with pytest.raises(ValueError):
        rep.total("bops")


def test_mlp_rows_use_realised_hidden_width():
    rep = count_flops(VARIANTS["micro"], 224)
    row = next(r for r in rep.rows if r.module == "stage0.mlp")
    assert row.macs == 2 * conv_glu_flops(48, 56, 56, 8, 3, hidden=glu_hidden(48, 8))


def test_linear_mode_is_linear_in_pixels():
    cfg = VARIANTS["micro"]
    ratio = count_flops(cfg, 448, mode="linear").total() / count_flops(cfg, 224, mode="linear").total()
    assert 3.9 <= ratio <= 4.1


def test_normal_mode_grows_faster_than_linear():
    cfg = VARIANTS["micro"]
    lin = count_flops(cfg, 448, mode="linear").total()
    norm = count_flops(cfg, 448, mode="normal").total()
    assert norm > lin


def test_modes_coincide_at_training_resolution():
    cfg = VARIANTS["tiny"]
    assert count_flops(cfg, 224, mode="normal").total() == count_flops(cfg, 224, mode="linear").total()


def test_disabling_qe_and_tokens_reduces_cost():
    cfg = VARIANTS["micro"]
    off = replace(cfg, query_embedding=False, positional_tokens=False)
    assert count_params(off) < count_params(cfg)
    assert count_flops(off, 224).total() < count_flops(cfg, 224).total()


def test_accountant_is_fast():
    t0 = time.perf_counter()
    for cfg in VARIANTS.values():
        count_flops(cfg, 224)
    assert time.perf_counter() - t0 < 1.0
