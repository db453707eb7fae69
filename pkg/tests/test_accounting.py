from fractions import Fraction

import numpy as np
import pytest

from pam import accounting as A
from pam.backbone import BackboneConfig, PamOptions, PlacementPlan, build_model, parse_placement
from pam.blocks import PAM
from pam.tensor import ConvSpec


def test_mac_examples():
    assert A.count_macs(ConvSpec(64, 64, 3, padding=1), 56, 56) == 115_605_504
    assert A.count_macs(ConvSpec(64, 64, 3, padding=1, groups=64), 56, 56) == 1_806_336
    assert A.count_macs(ConvSpec(1, 1, 1), 1, 1) == 1


@pytest.mark.parametrize("c", [16, 64, 128, 256, 512])
def test_depthwise_ratio(c):
    dw = A.count_macs(ConvSpec(c, c, 3, padding=1, groups=c), 14, 14)
    full = A.count_macs(ConvSpec(c, c, 3, padding=1), 14, 14)
    assert Fraction(dw, full) == Fraction(1, c)


def test_published_deltas_reproduce():
    for name, expected, counted in A.check_published():
        assert counted == expected, name


def test_placement_report_counts_constructed_blocks():
    rep = A.placement_report(parse_placement("PAM12"))
    assert [e.name for e in rep.entries] == ["pam1", "pam2"]
    assert rep.entry("pam1").params == A.count_params(PAM(64))
    assert rep.params == 64 * 23 + 64 * 64 // 8 + 128 * 23 + 128 * 128 // 8


def test_model_report_matches_placement_report():
    cfg = BackboneConfig.toy()
    model = build_model(cfg, parse_placement("PAM13"), initialize=False)
    rep = A.model_report(model)
    alone = A.placement_report(parse_placement("PAM13"), cfg)
    assert rep.params - rep.entry("trunk").params == alone.params
    assert rep.entry("pam3").macs == alone.entry("pam3").macs
    assert rep.params == A.count_params(model)


def test_reference_trunk_is_echoed():
    rep = A.placement_report(PlacementPlan(), include_trunk=True)
    assert rep.entry("trunk").params > 40_000_000


def test_compare_deltas_and_identity():
    base = A.CostReport("baseline", [A.CostEntry("trunk", 100, 1000)])
    pam = A.CostReport("PAM12", base.entries + [A.CostEntry("pam1", 7, 70)])
    rows = A.compare([base, pam])
    assert (rows[1].delta_params, rows[1].delta_macs) == (7, 70)
    same = A.compare([base, A.CostReport("copy", base.entries)])
    assert same[1].delta_params == 0 and same[1].delta_macs == 0


def test_compare_errors():
    rep = A.CostReport("baseline", [])
    with pytest.raises(ValueError):
        A.compare([rep])
    with pytest.raises(ValueError):
        A.compare([A.CostReport("x", []), A.CostReport("y", [])])


def test_dream_to_pam_ratio():
    reps = A.published_reports()
    assert reps["DREAM"].params // reps["PAM12"].params == 75
    assert reps["DREAM"].params / reps["PAM12"].params == pytest.approx(75.3, abs=0.01)


def test_records_round_trip():
    rows = A.compare([A.CostReport("baseline", []), A.published_reports()["PAM34"]])
    parsed = A.parse_records(A.render_records(rows))
    assert parsed[1] == {"name": "PAM34", "params": 58_624, "macs": rows[1].macs,
                         "delta_params": 58_624, "delta_macs": rows[1].macs}


def test_table_layout():
    rows = A.compare([A.CostReport("baseline", []), A.published_reports()["PAM12-C"]])
    text = A.render_table(rows)
    assert text.splitlines()[0].split()[:2] == ["Methods", "Params"]
    assert "+ 372,160" in text


def test_labels():
    assert A.published_reports()["PAM12-C"].name == "PAM12-C"
    assert A.placement_report(PlacementPlan(), options=PamOptions(dream=True)).name == "DREAM"


def test_count_params_ignores_running_stats():
    m = PAM(16)
    buffers = sum(b.size for _, b in m.named_buffers())
    assert buffers > 0
    assert A.count_params(m) == sum(p.data.size for p in m.parameters())
    assert np.all([not n.endswith("running_mean") for n, _ in m.named_parameters()])
