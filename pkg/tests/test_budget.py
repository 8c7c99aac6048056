import pytest

from tinyssl import budget
from tinyssl.model import HeadSpec, full_spec


def test_head_counts_exact():
    assert budget.head_params("capacity_proportional_linear") == 327_680
    assert budget.align_params() == 98_304
    assert budget.head_params("capacity_proportional_linear") + budget.align_params() == 425_984
    assert budget.head_params("seed_mlp") == 3_145_728
    assert budget.head_params("none") == 0
    with pytest.raises(ValueError):
        budget.head_params("huge")


def test_counts_agree_with_built_networks():
    spec = full_spec()
    lin = budget.count_params(spec, "training_only",
                              HeadSpec(head_kind="capacity_proportional_linear", stage_proj=False))
    assert lin == 327_680 + 98_304
    seed = budget.count_params(spec, "training_only", HeadSpec(head_kind="seed_mlp", stage_proj=False))
    assert seed == 3_145_728 + 98_304
    assert budget.count_params(spec, "deploy") == 396_128
    assert budget.count_params(spec, "all") == budget.count_params(spec, "deploy") + budget.count_params(
        spec, "training_only")


def test_ratios_and_memory():
    assert f"{budget.head_ratio('seed_mlp', 386_662):.1f}" == "8.1"
    assert f"{budget.head_ratio('capacity_proportional_linear', 386_662):.1f}" == "0.8"
    assert budget.optimizer_state_bytes(3_145_728) == 25_165_824
    assert budget.optimizer_state_bytes(3_145_728, buffers=1) == 12_582_912
    assert budget.int8_report(386_662)["flash_kib"] == pytest.approx(377.6, rel=1e-3)
    with pytest.raises(ValueError):
        budget.head_ratio("seed_mlp", 0)


def test_breakdown_and_verdicts():
    b = budget.backbone_breakdown(full_spec())
    assert b["total"] == 396_128 == b["conv_weights"] + b["bn_affine"]
    assert abs(b["total"] - 396_000) / 396_000 < 0.05
    tiny = budget.Platform("tiny", 100, 1)
    r = budget.int8_report(386_662, platforms=(tiny, budget.Platform("big", 1000, 100000)), sram_need_bytes=10 ** 6)
    assert [v["flash"] for v in r["verdicts"]] == ["exceeds", "fits"]
    assert [v["sram"] for v in r["verdicts"]] == ["exceeds", "fits"]
    assert budget.parse_platform("x:1:2") == budget.Platform("x", 1.0, 2.0)
    with pytest.raises(ValueError):
        budget.parse_platform("x:1")


def test_report_surfaces_the_gap():
    rows = budget.report_rows(budget.budget_report())
    named = {r[0]: r for r in rows}
    assert named["backbone_params"][1] == 396_128 and named["reference_deploy_params"][1] == 386_662
    assert "+9466" in named["reference_deploy_params"][2]
    assert named["ratio[seed_mlp]"][1] == "8.1x" and named["ratio[capacity_proportional_linear]"][1] == "0.8x"
    assert "12,582,912" in named["adamw_state_bytes[seed_mlp]"][2]
    csv_text = budget.format_csv(rows)
    assert csv_text.startswith("quantity,value,note\n") and len(csv_text.splitlines()) == len(rows) + 1
