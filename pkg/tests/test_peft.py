import numpy as np
import pytest

from aat.errors import ConfigurationError
from aat.peft import (
    BUDGET_ORDER,
    PeftStrategy,
    apply_freeze,
    build_for_strategy,
    count_params,
    parameter_groups,
    read_reports_csv,
    trainable_mask,
    write_reports_csv,
)
from aat.transformer import PRESETS, ModelConfig, build_model, param_inventory

HAND = ModelConfig(depth=1, embed_dim=4, num_heads=1, mlp_ratio=2, patch_size=2, input_time=4, input_freq=4,
                   num_classes=2, adapter_dim=2, prompt_length=2)

# Hand tally for HAND:
#   patch embed 4*4 + 4 = 20; cls 4; pos (4 + 1) * 4 = 20
#   block: ln1 8, qkv 4*12 + 12 = 60, proj 16 + 4 = 20, ln2 8, fc1 4*8 + 8 = 40, fc2 8*4 + 4 = 36 -> 172
#   head: 2*4 + 4*2 + 2 = 18
#   adapter: 4*2 + 2 + 2*4 + 4 = 22; prompts 2 * 4 = 8
HAND_COUNTS = {
    "Full": (234, 234),
    "Head": (18, 234),
    "Partial": (190, 234),
    "Prompt": (26, 242),
    "AatM": (40, 256),
    "AatMS": (62, 278),
    "Joint": (70, 286),
}


@pytest.mark.parametrize("strategy", sorted(HAND_COUNTS))
def test_counts_match_hand_inventory(strategy):
    report = count_params(HAND, strategy)
    assert (report.tuning_params, report.total_params) == HAND_COUNTS[strategy]
    assert report.percentage == pytest.approx(100.0 * HAND_COUNTS[strategy][0] / HAND_COUNTS[strategy][1])


@pytest.mark.parametrize("strategy", sorted(HAND_COUNTS))
def test_built_model_counts_agree_with_analytic(strategy):
    model = build_for_strategy(HAND, strategy)
    assert count_params(model, strategy) == count_params(HAND, strategy)


def test_head_mask_size():
    for cfg in (HAND, PRESETS["tiny"], PRESETS["ast-base"]):
        d, c = cfg.embed_dim, cfg.num_classes
        assert count_params(cfg, "Head").tuning_params == 2 * d + d * c + c


def test_partial_takes_last_half_of_twelve():
    cfg = PRESETS["tiny"].replace(depth=12)
    mask = trainable_mask(param_inventory(cfg), "Partial")
    blocks = {int(n.split(".")[1]) for n in mask if n.startswith("blocks.")}
    assert blocks == set(range(6, 12))


def test_partial_odd_depth_takes_later_ceil_half():
    cfg = PRESETS["tiny"].replace(depth=5)
    mask = trainable_mask(param_inventory(cfg), "Partial")
    assert {int(n.split(".")[1]) for n in mask if n.startswith("blocks.")} == {2, 3, 4}


def test_mask_set_algebra():
    model = build_model(PRESETS["tiny"], variant="aat-ms", with_prompts=True)
    names = set(model.named_parameters())
    spatial = {n for n in names if ".spatial_adapter." in n}
    prompts = {n for n in names if n.startswith("prompts.")}
    assert trainable_mask(model, "AatMS") == trainable_mask(model, "AatM") | spatial
    assert trainable_mask(model, "Joint") == trainable_mask(model, "AatMS") | trainable_mask(model, "Prompt")
    assert trainable_mask(model, "Prompt") - trainable_mask(model, "Head") == prompts
    assert trainable_mask(model, "Full") == names


def test_strategy_requirements():
    with pytest.raises(ConfigurationError):
        count_params(PRESETS["tiny"].replace(prompt_length=0), "Prompt")
    with pytest.raises(ConfigurationError):
        count_params(PRESETS["tiny"].replace(adapter_dim=0), "AatM")
    with pytest.raises(ConfigurationError):
        trainable_mask(build_model(PRESETS["tiny"]), "AatMS")
    with pytest.raises(ConfigurationError):
        PeftStrategy.parse("LoRA")


def test_apply_freeze():
    model = build_for_strategy(PRESETS["tiny"], "Full")
    apply_freeze(model, trainable_mask(model, "Full"))
    assert all(p.requires_grad for p in model.named_parameters().values())
    mask = trainable_mask(model, "Head")
    apply_freeze(model, mask)
    first = {n: p.requires_grad for n, p in model.named_parameters().items()}
    apply_freeze(model, mask)
    assert first == {n: p.requires_grad for n, p in model.named_parameters().items()}
    assert {n for n, flag in first.items() if flag} == mask
    with pytest.raises(ConfigurationError):
        apply_freeze(model, {"no.such.param"})


def test_base_budget_ordering_and_no_added_totals():
    base = PRESETS["ast-base"]
    counts = [count_params(base, s).tuning_params for s in BUDGET_ORDER]
    assert counts == sorted(counts) and len(set(counts)) == len(counts)
    full = count_params(base, "Full").tuning_params
    for s in ("Full", "Head", "Partial"):
        assert count_params(base, s).total_params == full


def test_joint_is_adapters_plus_prompts_minus_shared_head():
    for cfg in (HAND, PRESETS["ast-base"]):
        joint = count_params(cfg, "Joint").tuning_params
        parts = count_params(cfg, "AatMS").tuning_params + count_params(cfg, "Prompt").tuning_params
        assert joint == parts - count_params(cfg, "Head").tuning_params


def test_count_params_is_pure():
    assert count_params(PRESETS["ast-base"], "AatMS") == count_params(PRESETS["ast-base"], "AatMS")


def test_groups_partition_total():
    model = build_for_strategy(HAND, "Joint")
    groups = parameter_groups(model)
    assert sum(groups.values()) == count_params(model, "Joint").total_params
    assert groups == {"embedding": 44, "blocks.0": 216, "prompts": 8, "head": 18}


def test_reports_csv_round_trip():
    reports = [count_params(PRESETS["ast-base"], s) for s in PeftStrategy]
    text = write_reports_csv(reports)
    assert text.splitlines()[0] == "strategy,tuning_params,total_params,percentage"
    back = read_reports_csv(text)
    assert [(r.strategy, r.tuning_params, r.total_params) for r in back] == \
        [(r.strategy, r.tuning_params, r.total_params) for r in reports]
    assert all(abs(a.percentage - b.percentage) < 1e-4 for a, b in zip(back, reports))
