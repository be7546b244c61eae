import math

import pytest
from hypothesis import given, settings, strategies as st

from nmsparse import cost
from nmsparse.model import ModelConfig, build_model
from nmsparse.nm import NmPattern
from nmsparse.schedule import PhaseSpec, Recipe, RecipeSchedule, phase_at

LARGE = ModelConfig.large()
DESK = ModelConfig()


def test_params_match_built_model():
    for cfg in (DESK, ModelConfig(enc_layers=3, dec_layers=1, d_model=32, d_ff=96, heads=2, vocab=40)):
        m = build_model(cfg)
        report = cost.count_costs(cfg, vocab=cfg.vocab, scope="model")
        assert report.total_params == sum(p.data.size for p in m.params.values())
        ff = sum(m.params[e.param].data.size for e in m.registry)
        assert report.ff_weight_params == ff


def test_large_shares():
    block = cost.count_costs(LARGE)
    assert block.ff_param_share == pytest.approx(0.6664, abs=1e-4)
    assert block.ff_flops_share == pytest.approx(0.6531, abs=1e-4)
    whole = cost.count_costs(LARGE, scope="model")
    assert whole.model_ff_param_share == pytest.approx(block.model_ff_param_share)
    assert whole.ff_param_share < block.ff_param_share


def test_large_compression_1_16():
    report = cost.count_costs(LARGE)
    comp = cost.compression(report, NmPattern(1, 16))
    assert comp.inference_flops_reduction_fraction == report.ff_flops_share * 15 / 16
    assert comp.size_reduction_fraction == pytest.approx(0.6191, abs=1e-4)
    assert comp.size_reduction_no_index_fraction > comp.size_reduction_fraction
    assert comp.overhead_bits_per_group == 4


def test_packed_bits_per_group():
    assert cost.packed_bits_per_group(NmPattern(1, 16)) == 36
    assert cost.packed_bits_per_group(NmPattern(2, 4)) == 68


def test_degenerate_and_length_independence():
    # only the second FF bias survives d_ff = 0
    assert cost.count_costs(ModelConfig(d_ff=0)).ff_param_share < 1e-2
    assert cost.count_costs(ModelConfig(d_ff=0)).ff_flops_share == 0.0
    a = cost.count_costs(LARGE, seq_len=128)
    b = cost.count_costs(LARGE, seq_len=256)
    assert a.params == b.params and b.total_flops > a.total_flops


def test_n_equals_m_is_no_reduction():
    comp = cost.compression(cost.count_costs(DESK, vocab=32), NmPattern(4, 4), index_bits_per_kept=0)
    assert comp.inference_flops_reduction_fraction == 0.0
    assert comp.size_reduction_fraction == 0.0


@given(st.sampled_from([2, 4, 8, 16, 32]), st.data(), st.sampled_from(["block", "model"]))
@settings(max_examples=60, deadline=None)
def test_identity_and_monotonicity(m, data, scope):
    report = cost.count_costs(LARGE, scope=scope)
    n = data.draw(st.integers(1, m - 1))
    p = NmPattern(n, m)
    c = cost.compression(report, p)
    assert math.isclose(c.inference_flops_reduction_fraction / (1 - p.density()), report.ff_flops_share, rel_tol=1e-12)
    if n > 1:
        sparser = cost.compression(report, NmPattern(n - 1, m))
        assert sparser.size_reduction_fraction > c.size_reduction_fraction
        assert sparser.inference_flops_reduction_fraction > c.inference_flops_reduction_fraction


def sched(recipe, n=2000, d=200, s=200, target="1:16", period=100, **kw):
    return RecipeSchedule(recipe, n, NmPattern.parse(target), d, s, update_period=period, **kw)


@pytest.mark.parametrize("recipe", list(Recipe))
@pytest.mark.parametrize("period", [1, 7, 100, 1000])
def test_closed_form_matches_enumeration(recipe, period):
    report = cost.count_costs(DESK, seq_len=17, vocab=32, scope="model")
    s = sched(recipe, n=1530, d=170, s=150, period=period, warmup_steps=30 if recipe is Recipe.SR_STE else 0)
    fast, fast_total = cost.avg_training_flops(s, report, batch_size=4)
    slow, slow_total = cost.avg_training_flops_by_enumeration(s, report, batch_size=4)
    assert fast == pytest.approx(slow, rel=1e-12)
    assert fast_total == pytest.approx(slow_total, rel=1e-12)


def test_dense_average_is_three_forward():
    report = cost.count_costs(LARGE)
    avg, _ = cost.avg_training_flops(sched("Dense"), report)
    assert avg == 3 * report.total_flops


def test_decayed_steps_cost_dense():
    report = cost.count_costs(LARGE)
    s = sched("MaskDecay")
    dense = cost.step_flops(phase_at(0, s), s.recipe, report)
    assert cost.step_flops(phase_at(250, s), s.recipe, report) == dense


def test_training_flops_ordering():
    report = cost.count_costs(LARGE)
    avg = {r: cost.avg_training_flops(sched(r, n=200_000, d=20_000, s=20_000, period=1000), report)[0] for r in Recipe}
    assert avg[Recipe.DENSE_SPARSE] < avg[Recipe.MASK_DECAY] <= avg[Recipe.DENSE]
    assert avg[Recipe.SR_STE] > avg[Recipe.DENSE_SPARSE]
    assert avg[Recipe.STRUCTURE_DECAY] < avg[Recipe.DENSE]


def test_refresh_cost_scales_with_group_width():
    report = cost.count_costs(DESK, vocab=32)
    narrow = cost.refresh_flops(report, PhaseSpec("decay", NmPattern(2, 4), refresh_mask=True))
    wide = cost.refresh_flops(report, PhaseSpec("decay", NmPattern(1, 16), refresh_mask=True))
    flat = cost.refresh_flops(report, PhaseSpec("decay", NmPattern(1, 16), refresh_mask=True, structured=False))
    assert narrow < wide < flat
