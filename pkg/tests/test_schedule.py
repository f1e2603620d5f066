import random

import pytest

from cptkit.errors import InvalidParameterError, OutOfRangeError, UnreachableTargetError
from cptkit.schedule import (
    WarmupSpec,
    build_cosine,
    build_wsd,
    extended_pretrain_lr,
    lr_at,
    solve_switch_token,
)

from oracles import bisect_switch_token, cosine_lr

RECIPE = dict(eta_start=4.5e-5, eta_end=4.5e-7, total=int(300e9))


def recipe_schedule():
    return build_cosine(RECIPE["eta_start"], RECIPE["eta_end"], RECIPE["total"])


class TestCosine:
    def test_endpoints_exact(self):
        s = recipe_schedule()
        assert lr_at(s, 0) == pytest.approx(4.5e-5, rel=1e-12)
        assert lr_at(s, RECIPE["total"]) == pytest.approx(4.5e-7, rel=1e-12)

    def test_midpoint_symmetry(self):
        s = recipe_schedule()
        assert lr_at(s, RECIPE["total"] // 2) == pytest.approx(2.2725e-5, rel=1e-12)

    def test_decay_to_zero(self):
        s = build_cosine(4.5e-5, 0.0, int(300e9))
        assert lr_at(s, int(300e9)) == 0.0

    def test_token_out_of_range(self):
        s = recipe_schedule()
        with pytest.raises(OutOfRangeError):
            lr_at(s, RECIPE["total"] + 1)
        with pytest.raises(OutOfRangeError):
            lr_at(s, -1)

    def test_invalid_parameters(self):
        with pytest.raises(InvalidParameterError):
            build_cosine(4.5e-7, 4.5e-5, int(1e9))  # end above start
        with pytest.raises(InvalidParameterError):
            build_cosine(4.5e-5, 4.5e-7, 0)

    def test_monotone_after_warmup(self):
        s = recipe_schedule()
        tokens = [int(t) for t in range(0, RECIPE["total"], RECIPE["total"] // 97)]
        values = [lr_at(s, t) for t in tokens]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestWarmup:
    def test_ramp_midpoint(self):
        # warmup from the pretrained minimum LR up to 1.5x over 16B tokens
        warm = WarmupSpec(start_lr=4.5e-5, target_lr=6.75e-5, tokens=int(16e9))
        s = build_cosine(6.75e-5, 4.5e-7, int(300e9), warmup=warm)
        assert lr_at(s, int(8e9)) == pytest.approx(5.625e-5, rel=1e-12)
        assert lr_at(s, 0) == pytest.approx(4.5e-5, rel=1e-12)
        assert lr_at(s, int(16e9)) == pytest.approx(6.75e-5, rel=1e-12)

    def test_half_warmup_variant(self):
        warm = WarmupSpec(start_lr=2.25e-5, target_lr=4.5e-5, tokens=int(16e9))
        s = build_cosine(4.5e-5, 4.5e-7, int(300e9), warmup=warm)
        assert lr_at(s, 0) == pytest.approx(2.25e-5, rel=1e-12)
        assert lr_at(s, int(300e9)) == pytest.approx(4.5e-7, rel=1e-12)

    def test_warmup_target_must_match_peak(self):
        warm = WarmupSpec(start_lr=0.0, target_lr=5e-5, tokens=int(16e9))
        with pytest.raises(InvalidParameterError):
            build_cosine(4.5e-5, 4.5e-7, int(300e9), warmup=warm)

    def test_warmup_must_end_before_horizon(self):
        warm = WarmupSpec(start_lr=0.0, target_lr=4.5e-5, tokens=int(16e9))
        with pytest.raises(InvalidParameterError):
            build_cosine(4.5e-5, 4.5e-7, int(8e9), warmup=warm)


class TestSwitchSolver:
    def test_fraction_one_is_token_zero(self):
        sol = solve_switch_token(recipe_schedule(), 1.0)
        assert sol.token_index == 0
        assert sol.achieved_lr == pytest.approx(4.5e-5)

    def test_recipe_fifth_matches_bisection_oracle(self):
        sol = solve_switch_token(recipe_schedule(), 1 / 5)
        oracle = bisect_switch_token(4.5e-5, 4.5e-7, int(300e9), 1 / 5)
        assert abs(sol.token_index - oracle) <= 1
        # frozen from the oracle: 213_393_956_596 ~= 0.7113 * T
        assert sol.token_index == 213_393_956_596
        assert sol.token_index / 300e9 == pytest.approx(0.7113, abs=1e-4)

    def test_unreachable_below_minimum(self):
        with pytest.raises(UnreachableTargetError):
            solve_switch_token(recipe_schedule(), 1 / 1000)

    def test_target_equal_to_minimum_lands_on_horizon(self):
        s = build_cosine(4.5e-5, 4.5e-7, int(300e9))
        sol = solve_switch_token(s, 1 / 100)
        assert sol.token_index == int(300e9)

    def test_achieved_lr_within_one_token_step(self):
        s = recipe_schedule()
        for fraction in (0.9, 0.5, 0.2, 0.05, 0.011):
            sol = solve_switch_token(s, fraction)
            step = lr_at(s, sol.token_index - 1) - lr_at(s, sol.token_index)
            assert abs(sol.achieved_lr - sol.target_lr) <= max(1e-12, step)

    def test_inversion_consistency(self):
        s = recipe_schedule()
        for fraction in (0.75, 0.3, 0.1, 0.02):
            sol = solve_switch_token(s, fraction)
            assert lr_at(s, sol.token_index) <= sol.target_lr
            assert lr_at(s, sol.token_index - 1) > sol.target_lr

    def test_random_configs_agree_with_oracle(self):
        rng = random.Random(20240811)
        for _ in range(200):
            eta_start = 10 ** rng.uniform(-6, -3)
            eta_end = eta_start * rng.uniform(0.0, 0.2)
            total = rng.randrange(10_000, 10_000_000_000)
            fraction = rng.uniform(eta_end / eta_start + 1e-6, 1.0)
            s = build_cosine(eta_start, eta_end, total)
            sol = solve_switch_token(s, fraction)
            oracle = bisect_switch_token(eta_start, eta_end, total, fraction)
            assert abs(sol.token_index - oracle) <= 1

    def test_warmup_solver_searches_decay_region(self):
        warm = WarmupSpec(start_lr=0.0, target_lr=4.5e-5, tokens=int(16e9))
        s = build_cosine(4.5e-5, 4.5e-7, int(300e9), warmup=warm)
        sol = solve_switch_token(s, 0.5)
        assert sol.token_index > int(16e9)
        oracle = bisect_switch_token(4.5e-5, 4.5e-7, int(300e9), 0.5, warmup_tokens=int(16e9))
        assert abs(sol.token_index - oracle) <= 1


class TestWsd:
    def test_stable_phase(self):
        s = build_wsd(4.5e-5, 4.5e-7, int(300e9), 0.8, "linear")
        assert lr_at(s, int(100e9)) == pytest.approx(4.5e-5)

    def test_endpoint(self):
        s = build_wsd(4.5e-5, 4.5e-7, int(300e9), 0.8, "linear")
        assert lr_at(s, int(300e9)) == pytest.approx(4.5e-7, rel=1e-12)

    def test_linear_decay_midpoint(self):
        s = build_wsd(4.5e-5, 4.5e-7, int(300e9), 0.8, "linear")
        # affine interpolation oracle halfway into the decay tail
        expected = 4.5e-5 + (4.5e-7 - 4.5e-5) * 0.5
        assert lr_at(s, int(270e9)) == pytest.approx(expected, rel=1e-12)

    def test_cosine_decay_monotone(self):
        s = build_wsd(4.5e-5, 4.5e-7, int(300e9), 0.6, "cosine")
        values = [lr_at(s, t) for t in range(0, int(300e9) + 1, int(3e9))]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_solver_on_wsd(self):
        s = build_wsd(4.5e-5, 4.5e-7, int(300e9), 0.8, "linear")
        sol = solve_switch_token(s, 0.5)
        assert lr_at(s, sol.token_index) <= 0.5 * 4.5e-5 < lr_at(s, sol.token_index - 1)

    def test_invalid_fraction(self):
        with pytest.raises(InvalidParameterError):
            build_wsd(4.5e-5, 4.5e-7, int(300e9), 1.0, "linear")


class TestExtendedPretrainLr:
    def test_endpoints(self):
        pretrain = build_cosine(4.5e-4, 4.5e-5, int(8e12))
        assert extended_pretrain_lr(pretrain, int(8.3e12), int(8.3e12)) == pytest.approx(
            4.5e-5, rel=1e-12
        )
        assert extended_pretrain_lr(pretrain, int(8.3e12), 0) == pytest.approx(4.5e-4, rel=1e-12)

    def test_value_at_original_horizon(self):
        pretrain = build_cosine(4.5e-4, 4.5e-5, int(8e12))
        value = extended_pretrain_lr(pretrain, int(8.3e12), int(8e12))
        # direct closed-form oracle, cross-checked for monotonicity
        expected = cosine_lr(4.5e-4, 4.5e-5, int(8.3e12), int(8e12))
        assert value == pytest.approx(expected, rel=1e-12)
        assert 4.5e-5 < value < 5.5e-5
        before = extended_pretrain_lr(pretrain, int(8.3e12), int(8e12) - 1)
        after = extended_pretrain_lr(pretrain, int(8.3e12), int(8e12) + 1)
        assert before > value > after

    def test_requires_cosine(self):
        wsd = build_wsd(4.5e-4, 4.5e-5, int(8e12))
        with pytest.raises(InvalidParameterError):
            extended_pretrain_lr(wsd, int(8.3e12), 0)

    def test_token_beyond_extension(self):
        pretrain = build_cosine(4.5e-4, 4.5e-5, int(8e12))
        with pytest.raises(OutOfRangeError):
            extended_pretrain_lr(pretrain, int(8.3e12), int(8.4e12))
