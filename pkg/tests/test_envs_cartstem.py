import math
from dataclasses import replace

import numpy as np
import pytest

from cgrl.envs.cartstem import (CartStemEnv, CartStemParams, LEFT, FREE, RIGHT,
                                contact_label, effective_half_width, tip_position)
from cgrl.envs.base import EpisodeFinishedError

from _oracles import contact_by_inequalities

D_UNIT = 0.5 * math.sqrt(8.0)  # obstacles with l_x = l_z = 2


class TestContactOracle:
    def test_free_window(self):
        # window is (-4 + d, 4 - d) = (-2.58579, 2.58579)
        assert contact_label(0.0, -4.0, 4.0, 2.0, 2.0) == FREE

    def test_boundary_is_contact(self):
        assert contact_label(-4.0 + D_UNIT, -4.0, 4.0, 2.0, 2.0) == LEFT
        assert contact_label(4.0 - D_UNIT, -4.0, 4.0, 2.0, 2.0) == RIGHT

    def test_right_contact(self):
        assert contact_label(2.6, -4.0, 4.0, 2.0, 2.0) == RIGHT

    def test_matches_direct_inequalities(self):
        rng = np.random.default_rng(11)
        n = 100_000
        x_left = rng.uniform(-6.0, 0.0, n)
        x_right = x_left + rng.uniform(2.5, 8.0, n)
        l_x = rng.uniform(0.5, 3.0, n)
        l_z = rng.uniform(0.5, 3.0, n)
        x_cart = rng.uniform(-8.0, 8.0, n)
        mismatches = sum(
            contact_label(x_cart[i], x_left[i], x_right[i], l_x[i], l_z[i])
            != contact_by_inequalities(x_cart[i], x_left[i], x_right[i], l_x[i], l_z[i])
            for i in range(n))
        assert mismatches == 0


class TestTip:
    def test_free_identity(self):
        assert tip_position(1.0, -4.0, 4.0, 2.0, 2.0) == 1.0

    def test_left_lever(self):
        # pivot p = -4 + d = -2.58579; tip = p + 0.5*(p - (-4)) = -1.87868
        tip = tip_position(-4.0, -4.0, 4.0, 2.0, 2.0)
        assert tip == pytest.approx(-1.87868, abs=1e-4)
        assert tip == pytest.approx(-4.0 + 1.5 * D_UNIT)

    def test_continuity_at_pivots(self):
        p_left = -4.0 + D_UNIT
        p_right = 4.0 - D_UNIT
        for pivot in (p_left, p_right):
            for eps in (-1e-9, 0.0, 1e-9):
                assert abs(tip_position(pivot + eps, -4.0, 4.0, 2.0, 2.0) - pivot) <= 1e-6

    def test_monotone_slopes(self):
        p_left = -4.0 + D_UNIT
        p_right = 4.0 - D_UNIT
        xs = np.linspace(-6.0, p_left - 1e-6, 200)
        tips = [tip_position(x, -4.0, 4.0, 2.0, 2.0) for x in xs]
        slopes = np.diff(tips) / np.diff(xs)
        assert np.allclose(slopes, -0.5)
        xs = np.linspace(p_left + 1e-6, p_right - 1e-6, 200)
        slopes = np.diff([tip_position(x, -4.0, 4.0, 2.0, 2.0) for x in xs]) / np.diff(xs)
        assert np.allclose(slopes, 1.0)
        xs = np.linspace(p_right + 1e-6, 6.0, 200)
        slopes = np.diff([tip_position(x, -4.0, 4.0, 2.0, 2.0) for x in xs]) / np.diff(xs)
        assert np.allclose(slopes, -0.5)

    def test_opposite_side_reach(self):
        # with sampler-scale geometry (pivots at +-0.75), pressing the right
        # obstacle is the only way to put the tip beyond the left pivot, and
        # vice versa; a wide gap would make such goals unreachable entirely
        p_left, p_right = -0.75, 0.75
        x_left, x_right = p_left - D_UNIT, p_right + D_UNIT
        tips_right_contact = [tip_position(x, x_left, x_right, 2.0, 2.0)
                              for x in np.linspace(p_right, 6.0, 50)]
        assert min(tips_right_contact) < p_left - 0.6
        tips_left_contact = [tip_position(x, x_left, x_right, 2.0, 2.0)
                             for x in np.linspace(-6.0, p_left, 50)]
        assert max(tips_left_contact) > p_right + 0.6


class TestStep:
    def _env(self, **kw):
        env = CartStemEnv(**kw)
        env.reset(np.random.default_rng(0))
        return env

    def test_target_beyond_speed_limit_clamps(self):
        # commanding rail position +5 from the centre moves the cart by
        # exactly v_max
        env = self._env()
        env.state = replace(env.state, x_cart=0.0)
        span = env.params.x_max - env.params.x_min
        a = 2.0 * (5.0 - env.params.x_min) / span - 1.0
        res = env.step(a)
        assert res.next_state.x_cart == pytest.approx(env.params.v_max)

    def test_near_target_reached_exactly(self):
        env = self._env()
        s = env.state
        tgt = max(env.params.x_min + 0.1, s.x_cart - 0.4)
        span = env.params.x_max - env.params.x_min
        a = 2.0 * (tgt - env.params.x_min) / span - 1.0
        res = env.step(a)
        assert res.next_state.x_cart == pytest.approx(tgt)

    def test_encoding_current_position_is_noop(self):
        env = self._env()
        s = env.state
        span = env.params.x_max - env.params.x_min
        a = 2.0 * (s.x_cart - env.params.x_min) / span - 1.0
        res = env.step(a)
        assert res.next_state.x_cart == pytest.approx(s.x_cart)
        assert res.next_state.x_tips == pytest.approx(s.x_tips)
        assert res.reward == pytest.approx(-abs(s.x_tips - s.x_goal))

    def test_rail_bounds_hold(self):
        env = self._env()
        for _ in range(30):
            res = env.step(-1.0)
        assert res.next_state.x_cart == pytest.approx(env.params.x_min)

    def test_nonfinite_action_rejected(self):
        env = self._env()
        with pytest.raises(ValueError):
            env.step(float("nan"))
        with pytest.raises(ValueError):
            env.step(float("inf"))

    def test_horizon_exactly_30(self):
        env = self._env()
        rng = np.random.default_rng(1)
        for i in range(30):
            res = env.step(rng.uniform(-1, 1))
            assert res.done is (i == 29)
        with pytest.raises(EpisodeFinishedError):
            env.step(0.0)

    def test_labels_never_jump_across_window(self):
        # one step of at most v_max cannot go from left contact straight to
        # right contact, because the free window is wider than v_max
        env = CartStemEnv()
        rng = np.random.default_rng(5)
        for _ in range(50):
            env.reset(rng)
            prev = env.contact_label(env.state)
            for _ in range(30):
                res = env.step(rng.uniform(-1, 1))
                assert {prev, res.config_label} != {LEFT, RIGHT}
                prev = res.config_label

    def test_reward_uses_new_tip(self):
        env = self._env()
        res = env.step(1.0)
        assert res.reward == pytest.approx(-abs(res.next_state.x_tips - res.next_state.x_goal))


class TestReset:
    def test_same_seed_identical(self):
        a = CartStemEnv().reset(np.random.default_rng(123))
        b = CartStemEnv().reset(np.random.default_rng(123))
        assert a == b

    def test_invariant_sweep(self):
        env = CartStemEnv()
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            s = env.reset(rng)
            pr = env.params
            assert pr.x_min <= s.x_cart <= pr.x_max
            assert s.x_left + s.l_x / 2 < s.x_right - s.l_x / 2
            assert s.x_tips == pytest.approx(env.tip_of(s.x_cart, s))
            obs = env.observe(s)
            assert obs.tolist() == [s.x_cart, s.x_tips, s.x_left, s.x_right,
                                    s.l_x, s.l_z, s.x_goal]
            p_left, p_right = env.pivots(s)
            assert p_right - p_left > pr.v_max  # no label jumps possible

    def test_contact_goal_fraction(self):
        env = CartStemEnv()
        rng = np.random.default_rng(9)
        n = 10_000
        hits = sum(env.goal_requires_contact(env.reset(rng)) for _ in range(n))
        assert 0.45 <= hits / n <= 0.65

    def test_contact_goals_always_reachable(self):
        # every beyond-pivot goal has an exactly-attainable cart position
        env = CartStemEnv(goal_contact_prob=1.0)
        rng = np.random.default_rng(13)
        kappa = env.params.kappa
        for _ in range(2_000):
            s = env.reset(rng)
            p_left, p_right = env.pivots(s)
            assert env.goal_requires_contact(s)
            if s.x_goal < p_left:
                x_star = p_right - (s.x_goal - p_right) / kappa
                assert p_right <= x_star <= env.params.x_max
            else:
                assert s.x_goal > p_right
                x_star = p_left - (s.x_goal - p_left) / kappa
                assert env.params.x_min <= x_star <= p_left
            assert env.tip_of(x_star, s) == pytest.approx(s.x_goal)

    def test_free_goals_inside_window(self):
        env = CartStemEnv(goal_contact_prob=0.0)
        rng = np.random.default_rng(17)
        for _ in range(2_000):
            s = env.reset(rng)
            p_left, p_right = env.pivots(s)
            assert p_left < s.x_goal < p_right

    def test_eval_params_override(self):
        env = CartStemEnv(goal_contact_prob=1.0, horizon=12)
        assert env.params.goal_contact_prob == 1.0
        assert env.horizon == 12


class TestKappa:
    def test_default_lever_ratio(self):
        assert CartStemParams().kappa == pytest.approx(0.5)

    def test_custom_geometry(self):
        assert CartStemParams(z_contact=5.0, z_tip=20.0).kappa == pytest.approx(3.0)
