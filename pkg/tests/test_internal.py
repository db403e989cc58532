import numpy as np
import pytest

from cgrl.envs.cartstem import (CartStemEnv, CartStemParams, FREE, LEFT, RIGHT,
                                effective_half_width)
from cgrl.graph import ConfigGraph, UnknownNodeError, cartstem_graph
from cgrl.internal import (InternalAgent, NodeMismatchError, RoutedTransition,
                           convex_action, convex_target, internal_update,
                           route_transitions)
from cgrl.sac import SacAgent, Transition

from _oracles import contact_by_inequalities

PARAMS = CartStemParams()
P = -4.0 + 0.5 * np.sqrt(8.0)  # left pivot for obstacles at -4/+4, size 2


def state_with(x_cart=0.0, x_left=-4.0, x_right=4.0, x_goal=0.0):
    from cgrl.envs.cartstem import CartStemState, tip_position
    tip = tip_position(x_cart, x_left, x_right, 2.0, 2.0)
    return CartStemState(x_cart, tip, x_left, x_right, 2.0, 2.0, x_goal, 0)


class TestConvexTarget:
    def test_free_goal_inside_window(self):
        s = state_with(x_goal=1.0)
        assert convex_target(s, FREE, PARAMS) == 1.0

    def test_free_goal_behind_obstacle_pins_at_edge(self):
        s = state_with(x_goal=-5.0)
        assert convex_target(s, FREE, PARAMS) == pytest.approx(P)

    def test_left_inversion(self):
        s = state_with(x_goal=-1.0)
        x_star = convex_target(s, LEFT, PARAMS)
        assert x_star == pytest.approx(-5.75737, abs=1e-4)
        assert x_star == pytest.approx(P - (-1.0 - P) / 0.5)

    def test_left_unreachable_goal_pins_at_pivot(self):
        # tips in the left-contact region never go below the pivot, so the
        # region-optimal cart position for a goal at -5 is the pivot itself
        s = state_with(x_goal=-5.0)
        x_star = convex_target(s, LEFT, PARAMS)
        assert x_star == pytest.approx(P)
        from cgrl.envs.cartstem import tip_position
        grid = np.arange(PARAMS.x_min, P, 1e-3)
        tips = np.array([tip_position(x, -4.0, 4.0, 2.0, 2.0) for x in grid])
        best_grid = np.abs(tips - s.x_goal).min()
        assert abs(tip_position(x_star, -4.0, 4.0, 2.0, 2.0) - s.x_goal) \
            <= best_grid + 1e-9

    def test_right_symmetry(self):
        s = state_with(x_goal=1.0)
        x_star = convex_target(s, RIGHT, PARAMS)
        p_right = 4.0 - effective_half_width(2.0, 2.0)
        assert x_star == pytest.approx(p_right - (1.0 - p_right) / 0.5)

    def test_unknown_node(self):
        with pytest.raises(UnknownNodeError):
            convex_target(state_with(), 9, PARAMS)

    def test_optimal_against_grid_search(self):
        # the closed form must never be beaten by a 1e-3 grid over the
        # region of the state's own contact node
        env = CartStemEnv()
        rng = np.random.default_rng(23)
        kappa = PARAMS.kappa
        for _ in range(10_000):
            s = env.reset(rng)
            node = env.contact_label(s)
            p_left, p_right = env.pivots(s)
            lo, hi = {LEFT: (PARAMS.x_min, p_left),
                      FREE: (p_left, p_right),
                      RIGHT: (p_right, PARAMS.x_max)}[node]
            x_star = convex_target(s, node, PARAMS)
            assert lo - 1e-12 <= x_star <= hi + 1e-12
            grid = np.arange(lo, hi + 1e-3, 1e-3)
            grid = grid[(grid >= lo) & (grid <= hi)]
            # vectorized lever-model tips, written out independently
            if node == FREE:
                tips = grid
            elif node == LEFT:
                tips = p_left + kappa * (p_left - grid)
            else:
                tips = p_right + kappa * (p_right - grid)
            best_grid = np.abs(tips - s.x_goal).min()
            achieved = abs(env.tip_of(x_star, s) - s.x_goal)
            assert achieved <= best_grid + 1e-9

    def test_action_encoding_reaches_target(self):
        env = CartStemEnv()
        rng = np.random.default_rng(29)
        for _ in range(200):
            s = env.reset(rng)
            node = env.contact_label(s)
            a = convex_action(s, node, env.params)
            assert -1.0 <= float(a[0]) <= 1.0
            x_star = convex_target(s, node, env.params)
            res = env.step(float(a[0]))
            moved = res.next_state.x_cart - s.x_cart
            assert abs(moved) <= env.params.v_max + 1e-12
            # one step strictly reduces the remaining cart distance
            assert abs(res.next_state.x_cart - x_star) <= \
                max(0.0, abs(s.x_cart - x_star) - env.params.v_max) + 1e-9


class TestAgentContainer:
    def test_mismatched_node_rejected(self):
        agent = InternalAgent.convex(LEFT, PARAMS)
        with pytest.raises(NodeMismatchError):
            agent.act(state_with(), None, FREE)

    def test_learned_zero_init_acts_zero(self):
        agent = InternalAgent.learned(FREE, 7, 1, 100,
                                      np.random.default_rng(0), hidden=(16, 16))
        for w in agent.sac.policy.weights:
            w[:] = 0.0
        for b in agent.sac.policy.biases:
            b[:] = 0.0
        a = agent.act(None, np.ones(7), FREE, deterministic=True)
        assert np.all(a == 0.0)

    def test_kind_validation(self):
        with pytest.raises(ValueError):
            InternalAgent(0, "magic")
        with pytest.raises(ValueError):
            InternalAgent(0, "learned")
        with pytest.raises(ValueError):
            InternalAgent(0, "convex")

    def test_store_checks_owner(self):
        agent = InternalAgent.learned(FREE, 2, 1, 10, np.random.default_rng(1),
                                      hidden=(8, 8))
        t = Transition(np.zeros(2), np.zeros(1), 0.0, np.zeros(2), False)
        agent.store(RoutedTransition(t, FREE, LEFT))
        assert agent.buffer.size == 1
        with pytest.raises(NodeMismatchError):
            agent.store(RoutedTransition(t, LEFT, FREE))


class TestRouting:
    def _rollout(self, seed=31):
        env = CartStemEnv()
        rng = np.random.default_rng(seed)
        s = env.reset(rng)
        states = [s]
        labels = [env.contact_label(s)]
        steps = []
        for _ in range(30):
            obs = env.observe(env.state)
            a = rng.uniform(-1, 1)
            res = env.step(a)
            tr = Transition(obs, np.array([a]), res.reward,
                            env.observe(res.next_state), res.done)
            steps.append((tr, labels[-1], res.config_label))
            states.append(res.next_state)
            labels.append(res.config_label)
        return steps, states, labels

    def test_single_node_trajectory(self):
        g = cartstem_graph()
        t = Transition(np.zeros(7), np.zeros(1), 0.0, np.zeros(7), False)
        batches = route_transitions([(t, FREE, FREE)] * 5, g)
        assert list(batches) == [FREE]
        assert len(batches[FREE]) == 5
        assert not any(r.boundary for r in batches[FREE])

    def test_boundary_tagged_once(self):
        g = cartstem_graph()
        t = Transition(np.zeros(7), np.zeros(1), 0.0, np.zeros(7), False)
        steps = [(t, FREE, FREE), (t, FREE, LEFT), (t, LEFT, LEFT)]
        batches = route_transitions(steps, g)
        assert sum(r.boundary for rs in batches.values() for r in rs) == 1
        assert batches[FREE][1].to_node == LEFT

    def test_unknown_label_rejected(self):
        g = cartstem_graph()
        t = Transition(np.zeros(7), np.zeros(1), 0.0, np.zeros(7), False)
        with pytest.raises(UnknownNodeError):
            route_transitions([(t, 5, 5)], g)

    def test_non_neighbour_jump_rejected(self):
        g = cartstem_graph()
        t = Transition(np.zeros(7), np.zeros(1), 0.0, np.zeros(7), False)
        with pytest.raises(ValueError):
            route_transitions([(t, LEFT, RIGHT)], g)

    def test_tags_agree_with_oracle_relabelling(self):
        g = cartstem_graph()
        for seed in range(8):
            steps, states, labels = self._rollout(seed)
            batches = route_transitions(steps, g)
            # recompute labels straight from the inequalities
            direct = [contact_by_inequalities(s.x_cart, s.x_left, s.x_right,
                                              s.l_x, s.l_z) for s in states]
            assert direct == labels
            total = sum(len(rs) for rs in batches.values())
            assert total == len(steps)  # each transition in exactly one batch
            boundary_count = sum(direct[i] != direct[i + 1]
                                 for i in range(len(steps)))
            assert sum(r.boundary for rs in batches.values() for r in rs) \
                == boundary_count


def paired_agents(seed, **kw):
    kw.setdefault("hidden", (16, 16))
    a = InternalAgent.learned(0, 2, 1, 100, np.random.default_rng(seed), **kw)
    b = InternalAgent.learned(0, 2, 1, 100, np.random.default_rng(seed), **kw)
    return a, b


def node_batch(n, to_node, seed=37, done=0.0, obs_dim=2):
    rng = np.random.default_rng(seed)
    return {"s": rng.normal(size=(n, obs_dim)),
            "a": rng.uniform(-1, 1, size=(n, 1)),
            "r": np.zeros(n),
            "s_next": rng.normal(size=(n, obs_dim)),
            "done": np.full(n, done),
            "from_node": np.zeros(n, dtype=np.int64),
            "to_node": np.full(n, to_node, dtype=np.int64)}


class TestInternalUpdate:
    def test_reduction_is_bit_identical(self):
        a, b = paired_agents(41)
        batch = node_batch(32, to_node=0)
        rep = internal_update(a, batch, neighbors={})
        core = {k: batch[k] for k in ("s", "a", "r", "s_next", "done")}
        b.sac.update(core)
        assert rep.boundary_dropped == 0
        for name, arr in a.sac.named_tensors().items():
            assert np.array_equal(arr, b.sac.named_tensors()[name]), name

    def test_neighbour_value_lifts_critic(self):
        # neighbour's target critics promise a high value behind the
        # boundary; with sharing, the agent's critic at pre-boundary states
        # must end up above its no-sharing twin
        shared, plain = paired_agents(43, learning_rate=3e-3)
        neighbour = InternalAgent.learned(1, 2, 1, 100,
                                          np.random.default_rng(44), hidden=(16, 16))
        for net in (neighbour.sac.q1_target, neighbour.sac.q2_target):
            net.biases[-1][:] += 5.0
        batch = node_batch(32, to_node=1)
        core = {k: batch[k] for k in ("s", "a", "r", "s_next", "done")}
        for _ in range(100):
            internal_update(shared, batch, neighbors={1: neighbour})
            plain.sac.update(core)
        sa = np.concatenate([batch["s"], batch["a"]], axis=1)
        q_shared = shared.sac.q1.forward(sa).mean()
        q_plain = plain.sac.q1.forward(sa).mean()
        assert q_shared > q_plain + 0.5

    def test_terminal_boundary_ignores_neighbour(self):
        a, b = paired_agents(47)
        base = InternalAgent.learned(1, 2, 1, 100, np.random.default_rng(48),
                                     hidden=(16, 16))
        offset = InternalAgent.learned(1, 2, 1, 100, np.random.default_rng(48),
                                       hidden=(16, 16))
        for net in (offset.sac.q1_target, offset.sac.q2_target):
            net.biases[-1][:] += 1000.0
        batch = node_batch(16, to_node=1, done=1.0)
        internal_update(a, batch, neighbors={1: base})
        internal_update(b, batch, neighbors={1: offset})
        for name, arr in a.sac.named_tensors().items():
            assert np.array_equal(arr, b.sac.named_tensors()[name]), name

    def test_missing_neighbour_dropped_and_counted(self):
        agent, _ = paired_agents(51)
        before = {k: v.copy() for k, v in agent.sac.named_tensors().items()}
        batch = node_batch(32, to_node=0)
        batch["to_node"][:10] = 1  # no neighbour supplied
        rep = internal_update(agent, batch, neighbors={})
        assert rep.boundary_dropped == 10
        assert not rep.skipped
        changed = any(not np.array_equal(before[k], v)
                      for k, v in agent.sac.named_tensors().items())
        assert changed

    def test_convex_neighbour_counts_as_missing(self):
        agent, _ = paired_agents(53)
        batch = node_batch(8, to_node=1)
        rep = internal_update(agent, batch,
                              neighbors={1: InternalAgent.convex(1, PARAMS)})
        assert rep.boundary_dropped == 8
        assert rep.skipped  # nothing left to learn from

    def test_convex_agent_never_updates(self):
        agent = InternalAgent.convex(LEFT, PARAMS)
        with pytest.raises(ValueError):
            internal_update(agent, node_batch(4, to_node=LEFT), {})
