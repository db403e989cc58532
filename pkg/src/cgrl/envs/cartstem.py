"""Cart with a flexible vertical beam sliding under two elevated obstacles.

The cart travels on the x axis.  A beam of height H is mounted on it; two
box obstacles hang at height z_c, so when the cart pushes past an obstacle
edge the beam bends around it and the tip swings to the far side.  The
deformable beam is replaced by a rigid lever pivoting at the obstacle edge:

    d    = half-diagonal of the obstacle cross-section = 0.5*sqrt(lx^2+lz^2)
    p_L  = x_left + d,  p_R = x_right - d      (pivot positions)
    kappa = (H - z_c) / z_c                    (lever arm ratio, 0.5 default)

    free contact:   x_tips = x_cart                      (p_L < x_cart < p_R)
    left contact:   x_tips = p_L + kappa*(p_L - x_cart)  (x_cart <= p_L)
    right contact:  x_tips = p_R + kappa*(p_R - x_cart)  (x_cart >= p_R)

The map is continuous at both pivots.  Because the tip moves opposite to
the cart while in contact, goals beyond the left pivot are reachable only
by pressing into the *right* obstacle and vice versa -- which is the whole
point of the task.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .base import Env, EpisodeFinishedError, StepResult, require_finite_action

# node ids, aligned with the LEFT -- FREE -- RIGHT graph
LEFT, FREE, RIGHT = 0, 1, 2

# Default reset-sampler geometry (pivot frame): pivot centre c ~
# U(+-CENTRE_RANGE), pivot half-gap g ~ U(HALF_GAP).  These keep the free
# window wider than one cart step (no LEFT<->RIGHT teleport) and keep both
# beyond-pivot goal zones non-empty: with kappa=0.5 and x_max=6 the
# farthest tip reachable by right contact is 1.5*p_R - 3, which must
# undercut p_L by more than the success tolerance.  That needs
# 2.5*g + 0.5*|c| < 2.35.  Wider centre ranges may leave only one side
# with a valid zone; reset() then samples the side that exists.
CENTRE_RANGE = 0.4
HALF_GAP = (0.7, 0.8)
GOAL_INSET = 0.1  # keep sampled goals strictly inside their zone


@dataclass(frozen=True)
class CartStemState:
    x_cart: float
    x_tips: float
    x_left: float
    x_right: float
    l_x: float
    l_z: float
    x_goal: float
    step_index: int = 0


def effective_half_width(l_x: float, l_z: float) -> float:
    return 0.5 * math.hypot(l_x, l_z)


def contact_label(x_cart: float, x_left: float, x_right: float,
                  l_x: float, l_z: float) -> int:
    """Contact configuration; boundary equality counts as contact."""
    d = effective_half_width(l_x, l_z)
    if x_cart <= x_left + d:
        return LEFT
    if x_cart >= x_right - d:
        return RIGHT
    return FREE


def tip_position(x_cart: float, x_left: float, x_right: float,
                 l_x: float, l_z: float, kappa: float = 0.5) -> float:
    d = effective_half_width(l_x, l_z)
    p_left = x_left + d
    p_right = x_right - d
    if x_cart <= p_left:
        return p_left + kappa * (p_left - x_cart)
    if x_cart >= p_right:
        return p_right + kappa * (p_right - x_cart)
    return x_cart


@dataclass
class CartStemParams:
    x_min: float = -6.0
    x_max: float = 6.0
    v_max: float = 1.0
    horizon: int = 30
    z_contact: float = 10.0
    z_tip: float = 15.0
    obstacle_size: float = 2.0     # l_x = l_z
    goal_contact_prob: float = 0.55
    success_tol: float = 0.5
    pivot_centre_range: float = CENTRE_RANGE
    half_gap_lo: float = HALF_GAP[0]
    half_gap_hi: float = HALF_GAP[1]

    @property
    def kappa(self) -> float:
        return (self.z_tip - self.z_contact) / self.z_contact


class CartStemEnv(Env):
    obs_dim = 7
    action_dim = 1

    def __init__(self, params: CartStemParams | None = None, **overrides):
        self.params = params or CartStemParams(**overrides)
        self.horizon = self.params.horizon
        self.state: CartStemState | None = None
        self._done = False

    # -- geometry helpers (shared with the convex internal agents) --------

    def pivots(self, state: CartStemState) -> tuple[float, float]:
        d = effective_half_width(state.l_x, state.l_z)
        return state.x_left + d, state.x_right - d

    def tip_of(self, x_cart: float, state: CartStemState) -> float:
        return tip_position(x_cart, state.x_left, state.x_right,
                            state.l_x, state.l_z, self.params.kappa)

    def contact_label(self, state: CartStemState) -> int:
        return contact_label(state.x_cart, state.x_left, state.x_right,
                             state.l_x, state.l_z)

    def observe(self, state: CartStemState) -> np.ndarray:
        return np.array([state.x_cart, state.x_tips, state.x_left,
                         state.x_right, state.l_x, state.l_z, state.x_goal])

    @staticmethod
    def label_from_obs(obs) -> int:
        """Oracle label straight from an observation vector."""
        return contact_label(obs[0], obs[2], obs[3], obs[4], obs[5])

    def success(self, state: CartStemState) -> bool:
        return abs(state.x_tips - state.x_goal) <= self.params.success_tol

    def goal_requires_contact(self, state: CartStemState) -> bool:
        """True when no free-window tip position comes within tolerance."""
        p_left, p_right = self.pivots(state)
        tol = self.params.success_tol
        return state.x_goal < p_left - tol or state.x_goal > p_right + tol

    # -- episode interface -------------------------------------------------

    def reset(self, rng: np.random.Generator) -> CartStemState:
        pr = self.params
        size = pr.obstacle_size
        d = effective_half_width(size, size)
        centre = rng.uniform(-pr.pivot_centre_range, pr.pivot_centre_range)
        half_gap = rng.uniform(pr.half_gap_lo, pr.half_gap_hi)
        p_left, p_right = centre - half_gap, centre + half_gap
        x_cart = rng.uniform(pr.x_min, pr.x_max)

        margin = pr.success_tol + GOAL_INSET
        x_goal = None
        if rng.random() < pr.goal_contact_prob:
            # Goal beyond one pivot, reachable only through the far obstacle.
            # Each zone is bounded by the deepest press the workspace allows;
            # off-centre geometry can close one side, so fall back to the
            # side that is still open.
            below = (p_right + pr.kappa * (p_right - pr.x_max) + 0.05,
                     p_left - margin)
            above = (p_right + margin,
                     p_left + pr.kappa * (p_left - pr.x_min) - 0.05)
            pick, other = (below, above) if rng.random() < 0.5 \
                else (above, below)
            if pick[0] >= pick[1]:
                pick = other
            if pick[0] < pick[1]:
                x_goal = rng.uniform(*pick)
        if x_goal is None:
            x_goal = rng.uniform(p_left + GOAL_INSET, p_right - GOAL_INSET)

        x_left, x_right = p_left - d, p_right + d
        tip = tip_position(x_cart, x_left, x_right, size, size, pr.kappa)
        self.state = CartStemState(x_cart, tip, x_left, x_right, size, size,
                                   x_goal, 0)
        self._done = False
        return self.state

    def step(self, action) -> StepResult:
        if self.state is None or self._done:
            raise EpisodeFinishedError("reset() before stepping")
        a = require_finite_action(action)
        pr = self.params
        s = self.state
        # position command: the action encodes an absolute rail target and
        # the cart moves toward it by at most v_max per step
        target = pr.x_min + (a + 1.0) / 2.0 * (pr.x_max - pr.x_min)
        delta = min(pr.v_max, max(-pr.v_max, target - s.x_cart))
        x_cart = min(pr.x_max, max(pr.x_min, s.x_cart + delta))
        tip = self.tip_of(x_cart, s)
        nxt = replace(s, x_cart=x_cart, x_tips=tip, step_index=s.step_index + 1)
        reward = -abs(tip - s.x_goal)
        done = nxt.step_index >= pr.horizon
        self.state = nxt
        self._done = done
        return StepResult(nxt, reward, done, self.contact_label(nxt))
