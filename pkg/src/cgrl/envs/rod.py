"""Rod rotated by a gripper with a limited articulation range.

While holding, the articulation angle u and the rod rotate together, so a
single hold phase can cover at most phi_max.  Larger targets need the
gripper to release, swing back and re-grasp -- grip changes happen only
through the two expert scripts at the bottom, never through the primitive
action.  theta is cumulative (unwrapped) and the reward is the normalized
angle covered toward the goal, so episode return telescopes to
(theta_end - theta_start) * sign(goal) / |goal|.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .base import Env, EpisodeFinishedError, StepResult, require_finite_action

FREE, HOLD = 0, 1


@dataclass(frozen=True)
class RodState:
    theta: float        # cumulative rod rotation, radians
    u: float            # articulation while holding / carriage angle while free
    grip: bool          # True = holding
    theta_goal: float
    step_index: int = 0


@dataclass
class RodParams:
    phi_max: float = math.pi / 2
    dphi_max: float = math.pi / 20   # 9 degrees per step
    horizon: int = 120
    success_tol_deg: float = 5.0
    goal_range_deg: tuple[float, float] = (180.0, 320.0)
    goal_sign: float = 1.0

    @property
    def success_tol(self) -> float:
        return math.radians(self.success_tol_deg)


class UnavailableOptionError(ValueError):
    """Expert script invoked from the wrong configuration space."""


class RodEnv(Env):
    obs_dim = 3
    action_dim = 1

    def __init__(self, params: RodParams | None = None, **overrides):
        self.params = params or RodParams(**overrides)
        self.horizon = self.params.horizon
        self.state: RodState | None = None
        self._done = False

    def contact_label(self, state: RodState) -> int:
        return HOLD if state.grip else FREE

    def observe(self, state: RodState) -> np.ndarray:
        return np.array([state.u / self.params.phi_max,
                         1.0 if state.grip else 0.0,
                         (state.theta_goal - state.theta) / (2 * math.pi)])

    def success(self, state: RodState) -> bool:
        return abs(state.theta - state.theta_goal) <= self.params.success_tol

    @staticmethod
    def label_from_obs(obs) -> int:
        return HOLD if obs[1] >= 0.5 else FREE

    def reset(self, rng: np.random.Generator) -> RodState:
        pr = self.params
        u = rng.uniform(-pr.phi_max, pr.phi_max)
        goal = pr.goal_sign * math.radians(rng.uniform(*pr.goal_range_deg))
        self.state = RodState(0.0, u, False, goal, 0)
        self._done = False
        return self.state

    def _advance(self, nxt: RodState, reward: float) -> StepResult:
        done = self.success(nxt) or nxt.step_index >= self.params.horizon
        self.state = nxt
        self._done = done
        return StepResult(nxt, reward, done, self.contact_label(nxt))

    def step(self, action) -> StepResult:
        if self.state is None or self._done:
            raise EpisodeFinishedError("reset() before stepping")
        a = require_finite_action(action)
        pr = self.params
        s = self.state
        delta = a * pr.dphi_max
        if s.grip:
            delta = min(pr.phi_max - s.u, max(-pr.phi_max - s.u, delta))
            nxt = replace(s, theta=s.theta + delta, u=s.u + delta,
                          step_index=s.step_index + 1)
            reward = delta * math.copysign(1.0, s.theta_goal) / abs(s.theta_goal)
        else:
            u = min(pr.phi_max, max(-pr.phi_max, s.u + delta))
            nxt = replace(s, u=u, step_index=s.step_index + 1)
            reward = 0.0
        return self._advance(nxt, reward)

    def grip_step(self, hold: bool) -> StepResult:
        """Privileged grip toggle, reserved for the expert scripts.

        Counts as one environment step.  Closing anchors u = 0 exactly so
        the grasp script is independent of whatever task follows.
        """
        if self.state is None or self._done:
            raise EpisodeFinishedError("reset() before stepping")
        s = self.state
        if hold == s.grip:
            raise UnavailableOptionError("grip already in requested state")
        u = 0.0 if hold else s.u
        nxt = replace(s, u=u, grip=hold, step_index=s.step_index + 1)
        return self._advance(nxt, 0.0)


# -- expert trajectories ---------------------------------------------------

_U_EPS = 1e-9


def run_release(env: RodEnv) -> list[StepResult]:
    """One step: let go of the rod, articulation unchanged."""
    if env.state is None or not env.state.grip:
        raise UnavailableOptionError("release requires the holding space")
    return [env.grip_step(False)]


def run_grasp(env: RodEnv) -> list[StepResult]:
    """Swing the free articulation back to 0, then close the grip."""
    if env.state is None or env.state.grip:
        raise UnavailableOptionError("grasp requires the released space")
    pr = env.params
    results: list[StepResult] = []
    for _ in range(int(pr.phi_max / pr.dphi_max) + 2):
        u = env.state.u
        if abs(u) <= _U_EPS:
            break
        step = min(pr.dphi_max, max(-pr.dphi_max, u))
        results.append(env.step(-step / pr.dphi_max))
        if results[-1].done:
            return results
    results.append(env.grip_step(True))
    return results


EXPERT_SCRIPTS = {"release": run_release, "grasp": run_grasp}
