"""Independent reference implementations used to pin expected test values.

Everything here is written directly from the defining formulas, separately
from the package code, so the two can disagree when one of them is wrong.
"""
import math

import numpy as np


def contact_by_inequalities(x_cart, x_left, x_right, l_x, l_z):
    """Literal evaluation of the two contact inequalities.

    Returns 0 (left contact), 1 (free) or 2 (right contact); boundary
    equality counts as contact.
    """
    half_diag = 0.5 * math.sqrt(l_x * l_x + l_z * l_z)
    clear_of_left = x_cart > x_left + half_diag
    clear_of_right = x_cart < x_right - half_diag
    if clear_of_left and clear_of_right:
        return 1
    if not clear_of_left:
        return 0
    return 2


def tail_discounted_sums(rewards, gamma):
    """discounted-from-k tail sums: out[k] = sum_{t>=k} gamma^(t-k) r_t."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in reversed(range(len(rewards))):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def moving_average_by_iteration(iters, values, window):
    """mean of values whose iteration lies in (iter_i - window, iter_i]."""
    iters = np.asarray(iters, dtype=float)
    values = np.asarray(values, dtype=float)
    out = np.empty_like(values)
    for i in range(len(values)):
        mask = (iters > iters[i] - window) & (iters <= iters[i])
        out[i] = values[mask].mean()
    return out
