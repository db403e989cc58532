from .base import Env, EpisodeFinishedError, StepResult
from .cartstem import CartStemEnv, CartStemParams, CartStemState
from .rod import RodEnv, RodParams, RodState, UnavailableOptionError

from .. import graph as _graph


def make_env(name: str, **overrides) -> Env:
    if name == "cartstem":
        return CartStemEnv(**overrides)
    if name == "rod":
        return RodEnv(**overrides)
    raise ValueError(f"unknown environment '{name}'")


def make_graph(name: str) -> "_graph.ConfigGraph":
    if name == "cartstem":
        return _graph.cartstem_graph()
    if name == "rod":
        return _graph.rod_graph()
    raise ValueError(f"unknown environment '{name}'")
