"""Episode loop tying the Selector, Evaluator and per-space agents together.

Each control step runs the same three stages: the Selector labels the state
with its configuration space, the Evaluator scores that node plus its
neighbours, and either the node's internal agent takes one primitive step
(choice = stay) or an external agent runs an option toward the chosen
neighbour.  Trajectories are then routed to every learner: primitive steps
to the internal buffers with boundary tags, option segments through
hindsight relabelling, and semi-Markov transitions to the Evaluator.

The flat baseline replaces all of that with a single soft actor-critic on
raw observations, sharing the [internal] hyperparameters.
"""
from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, build_graph, snapshot_config
from .envs import make_env
from .envs import rod as rod_env
from .evaluator import (EvaluatorModel, OptionMemory,
                        build_option_transitions, evaluator_choose,
                        evaluator_load_tensors, evaluator_named_tensors,
                        evaluator_update)
from .external import (ExternalAgent, OptionSpec, external_update,
                       her_relabel, run_option)
from .graph import ConfigGraph
from .internal import InternalAgent, internal_update, route_transitions
from .metrics import MetricsRow, MetricsWriter
from .sac import ReplayBuffer, SacAgent, Transition
from .selector import SelectorModel


class OrchestrationError(RuntimeError):
    """An episode or trace violated the routing contract."""


@dataclass(frozen=True)
class StepRecord:
    observation: np.ndarray
    node: int | None            # None in flat mode
    choice: int | None          # evaluator choice driving this step
    agent: str                  # "flat", "internal:<node>", "external:<name>"
    action: np.ndarray | None   # None for privileged expert-script steps
    reward: float
    penalty: float
    next_observation: np.ndarray
    next_node: int | None
    done: bool


@dataclass(frozen=True)
class OptionRecord:
    index: int                  # position of the option's first record
    choice: int
    agent: str                  # key into bundle.externals
    outcome: object


@dataclass
class EpisodeTrace:
    records: list
    options: list
    episode_return: float
    success: bool
    mislabels: int = 0
    decisions: int = 0
    choice_counts: tuple = ()


@dataclass
class AgentBundle:
    mode: str
    graph: ConfigGraph
    selector: SelectorModel | None = None
    evaluator: EvaluatorModel | None = None
    internals: dict = field(default_factory=dict)
    externals: dict = field(default_factory=dict)
    flat: SacAgent | None = None
    flat_buffer: ReplayBuffer | None = None
    option_memory: OptionMemory | None = None
    rho_int: float = -0.5
    rho_ext: float = -0.05
    batch_internal: int = 128
    batch_external: int = 128
    batch_evaluator: int = 32
    evaluator_update_every: int = 2

    def label_fn(self):
        """Observation->node function matching the routing in use."""
        return lambda obs: self.selector.predict(obs)[0]


def build_bundle(cfg: RunConfig, env, graph: ConfigGraph,
                 rng: np.random.Generator) -> AgentBundle:
    mode = cfg.training.mode
    bundle = AgentBundle(mode, graph,
                         rho_int=cfg.evaluator.rho_int,
                         rho_ext=cfg.evaluator.rho_ext,
                         batch_internal=cfg.internal.batch_size,
                         batch_external=cfg.external.batch_size,
                         batch_evaluator=cfg.evaluator.batch_size,
                         evaluator_update_every=cfg.evaluator.update_every)
    if mode == "flat":
        sec = cfg.internal
        bundle.flat = SacAgent.create(
            env.obs_dim, env.action_dim, hidden=sec.hidden, gamma=sec.gamma,
            polyak=sec.polyak, entropy_coef=sec.entropy_coef,
            learning_rate=sec.learning_rate,
            reward_scale=sec.reward_scale, rng=rng)
        bundle.flat_buffer = ReplayBuffer.for_transitions(
            sec.buffer, env.obs_dim, env.action_dim)
        return bundle

    if cfg.selector.source == "oracle":
        bundle.selector = SelectorModel(graph, "oracle",
                                        label_fn=type(env).label_from_obs)
    else:
        bundle.selector = SelectorModel(graph, "learned",
                                        hidden=cfg.selector.hidden, rng=rng)
        bundle.selector.ensure_encoder(env.obs_dim)
    bundle.evaluator = EvaluatorModel.create(
        graph, env.obs_dim, hidden=cfg.evaluator.hidden,
        gamma=cfg.evaluator.gamma, temperature=cfg.evaluator.temperature,
        learning_rate=cfg.evaluator.learning_rate,
        reward_scale=cfg.evaluator.reward_scale, rng=rng)
    bundle.option_memory = OptionMemory(cfg.evaluator.buffer)

    sec = cfg.internal
    for node in range(graph.n_nodes):
        if mode == "graph_convex":
            bundle.internals[node] = InternalAgent.convex(node, env.params)
        else:
            bundle.internals[node] = InternalAgent.learned(
                node, env.obs_dim, env.action_dim, sec.buffer, rng,
                hidden=sec.hidden, gamma=sec.gamma, polyak=sec.polyak,
                entropy_coef=sec.entropy_coef,
                learning_rate=sec.learning_rate,
                reward_scale=sec.reward_scale)

    sec = cfg.external
    if cfg.env.name == "rod":
        starts = {"grasp": rod_env.FREE, "release": rod_env.HOLD}
        for name, script in rod_env.EXPERT_SCRIPTS.items():
            spec = OptionSpec(frozenset({starts[name]}), None, sec.t_max)
            bundle.externals[name] = ExternalAgent.expert(script, name, spec)
    else:
        spec = OptionSpec(frozenset(range(graph.n_nodes)), None, sec.t_max)
        bundle.externals["goal"] = ExternalAgent.learned(
            env.obs_dim, graph.identifier_dim, env.action_dim, sec.buffer,
            spec, rng, hidden=sec.hidden, gamma=sec.gamma, polyak=sec.polyak,
            entropy_coef=sec.entropy_coef, learning_rate=sec.learning_rate,
            reward_scale=sec.reward_scale)
    return bundle


def external_for(bundle: AgentBundle, current: int, target: int):
    """The external agent able to leave ``current`` toward ``target``."""
    for name in sorted(bundle.externals):
        agent = bundle.externals[name]
        if current in agent.spec.starting_nodes:
            return name, agent
    raise OrchestrationError(
        f"no external agent starts from node {current} (toward {target})")


def run_episode(env, bundle: AgentBundle, rng: np.random.Generator,
                explore: bool = True, chooser=None) -> EpisodeTrace:
    """One full episode under the three-step control loop.

    ``chooser(obs, label, candidates) -> node`` overrides the Evaluator,
    which lets tests and scripted policies drive the graph machinery.
    """
    env.reset(rng)
    records: list[StepRecord] = []
    options: list[OptionRecord] = []
    mislabels = decisions = 0
    choice_counts = [0] * bundle.graph.n_nodes
    learned_selector = (bundle.selector is not None
                        and bundle.selector.mode == "learned")
    label_fn = bundle.label_fn() if learned_selector else None
    done = False

    while not done:
        obs = env.observe(env.state)
        if bundle.mode == "flat":
            a = np.asarray(bundle.flat.act(obs, deterministic=not explore),
                           dtype=float)
            res = env.step(a)
            records.append(StepRecord(obs, None, None, "flat", a, res.reward,
                                      0.0, env.observe(res.next_state), None,
                                      res.done))
            done = res.done
            continue

        label, _ = bundle.selector.predict(obs)
        decisions += 1
        if label != env.contact_label(env.state):
            mislabels += 1
        candidates = bundle.graph.candidate_set(label)
        if chooser is not None:
            choice = int(chooser(obs, label, candidates))
        else:
            mode = "explore" if explore else "greedy"
            choice = evaluator_choose(bundle.evaluator, obs, candidates,
                                      mode, rng)
        choice_counts[choice] += 1

        if choice == label:
            agent = bundle.internals.get(label)
            if agent is None:
                raise OrchestrationError(f"no internal agent for node {label}")
            a = np.asarray(agent.act(env.state, obs, label,
                                     deterministic=not explore), dtype=float)
            res = env.step(a)
            next_obs = env.observe(res.next_state)
            next_label = (int(label_fn(next_obs)) if label_fn
                          else res.config_label)
            penalty = bundle.rho_int if next_label != label else 0.0
            records.append(StepRecord(obs, label, choice, f"internal:{label}",
                                      a, res.reward, penalty, next_obs,
                                      next_label, res.done))
            done = res.done
        else:
            name, agent = external_for(bundle, label, choice)
            out = run_option(agent, env, bundle.graph, target=choice,
                             deterministic=not explore, label_fn=label_fn)
            first_penalty = bundle.rho_ext if agent.kind == "expert" else 0.0
            start = len(records)
            for t in range(out.steps):
                records.append(StepRecord(
                    out.observations[t], out.labels[t], choice,
                    f"external:{name}", out.actions[t], out.rewards[t],
                    first_penalty if t == 0 else 0.0,
                    out.observations[t + 1], out.labels[t + 1],
                    out.done and t == out.steps - 1))
            options.append(OptionRecord(start, choice, name, out))
            done = out.done

    episode_return = float(sum(r.reward + r.penalty for r in records))
    return EpisodeTrace(records, options, episode_return,
                        env.success(env.state), mislabels, decisions,
                        tuple(choice_counts))


def _check_trace(trace: EpisodeTrace):
    if not trace.records:
        raise OrchestrationError("empty trace")
    total = float(sum(r.reward + r.penalty for r in trace.records))
    if trace.episode_return != total:
        raise OrchestrationError(
            f"trace return {trace.episode_return} != logged sum {total}")
    for opt in trace.options:
        end = opt.index + opt.outcome.steps
        if end > len(trace.records) or not all(
                trace.records[i].agent.startswith("external")
                for i in range(opt.index, end)):
            raise OrchestrationError("option boundaries disagree with records")


def dispatch_training(trace: EpisodeTrace, bundle: AgentBundle,
                      rng: np.random.Generator) -> dict:
    """Route a finished episode to every learner and run its update round.

    Update counts are proportional to the primitive steps each agent
    executed during the episode, so graph and flat modes spend comparable
    gradient budgets per environment step.
    """
    _check_trace(trace)
    counts = {"flat": 0, "internal": 0, "external": 0, "evaluator": 0,
              "unroutable": 0}

    if bundle.mode == "flat":
        for rec in trace.records:
            bundle.flat_buffer.push(s=rec.observation, a=rec.action,
                                    r=rec.reward,
                                    s_next=rec.next_observation,
                                    done=float(rec.done))
        if bundle.flat_buffer.size >= bundle.batch_internal:
            for _ in range(len(trace.records)):
                bundle.flat.update(bundle.flat_buffer.sample(
                    bundle.batch_internal, rng))
                counts["flat"] += 1
        return counts

    graph = bundle.graph
    steps = []
    for rec in trace.records:
        if rec.action is None:
            continue  # privileged script step, nothing to learn from
        if rec.node != rec.next_node and \
                frozenset((rec.node, rec.next_node)) not in graph.edges:
            counts["unroutable"] += 1  # selector mispredicted a jump
            continue
        agent = bundle.internals.get(rec.node)
        if agent is None or agent.kind != "learned":
            continue
        steps.append((Transition(rec.observation, rec.action, rec.reward,
                                 rec.next_observation, rec.done),
                      rec.node, rec.next_node))
    for node, routed in route_transitions(steps, graph).items():
        for item in routed:
            bundle.internals[node].store(item)

    for opt in trace.options:
        agent = bundle.externals[opt.agent]
        if agent.kind == "learned" and \
                opt.outcome.terminated_by == "node_change":
            for t in her_relabel(opt.outcome, graph):
                agent.buffer.push(s=t.s, a=t.a, r=t.r, s_next=t.s_next,
                                  done=float(t.done))

    option_at = {opt.index: opt for opt in trace.options}
    i = 0
    while i < len(trace.records):
        opt = option_at.get(i)
        if opt is not None:
            out = opt.outcome
            rewards = list(out.rewards)
            if bundle.externals[opt.agent].kind == "expert":
                rewards[0] += bundle.rho_ext
            bundle.option_memory.extend(build_option_transitions(
                out.observations, opt.choice, rewards, out.done,
                start_node=out.start_node, end_node=out.reached_node))
            i += out.steps
        else:
            rec = trace.records[i]
            bundle.option_memory.extend(build_option_transitions(
                [rec.observation, rec.next_observation], rec.choice,
                [rec.reward + rec.penalty], rec.done,
                start_node=rec.node, end_node=rec.next_node))
            i += 1

    internal_steps = Counter(rec.node for rec in trace.records
                             if rec.agent.startswith("internal"))
    for node, n_steps in sorted(internal_steps.items()):
        agent = bundle.internals[node]
        if agent.kind != "learned" or \
                agent.buffer.size < bundle.batch_internal:
            continue
        neighbour_agents = {j: bundle.internals[j]
                            for j in graph.neighbors(node)
                            if bundle.internals[j].sac is not None}
        for _ in range(n_steps):
            internal_update(agent, agent.buffer.sample(
                bundle.batch_internal, rng), neighbour_agents)
            counts["internal"] += 1

    external_steps = Counter()
    for opt in trace.options:
        if bundle.externals[opt.agent].kind == "learned":
            external_steps[opt.agent] += opt.outcome.steps
    for name, n_steps in sorted(external_steps.items()):
        agent = bundle.externals[name]
        if agent.buffer.size < bundle.batch_external:
            continue
        for _ in range(n_steps):
            external_update(agent, agent.buffer.sample(
                bundle.batch_external, rng))
            counts["external"] += 1

    if bundle.option_memory.size >= bundle.batch_evaluator:
        rounds = math.ceil(len(trace.records) / bundle.evaluator_update_every)
        for _ in range(rounds):
            evaluator_update(bundle.evaluator, bundle.option_memory.sample(
                bundle.batch_evaluator, rng))
            counts["evaluator"] += 1
    return counts


@dataclass
class EvalSummary:
    mean_return: float
    success_rate: float
    visits: dict
    choice_counts: tuple
    mislabel_rate: float
    traces: list | None = None


def evaluate_bundle(env, bundle: AgentBundle, n_episodes: int,
                    rng: np.random.Generator,
                    keep_traces: bool = False) -> EvalSummary:
    """Greedy/deterministic rollouts; returns are raw env reward sums."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    returns, successes = [], 0
    visits: Counter = Counter()
    choices = np.zeros(bundle.graph.n_nodes, dtype=int)
    mislabels = decisions = 0
    traces = [] if keep_traces else None
    for _ in range(n_episodes):
        trace = run_episode(env, bundle, rng, explore=False)
        returns.append(sum(r.reward for r in trace.records))
        successes += bool(trace.success)
        mislabels += trace.mislabels
        decisions += trace.decisions
        for rec in trace.records:
            if rec.node is not None:
                visits[rec.node] += 1
        if trace.choice_counts:
            choices += np.asarray(trace.choice_counts, dtype=int)
        if keep_traces:
            traces.append(trace)
    return EvalSummary(float(np.mean(returns)), successes / n_episodes,
                       dict(sorted(visits.items())), tuple(choices),
                       mislabels / decisions if decisions else 0.0, traces)


# -- persistence -----------------------------------------------------------

def bundle_tensors(bundle: AgentBundle) -> dict:
    out = {}
    if bundle.flat is not None:
        out.update(bundle.flat.named_tensors("flat"))
    if bundle.selector is not None and bundle.selector.encoder is not None:
        out.update(bundle.selector.named_tensors("selector"))
    if bundle.evaluator is not None:
        out.update(evaluator_named_tensors(bundle.evaluator))
    for node, agent in sorted(bundle.internals.items()):
        if agent.sac is not None:
            out.update(agent.sac.named_tensors(f"internal.{node}"))
    for name, agent in sorted(bundle.externals.items()):
        if agent.sac is not None:
            out.update(agent.sac.named_tensors(f"external.{name}"))
    return out


def load_bundle_tensors(bundle: AgentBundle, tensors: dict):
    """Load whichever agent groups the checkpoint provides."""
    def present(prefix):
        return any(k.startswith(prefix + ".") for k in tensors)

    if bundle.flat is not None and present("flat"):
        bundle.flat.load_tensors("flat", tensors)
    if bundle.selector is not None and bundle.selector.mode == "learned" \
            and present("selector"):
        bundle.selector.load_tensors("selector", tensors)
    if bundle.evaluator is not None and present("evaluator"):
        evaluator_load_tensors(bundle.evaluator, tensors)
    for node, agent in bundle.internals.items():
        if agent.sac is not None and present(f"internal.{node}"):
            agent.sac.load_tensors(f"internal.{node}", tensors)
    for name, agent in bundle.externals.items():
        if agent.sac is not None and present(f"external.{name}"):
            agent.sac.load_tensors(f"external.{name}", tensors)


@dataclass
class TrainResult:
    metrics_path: Path
    checkpoint_path: Path
    eval_history: list       # (iteration, EvalSummary) pairs
    iterations: int
    episodes: int


def train(cfg: RunConfig, out_dir, seed: int | None = None,
          init_tensors: dict | None = None) -> TrainResult:
    """Seeded training loop with periodic evaluation and checkpoints.

    ``init_tensors`` warm-starts any matching agent group before the loop,
    e.g. a pre-trained selector encoder.
    """
    seed = cfg.training.seed if seed is None else int(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot_config(cfg, out_dir)

    env = make_env(cfg.env.name, **cfg.env.overrides)
    eval_env = make_env(cfg.env.name,
                        **{**cfg.env.overrides, **cfg.env.eval_overrides})
    graph = build_graph(cfg)
    rng = np.random.default_rng(seed)
    bundle = build_bundle(cfg, env, graph, rng)
    if init_tensors:
        load_bundle_tensors(bundle, init_tensors)

    writer = MetricsWriter(out_dir / "metrics.csv", graph.n_nodes)
    tr = cfg.training
    iteration = episode = 0
    next_eval = tr.eval_interval
    next_ckpt = tr.checkpoint_interval
    eval_history: list = []
    last_eval: dict = {}

    def checkpoint_meta():
        return {"graph_fingerprint": graph.fingerprint(), "seed": seed,
                "iteration": iteration, "episode": episode,
                "mode": cfg.training.mode, "env": cfg.env.name, **last_eval}

    while iteration < tr.iterations:
        t0 = time.perf_counter()
        # Alternate exploring and greedy episodes: sampled-score choices
        # discover new routes, greedy ones give the learners coherent
        # on-policy episodes instead of a permanent option storm.
        trace = run_episode(env, bundle, rng, explore=episode % 2 == 0)
        if not math.isfinite(trace.episode_return):
            dump = out_dir / "halt_dump.ckpt"
            save_checkpoint(dump, checkpoint_meta(), bundle_tensors(bundle))
            raise RuntimeError(f"non-finite episode return at iteration "
                               f"{iteration}; state dumped to {dump}")
        dispatch_training(trace, bundle, rng)
        iteration += len(trace.records)

        eval_cols = {}
        if iteration >= next_eval or iteration >= tr.iterations:
            ev = evaluate_bundle(eval_env, bundle, tr.eval_episodes,
                                 np.random.default_rng([seed, iteration]))
            while next_eval <= iteration:
                next_eval += tr.eval_interval
            eval_history.append((iteration, ev))
            eval_cols = {"eval_return": ev.mean_return,
                         "success_rate": ev.success_rate}
            last_eval = {"eval_return": ev.mean_return,
                         "success_rate": ev.success_rate,
                         "eval_seed": [seed, iteration],
                         "eval_episodes": tr.eval_episodes}

        accuracy = None
        if trace.decisions:
            accuracy = 1.0 - trace.mislabels / trace.decisions
        writer.append(MetricsRow(
            iteration=iteration, episode=episode, mode=cfg.training.mode,
            train_return=trace.episode_return,
            selector_accuracy=accuracy,
            choices=trace.choice_counts or (0,) * graph.n_nodes,
            penalties_total=float(sum(r.penalty for r in trace.records)),
            wall_ms=(time.perf_counter() - t0) * 1e3, **eval_cols))
        episode += 1

        if iteration >= next_ckpt and iteration < tr.iterations:
            save_checkpoint(out_dir / f"checkpoint_{iteration:08d}.ckpt",
                            checkpoint_meta(), bundle_tensors(bundle))
            while next_ckpt <= iteration:
                next_ckpt += tr.checkpoint_interval

    final = out_dir / "checkpoint.ckpt"
    save_checkpoint(final, checkpoint_meta(), bundle_tensors(bundle))
    return TrainResult(out_dir / "metrics.csv", final, eval_history,
                       iteration, episode)


def evaluate_checkpoint(cfg: RunConfig, checkpoint_path,
                        n_episodes: int | None = None,
                        seed=None, mode: str | None = None) -> EvalSummary:
    """Rebuild a bundle from a checkpoint and run greedy evaluation.

    ``mode`` overrides the checkpoint's training mode, which is how trained
    internal agents are swapped out for the convex solver: graph_convex
    ignores every "internal." tensor group.
    """
    graph = build_graph(cfg)
    skip = ("internal.",) if mode == "graph_convex" else ()
    metadata, tensors = load_checkpoint(checkpoint_path,
                                        expect_fingerprint=graph.fingerprint(),
                                        skip_prefixes=skip)
    run_mode = mode or metadata.get("mode", cfg.training.mode)
    env = make_env(cfg.env.name,
                   **{**cfg.env.overrides, **cfg.env.eval_overrides})
    import dataclasses
    eval_cfg = dataclasses.replace(
        cfg, training=dataclasses.replace(cfg.training, mode=run_mode))
    bundle = build_bundle(eval_cfg, env, graph, np.random.default_rng(0))
    load_bundle_tensors(bundle, tensors)

    if n_episodes is None:
        n_episodes = int(metadata.get("eval_episodes", 20))
    if seed is None:
        seed = metadata.get("eval_seed", 0)
    return evaluate_bundle(env, bundle, n_episodes,
                           np.random.default_rng(seed))
