"""Run configuration: one INI file drives training, evaluation and plots.

Sections: [env] (environment name plus parameter overrides; keys prefixed
``eval_`` override only the evaluation environment), [graph] (node names and
``A-B`` edges), [selector]/[evaluator]/[internal]/[external] (agent
hyperparameters; the flat baseline reuses [internal] so both modes share one
hyperparameter set), [training] (mode, iteration budget, intervals, seed).
Validation collects every violation instead of stopping at the first.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

MODES = ("graph", "flat", "graph_convex")
ENV_NAMES = ("cartstem", "rod")
SELECTOR_SOURCES = ("oracle", "learned")


class ConfigError(ValueError):
    """Raised when a run configuration cannot be loaded or fails validation."""


@dataclass
class EnvSection:
    name: str = "cartstem"
    overrides: dict = field(default_factory=dict)
    eval_overrides: dict = field(default_factory=dict)


@dataclass
class GraphSection:
    nodes: tuple[str, ...] = ()
    edges: tuple[tuple[str, str], ...] = ()


@dataclass
class SelectorSection:
    source: str = "oracle"
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 256
    states: int = 20_000


@dataclass
class EvaluatorSection:
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 1e-3
    gamma: float = 0.99
    temperature: float = 1.0
    buffer: int = 50_000
    batch_size: int = 32
    rho_int: float = -0.5
    rho_ext: float = -0.05
    update_every: int = 2
    reward_scale: float = 1.0


@dataclass
class SacSection:
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 3e-4
    gamma: float = 0.99
    entropy_coef: float = 0.2
    polyak: float = 0.005
    reward_scale: float = 1.0
    buffer: int = 100_000
    batch_size: int = 128
    t_max: int = 15  # option step cap; unused by internal agents


@dataclass
class TrainingSection:
    mode: str = "graph"
    iterations: int = 60_000
    eval_interval: int = 2_000
    eval_episodes: int = 20
    checkpoint_interval: int = 20_000
    seed: int = 0


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    graph: GraphSection = field(default_factory=GraphSection)
    selector: SelectorSection = field(default_factory=SelectorSection)
    evaluator: EvaluatorSection = field(default_factory=EvaluatorSection)
    internal: SacSection = field(default_factory=SacSection)
    external: SacSection = field(default_factory=lambda: SacSection(
        learning_rate=1e-3, entropy_coef=0.05))
    training: TrainingSection = field(default_factory=TrainingSection)
    source_path: str | None = None


_SECTION_TYPES = {
    "selector": SelectorSection,
    "evaluator": EvaluatorSection,
    "internal": SacSection,
    "external": SacSection,
    "training": TrainingSection,
}


def _parse_scalar(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _coerce(value: str, like):
    """Parse ``value`` to the type of the dataclass default ``like``."""
    if isinstance(like, tuple):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(int(p) for p in parts)
    if isinstance(like, bool):
        return value.strip().lower() == "true"
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value.strip()


def _fill_section(target, parser: configparser.ConfigParser, name: str,
                  problems: list[str]):
    if not parser.has_section(name):
        return
    known = {f.name: getattr(target, f.name) for f in fields(target)}
    for key, raw in parser.items(name):
        if key not in known:
            problems.append(f"[{name}] unknown key {key!r}")
            continue
        try:
            setattr(target, key, _coerce(raw, known[key]))
        except ValueError:
            problems.append(f"[{name}] {key} = {raw!r} is not "
                            f"a valid {type(known[key]).__name__}")


def _parse_edges(raw: str, problems: list[str]):
    edges = []
    for token in (t.strip() for t in raw.split(",") if t.strip()):
        if token.count("-") != 1:
            problems.append(f"[graph] edge {token!r} is not NAME-NAME")
            continue
        a, b = (part.strip() for part in token.split("-"))
        edges.append((a, b))
    return tuple(edges)


def load_config(path) -> RunConfig:
    """Parse an INI run configuration; raises ConfigError on any problem."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"config parse failure: {exc}") from exc

    cfg = RunConfig(source_path=str(path))
    problems: list[str] = []

    for section in parser.sections():
        if section not in ("env", "graph", *_SECTION_TYPES):
            problems.append(f"unknown section [{section}]")

    if parser.has_section("env"):
        for key, raw in parser.items("env"):
            if key == "name":
                cfg.env.name = raw.strip()
            elif key.startswith("eval_"):
                cfg.env.eval_overrides[key[len("eval_"):]] = _parse_scalar(raw)
            else:
                cfg.env.overrides[key] = _parse_scalar(raw)

    if parser.has_section("graph"):
        for key, raw in parser.items("graph"):
            if key == "nodes":
                cfg.graph.nodes = tuple(p.strip() for p in raw.split(",")
                                        if p.strip())
            elif key == "edges":
                cfg.graph.edges = _parse_edges(raw, problems)
            else:
                problems.append(f"[graph] unknown key {key!r}")

    for name, _ in _SECTION_TYPES.items():
        _fill_section(getattr(cfg, name), parser, name, problems)
    cfg.training.mode = cfg.training.mode.replace("-", "_")

    problems.extend(validate_config(cfg))
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def validate_config(cfg: RunConfig) -> list[str]:
    """Every rule violation in the configuration, empty when clean."""
    out: list[str] = []
    if cfg.env.name not in ENV_NAMES:
        out.append(f"unknown env {cfg.env.name!r}")
    if cfg.training.mode not in MODES:
        out.append(f"unknown mode {cfg.training.mode!r}")
    if cfg.training.mode == "graph_convex" and cfg.env.name != "cartstem":
        out.append("graph_convex needs the cartstem env (no convex solver "
                   "exists for other environments)")
    if cfg.selector.source not in SELECTOR_SOURCES:
        out.append(f"unknown selector source {cfg.selector.source!r}")

    for label, gamma in (("evaluator", cfg.evaluator.gamma),
                         ("internal", cfg.internal.gamma),
                         ("external", cfg.external.gamma)):
        if not 0.0 <= gamma < 1.0:
            out.append(f"[{label}] gamma {gamma} outside [0, 1)")
    for label, section in (("selector", cfg.selector),
                           ("evaluator", cfg.evaluator),
                           ("internal", cfg.internal),
                           ("external", cfg.external)):
        if section.learning_rate <= 0:
            out.append(f"[{label}] learning_rate must be > 0")
    for label, section in (("evaluator", cfg.evaluator),
                           ("internal", cfg.internal),
                           ("external", cfg.external)):
        if section.batch_size < 1:
            out.append(f"[{label}] batch_size must be >= 1")
        if section.buffer < section.batch_size:
            out.append(f"[{label}] buffer smaller than batch_size")
        if not section.reward_scale > 0:
            out.append(f"[{label}] reward_scale must be > 0")
    if cfg.external.t_max < 1:
        out.append("[external] t_max must be >= 1")
    if cfg.evaluator.update_every < 1:
        out.append("[evaluator] update_every must be >= 1")

    tr = cfg.training
    for key in ("iterations", "eval_interval", "eval_episodes",
                "checkpoint_interval"):
        if getattr(tr, key) < 1:
            out.append(f"[training] {key} must be >= 1")

    if cfg.graph.nodes:
        names = list(cfg.graph.nodes)
        if len(set(names)) != len(names):
            out.append("[graph] duplicate node names")
        for a, b in cfg.graph.edges:
            for endpoint in (a, b):
                if endpoint not in names:
                    out.append(f"[graph] edge endpoint {endpoint!r} is not "
                               "a listed node")
    elif cfg.graph.edges:
        out.append("[graph] edges given without nodes")

    out.extend(_check_env_overrides(cfg))
    return out


def _check_env_overrides(cfg: RunConfig) -> list[str]:
    from .envs import make_env
    out = []
    for tag, overrides in (("env", cfg.env.overrides),
                           ("env eval", cfg.env.eval_overrides)):
        if cfg.env.name not in ENV_NAMES:
            continue
        try:
            make_env(cfg.env.name, **overrides)
        except TypeError as exc:
            out.append(f"[{tag}] bad override: {exc}")
    return out


def build_graph(cfg: RunConfig):
    """The knowledge graph described by [graph], or the env default."""
    from .envs import make_graph
    from .graph import ConfigGraph
    if not cfg.graph.nodes:
        return make_graph(cfg.env.name)
    return ConfigGraph.build(list(cfg.graph.nodes),
                             [tuple(e) for e in cfg.graph.edges])


def snapshot_config(cfg: RunConfig, out_dir) -> Path:
    """Copy the source INI into a run directory for provenance."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "config.ini"
    if cfg.source_path and Path(cfg.source_path).is_file():
        target.write_text(Path(cfg.source_path).read_text())
    else:
        target.write_text(dump_config(cfg))
    return target


def dump_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig back to INI text (used when none was loaded)."""
    parser = configparser.ConfigParser()
    parser["env"] = {"name": cfg.env.name,
                     **{k: str(v) for k, v in cfg.env.overrides.items()},
                     **{f"eval_{k}": str(v)
                        for k, v in cfg.env.eval_overrides.items()}}
    if cfg.graph.nodes:
        parser["graph"] = {
            "nodes": ", ".join(cfg.graph.nodes),
            "edges": ", ".join(f"{a}-{b}" for a, b in cfg.graph.edges)}
    for name in _SECTION_TYPES:
        section = dataclasses.asdict(getattr(cfg, name))
        section.pop("overrides", None)
        parser[name] = {
            k: ", ".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
            for k, v in section.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
