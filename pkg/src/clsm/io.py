"""File formats: TSV datasets, key=value configs, binary checkpoints and
metric CSVs.

Edge lists hold one ``u<TAB>v`` pair per line.  Behavior files hold
``node<TAB>token[<TAB>count]`` lines; a missing count means 1, repeated
(node, token) lines add up, and zero counts are accepted and dropped (so
0/1 presence matrices load directly).  In both, blank lines and lines
starting with ``#`` are skipped; ``#nodes=N`` in an edge list fixes N.

Checkpoint layout (all integers uint64 and all reals float64, little endian)::

    b"CLSM1"
    N, K, V, T, iterations
    theta_hat[N*K], beta_hat[K], omega_hat[K*V]
    alpha[K], eta[2], kappa[V], epsilon, elbo_trace[T]
    sha256 of every preceding byte
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import BehaviorData, FittedModel, Graph, Hyperparams
from .generative import SimConfig
from .inference import FitConfig

MAGIC = b"CLSM1"
_HEADER = struct.Struct("<5Q")
_DIGEST = 32
# ids index dense arrays, so an absurd id would allocate everything below it
MAX_INDEX = 10_000_000
METRIC_FIELDS = ("dataset", "task", "model", "K", "fold", "repeat", "metric", "value")


class DataError(ValueError):
    """Input data violates the model's constraints."""

    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = f"{path}:" if path is not None else ""
        where += f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class ParseError(DataError):
    """A line could not be parsed."""


class DimensionMismatchError(DataError):
    pass


class CheckpointFormatError(ValueError):
    pass


class CorruptCheckpointError(ValueError):
    pass


class ConfigFileError(ValueError):
    pass


@dataclass
class DatasetBundle:
    graph: Graph
    behaviors: BehaviorData
    node_labels: list | None = None
    token_labels: list | None = None

    def __post_init__(self):
        if self.graph.num_nodes != self.behaviors.num_nodes:
            raise DimensionMismatchError(
                f"graph has {self.graph.num_nodes} nodes, behaviors {self.behaviors.num_nodes}")
        if self.node_labels is not None and len(self.node_labels) != self.graph.num_nodes:
            raise DimensionMismatchError("node label count differs from N")
        if self.token_labels is not None and len(self.token_labels) != self.behaviors.vocab_size:
            raise DimensionMismatchError("token label count differs from V")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _content_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line:
                yield lineno, line


def _nonneg_int(text: str, what: str, lineno: int, path) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ParseError(f"{what} {text!r} is not an integer", lineno, path) from None
    if value < 0:
        raise ParseError(f"{what} {value} is negative", lineno, path)
    if value > MAX_INDEX:
        raise DataError(f"{what} {value} exceeds the supported maximum {MAX_INDEX}", lineno, path)
    return value


def _read_edges(path):
    declared = None
    pairs = []
    for lineno, line in _content_lines(path):
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            if key.strip() == "nodes" and val:
                declared = _nonneg_int(val.strip(), "node count", lineno, path)
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"expected 'u<TAB>v', got {line!r}", lineno, path)
        u = _nonneg_int(parts[0].strip(), "node id", lineno, path)
        v = _nonneg_int(parts[1].strip(), "node id", lineno, path)
        if u == v:
            raise DataError(f"self-loop on node {u}", lineno, path)
        pairs.append((u, v, lineno))
    return declared, pairs


def _graph_from_pairs(pairs, num_nodes, path):
    for u, v, lineno in pairs:
        if max(u, v) >= num_nodes:
            raise DataError(f"node id {max(u, v)} exceeds declared node count {num_nodes}",
                            lineno, path)
    return Graph(num_nodes, [(u, v) for u, v, _ in pairs])


def load_edge_list(path) -> Graph:
    declared, pairs = _read_edges(path)
    if declared is None:
        declared = 1 + max((max(u, v) for u, v, _ in pairs), default=-1)
    if declared < 1:
        raise DataError("edge list defines no nodes", path=path)
    return _graph_from_pairs(pairs, declared, path)


def _read_behaviors(path, vocab_size_hint):
    counts: dict = {}
    for lineno, line in _content_lines(path):
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ParseError(f"expected 'node<TAB>token[<TAB>count]', got {line!r}", lineno, path)
        n = _nonneg_int(parts[0].strip(), "node id", lineno, path)
        t = _nonneg_int(parts[1].strip(), "token", lineno, path)
        if len(parts) == 3:
            try:
                c = int(parts[2].strip())
            except ValueError:
                raise ParseError(f"count {parts[2]!r} is not an integer", lineno, path) from None
            if c < 0:
                raise DataError(f"negative count {c}", lineno, path)
        else:
            c = 1
        if vocab_size_hint is not None and t >= vocab_size_hint:
            raise DataError(f"token {t} out of range for vocabulary size {vocab_size_hint}",
                            lineno, path)
        if c:
            counts[n, t] = counts.get((n, t), 0) + c
        else:
            counts.setdefault((n, t), 0)
    return counts


def _behaviors_from_counts(counts, num_nodes, vocab_size):
    selections = [[] for _ in range(num_nodes)]
    for (n, t), c in sorted(counts.items()):
        if c:
            selections[n].append((t, c))
    return BehaviorData(num_nodes, vocab_size, selections)


def load_behaviors(path, vocab_size_hint: int | None = None,
                   num_nodes: int | None = None) -> BehaviorData:
    """Parse a behavior TSV.  N defaults to one past the largest node id."""
    counts = _read_behaviors(path, vocab_size_hint)
    V = vocab_size_hint if vocab_size_hint is not None else 1 + max(
        (t for _, t in counts), default=-1)
    N = 1 + max((n for n, _ in counts), default=-1)
    if num_nodes is not None:
        if N > num_nodes:
            raise DimensionMismatchError(f"node id {N - 1} exceeds node count {num_nodes}",
                                         path=path)
        N = num_nodes
    if V < 1 or N < 1:
        raise DataError("behavior file defines no nodes or tokens", path=path)
    return _behaviors_from_counts(counts, N, V)


def load_dataset(edges_path, behaviors_path, vocab_size_hint: int | None = None) -> DatasetBundle:
    """Load both modalities over one node set.

    Without a ``#nodes=`` header the node count is the largest id seen in
    either file; with one, a behavior line for an undeclared node raises
    :class:`DimensionMismatchError`.
    """
    declared, pairs = _read_edges(edges_path)
    counts = _read_behaviors(behaviors_path, vocab_size_hint)
    seen = max(1 + max((max(u, v) for u, v, _ in pairs), default=-1),
               1 + max((n for n, _ in counts), default=-1))
    if declared is not None and seen > declared:
        raise DimensionMismatchError(
            f"files reference node {seen - 1} but the edge list declares {declared} nodes")
    N = declared if declared is not None else seen
    if N < 1:
        raise DataError("dataset defines no nodes")
    # a links-only dataset keeps a one-token placeholder vocabulary
    V = vocab_size_hint if vocab_size_hint is not None else max(
        1, 1 + max((t for _, t in counts), default=-1))
    return DatasetBundle(_graph_from_pairs(pairs, N, edges_path),
                         _behaviors_from_counts(counts, N, V))


def load_link_queries(path, num_nodes: int) -> dict:
    """Parse ``query<TAB>node`` lines into ``{query: sorted node ids}``."""
    links: dict = {}
    for lineno, line in _content_lines(path):
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"expected 'query<TAB>node', got {line!r}", lineno, path)
        q = _nonneg_int(parts[0].strip(), "query id", lineno, path)
        n = _nonneg_int(parts[1].strip(), "node id", lineno, path)
        if n >= num_nodes:
            raise DataError(f"node {n} is not among the {num_nodes} fitted nodes", lineno, path)
        links.setdefault(q, set()).add(n)
    return {q: sorted(v) for q, v in sorted(links.items())}


def save_edge_list(graph: Graph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#nodes={graph.num_nodes}\n")
        for u, v in graph.edges.tolist():
            fh.write(f"{u}\t{v}\n")


def save_behaviors(behaviors: BehaviorData, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for n, t, c in zip(behaviors.entry_nodes.tolist(), behaviors.tokens.tolist(),
                           behaviors.counts.tolist()):
            fh.write(f"{n}\t{t}\t{c}\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def checkpoint_bytes(model: FittedModel) -> bytes:
    theta = np.asarray(model.theta_hat, dtype=np.float64)
    N, K = theta.shape
    V = model.omega_hat.shape[1]
    h = model.hyper
    trace = np.asarray(model.elbo_trace, dtype=np.float64)
    body = b"".join([
        MAGIC,
        _HEADER.pack(N, K, V, trace.size, int(model.iterations)),
        _f64(theta), _f64(model.beta_hat), _f64(model.omega_hat),
        _f64(h.alpha), _f64(h.eta), _f64(h.kappa), _f64([h.epsilon]), _f64(trace),
    ])
    return body + hashlib.sha256(body).digest()


def checkpoint_from_bytes(data: bytes) -> FittedModel:
    if len(data) < len(MAGIC):
        if MAGIC.startswith(data):
            raise CorruptCheckpointError("checkpoint truncated inside the magic string")
        raise CheckpointFormatError("not a checkpoint file")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    if len(data) < len(MAGIC) + _HEADER.size + _DIGEST:
        raise CorruptCheckpointError("checkpoint truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checksum mismatch")
    N, K, V, T, iterations = _HEADER.unpack_from(body, len(MAGIC))
    sizes = [N * K, K, K * V, K, 2, V, 1, T]
    floats = np.frombuffer(body, dtype="<f8", offset=len(MAGIC) + _HEADER.size)
    if floats.size != sum(sizes):
        raise CorruptCheckpointError("payload length disagrees with the header")
    parts = np.split(floats.astype(np.float64), np.cumsum(sizes)[:-1])
    theta, beta, omega, alpha, eta, kappa, eps, trace = parts
    hyper = Hyperparams(alpha=alpha, eta=(eta[0], eta[1]), kappa=kappa, epsilon=eps[0])
    return FittedModel(theta_hat=theta.reshape(N, K), beta_hat=beta,
                       omega_hat=omega.reshape(K, V), hyper=hyper,
                       elbo_trace=trace.tolist(), iterations=int(iterations))


def save_checkpoint(model: FittedModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> FittedModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def format_value(value) -> str:
    return f"{float(value):.6g}"


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for r in rows:
            missing = set(METRIC_FIELDS) - set(r)
            if missing:
                raise ValueError(f"metric row lacks {sorted(missing)}")
            writer.writerow([r["dataset"], r["task"], r["model"], int(r["K"]), int(r["fold"]),
                             int(r["repeat"]), r["metric"], format_value(r["value"])])


def read_metrics_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in ("K", "fold", "repeat"):
            r[key] = int(r[key])
        r["value"] = float(r["value"])
    return rows


# ---------------------------------------------------------------------------
# key=value configs
# ---------------------------------------------------------------------------

# SimConfig keys that build its Hyperparams rather than map to a field
SIM_HYPER_KEYS = {"num_topics": int, "vocab_size": int, "alpha_precision": float,
                  "eta": tuple, "kappa_value": float, "epsilon": float}


def read_key_values(path) -> dict:
    out = {}
    for lineno, line in _content_lines(path):
        if line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigFileError(f"{path}:line {lineno}: expected key=value, got {line!r}")
        if key in out:
            raise ConfigFileError(f"{path}:line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _coerce(key: str, text: str, kind):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(float(x) for x in text.split(","))
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigFileError(f"bad value for {key}: {text!r}") from None


def _field_kinds(cls) -> dict:
    kinds = {}
    for f in dataclasses.fields(cls):
        default = f.default
        kind = type(default) if default is not dataclasses.MISSING and default is not None else None
        if kind is None:
            kind = int if f.name in ("num_topics", "num_nodes") else float
        kinds[f.name] = kind
    return kinds


def fit_config_from_dict(values: dict, **overrides) -> FitConfig:
    kinds = _field_kinds(FitConfig)
    unknown = set(values) - set(kinds)
    if unknown:
        raise ConfigFileError(f"unknown fit config keys: {sorted(unknown)}")
    kwargs = {k: _coerce(k, v, kinds[k]) for k, v in values.items()}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return FitConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(str(exc)) from None


def sim_config_from_dict(values: dict, **overrides) -> SimConfig:
    kinds = {k: v for k, v in _field_kinds(SimConfig).items() if k != "hyper"}
    kinds["beta"] = tuple
    unknown = set(values) - set(kinds) - set(SIM_HYPER_KEYS)
    if unknown:
        raise ConfigFileError(f"unknown simulation config keys: {sorted(unknown)}")
    hyper_args = {k: _coerce(k, v, SIM_HYPER_KEYS[k]) for k, v in values.items()
                  if k in SIM_HYPER_KEYS}
    for k in ("num_topics", "vocab_size"):
        if k not in hyper_args:
            raise ConfigFileError(f"simulation config needs {k}")
    kwargs = {k: _coerce(k, v, kinds[k]) for k, v in values.items() if k in kinds}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    if "num_nodes" not in kwargs:
        raise ConfigFileError("simulation config needs num_nodes")
    try:
        hyper = Hyperparams.symmetric(hyper_args.pop("num_topics"), hyper_args.pop("vocab_size"),
                                      **hyper_args)
        return SimConfig(hyper=hyper, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(str(exc)) from None


def load_fit_config(path, **overrides) -> FitConfig:
    return fit_config_from_dict(read_key_values(path), **overrides)


def load_sim_config(path, **overrides) -> SimConfig:
    return sim_config_from_dict(read_key_values(path), **overrides)
