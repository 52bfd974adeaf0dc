"""Synthetic multi-step reasoning tasks with gold intermediate steps.

Two families are provided:

``dag_reach``
    A DAG over ``nodes`` vertices. Vertex 0 is the source, the last
    ``n_choices`` vertices are candidate targets (sinks) and exactly one of
    them is reachable from the source, through a unique path of ``depth``
    edges. Distractor edges hang off vertices outside the path (or, with
    ``branch_distractors``, also off path vertices) and never change that.
    Features are the adjacency bits of every edge slot ``(u, w)`` with ``u`` a
    non-candidate and ``u < w``, followed by a "visited" indicator block over
    all vertices. Gold step t marks the path prefix up to its t-th edge.

``mod_chain``
    Start from a value mod ``modulus`` and apply ``chain_len`` operations of
    the form ``+k`` or ``*k``. Features are the current value one-hot, the
    operation list, a position one-hot, the choice values and a slot-match
    block.

In both layouts the final ``n_choices`` coordinates form the *answer block*:
at the terminal gold step it is the one-hot of the gold choice slot.
"""

from __future__ import annotations

import hashlib
import inspect
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1
FAMILIES = ("dag_reach", "mod_chain")
SUPERVISION_FORMATS = ("no_cot", "cot", "latent_cot")
DEFAULT_TOKENS_PER_STEP = 10


class InfeasibleTaskError(ValueError):
    pass


class TaskSchemaError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True, eq=False)
class TaskInstance:
    id: str
    family: str
    question_features: np.ndarray
    choices: tuple[str, ...]
    gold: str
    steps: np.ndarray  # (n, width)

    def __post_init__(self):
        q = np.array(self.question_features, dtype=np.float64)
        steps = np.array(self.steps, dtype=np.float64)
        if steps.ndim == 1:
            steps = steps.reshape(1, -1)
        object.__setattr__(self, "question_features", q)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "choices", tuple(str(c) for c in self.choices))
        if self.family not in FAMILIES:
            raise TaskSchemaError(f"unknown family {self.family!r}")
        if q.ndim != 1 or q.size == 0:
            raise TaskSchemaError("question_features must be a non-empty vector")
        if steps.shape[0] < 1 or steps.shape[1] != q.size:
            raise TaskSchemaError(f"steps shape {steps.shape} inconsistent with width {q.size}")
        if len(self.choices) < 2 or len(set(self.choices)) != len(self.choices):
            raise TaskSchemaError("need at least two distinct choices")
        if self.gold not in self.choices:
            raise TaskSchemaError(f"gold {self.gold!r} not among choices")

    @property
    def width(self) -> int:
        return self.question_features.size

    @property
    def n_steps(self) -> int:
        return self.steps.shape[0]

    @property
    def gold_index(self) -> int:
        return self.choices.index(self.gold)

    def __eq__(self, other):
        if not isinstance(other, TaskInstance):
            return NotImplemented
        return (
            self.id == other.id
            and self.family == other.family
            and self.choices == other.choices
            and self.gold == other.gold
            and np.array_equal(self.question_features, other.question_features)
            and np.array_equal(self.steps, other.steps)
        )

    def __hash__(self):
        return hash((self.id, self.family, self.gold))


def aligned_step_index(t: int, total_steps: int, n_gold: int) -> int:
    """0-based gold step that latent step ``t`` (1-based, of ``total_steps``) targets.

    Step ``total_steps`` always targets the terminal gold step.
    """
    return max(0, math.ceil(t * n_gold / total_steps) - 1)


# ---------------------------------------------------------------------------
# dag_reach


@dataclass(frozen=True)
class DagLayout:
    nodes: int
    n_choices: int = 5

    @property
    def candidates(self) -> range:
        return range(self.nodes - self.n_choices, self.nodes)

    @property
    def edge_slots(self) -> list[tuple[int, int]]:
        inner = self.nodes - self.n_choices
        return [(u, w) for u in range(inner) for w in range(u + 1, self.nodes)]

    @property
    def width(self) -> int:
        return len(self.edge_slots) + self.nodes

    def encode(self, edges: set[tuple[int, int]], visited: Iterable[int]) -> np.ndarray:
        slots = self.edge_slots
        z = np.zeros(self.width)
        for i, e in enumerate(slots):
            if e in edges:
                z[i] = 1.0
        for v in visited:
            z[len(slots) + v] = 1.0
        return z

    def decode(self, z) -> tuple[set[tuple[int, int]], set[int]]:
        """Recover ``(edges, visited_vertices)`` from a feature vector."""
        z = np.asarray(z)
        slots = self.edge_slots
        edges = {e for i, e in enumerate(slots) if z[i] > 0.5}
        visited = {int(v) for v in np.flatnonzero(z[len(slots):] > 0.5)}
        return edges, visited

    @classmethod
    def from_width(cls, width: int, n_choices: int = 5) -> "DagLayout":
        for nodes in range(n_choices + 1, 4096):
            layout = cls(nodes, n_choices)
            if layout.width == width:
                return layout
            if layout.width > width:
                break
        raise TaskSchemaError(f"no dag_reach layout has width {width}")


def _reachable(edges: Iterable[tuple[int, int]], source: int, nodes: int) -> set[int]:
    succ: dict[int, list[int]] = {}
    for u, w in edges:
        succ.setdefault(u, []).append(w)
    seen = {source}
    stack = [source]
    while stack:
        u = stack.pop()
        for w in succ.get(u, ()):
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen


def _count_paths(edges: Iterable[tuple[int, int]], source: int, target: int, nodes: int) -> int:
    # vertex ids are a topological order
    ways = [0] * nodes
    ways[source] = 1
    succ: dict[int, list[int]] = {}
    for u, w in edges:
        succ.setdefault(u, []).append(w)
    for u in range(source, nodes):
        if ways[u]:
            for w in succ.get(u, ()):
                ways[w] += ways[u]
    return ways[target]


_RESAMPLE_LIMIT = 50


def _place_dag(rng, inner, cands, slots, depth, distractors, nodes, branch_distractors):
    mids = sorted(rng.choice(np.arange(1, inner), size=depth - 1, replace=False).tolist())
    gold = int(rng.choice(cands))
    path = [0, *mids, gold]
    edges = set(zip(path[:-1], path[1:]))
    placed = 0
    for _ in range(100 * max(distractors, 1)):
        if placed == distractors:
            break
        e = slots[int(rng.integers(len(slots)))]
        if e in edges or (not branch_distractors and e[0] in path):
            continue
        trial = edges | {e}
        reach = _reachable(trial, 0, nodes)
        if [c for c in cands if c in reach] != [gold]:
            continue
        if _count_paths(trial, 0, gold, nodes) != 1:
            continue
        edges = trial
        placed += 1
    if placed < distractors:
        return None
    return edges, path, gold


def gen_dag_reach(
    count: int,
    nodes: int = 11,
    depth: int = 3,
    distractors: int = 5,
    seed: int = 0,
    n_choices: int = 5,
    branch_distractors: bool = False,
) -> list[TaskInstance]:
    if count < 1:
        raise ValueError("count must be >= 1")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if nodes < depth + n_choices:
        raise InfeasibleTaskError(
            f"{nodes} nodes cannot hold a {depth}-edge path plus {n_choices} candidates"
        )
    layout = DagLayout(nodes, n_choices)
    inner = nodes - n_choices
    cands = list(layout.candidates)
    slots = layout.edge_slots
    rng = np.random.default_rng([int(seed), 0xDA6])
    out = []
    for i in range(count):
        for _ in range(_RESAMPLE_LIMIT):
            placed = _place_dag(rng, inner, cands, slots, depth, distractors, nodes, branch_distractors)
            if placed is not None:
                break
        else:
            raise InfeasibleTaskError(
                f"could not place {distractors} distractor edges around a unique "
                f"{depth}-edge path in {_RESAMPLE_LIMIT} tries (nodes={nodes})"
            )
        edges, path, gold = placed
        out.append(
            TaskInstance(
                id=f"dag_reach-{seed}-{i}",
                family="dag_reach",
                question_features=layout.encode(edges, [0]),
                choices=tuple(f"n{c}" for c in cands),
                gold=f"n{gold}",
                steps=np.stack([layout.encode(edges, path[: t + 1]) for t in range(1, len(path))]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# mod_chain


@dataclass(frozen=True)
class ModChainLayout:
    chain_len: int
    modulus: int
    n_choices: int = 5

    @property
    def width(self) -> int:
        m, n, c = self.modulus, self.chain_len, self.n_choices
        return m + n * (2 + m) + (n + 1) + c * m + c

    def encode(self, value: int, ops: Sequence[tuple[str, int]], position: int,
               choice_values: Sequence[int]) -> np.ndarray:
        m, n = self.modulus, self.chain_len
        z = np.zeros(self.width)
        z[value] = 1.0
        off = m
        for j, (op, k) in enumerate(ops):
            z[off + 2 * j + (0 if op == "+" else 1)] = 1.0
            z[off + 2 * n + j * m + k] = 1.0
        off += n * (2 + m)
        z[off + position] = 1.0
        off += n + 1
        for c, v in enumerate(choice_values):
            z[off + c * m + v] = 1.0
        off += self.n_choices * m
        for c, v in enumerate(choice_values):
            z[off + c] = 1.0 if v == value else 0.0
        return z

    def decode(self, z) -> dict:
        """Recover value, operations, position and choice values from features."""
        z = np.asarray(z)
        m, n = self.modulus, self.chain_len
        value = int(np.argmax(z[:m]))
        off = m
        ops = []
        for j in range(n):
            op = "+" if z[off + 2 * j] > 0.5 else "*"
            k = int(np.argmax(z[off + 2 * n + j * m: off + 2 * n + (j + 1) * m]))
            ops.append((op, k))
        off += n * (2 + m)
        position = int(np.argmax(z[off: off + n + 1]))
        off += n + 1
        choice_values = [int(np.argmax(z[off + c * m: off + (c + 1) * m])) for c in range(self.n_choices)]
        return {"value": value, "ops": ops, "position": position, "choice_values": choice_values}

    @classmethod
    def from_width(cls, width: int, chain_len: int, n_choices: int = 5) -> "ModChainLayout":
        # width is linear in modulus for a fixed chain length
        n, c = chain_len, n_choices
        num = width - 2 * n - (n + 1) - c
        den = 1 + n + c
        if num <= 0 or num % den:
            raise TaskSchemaError(f"no mod_chain layout with width {width} and chain_len {n}")
        return cls(n, num // den, c)


def apply_op(value: int, op: str, k: int, modulus: int) -> int:
    if op == "+":
        return (value + k) % modulus
    if op == "*":
        return (value * k) % modulus
    raise ValueError(f"unknown op {op!r}")


def mod_chain_instance(
    id: str,
    start: int,
    ops: Sequence[tuple[str, int]],
    modulus: int,
    rng: np.random.Generator,
    n_choices: int = 5,
) -> TaskInstance:
    if modulus < n_choices:
        raise InfeasibleTaskError(f"modulus {modulus} leaves no room for {n_choices} distinct choices")
    if not ops:
        raise ValueError("need at least one operation")
    layout = ModChainLayout(len(ops), modulus, n_choices)
    values = []
    v = start % modulus
    for op, k in ops:
        v = apply_op(v, op, k, modulus)
        values.append(v)
    gold = values[-1]
    others = [x for x in range(modulus) if x != gold]
    decoys = rng.choice(others, size=n_choices - 1, replace=False).tolist()
    choice_values = [gold, *decoys]
    rng.shuffle(choice_values)
    choice_values = [int(c) for c in choice_values]
    return TaskInstance(
        id=id,
        family="mod_chain",
        question_features=layout.encode(start % modulus, ops, 0, choice_values),
        choices=tuple(str(c) for c in choice_values),
        gold=str(gold),
        steps=np.stack([layout.encode(val, ops, t + 1, choice_values) for t, val in enumerate(values)]),
    )


def gen_mod_chain(
    count: int, chain_len: int = 3, modulus: int = 7, seed: int = 0, n_choices: int = 5
) -> list[TaskInstance]:
    if count < 1:
        raise ValueError("count must be >= 1")
    if chain_len < 1:
        raise ValueError("chain_len must be >= 1")
    if modulus < n_choices:
        raise InfeasibleTaskError(f"modulus must be >= {n_choices}")
    rng = np.random.default_rng([int(seed), 0x30D])
    out = []
    for i in range(count):
        start = int(rng.integers(modulus))
        ops = []
        for _ in range(chain_len):
            if rng.random() < 0.5:
                ops.append(("+", int(rng.integers(1, modulus))))
            else:
                ops.append(("*", int(rng.integers(2, modulus))))
        out.append(mod_chain_instance(f"mod_chain-{seed}-{i}", start, ops, modulus, rng, n_choices))
    return out


def generate(family: str, count: int, seed: int = 0, **params) -> list[TaskInstance]:
    gens = {"dag_reach": gen_dag_reach, "mod_chain": gen_mod_chain}
    if family not in gens:
        raise ValueError(f"unknown family {family!r}")
    gen = gens[family]
    allowed = set(inspect.signature(gen).parameters) - {"count", "seed"}
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"{family} does not take {sorted(unknown)}; allowed: {sorted(allowed)}")
    return gen(count, seed=seed, **params)


# ---------------------------------------------------------------------------
# JSONL


def instance_to_dict(x: TaskInstance) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "id": x.id,
        "family": x.family,
        "question_features": x.question_features.tolist(),
        "choices": list(x.choices),
        "gold": x.gold,
        "steps": x.steps.tolist(),
    }


_REQUIRED = ("schema_version", "id", "family", "question_features", "choices", "gold", "steps")


def instance_from_dict(d: dict, line: int | None = None) -> TaskInstance:
    if not isinstance(d, dict):
        raise TaskSchemaError("record is not an object", line)
    missing = [k for k in _REQUIRED if k not in d]
    if missing:
        raise TaskSchemaError(f"missing field(s) {', '.join(missing)}", line)
    if d["schema_version"] != SCHEMA_VERSION:
        raise TaskSchemaError(f"unsupported schema_version {d['schema_version']!r}", line)
    try:
        return TaskInstance(
            id=str(d["id"]),
            family=d["family"],
            question_features=np.asarray(d["question_features"], dtype=np.float64),
            choices=tuple(d["choices"]),
            gold=d["gold"],
            steps=np.asarray(d["steps"], dtype=np.float64),
        )
    except TaskSchemaError as e:
        raise TaskSchemaError(str(e), line) from None
    except (TypeError, ValueError) as e:
        raise TaskSchemaError(str(e), line) from None


def write_jsonl(instances: Iterable[TaskInstance], path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for x in instances:
            fh.write(json.dumps(instance_to_dict(x)) + "\n")


def read_jsonl(path) -> list[TaskInstance]:
    out = []
    with Path(path).open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
            except json.JSONDecodeError as e:
                raise TaskSchemaError(f"malformed JSON ({e.msg})", lineno) from None
            out.append(instance_from_dict(d, lineno))
    return out


# ---------------------------------------------------------------------------
# supervision formats and splits


@dataclass(frozen=True, eq=False)
class TrainingExample:
    format: str
    features: np.ndarray
    answer: str
    answer_index: int
    output_tokens: tuple[str, ...] | None = None
    step_targets: np.ndarray | None = None


def render_step(step, k: int = DEFAULT_TOKENS_PER_STEP) -> list[str]:
    """Render a step feature vector as exactly ``k`` pseudo-tokens."""
    step = np.asarray(step)
    order = np.argsort(-np.abs(step), kind="stable")[:k]
    toks = [f"f{int(j)}" for j in sorted(order.tolist())]
    return toks + ["<pad>"] * (k - len(toks))


def supervision_view(x: TaskInstance, fmt: str, tokens_per_step: int = DEFAULT_TOKENS_PER_STEP) -> TrainingExample:
    if fmt == "no_cot":
        return TrainingExample(fmt, x.question_features.copy(), x.gold, x.gold_index, output_tokens=(x.gold,))
    if fmt == "cot":
        toks: list[str] = []
        for s in x.steps:
            toks.extend(render_step(s, tokens_per_step))
        toks.append(x.gold)
        return TrainingExample(fmt, x.question_features.copy(), x.gold, x.gold_index, output_tokens=tuple(toks))
    if fmt == "latent_cot":
        return TrainingExample(fmt, x.question_features.copy(), x.gold, x.gold_index,
                               output_tokens=(x.gold,), step_targets=x.steps.copy())
    raise ValueError(f"unknown supervision format {fmt!r}; expected one of {SUPERVISION_FORMATS}")


def split_of(seed: int, instance_id: str) -> str:
    """Assign an instance to train/val/test (80/10/10) by hashing ``(seed, id)``."""
    digest = hashlib.sha256(f"{seed}:{instance_id}".encode()).digest()
    bucket = int.from_bytes(digest[:8], "big") % 10
    if bucket < 8:
        return "train"
    return "val" if bucket == 8 else "test"


def split_instances(instances: Iterable[TaskInstance], seed: int) -> dict[str, list[TaskInstance]]:
    out: dict[str, list[TaskInstance]] = {"train": [], "val": [], "test": []}
    for x in instances:
        out[split_of(seed, x.id)].append(x)
    return out


def stack_features(instances: Sequence[TaskInstance]) -> np.ndarray:
    return np.stack([x.question_features for x in instances])


def gold_indices(instances: Sequence[TaskInstance]) -> np.ndarray:
    return np.array([x.gold_index for x in instances], dtype=np.int64)
