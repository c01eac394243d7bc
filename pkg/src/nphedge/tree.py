"""Scenario trees and the nonanticipativity machinery built on them.

A tree has ``T`` decision stages.  Stage 0 holds the single root; every leaf
sits at stage ``T - 1`` and each root-to-leaf path is one scenario.  Scenarios
are enumerated depth-first (children in file order), so scenarios sharing a
stage-``t`` node are contiguous.  Policy mappings are plain arrays of shape
``(n_scenarios, n_stages, action_dim)``.

Stages are 0-based in the API; :meth:`ScenarioTree.t_max` returns a *count* of
shared leading stages, so two distinct leaves of a fan share 1 stage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np

PROB_TOL = 1e-12


class TreeError(ValueError):
    """Raised for malformed trees or shape errors against a tree."""


@dataclass(frozen=True)
class Node:
    id: Any
    stage: int
    parent: Any
    prob: float


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class ScenarioTree:
    """Rooted scenario tree with per-node exogenous data.

    Parameters
    ----------
    nodes : sequence of Node
        Exactly one node with ``parent=None`` (the root, stage 0).  ``prob`` is
        the conditional probability of reaching the node from its parent.
    action_dim : int
        Dimension of the action vector taken at every node.
    data : mapping node id -> sequence of float, optional
        Exogenous vector attached to each node.  Either every node has data of
        a common length or none does.
    """

    def __init__(self, nodes: Sequence[Node], action_dim: int, data: dict | None = None):
        if action_dim < 1:
            raise TreeError(f"action_dim must be >= 1, got {action_dim}")
        self.action_dim = int(action_dim)
        self.nodes = tuple(nodes)
        if not self.nodes:
            raise TreeError("tree has no nodes")
        index: dict[Any, int] = {}
        for k, nd in enumerate(self.nodes):
            if nd.id in index:
                raise TreeError(f"nodes[{k}]: duplicate id {nd.id!r}")
            index[nd.id] = k
        self._index = index

        children: list[list[int]] = [[] for _ in self.nodes]
        roots = []
        for k, nd in enumerate(self.nodes):
            p = float(nd.prob)
            if not math.isfinite(p) or p < 0.0 or p > 1.0 + PROB_TOL:
                raise TreeError(f"nodes[{k}] (id {nd.id!r}): probability {nd.prob!r} outside [0, 1]")
            if nd.parent is None:
                roots.append(k)
                if nd.stage != 0:
                    raise TreeError(f"nodes[{k}] (id {nd.id!r}): root must be at stage 0, got {nd.stage}")
                if abs(p - 1.0) > PROB_TOL:
                    raise TreeError(f"nodes[{k}] (id {nd.id!r}): root probability must be 1, got {p}")
                continue
            if nd.parent not in index:
                raise TreeError(f"nodes[{k}] (id {nd.id!r}): unknown parent {nd.parent!r}")
            par = index[nd.parent]
            if nd.stage != self.nodes[par].stage + 1:
                raise TreeError(
                    f"nodes[{k}] (id {nd.id!r}): stage {nd.stage} does not follow parent stage "
                    f"{self.nodes[par].stage}"
                )
            children[par].append(k)
        if len(roots) != 1:
            raise TreeError(f"tree must have exactly one root, found {len(roots)}")
        self.root = roots[0]
        self._children = tuple(tuple(c) for c in children)

        for k, ch in enumerate(self._children):
            if ch:
                total = sum(float(self.nodes[c].prob) for c in ch)
                if abs(total - 1.0) > PROB_TOL:
                    raise TreeError(
                        f"nodes[{k}] (id {self.nodes[k].id!r}): children probabilities sum to {total!r}, not 1"
                    )

        # depth-first enumeration gives the canonical scenario order
        paths: list[list[int]] = []
        stack = [(self.root, [self.root])]
        seen = 0
        while stack:
            k, path = stack.pop()
            seen += 1
            if self._children[k]:
                for c in reversed(self._children[k]):
                    stack.append((c, path + [c]))
            else:
                paths.append(path)
        if seen != len(self.nodes):
            raise TreeError("tree contains nodes unreachable from the root")
        depth = {len(p) for p in paths}
        if len(depth) != 1:
            bad = next(i for i, p in enumerate(paths) if len(p) != len(paths[0]))
            raise TreeError(
                f"scenario {bad} has {len(paths[bad])} stages, expected {len(paths[0])}; "
                "all leaves must sit at the last stage"
            )
        self.n_stages = depth.pop()
        self.paths = _readonly(np.asarray(paths, dtype=np.intp))
        self.n_scenarios = len(paths)

        cond = np.array([float(nd.prob) for nd in self.nodes])
        self.probabilities = _readonly(np.prod(cond[self.paths], axis=1))
        total = float(self.probabilities.sum())
        if abs(total - 1.0) > 1e-10:
            raise TreeError(f"scenario probabilities sum to {total!r}, not 1")
        node_prob = np.zeros(len(self.nodes))
        np.add.at(node_prob, self.paths.ravel(), np.repeat(self.probabilities, self.n_stages))
        self.node_probabilities = _readonly(node_prob)

        self._data = None
        if data:
            missing = [nd.id for nd in self.nodes if nd.id not in data and str(nd.id) not in data]
            if missing:
                raise TreeError(f"scenario_data missing for node id {missing[0]!r}")
            rows = []
            for nd in self.nodes:
                v = data[nd.id] if nd.id in data else data[str(nd.id)]
                rows.append(np.atleast_1d(np.asarray(v, dtype=float)))
            width = {r.shape for r in rows}
            if len(width) != 1 or rows[0].ndim != 1:
                raise TreeError("scenario_data vectors must all be 1-D with the same length")
            arr = np.vstack(rows)
            if not np.all(np.isfinite(arr)):
                k = int(np.argwhere(~np.isfinite(arr))[0, 0])
                raise TreeError(f"scenario_data for node id {self.nodes[k].id!r} is not finite")
            self._data = _readonly(arr)

    # -- construction helpers ---------------------------------------------

    @classmethod
    def fan(cls, probs: Sequence[float], n_stages: int = 2, action_dim: int = 1,
            root_data=None, leaf_data=None) -> "ScenarioTree":
        """Root plus one chain of ``n_stages - 1`` nodes per scenario.

        ``leaf_data`` has shape ``(n_scenarios, n_stages - 1, d)``; entry
        ``[s, k]`` is attached to scenario ``s``'s node at stage ``k + 1``.
        """
        if n_stages < 1:
            raise TreeError("n_stages must be >= 1")
        probs = [float(p) for p in probs]
        if n_stages == 1 and len(probs) != 1:
            raise TreeError("a single-stage tree has exactly one scenario")
        nodes = [Node(0, 0, None, 1.0)]
        data = {} if leaf_data is not None else None
        if data is not None:
            data[0] = np.zeros(np.shape(leaf_data)[-1]) if root_data is None else root_data
        nid = 1
        for s, p in enumerate(probs):
            parent = 0
            for k in range(1, n_stages):
                nodes.append(Node(nid, k, parent, p if k == 1 else 1.0))
                if data is not None:
                    data[nid] = leaf_data[s][k - 1]
                parent = nid
                nid += 1
        return cls(nodes, action_dim, data)

    @classmethod
    def from_branching(cls, branch_probs: Sequence[Sequence[float]], action_dim: int = 1) -> "ScenarioTree":
        """Uniform branching: every stage-``t`` node gets children with ``branch_probs[t]``."""
        nodes = [Node(0, 0, None, 1.0)]
        frontier = [0]
        nid = 1
        for t, probs in enumerate(branch_probs):
            nxt = []
            for parent in frontier:
                for p in probs:
                    nodes.append(Node(nid, t + 1, parent, float(p)))
                    nxt.append(nid)
                    nid += 1
            frontier = nxt
        return cls(nodes, action_dim)

    # -- basic accessors ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_scenarios, self.n_stages, self.action_dim)

    @property
    def has_data(self) -> bool:
        return self._data is not None

    @property
    def node_data(self) -> np.ndarray:
        if self._data is None:
            raise TreeError("tree carries no scenario data")
        return self._data

    @cached_property
    def path_data(self) -> np.ndarray:
        """Exogenous data along every scenario path, shape ``(N, T, d)``."""
        return _readonly(self.node_data[self.paths])

    def children(self, k: int) -> tuple[int, ...]:
        return self._children[k]

    def node_index(self, node_id) -> int:
        return self._index[node_id]

    def stage_order(self) -> list[int]:
        """Node indices sorted by stage (parents before children)."""
        return sorted(range(len(self.nodes)), key=lambda k: self.nodes[k].stage)

    def parent_index(self, k: int) -> int | None:
        par = self.nodes[k].parent
        return None if par is None else self._index[par]

    def _check_scenario(self, s: int) -> int:
        if not 0 <= s < self.n_scenarios:
            raise IndexError(f"scenario index {s} out of range [0, {self.n_scenarios})")
        return int(s)

    def _check_mapping(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != self.shape:
            raise TreeError(f"mapping shape {x.shape} does not match tree shape {self.shape}")
        return x

    # -- scenario geometry -------------------------------------------------

    def scenario_probability(self, s: int) -> float:
        return float(self.probabilities[self._check_scenario(s)])

    def t_max(self, s1: int, s2: int) -> int:
        """Number of leading stages on which scenarios ``s1`` and ``s2`` share nodes."""
        a = self.paths[self._check_scenario(s1)]
        b = self.paths[self._check_scenario(s2)]
        diff = np.flatnonzero(a != b)
        return int(diff[0]) if diff.size else self.n_stages

    @cached_property
    def sibling_table(self) -> np.ndarray:
        """``table[s, t]`` is the stage-``t`` sibling of scenario ``s``.

        Within every stage-``t`` node group the sibling map is the cyclic
        permutation ``s -> s + 1`` wrapping to the first member of the group;
        scenarios alone at a node are their own sibling.
        """
        N, T = self.n_scenarios, self.n_stages
        table = np.empty((N, T), dtype=np.intp)
        for t in range(T):
            grp = self.paths[:, t]
            first = {}
            for s in range(N):
                first.setdefault(int(grp[s]), s)
            for s in range(N):
                if s + 1 < N and grp[s + 1] == grp[s]:
                    table[s, t] = s + 1
                else:
                    table[s, t] = first[int(grp[s])]
        return _readonly(table)

    def sibling(self, s: int, t: int) -> int:
        if not 0 <= t < self.n_stages:
            raise IndexError(f"stage {t} out of range [0, {self.n_stages})")
        return int(self.sibling_table[self._check_scenario(s), t])

    # -- nonanticipativity -------------------------------------------------

    def project_nonanticipative(self, x: np.ndarray) -> np.ndarray:
        """Probability-weighted average of actions over each stage-``t`` node group."""
        x = self._check_mapping(x)
        if np.any(self.node_probabilities <= 0.0):
            k = int(np.flatnonzero(self.node_probabilities <= 0.0)[0])
            raise TreeError(f"node id {self.nodes[k].id!r} has zero probability; averaging is undefined")
        idx = self.paths.ravel()
        w = np.repeat(self.probabilities, self.n_stages)
        flat = x.reshape(-1, self.action_dim)
        out = np.empty_like(flat)
        for j in range(self.action_dim):
            sums = np.bincount(idx, weights=w * flat[:, j], minlength=len(self.nodes))
            out[:, j] = (sums / self.node_probabilities)[idx]
        return out.reshape(self.shape)

    def nonanticipativity_residual(self, x: np.ndarray) -> float:
        """Largest ``|x_s(t) - x_sibling(s,t)(t)|`` over stages before the last."""
        x = self._check_mapping(x)
        if self.n_stages < 2:
            return 0.0
        T1 = self.n_stages - 1
        sib = self.sibling_table[:, :T1]
        stages = np.arange(T1)[None, :]
        gap = np.abs(x[:, :T1, :] - x[sib, stages, :])
        return float(gap.max()) if gap.size else 0.0

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        doc = {
            "stages": self.n_stages,
            "action_dim": self.action_dim,
            "nodes": [
                {"id": nd.id, "stage": nd.stage, "parent": nd.parent, "prob": float(nd.prob)}
                for nd in self.nodes
            ],
        }
        if self._data is not None:
            doc["scenario_data"] = {str(nd.id): self._data[k].tolist() for k, nd in enumerate(self.nodes)}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioTree":
        if not isinstance(doc, dict):
            raise TreeError("tree document must be a JSON object")
        for key in ("stages", "action_dim", "nodes"):
            if key not in doc:
                raise TreeError(f"tree document missing field {key!r}")
        extra = set(doc) - {"stages", "action_dim", "nodes", "scenario_data"}
        if extra:
            raise TreeError(f"tree document has unknown field {sorted(extra)[0]!r}")
        nodes = []
        for k, raw in enumerate(doc["nodes"]):
            try:
                nodes.append(Node(raw["id"], int(raw["stage"]), raw.get("parent"), float(raw["prob"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise TreeError(f"nodes[{k}]: malformed node entry ({exc})") from None
        tree = cls(nodes, int(doc["action_dim"]), doc.get("scenario_data"))
        if tree.n_stages != int(doc["stages"]):
            raise TreeError(f"declared stages={doc['stages']} but leaves sit at depth {tree.n_stages}")
        return tree


def load_tree(path) -> ScenarioTree:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TreeError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return ScenarioTree.from_dict(doc)


def save_tree(tree: ScenarioTree, path) -> None:
    Path(path).write_text(json.dumps(tree.to_dict(), indent=1) + "\n")


class WeightedNorm:
    """Inner product ``<a, b> = sum_s q_s <a_s, b_s>`` over per-scenario arrays.

    Works for mappings ``(N, T, n)`` and per-scenario scalars ``(N,)``.
    """

    def __init__(self, tree_or_probs):
        q = tree_or_probs.probabilities if isinstance(tree_or_probs, ScenarioTree) else tree_or_probs
        self.q = np.asarray(q, dtype=float)

    def inner(self, a, b) -> float:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape != b.shape or a.shape[0] != self.q.size:
            raise TreeError(f"shape mismatch: {a.shape} vs {b.shape} for {self.q.size} scenarios")
        prod = (a * b).reshape(a.shape[0], -1).sum(axis=1)
        return float(self.q @ prod)

    def __call__(self, a) -> float:
        return math.sqrt(max(self.inner(a, a), 0.0))
