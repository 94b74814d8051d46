"""SPN structures describing how basis kernels are combined.

A structure is a rooted DAG with four node kinds:

* ``sum``      -- chooses one child per path; carries no weight.
* ``product``  -- multiplies its children; carries a learnable weight and an
  exponent ``p`` used by the weight penalty.
* ``combiner`` -- weightless product (Hadamard combination of sub-networks).
* ``leaf``     -- refers to one basis kernel.

A *path* is an induced tree: one child at every sum node, all children at
every product/combiner node.  Its kernel is the Hadamard product of the
Gram matrices at its leaves.
"""

from __future__ import annotations

import itertools
import json
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from .errors import EmptyModelError, PathLimitError, StructureError

KINDS = ("sum", "product", "combiner", "leaf")
DEFAULT_MAX_PATHS = 10_000


@dataclass(frozen=True)
class SpnNode:
    id: str
    kind: str
    children: tuple[str, ...] = ()
    kernel: str | None = None
    p: float | None = None

    @property
    def weighted(self) -> bool:
        return self.kind == "product"


@dataclass(frozen=True)
class SpnGraph:
    nodes: tuple[SpnNode, ...]
    root: str

    @cached_property
    def by_id(self) -> dict[str, SpnNode]:
        return {n.id: n for n in self.nodes}

    def __getitem__(self, node_id: str) -> SpnNode:
        return self.by_id[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.by_id

    @property
    def product_ids(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes if n.weighted)

    @property
    def kernel_refs(self) -> tuple[str, ...]:
        refs = []
        for n in self.nodes:
            if n.kind == "leaf" and n.kernel not in refs:
                refs.append(n.kernel)
        return tuple(refs)

    def exponents(
        self, default: float = 1.0, overrides: Mapping[str, float] | None = None
    ) -> dict[str, float]:
        """Effective penalty exponent per product node.

        Precedence: ``overrides`` > the node's own ``p`` > ``default``.
        """
        overrides = dict(overrides or {})
        unknown = set(overrides) - set(self.product_ids)
        if unknown:
            raise StructureError(f"exponent override for non-product node(s): {sorted(unknown)}")
        out = {}
        for v in self.product_ids:
            p = overrides.get(v, self[v].p if self[v].p is not None else default)
            if not p > 0:
                raise StructureError(f"exponent for node {v!r} must be positive, got {p}")
            out[v] = float(p)
        return out


# ---------------------------------------------------------------------------
# Parsing and serialization


def _node_from_dict(d: Mapping) -> SpnNode:
    if not isinstance(d, Mapping):
        raise StructureError(f"node entry must be an object, got {d!r}")
    try:
        node_id, kind = str(d["id"]), d["kind"]
    except KeyError as exc:
        raise StructureError(f"node entry missing field {exc}") from None
    if kind not in KINDS:
        raise StructureError(f"node {node_id!r}: unknown kind {kind!r}")
    children = tuple(str(c) for c in d.get("children", ()) or ())
    kernel = d.get("kernel")
    p = d.get("p")
    if kind in ("sum", "combiner") and (p is not None or "weight" in d):
        raise StructureError(f"weight declared on {kind} node {node_id!r}")
    if kind == "leaf":
        if children:
            raise StructureError(f"leaf {node_id!r} has children")
        if not isinstance(kernel, str) or not kernel:
            raise StructureError(f"leaf {node_id!r} needs exactly one kernel reference")
        if p is not None:
            raise StructureError(f"weight declared on leaf {node_id!r}")
    else:
        if not children:
            raise StructureError(f"{kind} node {node_id!r} has no children")
        if kernel is not None:
            raise StructureError(f"{kind} node {node_id!r} cannot reference a kernel")
    if p is not None:
        if isinstance(p, bool) or not isinstance(p, (int, float)) or not p > 0:
            raise StructureError(f"node {node_id!r}: exponent p must be positive, got {p!r}")
        p = float(p)
    return SpnNode(node_id, kind, children, kernel, p)


def validate(graph: SpnGraph, kernel_names: Iterable[str] | None = None) -> None:
    ids = [n.id for n in graph.nodes]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise StructureError(f"duplicate node id(s): {dup}")
    by_id = graph.by_id
    if graph.root not in by_id:
        raise StructureError(f"root {graph.root!r} is not a node")
    for n in graph.nodes:
        for c in n.children:
            if c not in by_id:
                raise StructureError(f"node {n.id!r} has unknown child {c!r}")

    # iterative three-colour DFS; also collects the reachable set
    state: dict[str, int] = {}
    stack: list[tuple[str, int]] = [(graph.root, 0)]
    while stack:
        v, i = stack.pop()
        if i == 0:
            if state.get(v) == 2:
                continue
            state[v] = 1
        children = by_id[v].children
        if i < len(children):
            stack.append((v, i + 1))
            c = children[i]
            if state.get(c) == 1:
                raise StructureError(f"cycle detected through node {c!r}")
            if state.get(c) != 2:
                stack.append((c, 0))
        else:
            state[v] = 2
    unreachable = [i for i in ids if i not in state]
    if unreachable:
        raise StructureError(f"node(s) unreachable from root: {unreachable}")

    if kernel_names is not None:
        known = set(kernel_names)
        for n in graph.nodes:
            if n.kind == "leaf" and n.kernel not in known:
                raise StructureError(f"leaf {n.id!r}: unknown kernel reference {n.kernel!r}")


def spn_from_dict(doc: Mapping, kernel_names: Iterable[str] | None = None) -> SpnGraph:
    if not isinstance(doc, Mapping) or "nodes" not in doc or "root" not in doc:
        raise StructureError("structure document needs 'nodes' and 'root'")
    graph = SpnGraph(tuple(_node_from_dict(d) for d in doc["nodes"]), str(doc["root"]))
    validate(graph, kernel_names)
    return graph


def parse_spn(text: str, kernel_names: Iterable[str] | None = None) -> SpnGraph:
    """Parse and validate a JSON structure document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise StructureError(f"structure document is not valid JSON: {exc}") from None
    return spn_from_dict(doc, kernel_names)


def load_spn(path, kernel_names: Iterable[str] | None = None) -> SpnGraph:
    with open(path) as fh:
        return parse_spn(fh.read(), kernel_names)


def spn_to_dict(graph: SpnGraph) -> dict:
    nodes = []
    for n in graph.nodes:
        d: dict = {"id": n.id, "kind": n.kind, "children": list(n.children)}
        if n.kernel is not None:
            d["kernel"] = n.kernel
        if n.p is not None:
            d["p"] = n.p
        nodes.append(d)
    return {"nodes": nodes, "root": graph.root}


def dumps_spn(graph: SpnGraph) -> str:
    return json.dumps(spn_to_dict(graph), indent=2)


# ---------------------------------------------------------------------------
# Paths


@dataclass(frozen=True)
class Path:
    """One induced tree.

    ``members`` holds ``(node_id, layer, n)`` for every weighted product node
    occurrence, in pre-order; ``layer`` counts from 1 and ``n`` is the
    position within the layer (from 1).
    """

    id: int
    members: tuple[tuple[str, int, int], ...]
    leaves: tuple[str, ...]
    n_layers: int
    layer_sizes: tuple[int, ...]

    @property
    def exponents(self) -> tuple[Fraction, ...]:
        return tuple(Fraction(1, self.n_layers * self.layer_sizes[l - 1]) for _, l, _ in self.members)

    @property
    def member_ids(self) -> tuple[str, ...]:
        return tuple(v for v, _, _ in self.members)


@dataclass(frozen=True)
class PathTable:
    paths: tuple[Path, ...]
    product_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.paths)

    @cached_property
    def index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.product_ids)}

    @cached_property
    def node_to_paths(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, list[int]] = defaultdict(list)
        for path in self.paths:
            for v in dict.fromkeys(path.member_ids):
                out[v].append(path.id)
        return {v: tuple(out[v]) for v in self.product_ids}

    @cached_property
    def exact_exponents(self) -> dict[tuple[int, str], Fraction]:
        """Summed exponent of node ``v`` in path ``m``, keyed by ``(m, v)``."""
        out: dict[tuple[int, str], Fraction] = defaultdict(Fraction)
        for path in self.paths:
            for v, e in zip(path.member_ids, path.exponents):
                out[path.id, v] += e
        return dict(out)

    @cached_property
    def exponent_matrix(self) -> np.ndarray:
        """Dense ``(n_paths, n_nodes)`` matrix of path exponents."""
        E = np.zeros((len(self.paths), len(self.product_ids)))
        for (m, v), e in self.exact_exponents.items():
            E[m, self.index[v]] = float(e)
        E.setflags(write=False)
        return E

    @cached_property
    def coeff_units(self) -> dict[str, Fraction]:
        """Per-node penalty coefficient divided by lambda (exact)."""
        out = {v: Fraction(0) for v in self.product_ids}
        for (_, v), e in self.exact_exponents.items():
            out[v] += e
        return out


def count_paths(graph: SpnGraph) -> int:
    memo: dict[str, int] = {}

    def count(v: str) -> int:
        if v not in memo:
            node = graph[v]
            if node.kind == "leaf":
                memo[v] = 1
            elif node.kind == "sum":
                memo[v] = sum(count(c) for c in node.children)
            else:
                memo[v] = int(np.prod([count(c) for c in node.children], dtype=object))
        return memo[v]

    return count(graph.root)


def enumerate_paths(graph: SpnGraph, max_paths: int = DEFAULT_MAX_PATHS) -> PathTable:
    """Enumerate all induced trees in lexicographic child-choice order."""
    total = count_paths(graph)
    if total > max_paths:
        raise PathLimitError(f"structure expands to {total} paths (cap {max_paths})")

    memo: dict[tuple[str, int], list[tuple[tuple, tuple]]] = {}

    def expand(v: str, depth: int):
        key = (v, depth)
        if key in memo:
            return memo[key]
        node = graph[v]
        if node.kind == "leaf":
            out = [((), (node.kernel,))]
        elif node.kind == "sum":
            out = [t for c in node.children for t in expand(c, depth + 1)]
        else:
            head = ((v, depth),) if node.weighted else ()
            out = []
            for combo in itertools.product(*(expand(c, depth) for c in node.children)):
                members = head + tuple(x for mem, _ in combo for x in mem)
                leaves = tuple(k for _, lv in combo for k in lv)
                out.append((members, leaves))
        memo[key] = out
        return out

    paths = []
    for m, (raw, leaves) in enumerate(expand(graph.root, 0)):
        if not raw:
            raise StructureError(
                f"path {m} (leaves {list(leaves)}) contains no weighted product node"
            )
        # layers are the distinct sum-depths present, renumbered from 1
        depths = sorted({d for _, d in raw})
        layer_of = {d: i + 1 for i, d in enumerate(depths)}
        seen = [0] * len(depths)
        members = []
        for v, d in raw:
            l = layer_of[d]
            seen[l - 1] += 1
            members.append((v, l, seen[l - 1]))
        paths.append(Path(m, tuple(members), leaves, len(depths), tuple(seen)))

    used = {v for p in paths for v in p.member_ids}
    return PathTable(tuple(paths), tuple(v for v in graph.product_ids if v in used))


def prune_zero_nodes(
    graph: SpnGraph,
    table: PathTable,
    betas: Mapping[str, float],
    threshold: float = 0.0,
    max_paths: int = DEFAULT_MAX_PATHS,
) -> tuple[SpnGraph, PathTable]:
    """Drop product nodes with weight <= threshold and every path through them.

    Product/combiner ancestors that lose a child die with it, sum nodes die
    once all their children are gone; nodes left unreachable are dropped.
    """
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    dead = {v for v in table.product_ids if betas[v] <= threshold}
    if not dead:
        return graph, table

    changed = True
    while changed:
        changed = False
        for n in graph.nodes:
            if n.id in dead or n.kind == "leaf":
                continue
            alive = [c for c in n.children if c not in dead]
            if (n.kind == "sum" and not alive) or (n.kind != "sum" and len(alive) < len(n.children)):
                dead.add(n.id)
                changed = True
    if graph.root in dead:
        raise EmptyModelError("pruning removed every path")

    kept = {}
    for n in graph.nodes:
        if n.id not in dead:
            kids = tuple(c for c in n.children if c not in dead)
            kept[n.id] = SpnNode(n.id, n.kind, kids, n.kernel, n.p)
    reach, stack = set(), [graph.root]
    while stack:
        v = stack.pop()
        if v not in reach:
            reach.add(v)
            stack.extend(kept[v].children)
    new = SpnGraph(tuple(n for n in kept.values() if n.id in reach), graph.root)
    return new, enumerate_paths(new, max_paths)


# ---------------------------------------------------------------------------
# Bundled structures


def nested_demo_document() -> dict:
    """Two-level demo: ``b8*(b1 K1 + b2 K2) + b9*(b3 K3 + b4 K4)o(b5 K5 + b6 K6 + b7 K7)``."""

    def prod(i, child):
        return {"id": f"b{i}", "kind": "product", "children": [child]}

    def leaf(i):
        return {"id": f"k{i}", "kind": "leaf", "children": [], "kernel": f"K{i}"}

    nodes = [
        {"id": "root", "kind": "sum", "children": ["b8", "b9"]},
        prod(8, "s1"),
        prod(9, "h"),
        {"id": "s1", "kind": "sum", "children": ["b1", "b2"]},
        {"id": "h", "kind": "combiner", "children": ["s2", "s3"]},
        {"id": "s2", "kind": "sum", "children": ["b3", "b4"]},
        {"id": "s3", "kind": "sum", "children": ["b5", "b6", "b7"]},
    ]
    nodes += [prod(i, f"k{i}") for i in range(1, 8)]
    nodes += [leaf(i) for i in range(1, 8)]
    return {"nodes": nodes, "root": "root"}


def single_layer_document(kernels: list[str]) -> dict:
    """Root sum over one weighted product per kernel (classical linear MKL)."""
    nodes = [{"id": "root", "kind": "sum", "children": [f"b{i}" for i in range(len(kernels))]}]
    nodes += [
        {"id": f"b{i}", "kind": "product", "children": [f"k{i}"]} for i in range(len(kernels))
    ]
    nodes += [
        {"id": f"k{i}", "kind": "leaf", "children": [], "kernel": k} for i, k in enumerate(kernels)
    ]
    return {"nodes": nodes, "root": "root"}
