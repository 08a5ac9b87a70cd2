"""Hyponymy-graph ingestion and abstracted-label evasion task construction.

The abstraction procedure: (1) drop blocklisted over-coarse labels, (2) on
every upward path from a leaf, the candidate is the first non-blocked node
with at least one child, (3) prune candidates that are proper ancestors of
other candidates, keeping the lower node. The result is an antichain of
abstracted labels; each task pairs one with a descendant leaf and forbids
all leaves not under it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .errors import GraphError
from .models.corpus import DEFAULT_FAMILIES, DEFAULT_LEAVES

__all__ = ["HyponymyGraph", "EvasionTask", "ResolvedTask", "closure_subgraph",
           "select_abstracted", "build_tasks", "build_original_tasks",
           "builtin_shape_graph", "read_graph_files", "write_tasks", "read_tasks",
           "PROMPT_TEMPLATE"]

PROMPT_TEMPLATE = "Realistic image of {abstracted}, specifically, {leaf}"


@dataclass(frozen=True)
class HyponymyGraph:
    """Directed acyclic graph; an edge u -> v means v is a hypernym of u."""

    nodes: tuple
    edges: tuple  # (child, parent) pairs
    leaf_set: tuple

    def __post_init__(self):
        nodes = set(self.nodes)
        for u, v in self.edges:
            if u not in nodes or v not in nodes:
                raise GraphError(f"edge ({u!r}, {v!r}) references unknown node")
        for leaf in self.leaf_set:
            if leaf not in nodes:
                raise GraphError(f"leaf {leaf!r} not in node set")
        self._assert_acyclic()

    def _assert_acyclic(self):
        color = {n: 0 for n in self.nodes}
        parents = self.parents_map()
        for start in self.nodes:
            if color[start]:
                continue
            stack = [(start, iter(parents.get(start, ())))]
            color[start] = 1
            while stack:
                node, it = stack[-1]
                advanced = False
                for nxt in it:
                    if color[nxt] == 1:
                        raise GraphError(f"cycle detected at edge ({node!r}, {nxt!r})")
                    if color[nxt] == 0:
                        color[nxt] = 1
                        stack.append((nxt, iter(parents.get(nxt, ()))))
                        advanced = True
                        break
                if not advanced:
                    color[node] = 2
                    stack.pop()

    def parents_map(self):
        out = {}
        for u, v in self.edges:
            out.setdefault(u, []).append(v)
        return out

    def children_map(self):
        out = {}
        for u, v in self.edges:
            out.setdefault(v, []).append(u)
        return out

    def ancestors(self, node):
        """Proper ancestors reachable by one or more hypernym edges."""
        parents = self.parents_map()
        seen, stack = set(), list(parents.get(node, ()))
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(parents.get(cur, ()))
        return seen

    def descendants(self, node):
        children = self.children_map()
        seen, stack = set(), list(children.get(node, ()))
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(children.get(cur, ()))
        return seen


@dataclass(frozen=True)
class EvasionTask:
    """One generation-and-evade assignment.

    a_text holds every leaf whose ancestor set excludes the abstracted label;
    kind is "abstracted" or "original" (evading the précising leaf itself).
    """

    prompt: str
    abstracted_label: str
    leaf_label: str
    a_text: tuple
    kind: str = "abstracted"

    def resolve(self, label_order):
        order = list(label_order)
        return ResolvedTask(
            prompt=self.prompt,
            leaf_label=self.leaf_label,
            leaf_index=order.index(self.leaf_label),
            a_text_indices=tuple(order.index(a) for a in self.a_text),
            abstracted_label=self.abstracted_label,
            kind=self.kind)


@dataclass(frozen=True)
class ResolvedTask:
    """EvasionTask with labels mapped to model token/logit indices."""

    prompt: str
    leaf_label: str
    leaf_index: int
    a_text_indices: tuple
    abstracted_label: str
    kind: str = "abstracted"


def closure_subgraph(graph, leaves):
    """Restriction to the leaves plus everything reachable upward from them."""
    leaves = tuple(leaves)
    parents = graph.parents_map()
    keep, stack = set(leaves), list(leaves)
    while stack:
        cur = stack.pop()
        for p in parents.get(cur, ()):
            if p not in keep:
                keep.add(p)
                stack.append(p)
    nodes = tuple(n for n in graph.nodes if n in keep)
    edges = tuple((u, v) for u, v in graph.edges if u in keep and v in keep)
    return HyponymyGraph(nodes=nodes, edges=edges, leaf_set=leaves)


def select_abstracted(graph, blocklist=()):
    """Abstracted-label set: lowest non-blocked internal node per upward path,
    pruned to an antichain by removing proper ancestors of other candidates."""
    blocked = set(blocklist)
    parents = graph.parents_map()
    candidates = set()
    # climb from each leaf; traversal passes through blocked nodes only
    for leaf in graph.leaf_set:
        seen = set()
        stack = [leaf]
        while stack:
            cur = stack.pop()
            for p in parents.get(cur, ()):
                if p in seen:
                    continue
                seen.add(p)
                if p in blocked:
                    stack.append(p)
                else:
                    candidates.add(p)  # first non-blocked node on this path
    pruned = {c for c in candidates
              if not (graph.descendants(c) & candidates)}
    if not pruned:
        warnings.warn("no abstracted labels remain; no tasks constructible",
                      stacklevel=2)
    return pruned


def build_tasks(abstracted, graph, leaves, min_children=1):
    """One task per abstracted label (with enough leaf hyponyms) and leaf."""
    leaves = list(leaves)
    tasks = []
    for a in sorted(abstracted):
        descendants = graph.descendants(a)
        leaf_desc = [l for l in leaves if l in descendants]
        if len(leaf_desc) < min_children:
            continue
        a_text = tuple(l for l in leaves if a not in graph.ancestors(l))
        if not a_text:
            continue
        for l in leaf_desc:
            tasks.append(EvasionTask(
                prompt=PROMPT_TEMPLATE.format(abstracted=a, leaf=l),
                abstracted_label=a, leaf_label=l, a_text=a_text,
                kind="abstracted"))
    return tasks


def build_original_tasks(leaves):
    """Per-leaf evasion of the leaf label itself."""
    leaves = list(leaves)
    tasks = []
    for l in leaves:
        a_text = tuple(x for x in leaves if x != l)
        tasks.append(EvasionTask(
            prompt=f"Realistic image of {l}",
            abstracted_label=l, leaf_label=l, a_text=a_text, kind="original"))
    return tasks


def builtin_shape_graph():
    """The shape-corpus taxonomy: leaves, three families, one root."""
    leaves = DEFAULT_LEAVES
    families = sorted(set(DEFAULT_FAMILIES.values()))
    nodes = tuple(leaves) + tuple(families) + ("shape",)
    edges = tuple((leaf, DEFAULT_FAMILIES[leaf]) for leaf in leaves) + \
        tuple((fam, "shape") for fam in families)
    return HyponymyGraph(nodes=nodes, edges=edges, leaf_set=tuple(leaves))


# ---------------------------------------------------------------------------
# file formats

def read_graph_files(edges_path, leaves_path):
    """Edge list `child<TAB>parent` plus a one-per-line leaf manifest."""
    edges = []
    nodes = []
    seen = set()

    def note(n):
        if n not in seen:
            seen.add(n)
            nodes.append(n)

    for line in Path(edges_path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise GraphError(f"malformed edge line: {line!r}")
        child, parent = parts[0].strip(), parts[1].strip()
        note(child)
        note(parent)
        edges.append((child, parent))
    leaves = [l.strip() for l in Path(leaves_path).read_text().splitlines()
              if l.strip() and not l.startswith("#")]
    for l in leaves:
        note(l)
    return HyponymyGraph(nodes=tuple(nodes), edges=tuple(edges), leaf_set=tuple(leaves))


def write_tasks(path, tasks):
    """Task file: kind, prompt, abstracted, leaf, comma-joined A_Text per line."""
    lines = []
    for t in tasks:
        lines.append("\t".join([t.kind, t.prompt, t.abstracted_label,
                                t.leaf_label, ",".join(t.a_text)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tasks(path):
    tasks = []
    for line in Path(path).read_text().splitlines():
        line = line.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        kind, prompt, abstracted, leaf, a_text = line.split("\t")
        tasks.append(EvasionTask(prompt=prompt, abstracted_label=abstracted,
                                 leaf_label=leaf,
                                 a_text=tuple(a_text.split(",")) if a_text else (),
                                 kind=kind))
    return tasks
