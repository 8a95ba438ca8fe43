"""Role dependency graph and deterministic plan linearization."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from typing import Iterable, Mapping

from forgebox.errors import CycleError, UnknownDependency, UnknownRole
from forgebox.speclang import Playbook, RoleSpec, TaskSpec


@dataclass(frozen=True)
class RoleGraph:
    nodes: frozenset[str]
    edges: frozenset[tuple[str, str]]  # (dependent, dependency)

    def dependencies(self, name: str) -> list[str]:
        return sorted(dep for src, dep in self.edges if src == name)


@dataclass(frozen=True)
class PlanStep:
    role: str
    task: TaskSpec

    @property
    def label(self) -> str:
        return f"{self.role}/{self.task.id}"


@dataclass(frozen=True)
class Plan:
    steps: tuple[PlanStep, ...]
    playbook_name: str = ""
    playbook_version: str = ""

    @property
    def role_order(self) -> list[str]:
        order: list[str] = []
        for step in self.steps:
            if not order or order[-1] != step.role:
                order.append(step.role)
        return order

    def test_steps(self) -> list[PlanStep]:
        return [s for s in self.steps if s.task.directive == "test"]

    def explain(self) -> str:
        return "".join(f"{s.label} {s.task.directive}\n" for s in self.steps)

    def dumps(self) -> str:
        """Canonical JSON serialization; equal plans give equal strings."""
        return json.dumps(
            {
                "playbook": self.playbook_name,
                "version": self.playbook_version,
                "steps": [
                    {
                        "role": s.role,
                        "id": s.task.id,
                        "directive": s.task.directive,
                        "args": s.task.args,
                        "creates": s.task.creates,
                    }
                    for s in self.steps
                ],
            },
            sort_keys=True,
            separators=(",", ":"),
        )


def _by_name(roles: Iterable[RoleSpec] | Mapping[str, RoleSpec]) -> dict[str, RoleSpec]:
    if isinstance(roles, Mapping):
        return dict(roles)
    out: dict[str, RoleSpec] = {}
    for role in roles:
        if role.name in out:
            raise ValueError(f"role {role.name!r} given twice")
        out[role.name] = role
    return out


def build_graph(roles: Iterable[RoleSpec] | Mapping[str, RoleSpec]) -> RoleGraph:
    by_name = _by_name(roles)
    edges = set()
    for name in sorted(by_name):
        for dep in by_name[name].depends:
            if dep not in by_name:
                raise UnknownDependency(name, dep)
            edges.add((name, dep))
    return RoleGraph(frozenset(by_name), frozenset(edges))


def select_closure(graph: RoleGraph, selection: Iterable[str]) -> set[str]:
    deps: dict[str, list[str]] = {n: [] for n in graph.nodes}
    for src, dst in graph.edges:
        deps[src].append(dst)
    closure: set[str] = set()
    stack = []
    for name in selection:
        if name not in graph.nodes:
            raise UnknownRole(name)
        stack.append(name)
    while stack:
        name = stack.pop()
        if name in closure:
            continue
        closure.add(name)
        stack.extend(deps[name])
    return closure


def _cyclic_members(nodes: set[str], edges: Iterable[tuple[str, str]]) -> set[str]:
    """Names in a non-trivial strongly connected component (or a self-loop)."""
    succ: dict[str, list[str]] = {n: [] for n in nodes}
    for a, b in edges:
        if a in nodes and b in nodes:
            succ[a].append(b)
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    members: set[str] = set()
    counter = 0

    # iterative Tarjan; role graphs are small but recursion depth is not ours to pick
    for root in sorted(nodes):
        if root in index:
            continue
        work = [(root, iter(sorted(succ[root])))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if nxt not in index:
                    index[nxt] = low[nxt] = counter
                    counter += 1
                    stack.append(nxt)
                    on_stack.add(nxt)
                    work.append((nxt, iter(sorted(succ[nxt]))))
                    advanced = True
                    break
                if nxt in on_stack:
                    low[node] = min(low[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                component = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    component.append(w)
                    if w == node:
                        break
                if len(component) > 1 or node in succ[node]:
                    members.update(component)
    return members


def linearize(
    graph: RoleGraph,
    closure: Iterable[str],
    roles: Iterable[RoleSpec] | Mapping[str, RoleSpec],
    playbook_name: str = "",
    playbook_version: str = "",
) -> Plan:
    """Order roles dependencies-first, breaking ties by smallest name.

    Each role then expands to its tasks in authored order.
    """
    by_name = _by_name(roles)
    closure = set(closure)
    for name in closure:
        if name not in graph.nodes:
            raise UnknownRole(name)
    edges = [(a, b) for a, b in graph.edges if a in closure and b in closure]
    waiting = {n: 0 for n in closure}
    dependents: dict[str, list[str]] = {n: [] for n in closure}
    for dependent, dependency in edges:
        waiting[dependent] += 1
        dependents[dependency].append(dependent)

    ready = [n for n, count in waiting.items() if count == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        name = heapq.heappop(ready)
        order.append(name)
        for dependent in dependents[name]:
            waiting[dependent] -= 1
            if waiting[dependent] == 0:
                heapq.heappush(ready, dependent)

    if len(order) != len(closure):
        raise CycleError(_cyclic_members(closure - set(order), edges))

    steps = []
    for name in order:
        if name not in by_name:
            raise UnknownRole(name)
        steps.extend(PlanStep(name, task) for task in by_name[name].tasks)
    return Plan(tuple(steps), playbook_name, playbook_version)


def make_plan(
    playbook: Playbook,
    roles: Iterable[RoleSpec] | Mapping[str, RoleSpec],
    selection: Iterable[str] | None = None,
) -> Plan:
    by_name = _by_name(roles)
    graph = build_graph(by_name)
    closure = select_closure(graph, playbook.role_selection if selection is None else selection)
    return linearize(graph, closure, by_name, playbook.name, playbook.version)
