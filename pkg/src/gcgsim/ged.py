"""Exact and approximate graph edit distance.

All searches work on a :class:`~gcgsim.graph.PaddedPair` and assign the
nodes of ``g1`` one at a time to distinct nodes of ``g2``. A complete
assignment is an :class:`~gcgsim.graph.Alignment` whose induced cost is
given by :func:`~gcgsim.graph.ged_under_mapping`.
"""
from __future__ import annotations

import heapq
import itertools
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .graph import Alignment, PaddedPair, ged_under_mapping

BRUTE_FORCE_CAP = 8
ASTAR_MAX_EXPANSIONS = 2_000_000
DEFAULT_BEAM_WIDTH = 100
LSAP_SENTINEL = 1e6


class SizeCapError(ValueError):
    pass


class SearchBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class GedResult:
    value: int
    alignment: Alignment
    method: str
    exact: bool
    expanded: int = 0

    def to_json(self, pair: PaddedPair) -> dict:
        cost = ged_under_mapping(pair, self.alignment)
        return {
            "ged": self.value,
            "mapping": list(self.alignment.mapping),
            "node_cost": cost.node_cost,
            "edge_cost": cost.edge_cost,
            "exact": self.exact,
            "method": self.method,
        }


def exact_ged_bruteforce(pair: PaddedPair, cap: int = BRUTE_FORCE_CAP) -> GedResult:
    """Minimum over all pad_size! alignments; first (lexicographically smallest) optimum wins."""
    n = pair.pad_size
    if n > cap:
        raise SizeCapError(f"brute force refuses pad_size {n} > cap {cap}")
    best, best_map = None, None
    for perm in itertools.permutations(range(n)):
        total = ged_under_mapping(pair, perm).total
        if best is None or total < best:
            best, best_map = total, perm
    return GedResult(best, Alignment(best_map), "brute", True, math.factorial(n))


class _Search:
    """Shared state for the tree searches (A* and beam).

    Nodes of g1 are assigned in descending-degree order, padding last.
    """

    def __init__(self, pair: PaddedPair):
        self.pair = pair
        n = self.n = pair.pad_size
        self.l1, self.l2 = pair.labels1, pair.labels2
        self.a1, self.a2 = pair.adj1, pair.adj2
        deg1 = [bin(m).count("1") for m in self.a1]
        is_pad = [k >= pair.g1.n for k in range(n)]
        self.order = sorted(range(n), key=lambda k: (is_pad[k], -deg1[k], k))
        # depth from which only g1 padding remains
        self.pad_from = pair.g1.n
        self.full = (1 << n) - 1
        self.order_arr = np.array(self.order)
        self.idx = np.arange(n)
        self.A1 = np.array([[(m >> j) & 1 for j in range(n)] for m in self.a1], dtype=float)
        self.A2 = np.array([[(m >> j) & 1 for j in range(n)] for m in self.a2], dtype=float)
        self.lab_ne = np.not_equal.outer(np.array(self.l1), np.array(self.l2)).astype(float)

    def step_cost(self, depth: int, images: tuple, v: int) -> int:
        """Cost added by assigning order[depth] -> v given earlier assignments."""
        u = self.order[depth]
        cost = 1 if self.l1[u] != self.l2[v] else 0
        au, av = self.a1[u], self.a2[v]
        for d in range(depth):
            e1 = (au >> self.order[d]) & 1
            e2 = (av >> images[d]) & 1
            cost += e1 ^ e2
        return cost

    def quick_bound(self, depth: int, images: tuple, used: int) -> int:
        """Cheap admissible bound: label multiset mismatch plus edge-count gaps."""
        rest1 = self.order[depth:]
        U1 = 0
        for u in rest1:
            U1 |= 1 << u
        U2 = self.full & ~used
        rest2 = [v for v in range(self.n) if (U2 >> v) & 1]
        c1 = Counter(self.l1[u] for u in rest1)
        c2 = Counter(self.l2[v] for v in rest2)
        h = len(rest1) - sum(min(c, c2[lab]) for lab, c in c1.items())
        for d in range(depth):
            h += abs(
                (self.a1[self.order[d]] & U1).bit_count() - (self.a2[images[d]] & U2).bit_count()
            )
        inner1 = sum((self.a1[u] & U1).bit_count() for u in rest1) // 2
        inner2 = sum((self.a2[v] & U2).bit_count() for v in rest2) // 2
        return h + abs(inner1 - inner2)

    def heuristic(self, depth: int, images: tuple, used: int) -> int:
        """Admissible lower bound on the cost of completing the assignment.

        Remaining cost splits into node labels, pairs (assigned, unassigned)
        and pairs inside the unassigned region. For a candidate u -> v the
        first two are known exactly; the third is bounded by half the
        difference of inner degrees. The minimum over bijections of the
        summed per-node bound is solved as an assignment problem.
        """
        n = self.n
        if depth == n:
            return 0
        rest1 = self.order_arr[depth:]
        mask2 = np.ones(n, dtype=bool)
        mask2[list(images)] = False
        rest2 = self.idx[mask2]
        rows1, rows2 = self.A1[rest1], self.A2[rest2]
        cost = self.lab_ne[rest1][:, rest2]
        if depth:
            c1 = rows1[:, self.order_arr[:depth]]
            c2 = rows2[:, list(images)]
            cost = cost + (c1.sum(1)[:, None] + c2.sum(1)[None, :] - 2.0 * (c1 @ c2.T))
        i1 = rows1[:, rest1].sum(1)
        i2 = rows2[:, rest2].sum(1)
        cost = cost + 0.5 * np.abs(i1[:, None] - i2[None, :])
        r, c = linear_sum_assignment(cost)
        return int(math.ceil(cost[r, c].sum() - 1e-9))

    def complete_padding(self, depth: int, images: tuple, used: int, g: int):
        """Only g1 padding left: every completion costs the same, take ascending order."""
        rest2 = [v for v in range(self.n) if not (used >> v) & 1]
        for v in rest2:
            g += self.step_cost(depth, images, v)
            images = images + (v,)
            depth += 1
        return images, g

    def children(self, depth: int, images: tuple, used: int, g: int, bound=None):
        bound = bound or self.heuristic
        if depth >= self.pad_from:
            imgs, total = self.complete_padding(depth, images, used, g)
            yield self.n, imgs, self.full, total, 0
            return
        for v in range(self.n):
            if (used >> v) & 1:
                continue
            g2 = g + self.step_cost(depth, images, v)
            imgs = images + (v,)
            used2 = used | (1 << v)
            yield depth + 1, imgs, used2, g2, bound(depth + 1, imgs, used2)

    def to_alignment(self, images: tuple) -> Alignment:
        mapping = [0] * self.n
        for d, v in enumerate(images):
            mapping[self.order[d]] = v
        return Alignment(mapping)


def exact_ged_astar(pair: PaddedPair, max_expansions: int = ASTAR_MAX_EXPANSIONS) -> GedResult:
    """Exact GED by best-first search with an admissible lower bound.

    Children enter the queue with the cheap bound; the assignment bound is
    computed only when a node reaches the top, and the node is re-queued if
    its estimate rose.
    """
    s = _Search(pair)
    heap = [(s.heuristic(0, (), 0), 0, (), 0, 0, True)]
    expanded = 0
    while heap:
        f, negd, images, used, g, refined = heapq.heappop(heap)
        depth = -negd
        if depth == s.n:
            return GedResult(g, s.to_alignment(images), "astar", True, expanded)
        if not refined:
            h = s.heuristic(depth, images, used)
            if g + h > f:
                heapq.heappush(heap, (g + h, negd, images, used, g, True))
                continue
        expanded += 1
        if expanded > max_expansions:
            raise SearchBudgetError(f"A* exceeded {max_expansions} expansions (pad_size {s.n})")
        for d2, imgs, used2, g2, h2 in s.children(depth, images, used, g, s.quick_bound):
            heapq.heappush(heap, (g2 + h2, -d2, imgs, used2, g2, d2 == s.n))
    raise AssertionError("search space exhausted without a complete alignment")


def beam_ged(pair: PaddedPair, width: int | None = DEFAULT_BEAM_WIDTH) -> GedResult:
    """Level-synchronous beam search keeping the ``width`` best nodes by g + h.

    ``width=None`` keeps every node whose f does not exceed the incumbent
    from a greedy dive, which makes the result exact.
    """
    if width is not None and width < 1:
        raise ValueError("beam width must be >= 1")
    s = _Search(pair)
    incumbent = None
    if width is None:
        incumbent = beam_ged(pair, 1).value
    level = [(s.heuristic(0, (), 0), (), 0, 0)]
    depth = 0
    expanded = 0
    best = None
    while level:
        nxt = []
        for f, images, used, g in level:
            expanded += 1
            for d2, imgs, used2, g2, h2 in s.children(depth, images, used, g):
                if d2 == s.n:
                    if best is None or (g2, imgs) < best:
                        best = (g2, imgs)
                    continue
                if incumbent is not None and g2 + h2 > incumbent:
                    continue
                nxt.append((g2 + h2, imgs, used2, g2))
        nxt.sort(key=lambda t: (t[0], t[1]))
        if width is not None:
            nxt = nxt[:width]
        level = nxt
        depth += 1
    method = "beam(inf)" if width is None else f"beam({width})"
    return GedResult(best[0], s.to_alignment(best[1]), method, False, expanded)


def solve_lsap(cost) -> tuple[tuple[int, ...], float]:
    """Minimum-cost perfect assignment (Kuhn-Munkres with potentials, O(n^3)).

    Returns ``(assignment, total)`` where row ``i`` is assigned column
    ``assignment[i]``.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    n = c.shape[0]
    if n == 0:
        return (), 0.0
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: row (1-based) matched to column j
    way = [0] * (n + 1)
    rows = c.tolist()
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta, j1 = INF, 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assignment = [0] * n
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    total = float(sum(c[i, assignment[i]] for i in range(n)))
    return tuple(assignment), total


def bipartite_cost_matrix(pair: PaddedPair) -> np.ndarray:
    """Square (N1+N2) cost matrix: substitutions, deletions, insertions, dummy block."""
    g1, g2 = pair.g1, pair.g2
    n1, n2 = g1.n, g2.n
    d1, d2 = g1.degrees(), g2.degrees()
    m = np.zeros((n1 + n2, n1 + n2))
    for i in range(n1):
        for j in range(n2):
            m[i, j] = (g1.labels[i] != g2.labels[j]) + 0.5 * abs(d1[i] - d2[j])
    dele = np.full((n1, n1), LSAP_SENTINEL)
    np.fill_diagonal(dele, [1 + 0.5 * d for d in d1])
    ins = np.full((n2, n2), LSAP_SENTINEL)
    np.fill_diagonal(ins, [1 + 0.5 * d for d in d2])
    m[:n1, n2:] = dele
    m[n1:, :n2] = ins
    return m


def hungarian_ged(pair: PaddedPair) -> GedResult:
    """Bipartite GED upper bound: solve the node assignment, report its induced edit cost."""
    n1, n2 = pair.g1.n, pair.g2.n
    assignment, _ = solve_lsap(bipartite_cost_matrix(pair))
    mapping = [-1] * pair.pad_size
    taken = set()
    for i in range(n1):
        j = assignment[i]
        if j < n2:
            mapping[i] = j
            taken.add(j)
    free1 = [k for k in range(pair.pad_size) if mapping[k] < 0]
    free2 = [k for k in range(pair.pad_size) if k not in taken]
    for k, v in zip(free1, free2):
        mapping[k] = v
    align = Alignment(mapping)
    return GedResult(ged_under_mapping(pair, align).total, align, "hungarian", False)


def ground_truth_ged(
    pair: PaddedPair, policy: str = "exact", beam_width: int = DEFAULT_BEAM_WIDTH
) -> GedResult:
    """Label a pair: ``exact`` (A*) or ``min_heuristics`` (min of beam and Hungarian)."""
    if policy == "exact":
        return exact_ged_astar(pair)
    if policy == "min_heuristics":
        candidates = [beam_ged(pair, beam_width), hungarian_ged(pair)]
        best = min(candidates, key=lambda r: r.value)
        return GedResult(best.value, best.alignment, f"min({best.method})", False, best.expanded)
    raise ValueError(f"unknown label policy {policy!r}")


def compute_ged(pair: PaddedPair, method: str, beam_width: int = DEFAULT_BEAM_WIDTH) -> GedResult:
    if method == "brute":
        return exact_ged_bruteforce(pair)
    if method == "astar":
        return exact_ged_astar(pair)
    if method == "beam":
        return beam_ged(pair, beam_width)
    if method == "hungarian":
        return hungarian_ged(pair)
    if method == "min":
        return ground_truth_ged(pair, "min_heuristics", beam_width)
    raise ValueError(f"unknown GED method {method!r}")

