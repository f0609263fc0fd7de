"""Independent brute-force oracles used by the test-suite.

Nothing here imports the code paths it checks.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from functools import lru_cache

import numpy as np


# -- packing -----------------------------------------------------------------

def exhaustive_best_area(width: int, height: int, sizes) -> int:
    """Largest total area of any non-overlapping subset placement (no rotation).

    Branches on the first empty cell in raster order: either it stays empty
    or it becomes the top-left corner of one unused rectangle.
    """
    distinct = sorted(set(sizes))
    counts0 = tuple(sizes.count(s) for s in distinct)
    n_cells = width * height
    full = (1 << n_cells) - 1
    place = []
    for (w, h) in distinct:
        row = []
        for p in range(n_cells):
            r, c = divmod(p, width)
            if c + w > width or r + h > height:
                row.append(None)
                continue
            m = 0
            for dr in range(h):
                for dc in range(w):
                    m |= 1 << ((r + dr) * width + c + dc)
            row.append(m)
        place.append(row)

    @lru_cache(maxsize=None)
    def rec(mask: int, counts: tuple) -> int:
        if mask == full or not any(counts):
            return 0
        inv = ~mask & full
        p = (inv & -inv).bit_length() - 1
        best = rec(mask | (1 << p), counts)
        for i, k in enumerate(counts):
            if k == 0:
                continue
            pm = place[i][p]
            if pm is None or pm & mask:
                continue
            w, h = distinct[i]
            nc = counts[:i] + (k - 1,) + counts[i + 1:]
            best = max(best, w * h + rec(mask | pm, nc))
        return best

    out = rec(0, counts0)
    rec.cache_clear()
    return out


def packing_instances(seed: int = 0, per_canvas: int = 40):
    """Unit-grid instances: every canvas up to 6x6, seeded rectangle multisets."""
    rng = np.random.default_rng(seed)
    for W in range(1, 7):
        for H in range(1, 7):
            for _ in range(per_canvas):
                n = int(rng.integers(2, 7))
                sizes = [(int(rng.integers(1, W + 1)), int(rng.integers(1, H + 1))) for _ in range(n)]
                yield W, H, sizes


# -- meta-path counting ------------------------------------------------------

def _neighbour_lists(edges):
    """(type, id, relation) -> list of (neighbour type, neighbour id, weight).

    Every edge can be walked both ways; parallel edges stay separate.
    """
    nb = defaultdict(list)
    for st, s, rel, dt, d, w in edges:
        nb[(st, s, rel)].append((dt, d, w))
        nb[(dt, d, rel)].append((st, s, w))
    return nb


def count_path_instances(edges, path_types, path_relations, x, y) -> float:
    """Sum over every path instance from x to y of the product of edge weights, by DFS."""
    nb = _neighbour_lists(edges)
    total = 0.0

    def dfs(step, node, weight):
        nonlocal total
        if step == len(path_relations):
            if node == y:
                total += weight
            return
        want = path_types[step + 1]
        for t, n, w in nb.get((path_types[step], node, path_relations[step]), ()):
            if t == want:
                dfs(step + 1, n, weight * w)

    dfs(0, x, 1.0)
    return total


def pathsim_topk_oracle(edges, nodes, path_types, path_relations, x, k):
    t = path_types[0]
    sxx = count_path_instances(edges, path_types, path_relations, x, x)
    out = []
    for y in nodes[t]:
        if y == x:
            continue
        m = count_path_instances(edges, path_types, path_relations, x, y)
        if m > 0:
            syy = count_path_instances(edges, path_types, path_relations, y, y)
            out.append((y, 2.0 * m / (sxx + syy)))
    out.sort(key=lambda p: (-p[1], p[0]))
    return out[:k]


def random_hetgraph(rng, max_nodes: int = 50):
    """Small typed graph with integer weights over the click-network schema."""
    counts = {t: int(rng.integers(1, 13)) for t in ("query", "keyword", "ad", "advertiser")}
    while sum(counts.values()) > max_nodes:
        t = max(counts, key=counts.get)
        counts[t] -= 1
    nodes = {t: [f"{t[0]}{i}" for i in range(n)] for t, n in counts.items()}
    schema = {
        "clicks": ("query", "ad"), "matches": ("query", "keyword"), "belongs": ("keyword", "ad"),
        "owned_by": ("ad", "advertiser"), "cooccurs": ("query", "query"),
        "ad_sibling": ("ad", "ad"), "kw_sibling": ("keyword", "keyword"),
    }
    edges = []
    for rel, (a, b) in schema.items():
        n_edges = int(rng.integers(0, 2 * (len(nodes[a]) + len(nodes[b])) + 1))
        for _ in range(n_edges):
            s = nodes[a][int(rng.integers(len(nodes[a])))]
            d = nodes[b][int(rng.integers(len(nodes[b])))]
            if a == b and s == d:
                continue
            edges.append((a, s, rel, b, d, float(rng.integers(1, 4))))
    return nodes, edges


# -- monotone regression --------------------------------------------------------

def brute_force_monotone(values, weights):
    """Weighted least-squares non-decreasing step fit by enumerating all block partitions.

    The optimum is a sequence of consecutive blocks each fitted by its weighted
    mean, so checking every partition and keeping the feasible cheapest one is exact.
    """
    y = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = len(y)
    best, best_cost = None, None
    for cuts in itertools.product((False, True), repeat=n - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [n]
        fit = np.empty(n)
        for lo, hi in zip(bounds, bounds[1:]):
            fit[lo:hi] = np.dot(w[lo:hi], y[lo:hi]) / w[lo:hi].sum()
        if np.any(np.diff(fit) < -1e-12):
            continue
        cost = float(np.dot(w, (y - fit) ** 2))
        if best_cost is None or cost < best_cost - 1e-12:
            best, best_cost = fit, cost
    return best


def calibration_instances(seed: int = 0, exhaustive_up_to: int = 4, n_random: int = 1500):
    """Weighted bin-mean instances with values on a 0.25 grid and at most 8 bins.

    Every value vector is enumerated up to ``exhaustive_up_to`` bins; longer
    ones are sampled. Weights are small integers.
    """
    grid = np.arange(5) * 0.25
    rng = np.random.default_rng(seed)
    for n in range(1, exhaustive_up_to + 1):
        for values in itertools.product(grid, repeat=n):
            yield np.array(values), rng.integers(1, 5, size=n)
    for _ in range(n_random):
        n = int(rng.integers(exhaustive_up_to + 1, 9))
        yield grid[rng.integers(0, 5, size=n)], rng.integers(1, 5, size=n)


def calibrator_pairs(values, weights):
    """(pcvr, label) pairs whose bins reproduce the given weighted means."""
    pairs = []
    for i, (v, w) in enumerate(zip(values, weights)):
        pairs += [((i + 1) / 10.0, float(v))] * int(w)
    return pairs


# -- derivatives --------------------------------------------------------------

def central_difference(f, x: np.ndarray, index, eps: float = 1e-6) -> float:
    """d f / d x[index] by a central difference, restoring ``x`` afterwards."""
    old = x[index]
    x[index] = old + eps
    up = f()
    x[index] = old - eps
    down = f()
    x[index] = old
    return (up - down) / (2 * eps)


# -- retrieval ----------------------------------------------------------------

def bm25_full_scan(docs, query_terms, k1: float = 1.2, b: float = 0.75):
    """Score every document directly from the BM25 formula; distinct query terms."""
    ids = sorted(docs)
    n = len(ids)
    avg = sum(len(docs[d]) for d in ids) / n
    out = []
    for d in ids:
        s = 0.0
        for t in sorted(set(query_terms)):
            df = sum(1 for e in ids if t in docs[e])
            idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
            tf = docs[d].count(t)
            if tf:
                s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(docs[d]) / avg))
        if s > 0:
            out.append((d, s))
    out.sort(key=lambda p: (-p[1], p[0]))
    return out


def cosine_linear_scan(ids, vectors, query, k):
    """Exact cosine top-k by a plain loop; ties (to 12 decimals) go to the smaller id."""
    qn = np.linalg.norm(query)
    scored = []
    for i, v in zip(ids, vectors):
        vn = np.linalg.norm(v)
        s = float(v @ query / (vn * qn)) if vn > 0 and qn > 0 else 0.0
        scored.append((i, s))
    scored.sort(key=lambda p: (-round(p[1], 12), p[0]))
    return scored[:k]


# -- sampling ---------------------------------------------------------------------

def multinomial_z(counts, probs) -> np.ndarray:
    """Per-category z-scores of multinomial counts against their expectation."""
    c = np.asarray(counts, dtype=float)
    p = np.asarray(probs, dtype=float)
    n = c.sum()
    sd = np.sqrt(n * p * (1 - p))
    return np.where(sd > 0, (c - n * p) / np.where(sd > 0, sd, 1.0), 0.0)
