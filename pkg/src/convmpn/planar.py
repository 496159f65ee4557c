"""Planarization and bounded-face (region) extraction for building graphs.

Predicted graphs may contain crossing or overlapping edges. They are
planarized first: a vertex is inserted at every proper crossing and wherever
a vertex touches another edge's interior, and collinear overlapping pieces
collapse into one edge. Faces are then enumerated on the resulting
half-edge structure, turning to the next edge clockwise at each vertex so
every bounded face is walked counter-clockwise (positive shoelace area).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PlanarGraph

EPS = 1e-6


@dataclass
class Region:
    boundary: np.ndarray  # (k, 2) vertex loop, not repeated at the end
    area: float


def shoelace(loop: np.ndarray) -> float:
    x, y = loop[:, 0], loop[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


class _VertexPool:
    def __init__(self, eps: float):
        self.eps = eps
        self.points: list[tuple[float, float]] = []

    def add(self, p) -> int:
        px, py = float(p[0]), float(p[1])
        for k, (qx, qy) in enumerate(self.points):
            if abs(qx - px) <= self.eps and abs(qy - py) <= self.eps:
                return k
        self.points.append((px, py))
        return len(self.points) - 1


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def planarize(points: np.ndarray, edges, eps: float = EPS) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Return (vertices, edges) of the planar arrangement of the given segments."""
    pool = _VertexPool(eps)
    vid = [pool.add(p) for p in points]
    segs = []
    for i, j in edges:
        a, b = vid[i], vid[j]
        if a != b:
            segs.append((a, b))
    segs = sorted({(min(a, b), max(a, b)) for a, b in segs})
    P = pool.points
    # split parameters along each segment, as (t, vertex id)
    splits: list[list[tuple[float, int]]] = [[(0.0, a), (1.0, b)] for a, b in segs]

    for s, (a, b) in enumerate(segs):
        ax, ay = P[a]
        bx, by = P[b]
        dx, dy = bx - ax, by - ay
        length2 = dx * dx + dy * dy
        # existing vertices lying on the interior of this segment
        for k in range(len(P)):
            if k in (a, b):
                continue
            px, py = P[k]
            t = ((px - ax) * dx + (py - ay) * dy) / length2
            if t <= 0 or t >= 1:
                continue
            dist = abs(_cross(dx, dy, px - ax, py - ay)) / math.sqrt(length2)
            if dist <= eps:
                splits[s].append((t, k))

    for s in range(len(segs)):
        a, b = segs[s]
        for r in range(s + 1, len(segs)):
            c, d = segs[r]
            if len({a, b, c, d}) < 4:
                continue
            ax, ay = P[a]
            bx, by = P[b]
            cx, cy = P[c]
            ex, ey = P[d]
            rx, ry = bx - ax, by - ay
            qx, qy = ex - cx, ey - cy
            den = _cross(rx, ry, qx, qy)
            if abs(den) <= EPS * math.hypot(rx, ry) * math.hypot(qx, qy):
                continue  # parallel; collinear overlaps are handled via vertex-on-segment splits
            t = _cross(cx - ax, cy - ay, qx, qy) / den
            u = _cross(cx - ax, cy - ay, rx, ry) / den
            if 0 < t < 1 and 0 < u < 1:
                k = pool.add((ax + t * rx, ay + t * ry))
                P = pool.points
                if k not in (a, b):
                    splits[s].append((t, k))
                if k not in (c, d):
                    splits[r].append((u, k))

    out: set[tuple[int, int]] = set()
    for sp in splits:
        sp = sorted(set(sp))
        chain = [v for _, v in sp]
        for u, v in zip(chain, chain[1:]):
            if u != v:
                out.add((min(u, v), max(u, v)))
    verts = np.array(pool.points, dtype=np.float64).reshape(-1, 2)
    return verts, sorted(out)


def _prune_dangling(n: int, edges: list[tuple[int, int]]) -> list[tuple[int, int]]:
    adj: list[set[int]] = [set() for _ in range(n)]
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    stack = [v for v in range(n) if len(adj[v]) == 1]
    while stack:
        v = stack.pop()
        if len(adj[v]) != 1:
            continue
        (u,) = adj[v]
        adj[v].clear()
        adj[u].discard(v)
        if len(adj[u]) == 1:
            stack.append(u)
    return sorted({(min(u, v), max(u, v)) for u in range(n) for v in adj[u]})


def faces(verts: np.ndarray, edges: list[tuple[int, int]]) -> list[list[int]]:
    """Every face walk of a planar straight-line graph as a vertex-index loop."""
    n = len(verts)
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        nbrs[u].append(v)
        nbrs[v].append(u)
    order: list[list[int]] = []
    pos: list[dict[int, int]] = []
    for v in range(n):
        vx, vy = verts[v]
        s = sorted(nbrs[v], key=lambda w: math.atan2(verts[w][1] - vy, verts[w][0] - vx))
        order.append(s)
        pos.append({w: k for k, w in enumerate(s)})
    visited: set[tuple[int, int]] = set()
    loops = []
    for u, v in edges:
        for start in ((u, v), (v, u)):
            if start in visited:
                continue
            loop = []
            h = start
            while h not in visited:
                visited.add(h)
                loop.append(h[0])
                a, b = h
                ring = order[b]
                nxt = ring[(pos[b][a] - 1) % len(ring)]
                h = (b, nxt)
            loops.append(loop)
    return loops


def extract_regions(graph: PlanarGraph, eps: float = EPS) -> list[Region]:
    """Bounded faces of the planarized graph (the outer face is dropped)."""
    if not graph.edges:
        return []
    verts, edges = planarize(graph.points(), graph.edges, eps)
    edges = _prune_dangling(len(verts), edges)
    regions = []
    for loop in faces(verts, edges):
        poly = verts[loop]
        area = shoelace(poly)
        if area > eps:
            regions.append(Region(boundary=poly, area=area))
    return regions


def rasterize_polygon(loop: np.ndarray, size: int, scale: float) -> np.ndarray:
    """Boolean (size, size) mask of pixel centers inside ``loop * scale`` (even-odd rule)."""
    poly = np.asarray(loop, dtype=np.float64) * scale
    mask = np.zeros((size, size), dtype=bool)
    x0 = max(int(math.floor(poly[:, 0].min())), 0)
    x1 = min(int(math.ceil(poly[:, 0].max())) + 1, size)
    y0 = max(int(math.floor(poly[:, 1].min())), 0)
    y1 = min(int(math.ceil(poly[:, 1].max())) + 1, size)
    if x0 >= x1 or y0 >= y1:
        return mask
    px = np.arange(x0, x1) + 0.5
    py = (np.arange(y0, y1) + 0.5)[:, None]
    inside = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    xa, ya = poly[:, 0], poly[:, 1]
    xb, yb = np.roll(xa, -1), np.roll(ya, -1)
    for k in range(len(poly)):
        if ya[k] == yb[k]:
            continue
        straddle = (ya[k] > py) != (yb[k] > py)
        xcross = xa[k] + (py - ya[k]) * (xb[k] - xa[k]) / (yb[k] - ya[k])
        inside ^= straddle & (px < xcross)
    mask[y0:y1, x0:x1] = inside
    return mask
