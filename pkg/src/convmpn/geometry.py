"""Building planar graphs, the edge-candidate inference graph, and edge masks."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_HALF_WIDTH = 1


class Corner(NamedTuple):
    x: float
    y: float

    @classmethod
    def clamped(cls, x: float, y: float, size: int) -> "Corner":
        """Corner with both coordinates clamped to the pixel range [0, size - 1]."""
        hi = float(size - 1)
        return cls(min(max(float(x), 0.0), hi), min(max(float(y), 0.0), hi))


@dataclass
class PlanarGraph:
    corners: list[Corner]
    edges: list[tuple[int, int]]
    confidences: list[float] | None = None

    def __post_init__(self):
        self.corners = [Corner(float(c[0]), float(c[1])) for c in self.corners]
        n = len(self.corners)
        norm: list[tuple[int, int]] = []
        seen: set[tuple[int, int]] = set()
        for e in self.edges:
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise ValueError(f"self-loop on corner {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) references a corner outside 0..{n - 1}")
            key = (i, j) if i < j else (j, i)
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            norm.append(key)
        self.edges = norm
        if self.confidences is not None:
            self.confidences = [float(c) for c in self.confidences]
            if len(self.confidences) != len(self.edges):
                raise ValueError(f"{len(self.confidences)} confidences for {len(self.edges)} edges")

    def points(self) -> np.ndarray:
        return np.array(self.corners, dtype=np.float64).reshape(-1, 2)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(self.edges)

    def adjacency(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in self.corners]
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def to_dict(self) -> dict:
        out = {"corners": [[c.x, c.y] for c in self.corners], "edges": [list(e) for e in self.edges]}
        if self.confidences is not None:
            out["confidences"] = list(self.confidences)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PlanarGraph":
        return cls(corners=[tuple(c) for c in d["corners"]], edges=[tuple(e) for e in d["edges"]],
                   confidences=d.get("confidences"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PlanarGraph":
        return cls.from_dict(json.loads(text))


@dataclass
class InferenceGraph:
    """Nodes are candidate building edges; two nodes are adjacent when their
    building edges share exactly one corner."""

    nodes: list[tuple[int, int]]
    adjacency: list[list[int]]
    empty: bool = False
    node_index: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.node_index:
            self.node_index = {e: k for k, e in enumerate(self.nodes)}

    def __len__(self) -> int:
        return len(self.nodes)

    def disconnected(self) -> "InferenceGraph":
        """Same nodes, no inter-node connections."""
        return InferenceGraph(list(self.nodes), [[] for _ in self.nodes], self.empty)


def build_inference_graph(corners: Sequence) -> InferenceGraph:
    n = len(corners)
    if n < 2:
        log.warning("inference graph needs at least 2 corners, got %d", n)
        return InferenceGraph([], [], empty=True)
    pts = [(float(c[0]), float(c[1])) for c in corners]
    if len(set(pts)) != n:
        raise ValueError("duplicate corner points supplied to build_inference_graph")
    nodes = list(combinations(range(n), 2))
    incident: list[list[int]] = [[] for _ in range(n)]
    for k, (i, j) in enumerate(nodes):
        incident[i].append(k)
        incident[j].append(k)
    adjacency = []
    for k, (i, j) in enumerate(nodes):
        # nodes sharing corner i or j, excluding self; sharing both is impossible for distinct pairs
        nb = sorted(set(incident[i]) ^ set(incident[j]))
        adjacency.append(nb)
    return InferenceGraph(nodes, adjacency)


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Integer line pixels (x, y) from (x0, y0) to (x1, y1), endpoints included."""
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    x, y = x0, y0
    while True:
        out.append((x, y))
        if x == x1 and y == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def line_pixels(a, b) -> list[tuple[int, int]]:
    """Bresenham pixels between rounded endpoints, independent of endpoint order."""
    p = (int(round(a[0])), int(round(a[1])))
    q = (int(round(b[0])), int(round(b[1])))
    if q < p:
        p, q = q, p
    return bresenham(p[0], p[1], q[0], q[1])


def rasterize_edge_mask(a, b, size: int, half_width: int = DEFAULT_HALF_WIDTH) -> np.ndarray:
    """Binary (size, size) mask of the segment a-b, rows indexed by y."""
    mask = np.zeros((size, size), dtype=np.uint8)
    pix = line_pixels(a, b)
    if len(pix) == 1:
        log.debug("degenerate edge mask at %s", pix[0])
    xs = np.array([p[0] for p in pix])
    ys = np.array([p[1] for p in pix])
    if np.any((xs < 0) | (xs >= size) | (ys < 0) | (ys >= size)):
        raise ValueError(f"edge endpoints {a}, {b} fall outside a {size}x{size} image")
    mask[ys, xs] = 1
    if half_width > 0:
        mask = dilate(mask, half_width)
    return mask


def dilate(mask: np.ndarray, r: int) -> np.ndarray:
    """Square (Chebyshev) dilation by radius r, clipped at the border."""
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx == 0 and dy == 0:
                continue
            ys = slice(max(dy, 0), h + min(dy, 0))
            yd = slice(max(-dy, 0), h + min(-dy, 0))
            xs = slice(max(dx, 0), w + min(dx, 0))
            xd = slice(max(-dx, 0), w + min(-dx, 0))
            out[yd, xd] |= mask[ys, xs]
    return out
