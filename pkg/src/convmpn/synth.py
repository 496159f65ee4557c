"""Synthetic buildings, rendered images, a simulated corner detector, and corpus IO.

A building is 1-3 axis-aligned rectangles on an integer lattice, each new
one abutting an earlier one, so shared walls become internal edges and
partial overlaps create T-junctions. The lattice layout is sheared (to break
the Manhattan property), scaled and translated into the image.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Corner, PlanarGraph, line_pixels
from .planar import extract_regions, planarize, rasterize_polygon

MAX_TRAINING_CORNERS = 15
MAX_ATTEMPTS = 100

# independent random streams per record
_LAYOUT, _RENDER, _DETECT = 0, 1, 2


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    count: int = 250
    image_size: int = 64
    min_corners: int = 4
    max_corners: int = 15
    rectangle_weights: tuple[float, ...] = (0.4, 0.4, 0.2)
    max_side: int = 4  # rectangle side length range on the lattice is 1..max_side
    shear: float = 0.25
    margin: float = 3.0
    min_separation: float = 4.0
    noise: float = 0.03
    detector_jitter: float = 1.0
    detector_miss_rate: float = 0.05
    detector_fp_rate: float = 0.0
    max_detections: int = MAX_TRAINING_CORNERS

    def __post_init__(self):
        object.__setattr__(self, "rectangle_weights", tuple(float(w) for w in self.rectangle_weights))
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if not 4 <= self.min_corners <= self.max_corners <= MAX_TRAINING_CORNERS:
            raise ValueError(f"corner range must satisfy 4 <= min <= max <= {MAX_TRAINING_CORNERS}, "
                             f"got [{self.min_corners}, {self.max_corners}]")
        w = self.rectangle_weights
        if not 1 <= len(w) <= 3 or any(v < 0 for v in w) or sum(w) <= 0:
            raise ValueError("rectangle_weights needs 1-3 non-negative entries with a positive sum")
        if self.max_side < 1 or self.shear < 0 or self.margin < 0 or self.min_separation < 0:
            raise ValueError("max_side must be >= 1 and shear, margin, min_separation >= 0")
        if self.noise < 0 or self.detector_jitter < 0:
            raise ValueError("noise levels must be >= 0")
        for name in ("detector_miss_rate", "detector_fp_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 1 <= self.max_detections <= MAX_TRAINING_CORNERS:
            raise ValueError(f"max_detections must lie in [1, {MAX_TRAINING_CORNERS}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rectangle_weights"] = list(self.rectangle_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DatasetRecord:
    id: str
    image: Path
    gt: PlanarGraph
    detections: list[Corner]

    def load_image(self) -> np.ndarray:
        return load_image(self.image)


def record_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


# -- building layout ---------------------------------------------------------
def _overlaps(a, b) -> bool:
    """Interiors of two lattice rectangles (x0, y0, x1, y1) intersect."""
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _attach(rects, rng, max_side):
    """A new rectangle abutting a random side of a random existing one, or None."""
    base = rects[rng.integers(len(rects))]
    w = int(rng.integers(1, max_side + 1))
    h = int(rng.integers(1, max_side + 1))
    x0, y0, x1, y1 = base
    side = int(rng.integers(4))
    if side in (0, 1):  # left / right
        ny0 = int(rng.integers(y0 - h + 1, y1))
        nx0 = x0 - w if side == 0 else x1
        new = (nx0, ny0, nx0 + w, ny0 + h)
    else:  # top / bottom
        nx0 = int(rng.integers(x0 - w + 1, x1))
        ny0 = y0 - h if side == 2 else y1
        new = (nx0, ny0, nx0 + w, ny0 + h)
    if any(_overlaps(new, r) for r in rects):
        return None
    return new


def _simplify(verts: np.ndarray, edges: list[tuple[int, int]]):
    """Drop degree-2 vertices whose two edges are collinear."""
    adj: dict[int, set[int]] = {v: set() for v in range(len(verts))}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    changed = True
    while changed:
        changed = False
        for v in list(adj):
            if len(adj[v]) != 2:
                continue
            a, b = adj[v]
            da, db = verts[a] - verts[v], verts[b] - verts[v]
            if abs(da[0] * db[1] - da[1] * db[0]) > 1e-9:
                continue
            adj[a].discard(v)
            adj[b].discard(v)
            adj[a].add(b)
            adj[b].add(a)
            del adj[v]
            changed = True
    keep = sorted(v for v in adj if adj[v])
    index = {v: k for k, v in enumerate(keep)}
    out = sorted({(min(index[u], index[v]), max(index[u], index[v])) for u in keep for v in adj[u]})
    return verts[keep], out


def _layout(spec: SynthSpec, rng: np.random.Generator):
    """Lattice rectangles -> (vertices, edges) of their boundary arrangement."""
    weights = np.asarray(spec.rectangle_weights) / sum(spec.rectangle_weights)
    k = int(rng.choice(len(weights), p=weights)) + 1
    rects = [(0, 0, int(rng.integers(1, spec.max_side + 1)), int(rng.integers(1, spec.max_side + 1)))]
    tries = 0
    while len(rects) < k and tries < 50:
        tries += 1
        new = _attach(rects, rng, spec.max_side)
        if new is not None:
            rects.append(new)
    pts, segs = [], []
    for x0, y0, x1, y1 in rects:
        base = len(pts)
        pts += [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        segs += [(base, base + 1), (base + 1, base + 2), (base + 2, base + 3), (base + 3, base)]
    verts, edges = planarize(np.array(pts, dtype=np.float64), segs)
    return _simplify(verts, edges)


def _place(verts: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    shx, shy = rng.uniform(-spec.shear, spec.shear, size=2)
    p = verts @ np.array([[1.0, shy], [shx, 1.0]])
    p = p - p.min(axis=0)
    extent = p.max(axis=0)
    room = spec.image_size - 1 - 2 * spec.margin
    fit = room / max(float(extent.max()), 1e-9)
    scale = fit * rng.uniform(0.6, 1.0)
    p = p * scale
    slack = room - p.max(axis=0)
    offset = spec.margin + rng.uniform(0, 1, size=2) * slack
    return p + offset


def _valid(points: np.ndarray, spec: SynthSpec) -> bool:
    n = len(points)
    if not spec.min_corners <= n <= spec.max_corners:
        return False
    if np.any(points < 0) or np.any(points > spec.image_size - 1):
        return False
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    d[np.diag_indices(n)] = np.inf
    return bool(d.min() >= spec.min_separation)


def generate_building(spec: SynthSpec, seed: int) -> PlanarGraph:
    """Connected planar building graph whose bounded faces are its rectangles."""
    rng = np.random.default_rng(seed)
    for _ in range(MAX_ATTEMPTS):
        verts, edges = _layout(spec, rng)
        points = _place(verts, spec, rng)
        if _valid(points, spec):
            return PlanarGraph([Corner(float(x), float(y)) for x, y in points], edges)
    raise RuntimeError(
        f"no building with {spec.min_corners}-{spec.max_corners} corners and separation "
        f">= {spec.min_separation} px after {MAX_ATTEMPTS} attempts (seed {seed})"
    )


# -- rendering ---------------------------------------------------------------
def _texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth zero-mean field in roughly [-1, 1], upsampled from a coarse grid."""
    coarse = rng.uniform(-1, 1, size=(3, size // 8 + 1, size // 8 + 1))
    idx = np.arange(size) / 8.0
    i0 = np.floor(idx).astype(int)
    f = idx - i0
    rows = coarse[:, i0] * (1 - f)[None, :, None] + coarse[:, i0 + 1] * f[None, :, None]
    return rows[:, :, i0] * (1 - f) + rows[:, :, i0 + 1] * f


def render_image(graph: PlanarGraph, spec: SynthSpec, seed: int = 0) -> np.ndarray:
    """(3, S, S) float image in [0, 1]: textured ground, filled roof regions, dark walls."""
    rng = np.random.default_rng(seed)
    s = spec.image_size
    background = rng.uniform(0.25, 0.4, size=3)
    img = np.empty((3, s, s), dtype=np.float64)
    img[:] = background[:, None, None]
    if spec.noise > 0:
        img += 2.0 * spec.noise * _texture(s, rng)
    for region in extract_regions(graph):
        inside = rasterize_polygon(region.boundary, s, 1.0)
        albedo = rng.uniform(0.55, 0.95, size=3)
        img[:, inside] = albedo[:, None]
    stroke = rng.uniform(0.0, 0.12, size=3)
    for i, j in graph.edges:
        pix = np.array(line_pixels(graph.corners[i], graph.corners[j]))
        img[:, pix[:, 1], pix[:, 0]] = stroke[:, None]
    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """PNG -> (3, S, S) float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / np.float32(255)


# -- simulated detector ------------------------------------------------------
def simulate_detector(gt_corners, spec: SynthSpec, seed: int) -> list[Corner]:
    """Drop, jitter and pad GT corners with false positives, capped at ``max_detections``.

    Surviving GT-derived corners come first, in GT order.
    """
    rng = np.random.default_rng(seed)
    s = spec.image_size
    out = []
    for c in gt_corners:
        if rng.random() < spec.detector_miss_rate:
            continue
        dx, dy = rng.normal(0.0, spec.detector_jitter, size=2) if spec.detector_jitter > 0 else (0.0, 0.0)
        out.append(Corner.clamped(c[0] + dx, c[1] + dy, s))
    n_fp = int(rng.binomial(len(gt_corners), spec.detector_fp_rate)) if spec.detector_fp_rate > 0 else 0
    for x, y in rng.uniform(0, s - 1, size=(n_fp, 2)):
        out.append(Corner(float(x), float(y)))
    return _dedupe(out)[: spec.max_detections]


def _dedupe(corners: list[Corner]) -> list[Corner]:
    seen, out = set(), []
    for c in corners:
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


# -- corpus IO ---------------------------------------------------------------
def record_id(index: int) -> str:
    return f"b{index:05d}"


def make_record(spec: SynthSpec, index: int):
    """Graph, rendered uint8 image and detections for record ``index``."""
    lay = record_rng(spec.seed, index, _LAYOUT)
    graph = generate_building(spec, int(lay.integers(2**63)))
    image = render_image(graph, spec, int(record_rng(spec.seed, index, _RENDER).integers(2**63)))
    det = simulate_detector(graph.corners, spec, int(record_rng(spec.seed, index, _DETECT).integers(2**63)))
    return graph, to_uint8(image), det


def _write_record(args):
    spec, index, root = args
    rid = record_id(index)
    graph, image, det = make_record(spec, index)
    Image.fromarray(image.transpose(1, 2, 0), mode="RGB").save(root / "images" / f"{rid}.png", format="PNG")
    (root / "graphs" / f"{rid}.json").write_text(graph.to_json())
    (root / "detections" / f"{rid}.json").write_text(json.dumps({"corners": [[c.x, c.y] for c in det]}))
    return rid, len(graph.corners)


def write_corpus(spec: SynthSpec, out_dir, jobs: int = 1) -> dict:
    """Generate the corpus; returns the manifest. Output is independent of ``jobs``."""
    root = Path(out_dir)
    for sub in ("images", "graphs", "detections"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    tasks = [(spec, k, root) for k in range(spec.count)]
    if jobs > 1 and spec.count > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_write_record, tasks, chunksize=8))
    else:
        results = [_write_record(t) for t in tasks]
    manifest = {
        "spec": spec.to_dict(),
        "records": [
            {"id": rid, "image": f"images/{rid}.png", "graph": f"graphs/{rid}.json",
             "detections": f"detections/{rid}.json", "corners": n}
            for rid, n in results
        ],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def corner_histogram(manifest: dict) -> dict[int, int]:
    return dict(sorted(Counter(r["corners"] for r in manifest["records"]).items()))


def read_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json in {corpus_dir}")
    return json.loads(path.read_text())


def load_corpus(corpus_dir) -> tuple[SynthSpec, list[DatasetRecord]]:
    root = Path(corpus_dir)
    manifest = read_manifest(root)
    spec = SynthSpec.from_dict(manifest["spec"])
    records = []
    for r in manifest["records"]:
        gt = PlanarGraph.from_json((root / r["graph"]).read_text())
        det = json.loads((root / r["detections"]).read_text())["corners"]
        records.append(DatasetRecord(r["id"], root / r["image"], gt, [Corner(float(x), float(y)) for x, y in det]))
    return spec, records


def split_records(records: list, fraction: float, seed: int) -> tuple[list, list]:
    """Seeded (train, validation) split with round(fraction * n) validation records."""
    n = len(records)
    n_val = int(math.floor(fraction * n + 0.5))
    order = np.random.default_rng([seed, 7]).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [r for k, r in enumerate(records) if k not in val_idx]
    val = [r for k, r in enumerate(records) if k in val_idx]
    return train, val
