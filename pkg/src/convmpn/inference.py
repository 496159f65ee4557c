"""Running a trained model on one image and its corner candidates."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load as load_checkpoint
from .geometry import Corner, PlanarGraph, build_inference_graph
from .layers import Module
from .model import ModelConfig, build_model, confidences, node_inputs
from .tensor import no_grad

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


@dataclass
class Prediction:
    corners: list[Corner]
    candidates: list[tuple[int, int]]
    confidences: np.ndarray  # float64, one per candidate
    threshold: float

    def kept(self) -> PlanarGraph:
        """Corners plus the candidate edges at or above the threshold, with their confidences."""
        keep = [k for k, c in enumerate(self.confidences) if c >= self.threshold]
        return PlanarGraph(self.corners, [self.candidates[k] for k in keep],
                           [float(self.confidences[k]) for k in keep])

    def scored(self) -> PlanarGraph:
        """Every candidate edge with its confidence (input for threshold sweeps)."""
        return PlanarGraph(self.corners, self.candidates, [float(c) for c in self.confidences])

    def to_dict(self) -> dict:
        out = self.kept().to_dict()
        out["threshold"] = self.threshold
        out["candidates"] = [
            {"edge": [i, j], "confidence": float(c)} for (i, j), c in zip(self.candidates, self.confidences)
        ]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def clamp_threshold(threshold: float) -> float:
    return min(max(float(threshold), 0.0), 1.0)


def predict(model: Module, image: np.ndarray, corners, threshold: float = DEFAULT_THRESHOLD) -> Prediction:
    corners = [Corner(float(c[0]), float(c[1])) for c in corners]
    threshold = clamp_threshold(threshold)
    graph = build_inference_graph(corners)
    if graph.empty:
        return Prediction(corners, [], np.zeros(0), threshold)
    model.eval()
    with no_grad():
        inputs = node_inputs(image, corners, graph, model.cfg.mask_half_width)
        conf = confidences(model.forward_inputs(inputs, graph)).data.astype(np.float64)
    return Prediction(corners, list(graph.nodes), conf, threshold)


def graph_from_prediction(d: dict) -> PlanarGraph:
    """Scored graph from a prediction JSON: all candidates when present, else the kept edges."""
    if "candidates" in d:
        return PlanarGraph([tuple(c) for c in d["corners"]], [tuple(c["edge"]) for c in d["candidates"]],
                           [c["confidence"] for c in d["candidates"]])
    return PlanarGraph.from_dict(d)


def load_model(model_dir) -> tuple[Module, dict]:
    """Model from ``model.cmpn`` + ``config.json``; the checkpoint's config hash must match."""
    root = Path(model_dir)
    run = json.loads((root / "config.json").read_text())
    cfg = ModelConfig.from_dict(run["model"])
    model = build_model(cfg)
    model.load_state_dict(load_checkpoint(root / "model.cmpn", cfg.digest()))
    model.eval()
    return model, run


def read_corners(path) -> list[Corner]:
    """Corner list from ``{"corners": [[x, y], ...]}`` (detections or graph JSON)."""
    d = json.loads(Path(path).read_text())
    pts = d["corners"] if isinstance(d, dict) else d
    return [Corner(float(x), float(y)) for x, y in pts]
