"""Loss, training-data preparation from two corner sources, and the plateau schedule."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import checkpoint
from . import functional as F
from .geometry import Corner, PlanarGraph, build_inference_graph
from .layers import Module
from .model import confidences, node_inputs
from .optim import SGD, Adam
from .tensor import NumericError, Tensor, no_grad

log = logging.getLogger(__name__)

GT_CORNERS = "gt_corners"
DETECTED_CORNERS = "detected_corners"
SOURCES = (GT_CORNERS, DETECTED_CORNERS)
PROB_CLAMP = 1e-7
OPTIMIZERS = {"sgd": SGD, "adam": Adam}


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 5e-4
    lr_decay: float = 0.8
    plateau_epochs: int = 4
    stop_epochs: int = 20
    max_epochs: int = 100
    grad_accum: int = 8
    loss_lambda: float = 3.0
    lambda_placement: str = "as_written"
    max_corner_candidates: int = 15
    corner_perturb_sigma: float = 2.0
    assign_radius: float = 7.0
    collinear_tolerance: float = 2.0
    val_fraction: float = 0.2
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_init", "lr_decay", "plateau_epochs", "stop_epochs", "max_epochs", "grad_accum",
                     "loss_lambda", "max_corner_candidates", "assign_radius", "collinear_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.corner_perturb_sigma < 0:
            raise ValueError("corner_perturb_sigma must be >= 0")
        if self.lambda_placement not in ("as_written", "on_positive"):
            raise ValueError(f"lambda_placement must be 'as_written' or 'on_positive', got {self.lambda_placement!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got {self.optimizer!r}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingSample:
    image: np.ndarray
    corners: list[Corner]
    labels: np.ndarray  # one 0/1 target per candidate edge, in inference-graph node order
    source: str


# -- loss --------------------------------------------------------------------
def weighted_bce(conf: Tensor, targets, lam: float = 3.0, placement: str = "as_written") -> Tensor:
    """``-sum(H log p + lam (1 - H) log(1 - p))`` with p clamped to [1e-7, 1 - 1e-7].

    With ``placement="on_positive"`` the weight multiplies the positive term instead.
    """
    h = np.asarray(targets, dtype=conf.dtype)
    if h.shape != conf.shape:
        raise ValueError(f"weighted_bce: {conf.shape[0] if conf.ndim else 0} confidences for {h.size} targets")
    if placement not in ("as_written", "on_positive"):
        raise ValueError(f"unknown lambda placement {placement!r}")
    p = F.clip(conf, PROB_CLAMP, 1 - PROB_CLAMP)
    pos_w, neg_w = (1.0, lam) if placement == "as_written" else (lam, 1.0)
    pos = F.weighted_sum(F.log(p), pos_w * h)
    neg = F.weighted_sum(F.log(1.0 - p), neg_w * (1 - h))
    return -(pos + neg)


# -- training samples --------------------------------------------------------
def edge_labels(corners: Sequence, positives: set[tuple[int, int]]) -> np.ndarray:
    graph = build_inference_graph(corners)
    return np.array([1.0 if e in positives else 0.0 for e in graph.nodes])


def prepare_gt_sample(gt: PlanarGraph, image: np.ndarray, sigma: float, rng: np.random.Generator,
                      image_size: int | None = None) -> TrainingSample:
    """GT corners with per-axis N(0, sigma^2) noise, clamped to the image; labels are the GT edges."""
    size = image_size or image.shape[-1]
    pts = gt.points()
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, size=pts.shape)
    corners = [Corner.clamped(x, y, size) for x, y in pts]
    return TrainingSample(image, corners, edge_labels(corners, gt.edge_set()), GT_CORNERS)


def assign_detected_corners(detected: Sequence, gt: Sequence, radius: float) -> list[int | None]:
    """One-to-one detected -> GT assignment within ``radius``.

    Among all one-to-one assignments using only pairs within the radius, the
    one with the most pairs is taken, ties broken by smallest total distance.
    """
    out: list[int | None] = [None] * len(detected)
    if not len(detected) or not len(gt):
        return out
    d = np.linalg.norm(np.asarray(detected, float)[:, None, :] - np.asarray(gt, float)[None, :, :], axis=-1)
    ok = d <= radius
    if not ok.any():
        return out
    # every feasible pair is worth more than any sum of distances, so cardinality wins first
    big = 1.0 + d[ok].sum()
    cost = np.where(ok, d - big, 0.0)
    rows, cols = linear_sum_assignment(cost)
    for r, c in zip(rows, cols):
        if ok[r, c]:
            out[r] = int(c)
    return out


def _collinear_between(p, a, b, tol: float) -> bool:
    ab = np.subtract(b, a, dtype=float)
    length2 = float(ab @ ab)
    if length2 == 0:
        return False
    ap = np.subtract(p, a, dtype=float)
    t = float(ap @ ab) / length2
    dist = abs(ab[0] * ap[1] - ab[1] * ap[0]) / math.sqrt(length2)
    return 0 < t < 1 and dist < tol


def derive_edge_targets(detected: Sequence, assignment: Sequence[int | None], gt: PlanarGraph,
                        tolerance: float = 2.0) -> np.ndarray:
    """0/1 target for each candidate edge over ``detected`` (inference-graph node order).

    Positive when the endpoints map to a GT edge, or when they map to GT
    corners A and C that share a GT neighbor B lying between them within
    ``tolerance`` px of segment AC, and B is not assigned to any detection.
    """
    graph = build_inference_graph(detected)
    adj = gt.adjacency()
    assigned = {a for a in assignment if a is not None}
    gts = gt.points()
    labels = np.zeros(len(graph))
    for k, (i, j) in enumerate(graph.nodes):
        a, b = assignment[i], assignment[j]
        if a is None or b is None or a == b:
            continue
        if b in adj[a]:
            labels[k] = 1.0
            continue
        for m in adj[a] & adj[b]:
            if m not in assigned and _collinear_between(gts[m], gts[a], gts[b], tolerance):
                labels[k] = 1.0
                break
    return labels


def prepare_detected_sample(detected: Sequence, gt: PlanarGraph, image: np.ndarray,
                            cfg: TrainConfig) -> TrainingSample:
    corners = [Corner(float(c[0]), float(c[1])) for c in detected][: cfg.max_corner_candidates]
    assignment = assign_detected_corners(corners, gt.corners, cfg.assign_radius)
    labels = derive_edge_targets(corners, assignment, gt, cfg.collinear_tolerance)
    return TrainingSample(image, corners, labels, DETECTED_CORNERS)


# -- schedule ----------------------------------------------------------------
@dataclass
class PlateauSchedule:
    """Decay the rate when validation loss has not improved for ``plateau`` epochs; stop after ``stop``.

    Call :meth:`observe` once with the pre-training validation loss (epoch 0)
    and then once per epoch.
    """

    lr: float
    decay: float = 0.8
    plateau: int = 4
    stop: int = 20
    best: float = math.inf
    since_best: int = 0
    since_decay: int = 0

    def observe(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.since_best = 0
            self.since_decay = 0
            return False
        self.since_best += 1
        self.since_decay += 1
        if self.since_decay >= self.plateau:
            self.lr *= self.decay
            self.since_decay = 0
        return self.since_best >= self.stop

    def state(self) -> dict:
        return asdict(self)


# -- training loop -----------------------------------------------------------
@dataclass
class Example:
    """One corpus record with its image decoded."""

    id: str
    image: np.ndarray
    gt: PlanarGraph
    detections: list[Corner]


def sample_loss(model: Module, sample: TrainingSample, cfg: TrainConfig, half_width: int) -> Tensor:
    graph = build_inference_graph(sample.corners)
    inputs = node_inputs(sample.image, sample.corners, graph, half_width)
    conf = confidences(model.forward_inputs(inputs, graph))
    return weighted_bce(conf, sample.labels, cfg.loss_lambda, cfg.lambda_placement)


def make_sample(ex: Example, source: str, cfg: TrainConfig, rng: np.random.Generator) -> TrainingSample | None:
    if source == GT_CORNERS:
        s = prepare_gt_sample(ex.gt, ex.image, cfg.corner_perturb_sigma, rng)
    else:
        s = prepare_detected_sample(ex.detections, ex.gt, ex.image, cfg)
    return s if len(s.corners) >= 2 else None


def validation_samples(val: Sequence[Example], cfg: TrainConfig) -> list[TrainingSample]:
    """Both sources for every validation record; GT perturbation is seeded per record, fixed across epochs."""
    out = []
    for k, ex in enumerate(val):
        for source in SOURCES:
            s = make_sample(ex, source, cfg, np.random.default_rng([cfg.seed, 1, k]))
            if s is not None:
                out.append(s)
    return out


def evaluate_loss(model: Module, samples: Sequence[TrainingSample], cfg: TrainConfig, half_width: int) -> float:
    model.eval()
    with no_grad():
        total = sum(sample_loss(model, s, cfg, half_width).item() for s in samples)
    return total / max(len(samples), 1)


@dataclass
class TrainState:
    """Everything needed to continue a run after the last completed epoch."""

    epoch: int
    schedule: PlateauSchedule
    best_state: dict[str, np.ndarray]
    best_epoch: int
    history: list[dict]
    stopped: bool = False
    optimizer: SGD | None = None


def train_loop(
    model: Module,
    train: Sequence[Example],
    val: Sequence[Example],
    cfg: TrainConfig,
    *,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState, Module], None] | None = None,
    val_loss_fn: Callable[[Module, int], float] | None = None,
    epochs: int | None = None,
) -> TrainState:
    """Train with per-sample alternation of the two corner sources.

    Batch size is one building; gradients of ``grad_accum`` buildings are
    averaged into one SGD update. ``on_epoch`` runs after every epoch (for
    checkpointing); ``val_loss_fn`` replaces the validation pass (used to
    exercise the schedule in isolation); ``epochs`` caps this call's epochs.
    """
    if not train:
        raise ValueError("train_loop: empty training set")
    if not val and val_loss_fn is None:
        raise ValueError("train_loop: empty validation set")
    half_width = model.cfg.mask_half_width
    val_samples = validation_samples(val, cfg) if val_loss_fn is None else []

    def validate(epoch: int) -> float:
        if val_loss_fn is not None:
            return float(val_loss_fn(model, epoch))
        return evaluate_loss(model, val_samples, cfg, half_width)

    if state is None:
        schedule = PlateauSchedule(cfg.lr_init, cfg.lr_decay, cfg.plateau_epochs, cfg.stop_epochs)
        v0 = validate(0)
        _check_finite(v0, "validation loss at epoch 0")
        schedule.observe(v0)
        state = TrainState(0, schedule, _copy_state(model), 0, [
            {"epoch": 0, "train_loss": None, "val_loss": v0, "lr": schedule.lr, "source_mix": {}}
        ])
        if on_epoch:
            on_epoch(state, model)

    params = model.parameters()
    done = 0
    while not state.stopped and state.epoch < cfg.max_epochs and (epochs is None or done < epochs):
        epoch = state.epoch + 1
        lr = state.schedule.lr
        opt = state.optimizer
        if opt is None:
            opt = state.optimizer = OPTIMIZERS[cfg.optimizer](params, lr, cfg.grad_accum)
        opt.learning_rate = lr
        opt.zero_grad()
        model.train()
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        mix = {s: 0 for s in SOURCES}
        for k, idx in enumerate(order):
            source = SOURCES[(k + epoch) % 2]
            sample = make_sample(train[idx], source, cfg, rng)
            if sample is None:
                continue
            loss = sample_loss(model, sample, cfg, half_width)
            value = loss.item()
            _check_finite(value, f"training loss at epoch {epoch}")
            loss.backward()
            total += value
            count += 1
            mix[source] += 1
            if opt.record():
                opt.step()
        if opt.pending:
            opt.step()
        train_loss = total / max(count, 1)
        v = validate(epoch)
        _check_finite(v, f"validation loss at epoch {epoch}")
        improved = v < state.schedule.best
        stop = state.schedule.observe(v)
        if improved:
            state.best_state = _copy_state(model)
            state.best_epoch = epoch
        state.epoch = epoch
        state.stopped = stop
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": v, "lr": lr, "source_mix": mix}
        state.history.append(row)
        log.info("epoch %d train %.4f val %.4f lr %.3g", epoch, train_loss, v, lr)
        if on_epoch:
            on_epoch(state, model)
        done += 1
    return state


def _copy_state(model: Module) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in model.state_dict().items()}


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{what} is not finite ({value})")


def history_lines(history: Sequence[dict]) -> str:
    return "".join(json.dumps(row) + "\n" for row in history)


def write_history(path, history: Sequence[dict]) -> None:
    Path(path).write_text(history_lines(history))


def load_examples(records) -> list[Example]:
    """Decode the images of corpus records (see :func:`convmpn.synth.load_corpus`)."""
    return [Example(r.id, r.load_image(), r.gt, list(r.detections)) for r in records]


# -- run directory persistence -------------------------------------------------
def save_run(out_dir, state: TrainState, model: Module, digest: str) -> None:
    """Write best weights, last weights, optimizer moments, schedule state and history."""
    root = Path(out_dir)
    checkpoint.save(root / "model.cmpn", state.best_state, digest)
    checkpoint.save(root / "last.cmpn", model.state_dict(), digest)
    opt = state.optimizer
    moments = {}
    if isinstance(opt, Adam):
        names = [n for n, _ in model.named_parameters()]
        moments = {**{f"m.{n}": a for n, a in zip(names, opt.m)}, **{f"v.{n}": a for n, a in zip(names, opt.v)}}
    checkpoint.save(root / "optim.cmpn", moments, digest)
    meta = {"epoch": state.epoch, "best_epoch": state.best_epoch, "stopped": state.stopped,
            "schedule": state.schedule.state(), "optimizer_steps": getattr(opt, "t", 0)}
    (root / "trainer_state.json").write_text(json.dumps(meta, indent=1))
    write_history(root / "history.jsonl", state.history)


def load_run(out_dir, model: Module, cfg: TrainConfig, digest: str) -> TrainState:
    """Restore a run written by :func:`save_run`; ``model`` receives the last weights."""
    root = Path(out_dir)
    meta = json.loads((root / "trainer_state.json").read_text())
    model.load_state_dict(checkpoint.load(root / "last.cmpn", digest))
    best = checkpoint.load(root / "model.cmpn", digest)
    history = [json.loads(line) for line in (root / "history.jsonl").read_text().splitlines() if line]
    schedule = PlateauSchedule(**meta["schedule"])
    opt = OPTIMIZERS[cfg.optimizer](model.parameters(), schedule.lr, cfg.grad_accum)
    if isinstance(opt, Adam):
        moments = checkpoint.load(root / "optim.cmpn", digest)
        names = [n for n, _ in model.named_parameters()]
        opt.m = [moments[f"m.{n}"].astype(p.dtype) for n, p in zip(names, opt.params)]
        opt.v = [moments[f"v.{n}"].astype(p.dtype) for n, p in zip(names, opt.params)]
        opt.t = meta["optimizer_steps"]
    return TrainState(meta["epoch"], schedule, best, meta["best_epoch"], history, meta["stopped"], opt)
