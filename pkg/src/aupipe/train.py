"""Multi-label training: Adam, emulated data-parallel workers, logging,
checkpointing, and the pretrain/fine-tune protocol.

Workers compute shard gradients in parallel on read-only parameter
snapshots; shards are averaged in a fixed order (by parameter path, then
shard index) so the update is bit-reproducible. Batch order and flip draws
derive from (seed, epoch), which makes resumed training identical to an
uninterrupted run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .metrics import EvalReport, MultiLabelEvaluator
from .model import ModelConfig, ParameterSet, forward, init_params, swap_head
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    num_workers: int = 3
    flip_probability: float = 0.5
    pos_weight: tuple[float, ...] | None = None
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")
        if self.pos_weight is not None:
            object.__setattr__(self, "pos_weight", tuple(float(w) for w in self.pos_weight))

    def digest(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class AdamState:
    """First/second-moment buffers plus one shared step counter."""

    def __init__(self, params: ParameterSet, trainable: tuple[str, ...] | None = None):
        paths = sorted(trainable if trainable is not None else params)
        self.m = {p: np.zeros_like(params[p].data, dtype=np.float64) for p in paths}
        self.v = {p: np.zeros_like(params[p].data, dtype=np.float64) for p in paths}
        self.t = 0

    @classmethod
    def from_buffers(cls, m: dict, v: dict, t: int) -> "AdamState":
        state = cls.__new__(cls)
        state.m = m
        state.v = v
        state.t = t
        return state


def adam_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> ParameterSet:
    """Bias-corrected Adam update over the paths present in ``grads``;
    untouched parameters pass through by reference."""
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {path}")
        if g.shape != params[path].shape:
            raise ValueError(f"gradient shape mismatch for {path}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    out = dict(params)
    for path in sorted(grads):
        g = grads[path]
        m = state.m[path]
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        out[path] = Tensor(params[path].data - step, requires_grad=True)
    return out


@dataclass(frozen=True)
class LabeledFrames:
    """Normalized image tensors plus consolidated 0/1 labels."""

    images: np.ndarray  # (n, 3, H, W) float64
    labels: np.ndarray  # (n, num_aus) in {0, 1}
    frame_ids: tuple[str, ...]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.frame_ids) != self.images.shape[0]:
            raise ValueError("frame_ids length mismatch")
        if self.images.shape[0] == 0:
            raise ValueError("dataset is empty (no annotated frames)")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "LabeledFrames":
        idx = np.asarray(indices)
        return LabeledFrames(
            images=self.images[idx],
            labels=self.labels[idx],
            frame_ids=tuple(self.frame_ids[i] for i in idx),
        )


def parallel_gradients(
    params: ParameterSet,
    cfg_model: ModelConfig,
    images: np.ndarray,
    labels: np.ndarray,
    num_workers: int,
    pos_weight=None,
):
    """Shard the batch evenly, backprop each shard on its own graph, and
    average gradients elementwise (fixed summation order).

    Returns (grads, mean loss, sigmoid probabilities in input order).
    """
    n = images.shape[0]
    if n % num_workers:
        raise ValueError(f"batch of {n} not divisible by {num_workers} workers")
    shard = n // num_workers

    def run(i: int):
        local = {p: Tensor(t.data, requires_grad=True) for p, t in params.items()}
        x = images[i * shard : (i + 1) * shard]
        y = labels[i * shard : (i + 1) * shard]
        logits = forward(local, cfg_model, x)
        loss = T.bce_with_logits(logits, y, pos_weight=pos_weight)
        T.backward(loss)
        with np.errstate(over="ignore"):
            probs = 1.0 / (1.0 + np.exp(-logits.data))
        return {p: local[p].grad for p in local}, loss.item(), probs

    if num_workers == 1:
        results = [run(0)]
    else:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            results = list(pool.map(run, range(num_workers)))

    grads: dict[str, np.ndarray] = {}
    for path in sorted(params):
        acc = results[0][0][path].astype(np.float64, copy=True)
        for r in results[1:]:
            acc += r[0][path]
        grads[path] = acc / num_workers
    loss = sum(r[1] for r in results) / num_workers
    probs = np.concatenate([r[2] for r in results], axis=0)
    return grads, loss, probs


def _workers_for(batch_len: int, num_workers: int) -> int:
    for w in range(min(num_workers, batch_len), 0, -1):
        if batch_len % w == 0:
            return w
    return 1


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _flip_width(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images[:, :, :, ::-1])


def train_epoch(
    params: ParameterSet,
    cfg_model: ModelConfig,
    dataset: LabeledFrames,
    cfg: TrainConfig,
    state: AdamState,
    epoch: int,
):
    """One seeded pass over the dataset. Returns (params, metrics dict)."""
    n = len(dataset)
    rng = _epoch_rng(cfg.seed, epoch)
    order = rng.permutation(n)
    flips = rng.random(n) < cfg.flip_probability
    evaluator = MultiLabelEvaluator(cfg_model.au_ids)
    loss_sum = 0.0
    started = time.perf_counter()

    for lo in range(0, n, cfg.batch_size):
        idx = order[lo : lo + cfg.batch_size]
        x = dataset.images[idx]
        flip_rows = np.nonzero(flips[idx])[0]
        if flip_rows.size:
            x = x.copy()
            x[flip_rows] = _flip_width(x[flip_rows])
        y = dataset.labels[idx]
        workers = _workers_for(len(idx), cfg.num_workers)
        grads, loss, probs = parallel_gradients(params, cfg_model, x, y, workers, cfg.pos_weight)
        if cfg.freeze_backbone:
            grads = {p: g for p, g in grads.items() if p.startswith("head/")}
        params = adam_step(params, grads, state, cfg)
        evaluator.update_batch(probs, y)
        loss_sum += loss * len(idx)

    report = evaluator.report()
    metrics = {
        "epoch": epoch,
        "loss": loss_sum / n,
        "report": report,
        "counters": evaluator.counters,
        "wall_time": time.perf_counter() - started,
    }
    return params, metrics


def _log_line(metrics: dict) -> str:
    report: EvalReport = metrics["report"]
    return json.dumps(
        {
            "epoch": metrics["epoch"],
            "loss": metrics["loss"],
            "per_au": {
                str(r["au_id"]): {"f1": r["f1"], "accuracy": r["accuracy"]} for r in report.rows
            },
            "macro_f1": report.macro_f1,
            "macro_accuracy": report.macro_accuracy,
            "wall_time": metrics["wall_time"],
        },
        sort_keys=True,
    )


def train(
    params: ParameterSet,
    cfg_model: ModelConfig,
    dataset: LabeledFrames,
    cfg: TrainConfig,
    state: AdamState | None = None,
    start_epoch: int = 0,
    log_path=None,
    checkpoint_path=None,
):
    """Run epochs [start_epoch, cfg.epochs); returns (params, state, history)."""
    if dataset.labels.shape[1] != cfg_model.num_aus:
        raise ValueError(
            f"dataset has {dataset.labels.shape[1]} labels but the head predicts {cfg_model.num_aus}"
        )
    if state is None:
        trainable = tuple(p for p in params if p.startswith("head/")) if cfg.freeze_backbone else None
        state = AdamState(params, trainable)
    history = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            params, metrics = train_epoch(params, cfg_model, dataset, cfg, state, epoch)
            history.append(metrics)
            if log_fh:
                log_fh.write(_log_line(metrics) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(
            checkpoint_path,
            params,
            cfg_model,
            adam_state=state,
            train_digest=cfg.digest(),
            epoch=cfg.epochs,
        )
    return params, state, history


def evaluate(
    params: ParameterSet,
    cfg_model: ModelConfig,
    dataset: LabeledFrames,
    threshold: float = 0.5,
    num_workers: int = 1,
    batch_size: int = 64,
) -> EvalReport:
    """Forward the dataset in chunks (one evaluator per worker, merged at
    the end) and report per-AU scores."""
    n = len(dataset)
    bounds = np.linspace(0, n, num_workers + 1).astype(int)

    def run(i: int) -> MultiLabelEvaluator:
        ev = MultiLabelEvaluator(cfg_model.au_ids, threshold)
        for lo in range(bounds[i], bounds[i + 1], batch_size):
            hi = min(lo + batch_size, bounds[i + 1])
            with T.no_grad():
                logits = forward(params, cfg_model, dataset.images[lo:hi])
            with np.errstate(over="ignore"):
                probs = 1.0 / (1.0 + np.exp(-logits.data))
            ev.update_batch(probs, dataset.labels[lo:hi])
        return ev

    if num_workers == 1:
        merged = run(0)
    else:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            parts = list(pool.map(run, range(num_workers)))
        merged = parts[0]
        for part in parts[1:]:
            merged.merge_from(part)
    return merged.report()


def predict_probs(params: ParameterSet, cfg_model: ModelConfig, images: np.ndarray, batch_size: int = 64):
    out = []
    for lo in range(0, images.shape[0], batch_size):
        with T.no_grad():
            logits = forward(params, cfg_model, images[lo : lo + batch_size])
        with np.errstate(over="ignore"):
            out.append(1.0 / (1.0 + np.exp(-logits.data)))
    return np.concatenate(out, axis=0)


def pretrain_then_finetune(
    cfg_model: ModelConfig,
    pretrain_data: LabeledFrames,
    pretrain_eval: LabeledFrames,
    finetune_data: LabeledFrames,
    finetune_eval: LabeledFrames,
    finetune_tag: str,
    cfg_pretrain: TrainConfig,
    cfg_finetune: TrainConfig,
    init_seed: int = 0,
    head_seed: int = 0,
) -> dict:
    """Train on corpus A, swap the head for corpus B's AU set, fine-tune,
    and report held-out metrics for both stages."""
    params = init_params(cfg_model, seed=init_seed)
    params, _, _ = train(params, cfg_model, pretrain_data, cfg_pretrain)
    report_a = evaluate(params, cfg_model, pretrain_eval)
    params, cfg_model_b = swap_head(params, cfg_model, finetune_tag, seed=head_seed)
    params, _, _ = train(params, cfg_model_b, finetune_data, cfg_finetune)
    report_b = evaluate(params, cfg_model_b, finetune_eval)
    return {
        "params": params,
        "model_config": cfg_model_b,
        "pretrain_report": report_a,
        "finetune_report": report_b,
    }
