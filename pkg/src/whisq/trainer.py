"""Deterministic training loop: heavy-ball SGD, global-norm gradient
clipping, per-epoch reshuffling from a derived seed, checkpointing, and
JSONL history emission.

Reproducibility contract: a run is a pure function of the manifest
contents and the config (including its seed); two runs with identical
inputs produce bit-identical checkpoints.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import data_io, losses, model
from .errors import DataError, NumericError


@dataclass
class OptimizerState:
    velocities: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: model.ModelParams) -> "OptimizerState":
        return cls(velocities={k: np.zeros_like(v) for k, v in params.tensors.items()})


def clip_gradients(grads: dict, max_norm: float):
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it."""
    if max_norm <= 0:
        raise DataError("max_norm must be positive")
    sq = 0.0
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NumericError("NaN/Inf in gradients")
        sq += float((g * g).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def sgd_step(params: model.ModelParams, grads: dict, state: OptimizerState,
             lr: float, momentum: float) -> None:
    """Heavy-ball update: v <- momentum*v + g; p <- p - lr*v."""
    for k, p in params.tensors.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DataError(f"gradient shape {g.shape} != param shape {p.shape} for {k}")
        v = state.velocities[k]
        v = momentum * v + g
        state.velocities[k] = v
        params.tensors[k] = p - lr * v
    state.step += 1


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    ot_loss: float
    total_loss: float
    seconds: float
    grad_norm: float
    ot_converged: bool
    validation: dict | None = None


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)


def _epoch_seed(base_seed: int, epoch: int) -> int:
    # stable across processes and platforms, unlike hash()
    return int(np.random.SeedSequence([base_seed, epoch]).generate_state(1)[0])


def _batch_loss_fn(batch, config):
    def fn(tensors):
        res = model.forward(batch, tensors, config)
        lb = losses.total_loss(res.y_omq, res.y_ta,
                               (batch.omq_targets, batch.ta_targets),
                               res.h_a_items, res.h_t_items, None, config)
        fn.breakdown = lb
        return lb.total if isinstance(lb.total, ad.Tensor) else ad.Tensor(np.asarray(lb.total))
    return fn


def train(manifest_path, config: model.WhisqConfig, out_dir,
          checkpoint_every: int = 0, quiet: bool = True):
    """Train from a manifest; returns (final_checkpoint_path, TrainHistory).

    Writes ``history.jsonl`` plus ``checkpoint.wqck`` (and periodic
    ``checkpoint_ep*.wqck`` when ``checkpoint_every`` is set) under
    ``out_dir``. A NaN anywhere aborts with the last good checkpoint
    retained on disk.
    """
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    records = data_io.parse_manifest(manifest_path)
    cache: dict = {}

    params = model.init_params(config, config.seed)
    state = OptimizerState.for_params(params)
    history = TrainHistory()
    final_path = os.path.join(out_dir, "checkpoint.wqck")
    history_path = os.path.join(out_dir, "history.jsonl")

    def flush_history():
        with open(history_path, "w", encoding="utf-8") as fh:
            fh.write(history.to_jsonl())

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        batches = data_io.make_batches(records, config.batch_size,
                                       seed=_epoch_seed(config.seed, epoch),
                                       shuffle=True, cache=cache)
        sums = {"task": 0.0, "ot": 0.0, "total": 0.0}
        n_items = 0
        norm_last = 0.0
        converged = True
        for batch in batches:
            fn = _batch_loss_fn(batch, config)
            try:
                _, grads = ad.value_and_grad(fn, params.tensors)
                grads, norm_last = clip_gradients(grads, config.clip_norm)
            except NumericError:
                model.save_checkpoint(final_path, params, config)
                flush_history()
                raise
            sgd_step(params, grads, state, config.lr, config.momentum)
            lb = fn.breakdown
            sums["task"] += lb.task * batch.size
            sums["ot"] += lb.ot * batch.size
            sums["total"] += float(lb.total) * batch.size
            converged = converged and lb.ot_diag.converged
            n_items += batch.size
        record = EpochRecord(
            epoch=epoch,
            task_loss=sums["task"] / n_items,
            ot_loss=sums["ot"] / n_items,
            total_loss=sums["total"] / n_items,
            seconds=time.perf_counter() - t0,
            grad_norm=norm_last,
            ot_converged=converged,
        )
        history.records.append(record)
        if not quiet:
            print(f"epoch {epoch}: task={record.task_loss:.6f} ot={record.ot_loss:.6f}",
                  flush=True)
        if checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            model.save_checkpoint(
                os.path.join(out_dir, f"checkpoint_ep{epoch:04d}.wqck"), params, config)

    model.save_checkpoint(final_path, params, config)
    flush_history()
    return final_path, history


def predict_records(records, params, config: model.WhisqConfig, cache=None) -> dict:
    """Score every record; returns clip_id -> (omq, ta) floats."""
    preds = {}
    for batch in data_io.make_batches(records, config.batch_size, shuffle=False,
                                      cache=cache):
        res = model.forward(batch, params, config)
        y_omq = np.asarray(res.y_omq if not isinstance(res.y_omq, ad.Tensor) else res.y_omq.data)
        y_ta = np.asarray(res.y_ta if not isinstance(res.y_ta, ad.Tensor) else res.y_ta.data)
        for i, cid in enumerate(batch.clip_ids):
            preds[cid] = (float(y_omq[i]), float(y_ta[i]))
    return preds
