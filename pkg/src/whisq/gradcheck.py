"""Full-loss gradient verification against central differences.

The sweep is exact but staged for speed: parameters that provably do
not feed the transport term (the task term is the only path for the
attention and head weights, and the two heads see frozen pooled inputs)
are differenced through correspondingly reduced evaluations of the very
same forward code. Additive terms that are constant in the perturbed
parameter cancel exactly in a central difference, so the reduced
evaluations compute identical differences at a fraction of the cost.

The check runs the transport solver with a fixed iteration count
(tolerance 0), so both finite-difference evaluations and the analytic
path differentiate exactly the same truncated iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data_io, losses, model
from .errors import NumericError

TASK_TOL = 1e-4
SINKHORN_TOL = 1e-3
# entries where both gradients sit below the f64 central-difference
# noise floor carry no signal and are counted as agreeing
GRAD_ATOL = 1e-6
# evaluation points this close to a ReLU kink or Huber branch boundary
# are rejected: the +-h sweep would straddle the non-smooth point
KINK_RADIUS = 2e-4
MAX_POINT_TRIES = 64


def toy_config(mode: str = "seq_coattention", seed: int = 0) -> model.WhisqConfig:
    """Small architecture exercising every code path at gradcheck speed."""
    return model.WhisqConfig(
        d_feat=8, d_text_in=12, d_audio_in=8, n_heads=2,
        attention_mode=mode,
        ot_weight=1e-3, ot_blur=0.05, ot_max_iters=40, ot_tol=0.0, ot_anneal=0.8,
        batch_size=2, epochs=1, seed=seed,
    ).validate()


def toy_batch(config: model.WhisqConfig, seed: int, t_audio: int = 5,
              t_text: int = 3, batch: int = 2) -> data_io.Batch:
    rng = np.random.default_rng(seed)
    b = batch
    return data_io.Batch(
        audio=rng.normal(size=(b, t_audio, config.d_feat)),
        audio_mask=np.ones((b, t_audio), dtype=bool),
        text=rng.normal(size=(b, t_text, config.d_text_in)),
        text_mask=np.ones((b, t_text), dtype=bool),
        omq_targets=rng.uniform(1.8, 4.8, size=b),
        ta_targets=rng.uniform(1.8, 4.8, size=b),
        clip_ids=[f"toy_{i}" for i in range(b)],
        system_ids=["sys_0"] * b,
    )


def _full_loss(tensors, batch, config):
    res = model.forward(batch, tensors, config)
    lb = losses.total_loss(res.y_omq, res.y_ta,
                           (batch.omq_targets, batch.ta_targets),
                           res.h_a_items, res.h_t_items, None, config)
    return lb.total


def _task_value(tensors, batch, config) -> float:
    res = model.forward(batch, tensors, config)
    h_omq = losses.huber(res.y_omq, batch.omq_targets, config.huber_delta)
    h_ta = losses.huber(res.y_ta, batch.ta_targets, config.huber_delta)
    return float((h_omq + h_ta) * 0.5)


def _kink_distance(res, batch, raw, config) -> float:
    """Distance of the nearest ReLU/Huber breakpoint from the evaluation point."""
    dists = []
    for head, x in (("mlp_omq", res.omq_pool), ("mlp_ta", np.asarray(res.e_seq))):
        pre0 = x @ raw[f"{head}.l0.w"] + raw[f"{head}.l0.b"]
        pre1 = np.maximum(pre0, 0.0) @ raw[f"{head}.l1.w"] + raw[f"{head}.l1.b"]
        dists.append(np.abs(pre0).min())
        dists.append(np.abs(pre1).min())
    for pred, target in ((res.y_omq, batch.omq_targets), (res.y_ta, batch.ta_targets)):
        r = np.abs(np.asarray(pred) - target)
        dists.append(np.abs(r - config.huber_delta).min())
    return float(min(dists))


def _central_diff(eval_fn, raw: dict, names, h: float) -> dict:
    out = {}
    for name in names:
        arr = raw[name]
        flat = arr.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = eval_fn(raw)
            flat[i] = orig - h
            fm = eval_fn(raw)
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        out[name] = g.reshape(arr.shape)
    return out


@dataclass
class GradcheckResult:
    report: ad.GradReport
    passed: bool
    loss: float
    tolerances: dict
    point_tries: int = 0


def _clean_point(config, seed):
    """Pick a (batch, params) pair away from ReLU kinks and Huber breaks.

    Central differences are only a valid oracle at smooth points; the
    derived-seed retry keeps the selection deterministic.
    """
    for attempt in range(MAX_POINT_TRIES):
        sub = int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])
        batch = toy_batch(config, sub)
        params = model.init_params(config, sub + 1)
        res = model.forward(batch, params.tensors, config)
        if _kink_distance(res, batch, params.tensors, config) > KINK_RADIUS:
            return batch, params, attempt + 1
    raise NumericError("could not find a smooth gradcheck evaluation point")


def run_gradcheck(config: model.WhisqConfig, seed: int, h: float = 1e-5,
                  corrupt: bool = False) -> GradcheckResult:
    """Compare reverse-mode gradients of the full loss with central differences.

    ``corrupt`` deliberately perturbs one analytic gradient; it exists
    so the failure path itself can be exercised end to end.
    """
    config.validate()
    batch, params, tries = _clean_point(config, seed)
    raw = params.tensors

    loss_val, analytic = ad.value_and_grad(_full_loss, raw, batch, config)
    if corrupt:
        name = next(iter(analytic))
        analytic[name] = analytic[name] + 0.05 * (np.abs(analytic[name]) + 1.0)

    # the transport term reads raw audio (no parameters) and projected
    # text, so the projection is its only parameter dependency
    sink_names = {"proj.w", "proj.b"} if config.ot_weight > 0 else set()
    mlp_names = [k for k in raw if k.startswith(("mlp_omq", "mlp_ta"))]
    mid_names = [k for k in raw if k not in sink_names and k not in mlp_names]

    res0 = model.forward(batch, raw, config)
    omq_pool0, e_seq0 = res0.omq_pool, res0.e_seq

    def eval_heads(p):
        y_omq = model.mlp_head(omq_pool0, p, "mlp_omq")
        y_ta = model.mlp_head(e_seq0, p, "mlp_ta")
        h_omq = losses.huber(y_omq, batch.omq_targets, config.huber_delta)
        h_ta = losses.huber(y_ta, batch.ta_targets, config.huber_delta)
        return float((h_omq + h_ta) * 0.5)

    def eval_task(p):
        return _task_value(p, batch, config)

    def eval_full(p):
        return float(_full_loss(p, batch, config))

    numeric = {}
    numeric.update(_central_diff(eval_heads, raw, mlp_names, h))
    numeric.update(_central_diff(eval_task, raw, mid_names, h))
    numeric.update(_central_diff(eval_full, raw, sorted(sink_names), h))

    report = ad.compare_grads(analytic, numeric, atol=GRAD_ATOL)
    tolerances = {c.name: (SINKHORN_TOL if c.name in sink_names else TASK_TOL)
                  for c in report.checks}
    passed = all(c.max_rel_err < tolerances[c.name] for c in report.checks)
    return GradcheckResult(report=report, passed=passed, loss=loss_val,
                           tolerances=tolerances, point_tries=tries)
