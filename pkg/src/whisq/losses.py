"""Training objective: robust regression on both heads plus an
entropic optimal-transport alignment term.

The transport term is the debiased divergence
``S(x, y) = OT_eps(x, y) - OT_eps(x, x)/2 - OT_eps(y, y)/2`` between
uniform point clouds, with cost ``|x - y|^2 / 2`` and ``eps = blur^p``.
Potentials are iterated in the log domain with simultaneous symmetric
averaged updates, warm-started by halving ``eps`` from the cost scale
down to its target. The divergence is differentiated through the final
iterate: backward replays the stored update trajectory in reverse, so
analytic gradients agree with finite differences of the truncated
iteration itself, converged or not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError


def huber(pred, target, delta: float):
    """Mean Huber loss over a batch (quadratic within ``delta``)."""
    pd = pred.data if isinstance(pred, ad.Tensor) else np.asarray(pred)
    td = target.data if isinstance(target, ad.Tensor) else np.asarray(target)
    if pd.shape != td.shape:
        raise DataError(f"huber length mismatch: {pd.shape} vs {td.shape}")
    return ad.huber(pred, target, delta)


# ---------------------------------------------------------------------------
# sinkhorn core
# ---------------------------------------------------------------------------

@dataclass
class SinkhornDiag:
    """Per-call convergence info; non-convergence is reported, not raised."""
    iterations: int = 0
    converged: bool = True
    violation: float = 0.0

    def merge(self, other: "SinkhornDiag") -> None:
        self.iterations = max(self.iterations, other.iterations)
        self.converged = self.converged and other.converged
        self.violation = max(self.violation, other.violation)


def _pair_cost(x, y):
    diff = x[:, None, :] - y[None, :, :]
    return 0.5 * np.einsum("ijk,ijk->ij", diff, diff)


def _softmin(eps, cost, logw, pot):
    """-eps * logsumexp_j(logw_j + (pot_j - C_ij) / eps) along rows."""
    z = (logw + pot / eps)[None, :] - cost / eps
    m = z.max(axis=1, keepdims=True)
    return -eps * (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))).ravel()


def _row_softmax(z):
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def _eps_schedule(cmax, eps_target, anneal_factor, max_iters):
    """Geometric warm-start schedule from the (bucketed) cost scale down.

    A factor close to 1 tracks the instantaneous optimum tightly
    (continuation), which is what makes tiny target blurs accurate; a
    smaller factor trades accuracy for iterations.
    """
    if anneal_factor is None or cmax <= eps_target or cmax <= 0.0:
        return []
    # power-of-two anchor keeps the schedule length locally constant
    # under small input perturbations
    e = 2.0 ** np.ceil(np.log2(cmax))
    sched = []
    while e > eps_target and len(sched) < max_iters:
        sched.append(e)
        e *= anneal_factor
    return sched


@dataclass
class _Problem:
    cost: np.ndarray
    pot_r: list            # row-potential trajectory, f_0..f_K
    pot_c: list            # column-potential trajectory
    eps_seq: list
    converged: bool
    violation: float


def _solve(cost, logw_r, logw_c, eps_target, max_iters, tol, anneal_factor) -> _Problem:
    """Simultaneous averaged log-domain updates for one transport problem."""
    n, m = cost.shape
    f = np.zeros(n)
    g = np.zeros(m)
    pot_r, pot_c = [f], [g]
    eps_seq = []
    sched = _eps_schedule(cost.max(), eps_target, anneal_factor, max_iters)
    converged = False
    viol = np.inf
    it = 0
    while it < max_iters:
        eps = sched[it] if it < len(sched) else eps_target
        ft = _softmin(eps, cost, logw_c, g)
        gt = _softmin(eps, cost.T, logw_r, f)
        viol = max(np.abs(ft - f).max(), np.abs(gt - g).max()) / eps
        f = 0.5 * (f + ft)
        g = 0.5 * (g + gt)
        pot_r.append(f)
        pot_c.append(g)
        eps_seq.append(eps)
        it += 1
        if eps == eps_target and tol > 0.0 and viol < tol:
            converged = True
            break
    return _Problem(cost=cost, pot_r=pot_r, pot_c=pot_c, eps_seq=eps_seq,
                    converged=converged, violation=float(viol))


def _sweep(problem: _Problem, logw_r, logw_c, lam_f, lam_g):
    """Reverse-mode replay of the update trajectory; returns dS/dCost."""
    cost = problem.cost
    g_cost = np.zeros_like(cost)
    for k in reversed(range(len(problem.eps_seq))):
        eps = problem.eps_seq[k]
        fk = problem.pot_r[k]
        gk = problem.pot_c[k]
        w_cols = _row_softmax((logw_c + gk / eps)[None, :] - cost / eps)        # (n, m)
        w_rows = _row_softmax(((logw_r + fk / eps)[None, :] - cost.T / eps)).T  # (n, m)
        hf = 0.5 * lam_f
        hg = 0.5 * lam_g
        t_f = w_cols * hf[:, None]
        t_g = w_rows * hg[None, :]
        g_cost += t_f + t_g
        lam_f = hf - t_g.sum(axis=1)
        lam_g = hg - t_f.sum(axis=0)
    return g_cost


def _cloud_grads_cross(g_cost, x, y):
    gx = g_cost.sum(axis=1)[:, None] * x - g_cost @ y
    gy = g_cost.sum(axis=0)[:, None] * y - g_cost.T @ x
    return gx, gy


def _cloud_grad_self(g_cost, x):
    sym = g_cost + g_cost.T
    return sym.sum(axis=1)[:, None] * x - sym @ x


DEFAULT_ANNEAL_FACTOR = 0.8


def sinkhorn_divergence(x, y, blur: float = 0.05, p: int = 2,
                        max_iters: int = 200, tol: float = 1e-6,
                        anneal: float | bool = True,
                        diag: SinkhornDiag | None = None):
    """Debiased entropic transport divergence between two point clouds.

    ``x`` (n x d) and ``y`` (m x d) carry uniform weights; only valid
    rows may be passed. ``anneal`` is the per-step epsilon factor of the
    warm-start schedule (``True`` selects the default, falsy disables).
    Differentiable w.r.t. both clouds when they are traced Tensors;
    returns a float for plain arrays.
    """
    if p != 2:
        raise ConfigError(f"only p=2 is supported, got {p}")
    if blur <= 0:
        raise ConfigError("blur must be positive")
    if anneal is True:
        anneal_factor = DEFAULT_ANNEAL_FACTOR
    elif not anneal:
        anneal_factor = None
    else:
        anneal_factor = float(anneal)
        if not (0.0 < anneal_factor < 1.0):
            raise ConfigError("anneal factor must lie in (0, 1)")
    xd = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
    yd = y.data if isinstance(y, ad.Tensor) else np.asarray(y, dtype=np.float64)
    if xd.ndim != 2 or yd.ndim != 2:
        raise DataError(f"point clouds must be 2-D, got {xd.shape} and {yd.shape}")
    if xd.shape[0] < 1 or yd.shape[0] < 1:
        raise DataError("empty point set")
    if xd.shape[1] != yd.shape[1]:
        raise DataError(f"cloud dims differ: {xd.shape[1]} vs {yd.shape[1]}")

    eps = float(blur) ** p
    n, m = xd.shape[0], yd.shape[0]
    lw_x = np.full(n, -np.log(n))
    lw_y = np.full(m, -np.log(m))

    xy = _solve(_pair_cost(xd, yd), lw_x, lw_y, eps, max_iters, tol, anneal_factor)
    xx = _solve(_pair_cost(xd, xd), lw_x, lw_x, eps, max_iters, tol, anneal_factor)
    yy = _solve(_pair_cost(yd, yd), lw_y, lw_y, eps, max_iters, tol, anneal_factor)

    value = (xy.pot_r[-1].mean() + xy.pot_c[-1].mean()
             - xx.pot_r[-1].mean() - yy.pot_r[-1].mean())

    if diag is not None:
        for prob in (xy, xx, yy):
            diag.merge(SinkhornDiag(iterations=len(prob.eps_seq),
                                    converged=prob.converged,
                                    violation=prob.violation))

    need_x = isinstance(x, ad.Tensor) and x.requires_grad
    need_y = isinstance(y, ad.Tensor) and y.requires_grad
    if not (need_x or need_y):
        return float(value)

    cache: dict = {}
    alpha = np.full(n, 1.0 / n)
    beta = np.full(m, 1.0 / m)

    def _grads():
        if cache:
            return cache
        # value = <alpha,f> + <beta,g> - <alpha,f_xx> - <beta,f_yy>;
        # the self problems are seeded on their row potential only
        g_cxy = _sweep(xy, lw_x, lw_y, alpha, beta)
        gx, gy = _cloud_grads_cross(g_cxy, xd, yd)
        if need_x:
            g_cxx = _sweep(xx, lw_x, lw_x, -alpha, np.zeros(n))
            gx += _cloud_grad_self(g_cxx, xd)
        if need_y:
            g_cyy = _sweep(yy, lw_y, lw_y, -beta, np.zeros(m))
            gy += _cloud_grad_self(g_cyy, yd)
        cache["gx"], cache["gy"] = gx, gy
        return cache

    pairs = [
        (x, lambda g: float(g) * _grads()["gx"]),
        (y, lambda g: float(g) * _grads()["gy"]),
    ]
    return ad._result(np.float64(value), pairs)


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

def batch_ot_loss(h_a, h_t_projected, masks, config, diag: SinkhornDiag | None = None):
    """Mean per-item divergence between audio and projected text clouds.

    Accepts either per-item lists of (T_i x d) sequences with
    ``masks=None``, or padded B x T x d arrays with ``masks`` as an
    ``(audio_mask, text_mask)`` pair.
    """
    if masks is None:
        items = list(zip(h_a, h_t_projected))
    else:
        audio_mask, text_mask = masks
        b = len(audio_mask)
        items = [
            (h_a[i][np.asarray(audio_mask[i], dtype=bool)],
             h_t_projected[i][np.asarray(text_mask[i], dtype=bool)])
            for i in range(b)
        ]
    if not items:
        raise DataError("empty batch for transport loss")
    total = None
    for a_i, t_i in items:
        d = sinkhorn_divergence(a_i, t_i, blur=config.ot_blur, p=config.ot_p,
                                max_iters=config.ot_max_iters, tol=config.ot_tol,
                                anneal=config.ot_anneal, diag=diag)
        total = d if total is None else total + d
    return total * (1.0 / len(items))


@dataclass
class LossBreakdown:
    total: object               # Tensor (or float) used for backprop
    task: float
    ot: float
    huber_omq: float
    huber_ta: float
    ot_diag: SinkhornDiag = field(default_factory=SinkhornDiag)

    def as_floats(self) -> dict:
        return {"total": float(self.total), "task": self.task, "ot": self.ot,
                "huber_omq": self.huber_omq, "huber_ta": self.huber_ta}


def total_loss(y_omq, y_ta, targets, h_a, h_t_projected, masks, config) -> LossBreakdown:
    """Assemble the full objective: mean Huber pair plus weighted transport.

    ``targets`` is the (omq, ta) ground-truth pair. With a zero
    transport weight the total reduces to the task term exactly, but
    the transport value is still computed (off-graph) for reporting.
    """
    t_omq, t_ta = targets
    h_omq = huber(y_omq, t_omq, config.huber_delta)
    h_ta = huber(y_ta, t_ta, config.huber_delta)
    task = (h_omq + h_ta) * 0.5
    diag = SinkhornDiag()
    if config.ot_weight > 0:
        ot = batch_ot_loss(h_a, h_t_projected, masks, config, diag=diag)
        total = task + config.ot_weight * ot
    else:
        detached = [t.data if isinstance(t, ad.Tensor) else t for t in h_t_projected] \
            if masks is None else h_t_projected
        ot = batch_ot_loss(h_a, detached, masks, config, diag=diag)
        total = task
    return LossBreakdown(total=total, task=float(task), ot=float(ot),
                         huber_omq=float(h_omq), huber_ta=float(h_ta), ot_diag=diag)
