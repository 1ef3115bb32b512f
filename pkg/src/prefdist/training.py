"""Pairwise-ranking training: triplet sampling, losses, gradients, Adam, loop.

The objective is the unit-weight sum of two terms, both averaged over the
batch:

* alignment — for each triplet, -log sigmoid of the cosine-similarity margin
  between the positive item's predicted attribute embedding and its own
  (versus the negative item's) ground-truth attribute vector;
* ranking — -log of the positive item's share of the fused preference mass,
  -log(p_ui / (p_ui + p_uj)), computed in log-space as softplus(s_uj - s_ui).

``grad`` delegates to the selected backend (compiled or pure NumPy); the
slow, obviously-correct re-implementations in this module exist as oracles
for the tests.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import backends, model
from .corpus import AttributeCatalog, SplitDataset
from .errors import NumericalError
from .gaussian import log_density

log = logging.getLogger(__name__)

_BATCH_STREAM = 0x7312


class Triplet(NamedTuple):
    u: int
    i: int     # positive: interacted by u
    j: int     # negative: never interacted by u


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 256
    lr: float = 1e-4
    seed: int = 0
    d: int = 64
    d_raw: int | None = None
    d_prime: int = 8
    variant: str = "full"
    lam: float = 0.5
    jitter: float = 1e-3
    eval_every: int = 500
    clip_norm: float | None = 10.0
    eval_k: int = 10

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.lr <= 0 or self.eval_every <= 0:
            raise ValueError("steps/batch_size/lr/eval_every must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass
class OptimizerState:
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    params: model.ModelParams          # best-validation-MRR checkpoint
    final_params: model.ModelParams
    losses: np.ndarray                 # per-step training loss
    curve: list[dict]                  # validation rows at the eval cadence
    best_step: int
    best_val_mrr: float
    aborted: bool = False


# ---------------------------------------------------------------------------
# triplet sampling
# ---------------------------------------------------------------------------

def sample_triplet_batch(split: SplitDataset, size: int, seed: int, step: int = 0,
                         max_rounds: int = 1000) -> list[Triplet]:
    """Draw a batch: (u, i) uniform over training interactions, j resampled
    uniformly over the catalog until it is outside the user's full interacted
    set. Deterministic given (seed, step)."""
    users_flat, items_flat = split.train.edges()
    if len(users_flat) == 0:
        raise ValueError("training log has no interactions")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _BATCH_STREAM, step]))
    n_items = split.train.n_items
    idx = rng.integers(0, len(users_flat), size)
    u = users_flat[idx]
    i = items_flat[idx]
    j = rng.integers(0, n_items, size)
    bad = split.contains_pair(u, j)
    rounds = 0
    while bad.any():
        rounds += 1
        if rounds > max_rounds:
            log.warning("dropping %d triplets whose users interacted with every item",
                        int(bad.sum()))
            u, i, j = u[~bad], i[~bad], j[~bad]
            break
        j[bad] = rng.integers(0, n_items, int(bad.sum()))
        bad[bad] = split.contains_pair(u[bad], j[bad])
    return [Triplet(int(a), int(b), int(c)) for a, b, c in zip(u, i, j)]


def _batch_arrays(batch: Sequence[Triplet]):
    if len(batch) == 0:
        z = np.empty(0, dtype=np.int64)
        return z, z, z
    u, i, j = zip(*batch)
    return (np.asarray(u, dtype=np.int64), np.asarray(i, dtype=np.int64),
            np.asarray(j, dtype=np.int64))


# ---------------------------------------------------------------------------
# losses (reference paths) and gradients (backend)
# ---------------------------------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def attribute_alignment_loss(p: model.ModelParams, batch: Sequence[Triplet],
                             catalog: AttributeCatalog) -> float:
    """Mean -log sigmoid(cos(t_hat_i, t_i) - cos(t_hat_i, t_j)) over the batch.

    Zero-norm vectors contribute a cosine of 0 to their term.
    """
    if len(batch) == 0:
        return 0.0
    bow = catalog.bow_matrix()
    terms = []
    for trip in batch:
        t_hat = model.predict_attribute_embedding(p, trip.i)
        margin = _cosine(t_hat, bow[trip.i]) - _cosine(t_hat, bow[trip.j])
        terms.append(_softplus(-margin))
    return float(np.mean(terms))


def ranking_loss(p: model.ModelParams, batch: Sequence[Triplet]) -> float:
    """Mean -log(p_ui / (p_ui + p_uj)) over the batch, in log-space."""
    if len(batch) == 0:
        return 0.0
    terms = []
    for trip in batch:
        s_i = model.score(p, trip.u, trip.i).log_fused
        s_j = model.score(p, trip.u, trip.j).log_fused
        terms.append(_softplus(s_j - s_i))
    return float(np.mean(terms))


def _call_backend(p: model.ModelParams, batch, catalog: AttributeCatalog,
                  backend=None):
    u, i, j = _batch_arrays(batch)
    indptr, indices = catalog.bow_csr()
    norms = catalog.bow_norms()
    fn = backends.loss_and_grad if backend is None else backend.loss_and_grad
    return fn(p.tensors(), u, i, j, indptr, indices, norms,
              p.variant, p.jitter, p.lam, p.activation)


def total_loss(p: model.ModelParams, batch: Sequence[Triplet],
               catalog: AttributeCatalog, backend=None) -> float:
    """Alignment + ranking loss (unit weights) on one batch."""
    return _call_backend(p, batch, catalog, backend)[0]


def grad(p: model.ModelParams, batch: Sequence[Triplet], catalog: AttributeCatalog,
         backend=None) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and analytic gradients for every parameter tensor."""
    loss, _, _, grads, _ = _call_backend(p, batch, catalog, backend)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in tensor {name!r}")
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_init(p: model.ModelParams, lr: float) -> OptimizerState:
    state = OptimizerState(lr=lr)
    for name, arr in p.tensors().items():
        state.first_moment[name] = np.zeros_like(arr)
        state.second_moment[name] = np.zeros_like(arr)
    return state


def adam_step(state: OptimizerState, p: model.ModelParams,
              grads: dict[str, np.ndarray]) -> tuple[OptimizerState, model.ModelParams]:
    """One Adam update with bias correction, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / corr1) / (np.sqrt(v / corr2) + state.eps_hat)
        getattr(p, name)[...] -= state.lr * update
    return state, p


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(config: TrainConfig, split: SplitDataset, catalog: AttributeCatalog,
          init: model.ModelParams | None = None) -> TrainResult:
    """Run the optimization loop and return the best-validation-MRR checkpoint.

    Validation MRR/HR@k are computed at the ``eval_every`` cadence on the
    frozen validation candidates. A non-finite loss aborts the run, returning
    the last good checkpoint with ``aborted=True``.
    """
    from . import evaluation  # local import: evaluation does not import training

    p = init if init is not None else model.init_params(
        n_users=split.train.n_users, n_items=split.train.n_items,
        n_attrs=catalog.n_attrs, d=config.d, d_prime=config.d_prime,
        d_raw=config.d_raw, variant=config.variant, lam=config.lam,
        jitter=config.jitter, seed=config.seed)
    state = adam_init(p, config.lr)
    losses = np.zeros(config.steps)
    curve: list[dict] = []
    best_params = p.copy()
    best_mrr = -np.inf
    best_step = 0
    warned_zero_cos = False
    t0 = time.monotonic()

    for step in range(1, config.steps + 1):
        batch = sample_triplet_batch(split, config.batch_size, config.seed, step)
        loss, loss_rank, loss_align, grads, n_zero = _call_backend(p, batch, catalog)
        if n_zero and not warned_zero_cos:
            log.warning("cosine terms with zero-norm vectors encountered (%d in step %d); "
                        "they contribute 0", n_zero, step)
            warned_zero_cos = True
        if not np.isfinite(loss):
            log.error("non-finite loss at step %d; aborting with best checkpoint "
                      "from step %d", step, best_step)
            return TrainResult(params=best_params, final_params=p, losses=losses[:step - 1],
                               curve=curve, best_step=best_step,
                               best_val_mrr=float(best_mrr), aborted=True)
        losses[step - 1] = loss
        if config.clip_norm is not None:
            clip_global_norm(grads, config.clip_norm)
        adam_step(state, p, grads)

        if step % config.eval_every == 0 or step == config.steps:
            report = evaluation.evaluate(p, split, "validation", k=config.eval_k)
            row = {"step": step, "loss": float(loss), "val_mrr": report.mrr,
                   "val_hr10": report.hr_at_k}
            curve.append(row)
            log.info("%s", json.dumps({
                "step": step, "loss": round(float(loss), 6),
                "loss_rank": round(float(loss_rank), 6),
                "loss_align": round(float(loss_align), 6),
                "val_mrr": round(report.mrr, 6), "val_hr10": round(report.hr_at_k, 6),
                "lr": config.lr, "wall_ms": int(1000 * (time.monotonic() - t0)),
            }))
            if report.mrr > best_mrr:
                best_mrr = report.mrr
                best_params = p.copy()
                best_step = step

    if config.steps == 0 or best_step == 0:
        best_params = p.copy()
        best_mrr = float("nan")
    return TrainResult(params=best_params, final_params=p, losses=losses, curve=curve,
                       best_step=best_step, best_val_mrr=float(best_mrr), aborted=False)


def write_curve(path, losses: np.ndarray, curve: list[dict]) -> None:
    """curve.csv: one row per step; validation columns filled at the cadence."""
    by_step = {row["step"]: row for row in curve}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,val_mrr,val_hr10\n")
        for step in range(1, len(losses) + 1):
            row = by_step.get(step)
            if row is None:
                fh.write(f"{step},{losses[step - 1]:.6f},,\n")
            else:
                fh.write(f"{step},{losses[step - 1]:.6f},"
                         f"{row['val_mrr']:.6f},{row['val_hr10']:.6f}\n")
