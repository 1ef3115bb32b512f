"""Ranking evaluation over frozen candidate lists: AUC, MRR, HR@k, NDCG@k.

Each user's held-out item is ranked against its frozen negatives by fused
log-preference; all metrics are per-user and averaged. With a single relevant
item the metrics reduce to closed forms of its 1-based rank r:

    HR@k   = 1[r <= k]
    NDCG@k = 1 / log2(r + 1) if r <= k else 0      (ideal DCG = 1)
    MRR    = 1 / r
    AUC    = (#negatives ranked below the item) / #negatives
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import model
from .corpus import SplitDataset
from .model import ModelParams


@dataclass
class MetricsReport:
    auc: float
    mrr: float
    hr_at_k: float
    ndcg_at_k: float
    k: int
    n_users: int
    phase: str = ""
    per_user: list[dict] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {"phase": self.phase, "k": self.k, "n_users": self.n_users,
                "auc": self.auc, "mrr": self.mrr,
                f"hr@{self.k}": self.hr_at_k, f"ndcg@{self.k}": self.ndcg_at_k}


class _Scorer:
    """Vectorized fused scoring of many items for one user at a time.

    Shares the per-call item embeddings and attribute Gram matrix across
    users; all covariance algebra mirrors the training kernel.
    """

    def __init__(self, p: ModelParams):
        self.p = p
        self.item_emb = model.embed_item(p, np.arange(p.n_items))
        if p.variant in ("full", "iden"):
            self.g_mat = p.attr_w.T @ p.attr_w
        self.wt2 = p.attr_w * p.attr_w if p.variant == "diag" else None
        self.log2pi = float(np.log(2.0 * np.pi))

    def log_densities(self, u: int, items: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(log_general, log_specific) for every item index in ``items``."""
        p = self.p
        eps = p.jitter
        d, n_attrs = p.d, p.n_attrs
        fu = model.embed_user(p, u)
        mu = p.mean_w @ fu + p.mean_b
        z = self.item_emb[items] - mu

        if p.variant == "iden":
            log_g = -0.5 * (d * self.log2pi + np.sum(z * z, 1))
            gz = z @ self.g_mat
            log_s = -0.5 * (n_attrs * self.log2pi + np.sum(z * gz, 1))
            return log_g, log_s

        if p.variant == "diag":
            s = p.cov_w[0] @ fu + p.cov_b[0]
            s2 = s * s
            var_g = s2 + eps
            var_s = self.wt2 @ s2 + eps
            quad_g = np.sum(z * z / var_g, 1)
            log_g = -0.5 * (d * self.log2pi + np.sum(np.log(var_g)) + quad_g)
            m = (p.attr_w / var_s[:, None]).T @ p.attr_w
            quad_s = np.sum((z @ m) * z, 1)
            log_s = -0.5 * (n_attrs * self.log2pi + np.sum(np.log(var_s)) + quad_s)
            return log_g, log_s

        v = np.stack([p.cov_w[k] @ fu + p.cov_b[k] for k in range(p.d_prime)], axis=1)
        gv = self.g_mat @ v
        eye = np.eye(p.d_prime)
        kg = eye + (v.T @ v) / eps
        ks = eye + (v.T @ gv) / eps
        log_g = self._woodbury(z, v, kg, eps, d, np.sum(z * z, 1))
        gz = z @ self.g_mat
        log_s = self._woodbury_gram(z, v, gz, ks, eps, n_attrs)
        return log_g, log_s

    def _woodbury(self, z, v, kmat, eps, dim, zz):
        chol = np.linalg.cholesky(kmat)
        w = z @ v
        y = np.linalg.solve(chol.T, np.linalg.solve(chol, w.T)).T
        quad = zz / eps - np.sum(w * y, 1) / eps**2
        logdet = dim * np.log(eps) + 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (dim * self.log2pi + logdet + quad)

    def _woodbury_gram(self, z, v, gz, kmat, eps, dim):
        chol = np.linalg.cholesky(kmat)
        ws = gz @ v
        ys = np.linalg.solve(chol.T, np.linalg.solve(chol, ws.T)).T
        quad = np.sum(z * gz, 1) / eps - np.sum(ws * ys, 1) / eps**2
        logdet = dim * np.log(eps) + 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (dim * self.log2pi + logdet + quad)

    def fused(self, u: int, items: np.ndarray) -> np.ndarray:
        log_g, log_s = self.log_densities(u, items)
        return np.asarray(model.fuse_log_scores(log_g, log_s, self.p.lam))


def rank_candidates(p: ModelParams, u: int, candidates, scorer: _Scorer | None = None) -> np.ndarray:
    """Candidate items sorted by descending fused score, ties by ascending index."""
    items = np.asarray(candidates, dtype=np.int64)
    scorer = scorer if scorer is not None else _Scorer(p)
    scores = scorer.fused(u, items)
    order = np.lexsort((items, -scores))
    return items[order]


def metrics_for_user(ranked, truth: int, n_neg: int, k: int = 10) -> dict:
    """Closed-form per-user metrics from the truth's 1-based rank."""
    ranked = np.asarray(ranked)
    hits = np.flatnonzero(ranked == truth)
    if len(hits) == 0:
        raise ValueError(f"ground-truth item {truth} missing from the ranked list")
    r = int(hits[0]) + 1
    return {
        "rank": r,
        "hr": 1.0 if r <= k else 0.0,
        "ndcg": 1.0 / np.log2(r + 1) if r <= k else 0.0,
        "mrr": 1.0 / r,
        "auc": (len(ranked) - r) / n_neg,
    }


def evaluate(p: ModelParams, split: SplitDataset, phase: str, k: int = 10,
             keep_per_user: bool = False) -> MetricsReport:
    """Average per-user metrics over the frozen candidates of a phase."""
    if phase not in split.candidates:
        raise ValueError(f"split has no frozen candidates for phase {phase!r}")
    truths = split.held_out(phase)
    scorer = _Scorer(p)
    rows = []
    for u in range(split.n_users):
        cands = split.candidates[phase][u]
        ranked = rank_candidates(p, u, cands, scorer)
        row = metrics_for_user(ranked, int(truths[u]), split.n_neg, k)
        row["user"] = u
        rows.append(row)
    report = MetricsReport(
        auc=float(np.mean([r["auc"] for r in rows])),
        mrr=float(np.mean([r["mrr"] for r in rows])),
        hr_at_k=float(np.mean([r["hr"] for r in rows])),
        ndcg_at_k=float(np.mean([r["ndcg"] for r in rows])),
        k=k, n_users=len(rows), phase=phase,
        per_user=rows if keep_per_user else [],
    )
    return report


def write_metrics(report: MetricsReport, json_path, csv_path) -> None:
    """metrics.json (fractions) and metrics.csv (x100, two decimals)."""
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "metric", "value"])
        for name, value in (("auc", report.auc), ("mrr", report.mrr),
                            (f"hr@{report.k}", report.hr_at_k),
                            (f"ndcg@{report.k}", report.ndcg_at_k)):
            writer.writerow([report.phase, name, f"{100.0 * value:.2f}"])
