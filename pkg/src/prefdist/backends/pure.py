"""Pure-NumPy training kernel: fused forward + backward over a triplet batch.

Given a batch of (user, positive item, negative item) triplets this computes

    total = mean softplus(cos(t_hat_i, t_j) - cos(t_hat_i, t_i))        (alignment)
          + mean softplus(s_uj - s_ui)                                  (ranking)

where ``s`` is the fused log-preference (log of the lambda-mixture of the
general and specific Gaussian densities), together with analytic gradients
for every parameter tensor. All covariance algebra stays in the
(d x d_prime) factor space via the Woodbury identity; attribute-space
quantities are reduced through the Gram matrix G = attr_w^T attr_w, so the
only |A|-sized work is the cosine term and two rank-d projections.

The compiled backend (``_native``) implements the same contract; tests pin
the two against each other and against central finite differences.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit as _sigmoid

LOG_2PI = float(np.log(2.0 * np.pi))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _relu(x):
    return np.maximum(x, 0.0)


def _dense_bow_rows(indptr, indices, rows, n_attrs):
    """Materialize binary bag-of-words rows for the given item indices."""
    rows = np.asarray(rows)
    starts = indptr[rows]
    counts = indptr[rows + 1] - starts
    total = int(counts.sum())
    out = np.zeros((len(rows), n_attrs))
    if total == 0:
        return out
    cum = np.concatenate(([0], np.cumsum(counts)))
    flat = np.arange(total) - np.repeat(cum[:-1], counts) + np.repeat(starts, counts)
    out[np.repeat(np.arange(len(rows)), counts), indices[flat]] = 1.0
    return out


def _chol_inverse(mats):
    """Batched SPD inverse + log-determinant via Cholesky. mats: (b, r, r)."""
    chol = np.linalg.cholesky(mats)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    inv_chol = np.linalg.inv(chol)
    inv = np.einsum("bmk,bml->bkl", inv_chol, inv_chol)
    return inv, logdet


def _fuse(log_g, log_s, lam):
    """Fused log-score and the mixture responsibilities (w_g, w_s)."""
    if lam >= 1.0:
        return log_g, np.ones_like(log_g), np.zeros_like(log_g)
    if lam <= 0.0:
        return log_s, np.zeros_like(log_s), np.ones_like(log_s)
    a = np.log(lam) + log_g
    b = np.log1p(-lam) + log_s
    s = np.logaddexp(a, b)
    return s, np.exp(a - s), np.exp(b - s)


def loss_and_grad(tensors, users, pos_items, neg_items,
                  bow_indptr, bow_indices, bow_norms,
                  variant, jitter, lam, activation):
    """Loss components and gradients for one triplet batch.

    Parameters
    ----------
    tensors : dict of the model's parameter arrays (see model.TENSOR_NAMES).
    users, pos_items, neg_items : int arrays of equal length B.
    bow_indptr, bow_indices : CSR layout of the per-item attribute indices.
    bow_norms : per-item Euclidean norm of the binary attribute vector.
    variant : "full" | "diag" | "iden".
    jitter, lam : covariance jitter and fusion weight.
    activation : "relu" | "linear" hidden activation of the embedding MLPs.

    Returns
    -------
    (loss_total, loss_rank, loss_align, grads, n_zero_cos)
    where grads maps every tensor name to an array of matching shape and
    n_zero_cos counts cosine terms skipped because a vector had zero norm.
    """
    t = tensors
    grads = {name: np.zeros_like(arr) for name, arr in t.items()}
    b = len(users)
    if b == 0:
        return 0.0, 0.0, 0.0, grads, 0

    users = np.asarray(users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    neg_items = np.asarray(neg_items, dtype=np.int64)
    eps = float(jitter)
    relu = activation == "relu"
    d = t["mean_w"].shape[0]
    dp = t["cov_w"].shape[0]
    n_attrs = t["attr_w"].shape[0]
    attr_w = t["attr_w"]

    # ---- forward: embeddings -------------------------------------------
    xu = t["user_raw"][users]
    pu = xu @ t["user_w1"].T + t["user_b1"]
    hu = _relu(pu) if relu else pu
    fu = hu @ t["user_w2"].T + t["user_b2"]

    items2 = np.concatenate([pos_items, neg_items])
    xi2 = t["item_raw"][items2]
    pi2 = xi2 @ t["item_w1"].T + t["item_b1"]
    hi2 = _relu(pi2) if relu else pi2
    fi2 = hi2 @ t["item_w2"].T + t["item_b2"]
    fi, fj = fi2[:b], fi2[b:]

    mu = fu @ t["mean_w"].T + t["mean_b"]
    zi = fi - mu
    zj = fj - mu

    # ---- forward: per-user covariance structures ------------------------
    if variant == "full":
        wv_mat = t["cov_w"].transpose(2, 1, 0).reshape(d, d * dp)
        v = (fu @ wv_mat).reshape(b, d, dp) + t["cov_b"].T[None, :, :]
        g_mat = attr_w.T @ attr_w
        gv = np.einsum("de,bek->bdk", g_mat, v)
        kg = np.eye(dp) + np.einsum("bdk,bdl->bkl", v, v) / eps
        ks = np.eye(dp) + np.einsum("bdk,bdl->bkl", v, gv) / eps
        kg_inv, logdet_kg = _chol_inverse(kg)
        ks_inv, logdet_ks = _chol_inverse(ks)

        def density_pair(z):
            w = np.einsum("bdk,bd->bk", v, z)
            y = np.einsum("bkl,bl->bk", kg_inv, w)
            quad_g = np.sum(z * z, 1) / eps - np.sum(w * y, 1) / eps**2
            log_g = -0.5 * (d * (LOG_2PI + np.log(eps)) + logdet_kg + quad_g)
            gz = z @ g_mat
            ws = np.einsum("bdk,bd->bk", v, gz)
            ys = np.einsum("bkl,bl->bk", ks_inv, ws)
            quad_s = np.sum(z * gz, 1) / eps - np.sum(ws * ys, 1) / eps**2
            log_s = -0.5 * (n_attrs * (LOG_2PI + np.log(eps)) + logdet_ks + quad_s)
            return log_g, log_s, (y, ys)
    elif variant == "diag":
        sdiag = fu @ t["cov_w"][0].T + t["cov_b"][0]
        s2 = sdiag * sdiag
        var_g = s2 + eps
        wt2 = attr_w * attr_w
        var_s = s2 @ wt2.T + eps
        logdet_g = np.sum(np.log(var_g), 1)
        logdet_s = np.sum(np.log(var_s), 1)

        def density_pair(z):
            quad_g = np.sum(z * z / var_g, 1)
            log_g = -0.5 * (d * LOG_2PI + logdet_g + quad_g)
            zs = z @ attr_w.T
            quad_s = np.sum(zs * zs / var_s, 1)
            log_s = -0.5 * (n_attrs * LOG_2PI + logdet_s + quad_s)
            return log_g, log_s, zs
    else:  # iden
        g_mat = attr_w.T @ attr_w

        def density_pair(z):
            log_g = -0.5 * (d * LOG_2PI + np.sum(z * z, 1))
            gz = z @ g_mat
            log_s = -0.5 * (n_attrs * LOG_2PI + np.sum(z * gz, 1))
            return log_g, log_s, gz

    log_gi, log_si, aux_i = density_pair(zi)
    log_gj, log_sj, aux_j = density_pair(zj)
    s_i, wg_i, ws_i = _fuse(log_gi, log_si, lam)
    s_j, wg_j, ws_j = _fuse(log_gj, log_sj, lam)

    # ---- ranking loss ----------------------------------------------------
    diff = s_j - s_i
    loss_rank = float(np.mean(_softplus(diff)))
    delta = _sigmoid(diff) / b          # dL/ds_j = +delta, dL/ds_i = -delta

    # ---- alignment loss --------------------------------------------------
    t_hat = fi @ attr_w.T
    t_hat_norm = np.linalg.norm(t_hat, axis=1)
    bow_i = _dense_bow_rows(bow_indptr, bow_indices, pos_items, n_attrs)
    bow_j = _dense_bow_rows(bow_indptr, bow_indices, neg_items, n_attrs)
    norm_i = bow_norms[pos_items]
    norm_j = bow_norms[neg_items]
    ok_p = (t_hat_norm > 0) & (norm_i > 0)
    ok_n = (t_hat_norm > 0) & (norm_j > 0)
    den_hat = np.where(t_hat_norm > 0, t_hat_norm, 1.0)
    cos_p = np.where(ok_p, np.sum(t_hat * bow_i, 1) / (den_hat * np.where(norm_i > 0, norm_i, 1.0)), 0.0)
    cos_n = np.where(ok_n, np.sum(t_hat * bow_j, 1) / (den_hat * np.where(norm_j > 0, norm_j, 1.0)), 0.0)
    margin = cos_n - cos_p
    loss_align = float(np.mean(_softplus(margin)))
    sg = _sigmoid(margin) / b
    n_zero_cos = int(np.sum(~ok_p) + np.sum(~ok_n))

    # d cos(t_hat, t)/d t_hat = (t/|t| - cos * t_hat/|t_hat|) / |t_hat|
    unit_hat = t_hat / den_hat[:, None]
    d_t_hat = (-sg * ok_p / den_hat)[:, None] * (bow_i / np.where(norm_i > 0, norm_i, 1.0)[:, None] - cos_p[:, None] * unit_hat)
    d_t_hat += (sg * ok_n / den_hat)[:, None] * (bow_j / np.where(norm_j > 0, norm_j, 1.0)[:, None] - cos_n[:, None] * unit_hat)

    grads["attr_w"] += d_t_hat.T @ fi
    d_fi = d_t_hat @ attr_w             # alignment contribution to f_i
    d_fj = np.zeros_like(d_fi)
    d_mu = np.zeros_like(mu)

    # ---- density backward -------------------------------------------------
    c_i = -delta                        # upstream dL/ds_i
    c_j = delta
    cg_i, cs_i = c_i * wg_i, c_i * ws_i
    cg_j, cs_j = c_j * wg_j, c_j * ws_j

    if variant == "full":
        v_kinv = np.einsum("bdk,bkl->bdl", v, kg_inv)
        gv_ksinv = np.einsum("bdk,bkl->bdl", gv, ks_inv)
        v_ksinv = np.einsum("bdk,bkl->bdl", v, ks_inv)
        d_v = np.zeros_like(v)
        s_acc = np.zeros((d, d))

        for z, (y, ys), cg, cs, d_ft in ((zi, aux_i, cg_i, cs_i, d_fi),
                                         (zj, aux_j, cg_j, cs_j, d_fj)):
            vy = np.einsum("bdk,bk->bd", v, y)
            a_vec = z / eps - vy / eps**2            # sigma_g^{-1} z
            r = np.einsum("bdk,bk->bd", v, ys)
            m_vec = z / eps - r / eps**2
            gm = m_vec @ g_mat
            u_vec = z - r / eps
            dz = -(cg[:, None] * a_vec + cs[:, None] * gm)
            d_ft += dz
            d_mu -= dz
            d_v += cg[:, None, None] * (np.einsum("bd,bk->bdk", a_vec, y) - v_kinv) / eps
            gu = u_vec @ g_mat
            d_v += cs[:, None, None] * (np.einsum("bd,bk->bdk", gu, ys) / eps**2 - gv_ksinv / eps)
            s_acc += np.einsum("b,bd,be->de", cs, m_vec, u_vec)
            s_acc += np.einsum("b,bdl,bel->de", cs, v_ksinv, v) / eps
        grads["attr_w"] -= attr_w @ s_acc

        grads["cov_w"] += np.einsum("bdk,be->kde", d_v, fu)
        grads["cov_b"] += d_v.sum(0).T
        d_fu_cov = np.einsum("kde,bdk->be", t["cov_w"], d_v)
    elif variant == "diag":
        d_s2 = np.zeros_like(s2)
        d_wt2 = np.zeros((n_attrs, d))

        for z, zs, cg, cs, d_ft in ((zi, aux_i, cg_i, cs_i, d_fi),
                                    (zj, aux_j, cg_j, cs_j, d_fj)):
            dzs = -cs[:, None] * zs / var_s
            dz = -cg[:, None] * z / var_g + dzs @ attr_w
            d_ft += dz
            d_mu -= dz
            dvar_g = cg[:, None] * (-0.5) * (1.0 / var_g - (z * z) / var_g**2)
            dvar_s = cs[:, None] * (-0.5) * (1.0 / var_s - (zs * zs) / var_s**2)
            d_s2 += dvar_g + dvar_s @ wt2
            d_wt2 += dvar_s.T @ s2
            grads["attr_w"] += dzs.T @ z
        grads["attr_w"] += 2.0 * attr_w * d_wt2
        d_sdiag = 2.0 * sdiag * d_s2
        grads["cov_w"][0] += d_sdiag.T @ fu
        grads["cov_b"][0] += d_sdiag.sum(0)
        d_fu_cov = d_sdiag @ t["cov_w"][0]
    else:  # iden: covariance heads unused, gradients stay zero
        s_acc = np.zeros((d, d))
        for z, gz, cg, cs, d_ft in ((zi, aux_i, cg_i, cs_i, d_fi),
                                    (zj, aux_j, cg_j, cs_j, d_fj)):
            dz = -(cg[:, None] * z + cs[:, None] * gz)
            d_ft += dz
            d_mu -= dz
            s_acc += np.einsum("b,bd,be->de", cs, z, z)
        grads["attr_w"] -= attr_w @ s_acc
        d_fu_cov = np.zeros_like(fu)

    # ---- heads -------------------------------------------------------------
    grads["mean_w"] += d_mu.T @ fu
    grads["mean_b"] += d_mu.sum(0)
    d_fu = d_mu @ t["mean_w"] + d_fu_cov

    # ---- MLP backward -------------------------------------------------------
    def mlp_backward(d_f, pre, hidden, x, w1, w2, prefix):
        grads[prefix + "w2"] += d_f.T @ hidden
        grads[prefix + "b2"] += d_f.sum(0)
        d_h = d_f @ w2
        d_p = d_h * (pre > 0) if relu else d_h
        grads[prefix + "w1"] += d_p.T @ x
        grads[prefix + "b1"] += d_p.sum(0)
        return d_p @ w1

    d_xu = mlp_backward(d_fu, pu, hu, xu, t["user_w1"], t["user_w2"], "user_")
    d_fi2 = np.concatenate([d_fi, d_fj])
    d_xi2 = mlp_backward(d_fi2, pi2, hi2, xi2, t["item_w1"], t["item_w2"], "item_")
    np.add.at(grads["user_raw"], users, d_xu)
    np.add.at(grads["item_raw"], items2, d_xi2)

    loss_total = loss_rank + loss_align
    return loss_total, loss_rank, loss_align, grads, n_zero_cos
