"""Vectorized numpy versions of the inner kernels.

These are the reference implementations; the compiled module must agree
with them to rounding error.
"""

from __future__ import annotations

import numpy as np

INV_SQRT_2PI = 0.3989422804014327


def assemble_fredholm(means, masses, interval_mass, design, sigma, gh_t, gh_w, floor=1e-300):
    """Assemble ``M`` (m x m) and ``B`` (p x m) for one z level.

    Parameters
    ----------
    means : (m,) outcome means at the nodes
    masses : (m,) node point masses r_j
    interval_mass : (m,) P(C in [x_{s-1}, x_s)), with x_{-1} the support floor
    design : (m, p - 1) mean-model design rows at the nodes
    sigma : outcome standard deviation
    gh_t, gh_w : standard-normal Gauss-Hermite nodes and weights

    Returns
    -------
    M, B, underflows
    """
    m = means.size
    inv_s = 1.0 / sigma
    inv_s2 = inv_s * inv_s
    # y nodes centred at each node mean: (m, K)
    y = means[:, None] + sigma * gh_t[None, :]
    resid = y[:, :, None] - means[None, None, :]           # (j, q, k)
    dens = INV_SQRT_2PI * inv_s * np.exp(-0.5 * resid * resid * inv_s2)
    wd = dens * masses                                      # r_k f_k
    tail = np.cumsum(wd[:, :, ::-1], axis=2)[:, :, ::-1]   # D_s = sum_{l >= s} r_l f_l
    relevant = np.arange(m)[None, None, :] <= np.arange(m)[:, None, None]
    relevant = relevant & (interval_mass > 0)[None, None, :]
    small = tail < floor
    underflows = int(np.count_nonzero(small & relevant))
    tail = np.where(small, floor, tail)
    ratio = np.where(relevant, interval_mass[None, None, :] / tail, 0.0)   # pi_s / D_s, s <= j
    H = np.cumsum(ratio, axis=2)                            # H[j, q, t] = sum_{s <= t}
    idx = np.minimum.outer(np.arange(m), np.arange(m))      # (j, k) -> min(j, k)
    Hsel = np.take_along_axis(H, np.broadcast_to(idx[:, None, :], H.shape), axis=2)
    Mt = np.einsum("q,jqk,jqk->jk", gh_w, dens, Hsel)
    M = 0.5 * (Mt + Mt.T)

    # score S(y, x_k): resid/sigma^2 * design_k and -1/2 + resid^2/(2 sigma^2)
    e = resid * inv_s2
    S_lin = e[..., None] * design[None, None, :, :]         # (j, q, k, p-1)
    S_var = (-0.5 + 0.5 * resid * resid * inv_s2)[..., None]
    S = np.concatenate([S_lin, S_var], axis=-1)             # (j, q, k, p)
    N = np.cumsum((S * wd[..., None])[:, :, ::-1, :], axis=2)[:, :, ::-1, :]   # sum_{k >= s}
    Bt = np.einsum("q,jqs,jqsp->pj", gh_w, ratio, N)
    return M, Bt, underflows


def tail_weights(y, w, nodes, log_masses, means, sigma):
    """Normalized weights ``r_j f(y_i | x_j)`` over nodes strictly above ``w_i``.

    Returns ``(W, log_denom)`` where ``W`` is (n, m) with zero rows beyond
    the tail and ``log_denom`` the log of the unnormalized row sums
    (``-inf`` when no node lies above ``w_i``).
    """
    resid = (y[:, None] - means[None, :]) / sigma
    logw = log_masses[None, :] - 0.5 * resid * resid
    logw = np.where(nodes[None, :] > w[:, None], logw, -np.inf)
    top = np.max(logw, axis=1)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    W = np.exp(logw - safe_top[:, None])
    tot = W.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        W = W / tot[:, None]
        log_denom = safe_top + np.log(tot) - np.log(sigma) - 0.9189385332046727
    W = np.where(np.isfinite(W), W, 0.0)
    log_denom = np.where(tot > 0, log_denom, -np.inf)
    return W, log_denom
