"""Unsupervised sum-rate losses on real-valued tensors.

Complex quantities travel as (real, imag) tensor pairs.  Channels are given
pre-scaled by ``1 / sigma`` so the noise power inside the losses is 1.
"""

from __future__ import annotations

import itertools
from typing import List, Optional, Sequence

import numpy as np

from ..neural import tensor as T
from ..neural.tensor import Tensor

# Exact enumeration of codeword tuples is used up to this many tuples.
ENUMERATION_CAP = 65_536
LN2 = float(np.log(2.0))


class EnumerationCapError(ValueError):
    pass


def cmatmul(ar, ai, br, bi):
    """(ar + i ai) @ (br + i bi) for any mix of tensors and arrays."""
    return T.matmul(ar, br) - T.matmul(ai, bi), T.matmul(ar, bi) + T.matmul(ai, br)


def sum_rate_from_gains(gr: Tensor, gi: Tensor) -> Tensor:
    """Per-sample sum-rate from gains ``G[..., u, j]`` (stream j at user u), unit noise."""
    n = gr.shape[-1]
    eye = np.eye(n)
    power = gr * gr + gi * gi
    signal = (power * eye).sum(axis=-1)
    interference = (power * (1.0 - eye)).sum(axis=-1)
    sinr = signal / (interference + 1.0)
    return T.log(sinr + 1.0).sum(axis=-1) * (1.0 / LN2)


def _check_power(power: Tensor) -> None:
    if np.any(power.data <= 0):
        raise ValueError("cannot normalize an all-zero precoder")


def fdp_sum_rate(u_re: Tensor, u_im: Tensor, g: np.ndarray, p_max: float = 1.0) -> Tensor:
    """Per-sample sum-rate of a fully digital precoder after global power normalization.

    ``u_re``/``u_im`` are (B, M, N_T, N_U); ``g`` is the complex (B, N_U, M, N_T)
    noise-scaled channel.
    """
    u_re, u_im = T.as_tensor(u_re), T.as_tensor(u_im)
    B, M, n_t, n_u = u_re.shape
    power = (u_re * u_re + u_im * u_im).sum(axis=(1, 2, 3), keepdims=True)
    _check_power(power)
    scale = T.sqrt(p_max / power)
    ur = (u_re * scale).reshape(B, M * n_t, n_u)
    ui = (u_im * scale).reshape(B, M * n_t, n_u)
    hc = np.conj(np.asarray(g)).reshape(B, n_u, M * n_t)
    gr, gi = cmatmul(hc.real, hc.imag, ur, ui)
    return sum_rate_from_gains(gr, gi)


def loss_fdp(u_re: Tensor, u_im: Tensor, g: np.ndarray, p_max: float = 1.0) -> Tensor:
    """Negative mean sum-rate."""
    return -fdp_sum_rate(u_re, u_im, g, p_max).mean()


def _ap_terms(w_re: Tensor, w_im: Tensor, g_m: np.ndarray, codewords: np.ndarray):
    """Per-codeword gains ``E[b, l, u, j] = (A_l^H h_{u,m})^H w_j`` and powers ``||A_l W||^2``."""
    A = np.asarray(codewords)  # (L, N_T, N_RF)
    eff = np.einsum("bun,lnr->blur", np.conj(g_m), A)  # (B, L, N_U, N_RF)
    wr = w_re.reshape(w_re.shape[0], 1, *w_re.shape[1:])
    wi = w_im.reshape(w_im.shape[0], 1, *w_im.shape[1:])
    er, ei = cmatmul(eff.real, eff.imag, wr, wi)  # (B, L, N_U, N_U)
    pr, pi = cmatmul(A.real, A.imag, wr, wi)  # (B, L, N_T, N_U)
    power = (pr * pr + pi * pi).sum(axis=(2, 3))  # (B, L)
    return er, ei, power


def tuple_index(sizes: Sequence[int], cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All codeword tuples (T, M), the first AP's index varying slowest."""
    total = int(np.prod([int(s) for s in sizes], dtype=object))
    if total > cap:
        raise EnumerationCapError(f"{total} codeword tuples exceed the enumeration cap {cap}; "
                                  "use the sampled estimator (mode='sampled')")
    return np.array(list(itertools.product(*[range(int(s)) for s in sizes])), dtype=int).reshape(total, len(sizes))


def hbf_tuple_rates(w_re: List[Tensor], w_im: List[Tensor], g: np.ndarray, codebook, p_max: float = 1.0,
                    index: Optional[np.ndarray] = None) -> Tensor:
    """Sum-rate (B, T) of every codeword tuple with the shared digital precoders.

    ``w_re[m]`` is (B, N_RF, N_U); ``g`` is (B, N_U, M, N_T).  Each tuple's
    precoder is normalized to ``p_max`` with one global scalar.
    """
    g = np.asarray(g)
    M = g.shape[2]
    books = [np.asarray(codebook[m]) for m in range(M)]
    if index is None:
        index = tuple_index([len(b) for b in books])
    gr = gi = power = None
    for m in range(M):
        er, ei, pw = _ap_terms(T.as_tensor(w_re[m]), T.as_tensor(w_im[m]), g[:, :, m, :], books[m])
        er, ei, pw = (T.take(t, index[:, m], axis=1) for t in (er, ei, pw))
        gr = er if gr is None else gr + er
        gi = ei if gi is None else gi + ei
        power = pw if power is None else power + pw
    _check_power(power)
    scale = T.sqrt(p_max / power).reshape(*power.shape, 1, 1)
    return sum_rate_from_gains(gr * scale, gi * scale)


def tuple_probabilities(probs: List[Tensor], index: np.ndarray) -> Tensor:
    out = None
    for m, p in enumerate(probs):
        pm = T.take(T.as_tensor(p), index[:, m], axis=1)
        out = pm if out is None else out * pm
    return out


def loss_hbf(probs: List[Tensor], w_re: List[Tensor], w_im: List[Tensor], g: np.ndarray, codebook,
             p_max: float = 1.0, mode: str = "exact", cap: int = ENUMERATION_CAP,
             rng: Optional[np.random.Generator] = None, n_samples: int = 16) -> Tensor:
    """Negative expected sum-rate over the product distribution of codeword choices.

    ``mode="exact"`` sums over every tuple (at most ``cap``).  ``mode="sampled"``
    draws ``n_samples`` tuples per sample and returns a score-function
    surrogate whose gradient is an unbiased estimate (the baseline is the mean
    rate over the draws of the same sample).
    """
    if mode == "exact":
        sizes = [p.shape[-1] for p in probs]
        index = tuple_index(sizes, cap)
        rates = hbf_tuple_rates(w_re, w_im, g, codebook, p_max, index)
        return -(rates * tuple_probabilities(probs, index)).sum(axis=1).mean()
    if mode != "sampled":
        raise ValueError("mode must be 'exact' or 'sampled'")
    if rng is None:
        raise ValueError("sampled mode needs an rng")
    return -_sampled_objective(probs, w_re, w_im, g, codebook, p_max, rng, n_samples)


def _sampled_objective(probs, w_re, w_im, g, codebook, p_max, rng, n_samples):
    g = np.asarray(g)
    B, M = g.shape[0], g.shape[2]
    gr = gi = power = logp = None
    for m in range(M):
        p = T.as_tensor(probs[m])
        L = p.shape[-1]
        cdf = np.cumsum(p.data, axis=1)
        draws = (rng.random((B, n_samples, 1)) > cdf[:, None, :]).sum(axis=-1)
        onehot = np.eye(L)[np.minimum(draws, L - 1)]  # (B, S, L)
        er, ei, pw = _ap_terms(T.as_tensor(w_re[m]), T.as_tensor(w_im[m]), g[:, :, m, :], codebook[m])
        n_u = er.shape[-1]
        er = T.matmul(onehot, er.reshape(B, L, n_u * n_u)).reshape(B, n_samples, n_u, n_u)
        ei = T.matmul(onehot, ei.reshape(B, L, n_u * n_u)).reshape(B, n_samples, n_u, n_u)
        pw = T.matmul(onehot, pw.reshape(B, L, 1)).reshape(B, n_samples)
        lp = T.matmul(onehot, T.log(p + 1e-300).reshape(B, L, 1)).reshape(B, n_samples)
        gr = er if gr is None else gr + er
        gi = ei if gi is None else gi + ei
        power = pw if power is None else power + pw
        logp = lp if logp is None else logp + lp
    _check_power(power)
    scale = T.sqrt(p_max / power).reshape(B, n_samples, 1, 1)
    rates = sum_rate_from_gains(gr * scale, gi * scale)  # (B, S)
    advantage = rates.data - rates.data.mean(axis=1, keepdims=True)
    return (rates + logp * advantage).mean()
