"""Classical precoders: conjugate beamforming, zero-forcing, the O-FDP structure
and its coefficient search, and PE-AltMin hybrid factorization with 2-bit
phase shifters.

Array conventions follow :mod:`cfbeam.metrics`.  Functions taking channels
accept an optional leading batch axis unless stated otherwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import metrics

log = logging.getLogger(__name__)

# Phase index k maps to 1j**k.
ALPHABET = np.array([1, 1j, -1, -1j])

POWER_RTOL = 1e-9


class SingularChannelError(np.linalg.LinAlgError):
    """Raised when the stacked user channels are (numerically) rank deficient."""


def phase_index(x: np.ndarray) -> np.ndarray:
    """Index of the alphabet entry nearest in phase to each entry of ``x``."""
    return (np.round(np.angle(x) / (np.pi / 2)).astype(np.int64)) % 4


def quantize_phase(x: np.ndarray) -> np.ndarray:
    """Entry-wise projection onto {1, -1, i, -i} (angle rounded to a multiple of pi/2)."""
    return ALPHABET[phase_index(x)]


def in_alphabet(A: np.ndarray, atol: float = 0.0) -> bool:
    A = np.asarray(A)
    return bool(np.all(np.min(np.abs(A[..., None] - ALPHABET), axis=-1) <= atol))


@dataclass
class FdpPrecoder:
    U: np.ndarray  # (..., M, N_T, N_U)

    def power(self) -> np.ndarray:
        return np.sum(np.abs(self.U) ** 2, axis=(-1, -2, -3))

    def digital(self) -> np.ndarray:
        return self.U


@dataclass
class HbfPrecoder:
    A: np.ndarray  # (..., M, N_T, N_RF), entries in ALPHABET
    W: np.ndarray  # (..., M, N_RF, N_U)
    selection: Optional[np.ndarray] = None  # (..., M) codeword indices when drawn from a codebook

    def power(self) -> np.ndarray:
        return np.sum(np.abs(self.A @ self.W) ** 2, axis=(-1, -2, -3))

    def digital(self) -> np.ndarray:
        return self.A @ self.W


@dataclass
class OfdpCoefficients:
    p: np.ndarray  # (..., N_U) per-user powers
    lam: np.ndarray  # (..., N_U) Lagrange multipliers
    converged: Optional[np.ndarray] = None
    iterations: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.p) < 0) or np.any(np.asarray(self.lam) < 0):
            raise ValueError("p and lambda must be nonnegative")


@dataclass(frozen=True)
class PeAltminConfig:
    max_iters: int = 50
    tol: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1 or not self.tol > 0:
            raise ValueError("need max_iters >= 1 and tol > 0")


@dataclass(frozen=True)
class OfdpOptions:
    restarts: int = 4
    step: float = 1e-2
    max_iters: int = 500
    tol: float = 1e-9
    fd_eps: float = 1e-6
    scope: str = "network"
    seed: int = 0


def normalize_power(precoder, p_max: float):
    """Scale the digital coefficients by one scalar (per sample) so total power is ``p_max``."""
    power = np.asarray(precoder.power(), dtype=float)
    if np.any(power <= 0) or not np.all(np.isfinite(power)):
        raise ValueError("cannot normalize an all-zero or non-finite precoder")
    scale = np.sqrt(p_max / power)[..., None, None, None]
    if isinstance(precoder, HbfPrecoder):
        return HbfPrecoder(precoder.A, precoder.W * scale, precoder.selection)
    return FdpPrecoder(precoder.U * scale)


def conjugate_beamforming(h: np.ndarray, p_max: float = 1.0) -> FdpPrecoder:
    """Matched filter at every AP, equal power ``p_max / (M N_U)`` per user per AP.

    Each AP block uses only that AP's channels.  Users with a zero channel at
    an AP get a zero column there.
    """
    h = np.asarray(h)
    n_users, n_aps = h.shape[-3], h.shape[-2]
    norms = np.linalg.norm(h, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    u = np.where(norms > 0, h / safe, 0.0) * np.sqrt(p_max / (n_aps * n_users))
    return FdpPrecoder(np.moveaxis(u, -3, -1))


def stacked_channel(h: np.ndarray) -> np.ndarray:
    """Global channel matrix with rows ``h_u^H`` over all M*N_T antennas."""
    h = np.asarray(h)
    return np.conj(h.reshape(h.shape[:-2] + (h.shape[-2] * h.shape[-1],)))


def _blocks(u_global: np.ndarray, n_aps: int) -> np.ndarray:
    """(..., M*N_T, N_U) -> (..., M, N_T, N_U)."""
    shape = u_global.shape
    return u_global.reshape(shape[:-2] + (n_aps, shape[-2] // n_aps, shape[-1]))


def zero_forcing(h: np.ndarray, p_max: float = 1.0, rcond: float = 1e-10) -> FdpPrecoder:
    """``U = H^H (H H^H)^{-1} D`` with equal per-user transmit power ``p_max / N_U``."""
    h = np.asarray(h)
    n_users, n_aps = h.shape[-3], h.shape[-2]
    H = stacked_channel(h)
    s = np.linalg.svd(H, compute_uv=False)
    if np.any(s[..., -1] <= rcond * s[..., 0]) or H.shape[-1] < n_users:
        raise SingularChannelError("stacked channel matrix is rank deficient")
    Hh = np.conj(np.swapaxes(H, -1, -2))
    gram = H @ Hh
    V = Hh @ np.linalg.solve(gram, np.broadcast_to(np.eye(n_users), gram.shape))
    V = V / np.linalg.norm(V, axis=-2, keepdims=True) * np.sqrt(p_max / n_users)
    return FdpPrecoder(_blocks(V, n_aps))


def ofdp_structure(h: np.ndarray, coeffs: OfdpCoefficients, sigma2: float, scope: str = "ap") -> FdpPrecoder:
    """Precoder with the O-FDP analytical structure.

    ``u_u = sqrt(p_u) v / ||v||`` where
    ``v = (I + sigma2^-1 sum_{i != u} lambda_i h_i h_i^H)^{-1} h_u``.

    With ``scope="ap"`` the structure is applied per AP block (N_T x N_T
    identity, norm ``sqrt(p_u)`` in every block).  With ``scope="network"`` the
    network is treated as one array of M*N_T antennas, so the whole column has
    norm ``sqrt(p_u)`` and total power ``sum(p)``.
    """
    h = np.asarray(h)
    n_users, n_aps = h.shape[-3], h.shape[-2]
    p = np.asarray(coeffs.p, dtype=float)
    lam = np.asarray(coeffs.lam, dtype=float)
    g = h / np.sqrt(sigma2)
    if scope == "ap":
        g = np.moveaxis(g, -2, -3)  # (..., M, N_U, N_T)
        p = p[..., None, :]
        lam = lam[..., None, :]
    elif scope == "network":
        g = g.reshape(g.shape[:-2] + (-1,))  # (..., N_U, M*N_T)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    d = g.shape[-1]
    outer = g[..., :, None] * np.conj(g[..., None, :])  # (..., N_U, d, d)
    total = np.einsum("...i,...ide->...de", lam, outer)
    R = np.eye(d) + total[..., None, :, :] - lam[..., :, None, None] * outer
    v = np.linalg.solve(R, g[..., :, :, None])[..., 0]  # (..., N_U, d)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    v = np.where(norms > 0, v / np.where(norms > 0, norms, 1.0), 0.0) * np.sqrt(p)[..., None]
    if scope == "ap":
        U = np.swapaxes(v, -1, -2)  # (..., M, N_T, N_U)
    else:
        U = _blocks(np.swapaxes(v, -1, -2), n_aps)
    return FdpPrecoder(U)


def project_simplex(x: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Euclidean projection of each row of ``x`` onto {z >= 0, sum z = total}."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    s = -np.sort(-x, axis=-1)
    css = np.cumsum(s, axis=-1) - total
    k = np.arange(1, n + 1)
    cond = s - css / k > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    return np.maximum(x - theta, 0.0)


def _ofdp_gram(h: np.ndarray, sigma2: float, scope: str) -> np.ndarray:
    """Gram matrices ``g_i^H g_j`` of the noise-scaled channels, (B, S, N_U, N_U)
    with S = 1 block for the network scope and S = M for the per-AP scope."""
    g = h / np.sqrt(sigma2)
    if scope == "network":
        g = g.reshape(g.shape[:-2] + (1, -1))
    elif scope != "ap":
        raise ValueError(f"unknown scope {scope!r}")
    return np.einsum("bimn,bjmn->bmij", np.conj(g), g)


def _ofdp_rate(gram, x, y, p_max):
    """Sum-rate of the O-FDP structure from channel Grams alone.

    Each structured column lies in the channel span, ``v_u = G c_u`` with
    ``c_u = (I + Lambda_u Gram)^{-1} e_u`` and ``Lambda_u`` the multipliers
    with entry u zeroed (push-through identity), so gains and norms follow
    from the N_U x N_U Gram.  Matches :func:`ofdp_structure` followed by
    :func:`normalize_power` and :func:`metrics.sinr_fdp`.
    """
    n = gram.shape[-1]
    p = p_max * np.maximum(x, 0.0)
    lam = p_max * np.maximum(y, 0.0)
    eye = np.eye(n)
    L = lam[:, None, :] * (1.0 - eye)  # (B, u, i)
    system = eye + L[:, None, :, :, None] * gram[:, :, None, :, :]  # (B, S, u, n, n)
    rhs = np.broadcast_to(eye, system.shape[:-1])[..., None]
    c = np.linalg.solve(system, rhs)[..., 0]  # (B, S, u, n)
    gc = np.einsum("bsij,bsuj->bsui", gram, c)
    norm = np.sqrt(np.maximum(np.real(np.einsum("bsui,bsui->bsu", np.conj(c), gc)), 0.0))
    amp = np.sqrt(p)[:, None, :] / np.where(norm > 0, norm, 1.0) * (norm > 0)
    G = np.einsum("bsui,bsu->biu", gc, amp)  # G[i, u]: stream u at user i
    power = np.sum(amp ** 2 * norm ** 2, axis=(1, 2))
    G = G * np.sqrt(p_max / np.where(power > 0, power, 1.0))[:, None, None]
    return metrics.sum_rate(metrics.sinr_from_gains(G, 1.0))


def solve_ofdp(h: np.ndarray, sigma2: float, p_max: float = 1.0, opts: Optional[OfdpOptions] = None):
    """Search the O-FDP coefficients ``(p, lambda)`` maximizing the sum-rate.

    Projected gradient ascent with central finite-difference gradients,
    ``p`` kept on the simplex ``sum p = p_max`` and ``lambda >= 0``.  The step
    starts at ``opts.step`` and adapts per instance: an ascent step that lowers
    the rate is rejected and the step halved, an accepted one grows it by 1.5.
    Restarts: equal powers with ``lambda = p`` (regularized ZF), equal powers
    with ``lambda = 0`` (matched filter), then random Dirichlet draws.  The
    best iterate is returned, normalized to ``p_max``.

    Vectorized over a leading batch axis of ``h``.
    Returns ``(OfdpCoefficients, FdpPrecoder)``.
    """
    opts = opts or OfdpOptions()
    h = np.asarray(h)
    single = h.ndim == 3
    if single:
        h = h[None]
    B, n_users = h.shape[0], h.shape[1]
    rng = np.random.default_rng(opts.seed)
    gram = _ofdp_gram(h, sigma2, opts.scope)

    best_val = np.full(B, -np.inf)
    best_x = np.zeros((B, n_users))
    best_y = np.zeros((B, n_users))
    converged = np.zeros(B, dtype=bool)
    total_iters = 0
    for r in range(max(1, opts.restarts)):
        if r == 0:
            x = np.full((B, n_users), 1.0 / n_users)
            y = x.copy()
        elif r == 1:
            x = np.full((B, n_users), 1.0 / n_users)
            y = np.zeros((B, n_users))
        else:
            x = rng.dirichlet(np.ones(n_users), size=B)
            y = rng.dirichlet(np.ones(n_users), size=B)
        val = _ofdp_rate(gram, x, y, p_max)
        step = np.full(B, float(opts.step))
        quiet = np.zeros(B, dtype=int)
        done = np.zeros(B, dtype=bool)
        for it in range(opts.max_iters):
            act = np.flatnonzero(~done)
            if act.size == 0:
                break
            total_iters = max(total_iters, it + 1)
            ga, xa, ya = gram[act], x[act], y[act]
            z = np.concatenate([xa, ya], axis=1)
            grad = np.zeros_like(z)
            for j in range(2 * n_users):
                up, dn = z.copy(), z.copy()
                up[:, j] += opts.fd_eps
                dn[:, j] = np.maximum(dn[:, j] - opts.fd_eps, 0.0)
                fu = _ofdp_rate(ga, up[:, :n_users], up[:, n_users:], p_max)
                fd = _ofdp_rate(ga, dn[:, :n_users], dn[:, n_users:], p_max)
                grad[:, j] = (fu - fd) / (up[:, j] - dn[:, j])
            sa = step[act][:, None]
            x_new = project_simplex(xa + sa * grad[:, :n_users], 1.0)
            y_new = np.maximum(ya + sa * grad[:, n_users:], 0.0)
            new_val = _ofdp_rate(ga, x_new, y_new, p_max)
            gain = new_val - val[act]
            ok = gain >= 0
            small = gain <= opts.tol * np.maximum(np.abs(val[act]), 1.0)
            x[act[ok]], y[act[ok]], val[act[ok]] = x_new[ok], y_new[ok], new_val[ok]
            step[act] = np.where(ok, step[act] * 1.5, step[act] * 0.5)
            quiet[act] = np.where(small, quiet[act] + 1, 0)
            done[act] = (quiet[act] >= 5) | (step[act] < 1e-12)
        better = val > best_val
        best_val[better] = val[better]
        best_x[better] = x[better]
        best_y[better] = y[better]
        converged |= done
    if not np.all(converged):
        log.warning("solve_ofdp: %d of %d instances hit the iteration cap; returning best iterate",
                    int(np.sum(~converged)), B)
    coeffs = OfdpCoefficients(p_max * best_x, p_max * best_y, converged, total_iters)
    pre = normalize_power(ofdp_structure(h, coeffs, sigma2, opts.scope), p_max)
    if single:
        coeffs = OfdpCoefficients(coeffs.p[0], coeffs.lam[0], converged[:1], total_iters)
        pre = FdpPrecoder(pre.U[0])
    return coeffs, pre


def ls_digital(A: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Least-squares digital precoder ``W = pinv(A) U``."""
    return np.linalg.lstsq(A, U, rcond=None)[0]


def ls_residual(A: np.ndarray, U: np.ndarray) -> float:
    W = ls_digital(A, U)
    return float(np.sum(np.abs(U - A @ W) ** 2))


def pe_altmin(U: np.ndarray, n_rf: int, config: Optional[PeAltminConfig] = None,
              init: Optional[np.ndarray] = None):
    """Factor ``U (N_T x N_U) ~= A W`` with ``A`` in {1, -1, i, -i}^{N_T x n_rf}.

    Alternates the least-squares digital update ``W = pinv(A) U`` with the
    phase-extraction analog update ``A = Q(U W^H)`` where ``Q`` rounds every
    entry to the nearest alphabet phase.  An analog update that would raise
    the residual is rejected and the iteration stops, so the returned trace
    is non-increasing.

    Returns ``(A, W, residual_trace)``.
    """
    config = config or PeAltminConfig()
    U = np.asarray(U, dtype=complex)
    n_t = U.shape[0]
    if n_rf > n_t:
        raise ValueError("n_rf must not exceed the antenna count")
    if not np.any(U):
        return np.ones((n_t, n_rf), dtype=complex), np.zeros((n_rf, U.shape[1]), dtype=complex), [0.0]
    if init is None:
        left = np.linalg.svd(U, full_matrices=True)[0]
        A = quantize_phase(left[:, :n_rf])
    else:
        A = np.asarray(init, dtype=complex)
        if A.shape != (n_t, n_rf) or not in_alphabet(A, 1e-12):
            raise ValueError("init must be an alphabet-valid N_T x n_rf matrix")
    W = ls_digital(A, U)
    res = float(np.sum(np.abs(U - A @ W) ** 2))
    trace = [res]
    scale = float(np.sum(np.abs(U) ** 2))
    for _ in range(config.max_iters):
        if res <= 1e-28 * scale:
            break
        A_new = quantize_phase(U @ np.conj(W.T))
        W_new = ls_digital(A_new, U)
        res_new = float(np.sum(np.abs(U - A_new @ W_new) ** 2))
        if res_new > res:
            break
        improvement = res - res_new
        A, W, res = A_new, W_new, res_new
        trace.append(res)
        if improvement <= config.tol * max(trace[-2], 1e-300):
            break
    return A, W, trace


def select_codeword(codewords: np.ndarray, U: np.ndarray):
    """Index of the codeword with the smallest LS residual to ``U`` (lowest index on ties)."""
    res = np.array([ls_residual(A, U) for A in codewords])
    idx = int(np.flatnonzero(res == res.min())[0])
    return idx, res


def _codewords(codebook, m):
    if codebook is None:
        return None
    cw = codebook.codewords[m] if hasattr(codebook, "codewords") else codebook[m]
    return np.asarray(cw)


def hbf_from_fdp(h: np.ndarray, fdp: FdpPrecoder, codebook=None, config: Optional[PeAltminConfig] = None,
                 p_max: float = 1.0, n_rf: Optional[int] = None) -> HbfPrecoder:
    """Per-AP hybrid factorization of a fully digital precoder, then power normalization.

    Without a codebook each AP runs free 2-bit PE-AltMin with ``n_rf`` RF
    chains; with one, each AP picks the codeword minimizing the LS residual
    (lowest index on ties).  The channels are not needed by the factorization
    and only fix the expected dimensions.  Single sample; callers loop over
    batches.
    """
    U = np.asarray(fdp.U)
    if h is not None and np.shape(h)[-2] != U.shape[0]:
        raise ValueError("precoder and channels disagree on the AP count")
    if codebook is None and n_rf is None:
        raise ValueError("free factorization needs n_rf")
    As, Ws, sel = [], [], []
    for m in range(U.shape[0]):
        cw = _codewords(codebook, m)
        if cw is None:
            A, W, _ = pe_altmin(U[m], n_rf, config)
            idx = -1
        else:
            idx, _ = select_codeword(cw, U[m])
            A = cw[idx]
            W = ls_digital(A, U[m])
        As.append(A)
        Ws.append(W)
        sel.append(idx)
    selection = None if codebook is None else np.array(sel)
    return normalize_power(HbfPrecoder(np.stack(As), np.stack(Ws), selection), p_max)
