"""SINR and sum-rate evaluation for fully digital and hybrid precoders.

Shapes (leading batch dimensions are allowed everywhere):

* channels ``h``: (N_U, M, N_T)
* fully digital ``U``: (M, N_T, N_U), column ``U[m, :, u]`` is user u's precoder at AP m
* hybrid ``A``: (M, N_T, N_RF) and ``W``: (M, N_RF, N_U)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


def gain_matrix(h: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``G[u, j] = sum_m h_{u,m}^H u_{j,m}``, the amplitude of stream j at user u."""
    return np.einsum("...umn,...mnj->...uj", np.conj(h), U)


def sinr_from_gains(G: np.ndarray, sigma2: float, interference: str = "incoherent") -> np.ndarray:
    """Per-user SINR from a gain matrix.

    ``interference="incoherent"`` sums the powers of the interfering streams,
    which is the received interference for independent unit-power symbols.
    ``"coherent"`` takes the squared magnitude of the summed interfering
    amplitudes instead; the two agree whenever there is a single interferer.
    """
    diag = np.diagonal(G, axis1=-2, axis2=-1)
    signal = np.abs(diag) ** 2
    if interference == "incoherent":
        interf = np.sum(np.abs(G) ** 2, axis=-1) - signal
        interf = np.maximum(interf, 0.0)
    elif interference == "coherent":
        interf = np.abs(np.sum(G, axis=-1) - diag) ** 2
    else:
        raise ValueError(f"unknown interference model {interference!r}")
    return signal / (interf + sigma2)


def interference_terms(h: np.ndarray, U: np.ndarray):
    """(signal, interference) powers per user for a fully digital precoder."""
    G = gain_matrix(h, U)
    signal = np.abs(np.diagonal(G, axis1=-2, axis2=-1)) ** 2
    interf = np.sum(np.abs(G) ** 2, axis=-1) - signal
    return signal, interf


def hybrid_to_digital(A: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Per-AP equivalent fully digital blocks ``U_m = A_m W_m``."""
    return A @ W


def sinr_fdp(h: np.ndarray, U: np.ndarray, sigma2: float, interference: str = "incoherent") -> np.ndarray:
    return sinr_from_gains(gain_matrix(h, U), sigma2, interference)


def sinr_hbf(h: np.ndarray, A: np.ndarray, W: np.ndarray, sigma2: float,
             interference: str = "incoherent") -> np.ndarray:
    return sinr_fdp(h, hybrid_to_digital(A, W), sigma2, interference)


def rates(sinr) -> np.ndarray:
    return np.log2(1.0 + np.asarray(sinr, dtype=float))


def sum_rate(sinr) -> np.ndarray:
    """``sum_u log2(1 + SINR_u)`` over the last axis."""
    return np.sum(rates(sinr), axis=-1)


@dataclass(frozen=True)
class RateReport:
    per_user_sinr: np.ndarray
    per_user_rate: np.ndarray
    sum_rate: float

    @classmethod
    def from_sinr(cls, sinr) -> "RateReport":
        sinr = np.asarray(sinr, dtype=float)
        r = rates(sinr)
        return cls(sinr, r, float(np.sum(r)))


def reports_from_sinr(sinr: np.ndarray) -> list:
    """One RateReport per row of a (S, N_U) SINR array."""
    return [RateReport.from_sinr(row) for row in np.atleast_2d(sinr)]


def rate_cdf(reports: Iterable) -> tuple:
    """Sorted per-user rates pooled over ``reports`` and their empirical CDF levels."""
    chunks = [np.ravel(r.per_user_rate if isinstance(r, RateReport) else r) for r in reports]
    if not chunks:
        return np.empty(0), np.empty(0)
    x = np.sort(np.concatenate(chunks))
    levels = np.arange(1, x.size + 1) / x.size
    return x, levels


def write_user_rates_csv(path, sinr: np.ndarray, config_hash: str = "", scheme: str = "") -> None:
    """Rows ``(sample_id, user, sinr, rate)`` for a (S, N_U) SINR array."""
    sinr = np.atleast_2d(sinr)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config_hash", "scheme", "sample_id", "user", "sinr", "rate"])
        for s, row in enumerate(sinr):
            for u, v in enumerate(row):
                w.writerow([config_hash, scheme, s, u, repr(float(v)), repr(float(np.log2(1 + v)))])


def write_sum_rate_csv(path, rows: Sequence[tuple], config_hash: str = "") -> None:
    """Rows ``(noise_dBW, scheme, mean_sum_rate)``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config_hash", "noise_dBW", "scheme", "mean_sum_rate"])
        for noise, scheme, value in rows:
            w.writerow([config_hash, repr(float(noise)), scheme, repr(float(value))])
