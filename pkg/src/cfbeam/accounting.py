"""Real-multiplication (RM) and fronthaul signaling counts.

One complex multiplication is 4 RMs.  DNN counts include only the layer
products (dense: in * out; conv: c_in * c_out * k^2 * output positions);
activations, batch norm and additions are free.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from .neural.layers import ModelSpec

RM_PER_CM = 4
PARTDEC_DOWNLINK_PER_AP = 200

SCHEMES = ("CB", "ZF", "OFDP", "PEALTMIN_OFDP", "PEALTMIN_ZF",
           "FULLDEC_FDP", "FULLDEC_HBF", "PARTDEC_FDP", "PARTDEC_HBF")


@dataclass(frozen=True)
class ComplexityReport:
    scheme: str
    breakdown: Dict[str, float] = field(default_factory=dict)

    @property
    def rm_count(self) -> float:
        return float(sum(self.breakdown.values()))


@dataclass(frozen=True)
class SignalingReport:
    scheme: str
    up_count: int
    down_count: int

    @property
    def total(self) -> int:
        return self.up_count + self.down_count


def rm_zf(M: int, N_T: int, N_U: int) -> Fraction:
    """``4 M^2 N_T^2 (2 N_U + M N_T / 3)`` as an exact rational."""
    return RM_PER_CM * M ** 2 * N_T ** 2 * (2 * N_U + Fraction(M * N_T, 3))


def rm_svd(m: int, n: int) -> int:
    return 4 * m * m * n + 22 * n ** 3


def rm_pe_altmin(l_iters: int, M: int, N_RF: int, N_U: int, N_T: int) -> int:
    """``l M (8 N_RF N_U (N_T + N_U) + 22 N_RF^3)``."""
    return l_iters * M * (8 * N_RF * N_U * (N_T + N_U) + 22 * N_RF ** 3)


def _rm_spec(spec: ModelSpec) -> int:
    total = 0
    shape = tuple(spec.input_shape)
    for ls, out in zip(spec.layers, spec.shapes()):
        if ls.kind == "dense":
            total += ls.n_in * ls.n_out
        elif ls.kind == "conv":
            total += ls.n_in * ls.n_out * ls.kernel ** 2 * int(np.prod(out[1:]))
        shape = out
    return total


def rm_dnn(model) -> int:
    """RMs of one forward pass; accepts a ModelSpec, a list of them (parallel
    branches), or an object exposing ``specs()``."""
    if isinstance(model, ModelSpec):
        return _rm_spec(model)
    if hasattr(model, "specs"):
        model = model.specs()
    return sum(_rm_spec(s) for s in model)


def signaling(scheme: str, M: int, N_T: int, N_RF: int, N_U: int, K: int) -> SignalingReport:
    """Real coefficients exchanged per channel realization (uplink AP->NC, downlink NC->AP)."""
    key = scheme.upper()
    if key in ("PARTDEC", "PARTDEC_FDP", "PARTDEC_HBF"):
        return SignalingReport(key, K * M * N_U, PARTDEC_DOWNLINK_PER_AP * M)
    if key in ("FULLDEC", "FULLDEC_FDP", "FULLDEC_HBF", "CB"):
        return SignalingReport(key, 0, 0)
    if key in ("ZF", "OFDP"):
        return SignalingReport(key, 2 * M * N_T * N_U, 2 * M * N_T * N_U)
    if key in ("PEALTMIN_ZF", "PEALTMIN_OFDP"):
        return SignalingReport(key, 2 * M * N_T * N_U, 2 * M * N_RF * (N_T + N_U))
    raise ValueError(f"unknown scheme {scheme!r}")


def complexity(scheme: str, M: int, N_T: int, N_RF: int, N_U: int, l_iters: int = 18,
               dnn=None) -> ComplexityReport:
    """RM breakdown of a scheme; DNN schemes need ``dnn`` (specs or a model)."""
    key = scheme.upper()
    if key == "CB":
        # one normalized matched filter per user and AP: |h|^2 then the scaling
        return ComplexityReport(key, {"matched_filter": 2 * RM_PER_CM * M * N_T * N_U})
    if key == "ZF":
        return ComplexityReport(key, {"zf": float(rm_zf(M, N_T, N_U))})
    if key == "PEALTMIN_ZF":
        return ComplexityReport(key, {"zf": float(rm_zf(M, N_T, N_U)),
                                      "pe_altmin": rm_pe_altmin(l_iters, M, N_RF, N_U, N_T)})
    if key.startswith("FULLDEC") or key.startswith("PARTDEC"):
        if dnn is None:
            raise ValueError(f"{key} needs the network specs")
        return ComplexityReport(key, {"dnn": rm_dnn(dnn)})
    raise ValueError(f"no closed-form complexity for {scheme!r}")


def write_table_csv(path, rows: Iterable[tuple], config_hash: str = "") -> None:
    """Rows of (scheme, uplink, downlink, rm_count, mean_sum_rate or '')."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config_hash", "scheme", "signaling_up", "signaling_down", "rm_count", "sum_rate"])
        for scheme, up, down, rm, rate in rows:
            w.writerow([config_hash, scheme, up, down, "" if rm is None else repr(float(rm)),
                        "" if rate is None else repr(float(rate))])
