"""Beam training (SSB probing, RSSI feedback, quantization) and per-AP analog codebooks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .channel import Dataset, steering_vector
from .precoding import ALPHABET, PeAltminConfig, in_alphabet, pe_altmin, phase_index, quantize_phase

log = logging.getLogger(__name__)

RSSI_FLOOR_DB = -140.0
RSSI_CEIL_DB = -60.0


# ------------------------------------------------------------------ SSB beams
@dataclass(frozen=True)
class SsbSet:
    """``beams[m, k]`` is AP m's k-th probe beam over the 2-bit alphabet (unscaled)."""

    beams: np.ndarray  # (M, K, N_T)

    def __post_init__(self):
        if self.beams.ndim != 3:
            raise ValueError("beams must be indexed [ap, burst, antenna]")
        if not in_alphabet(self.beams, 1e-12):
            raise ValueError("SSB entries must lie in {1, -1, i, -i}")
        codes = phase_index(self.beams)
        for m in range(codes.shape[0]):
            if len({c.tobytes() for c in codes[m]}) != codes.shape[1]:
                raise ValueError(f"AP {m} has repeated SSB beams")
        self.beams.setflags(write=False)

    @property
    def K(self) -> int:
        return self.beams.shape[1]

    @property
    def a(self) -> np.ndarray:
        """Unit-power beams ``beams / sqrt(N_T)``."""
        return self.beams / np.sqrt(self.beams.shape[-1])


def ssb_candidates(n_t: int, oversample: int = 8) -> np.ndarray:
    """Distinct 2-bit quantized steering beams on a uniform grid in sin(theta)."""
    grid = np.arcsin(np.linspace(-1, 1, oversample * n_t + 1))
    grid = grid[np.argsort(np.abs(grid), kind="stable")]  # broadside first
    out, seen = [], set()
    for theta in grid:
        a = quantize_phase(steering_vector(n_t, theta))
        key = phase_index(a).tobytes()
        if key not in seen:
            seen.add(key)
            out.append(a)
    return np.array(out)


def _greedy_maxmin(power: np.ndarray, K: int) -> List[int]:
    """Greedy pick of K rows of ``power`` (candidates x users) maximizing the
    minimum over users of the best picked row; the mean breaks ties."""
    n_cand = power.shape[0]
    if K > n_cand:
        raise ValueError(f"K={K} exceeds the candidate pool ({n_cand})")
    chosen: List[int] = []
    best = np.zeros(power.shape[1])
    remaining = list(range(n_cand))
    for _ in range(K):
        cover = np.maximum(best[None, :], power[remaining])
        worst = cover.min(axis=1)
        mean = cover.mean(axis=1)
        # lexicographic (worst, mean); np.lexsort sorts by the last key first
        pick = remaining[int(np.lexsort((-np.arange(len(remaining)), mean, worst))[-1])]
        chosen.append(pick)
        remaining.remove(pick)
        best = np.maximum(best, power[pick])
    return chosen


def design_ssb(dataset: Dataset, K: Optional[int] = None, candidates: Optional[np.ndarray] = None,
               oversample: int = 8) -> SsbSet:
    """K probe beams per AP by greedy max-min coverage of the training users."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cfg = dataset.config
    K = cfg.K if K is None else K
    if candidates is None:
        candidates = ssb_candidates(cfg.N_T, oversample)
    candidates = np.asarray(candidates, dtype=complex)
    h = dataset.channels[dataset.train_indices]  # (S, N_U, M, N_T)
    beams = []
    for m in range(cfg.M):
        hm = h[:, :, m, :].reshape(-1, cfg.N_T)
        power = np.abs(np.conj(hm) @ candidates.T).T ** 2 / cfg.N_T  # (C, users)
        beams.append(candidates[_greedy_maxmin(power, K)])
    return SsbSet(np.array(beams))


# ----------------------------------------------------------------------- RSSI
@dataclass(frozen=True)
class RssiFeedback:
    """``alpha[..., u, m, k]`` in watts; ``alpha_q`` the integer codes once quantized."""

    alpha: np.ndarray
    alpha_q: Optional[np.ndarray] = None
    bits: int = 8
    floor_db: float = RSSI_FLOOR_DB
    ceil_db: float = RSSI_CEIL_DB

    @property
    def payload_per_user(self) -> int:
        return int(self.alpha.shape[-2] * self.alpha.shape[-1])

    @property
    def step_db(self) -> float:
        return (self.ceil_db - self.floor_db) / (2 ** self.bits - 1)

    def dequantized(self) -> np.ndarray:
        if self.alpha_q is None:
            raise ValueError("feedback is not quantized")
        return dequantize_rssi(self.alpha_q, self.bits, self.floor_db, self.ceil_db)


def measure_rssi(channels, ssb: SsbSet, sigma2: float, rng: Optional[np.random.Generator] = None) -> RssiFeedback:
    """``alpha = |h_{u,m}^H a_{m,k} + eta|^2 + sigma2`` with ``eta ~ CN(0, sigma2)``.

    ``channels`` is (..., N_U, M, N_T); the result is (..., N_U, M, K).
    """
    h = np.asarray(getattr(channels, "h", channels))
    a = ssb.a
    if h.shape[-2] != a.shape[0] or h.shape[-1] != a.shape[-1]:
        raise ValueError(f"channels {h.shape} do not match SSB set {a.shape}")
    r = np.einsum("...umn,mkn->...umk", np.conj(h), a)
    if sigma2 > 0:
        if rng is None:
            raise ValueError("noisy measurement needs an rng")
        noise = rng.standard_normal(r.shape + (2,)) @ np.array([1, 1j])
        r = r + noise * np.sqrt(sigma2 / 2)
    return RssiFeedback(np.abs(r) ** 2 + sigma2)


def quantize_rssi(feedback: RssiFeedback, bits: int = 8, floor_db: float = RSSI_FLOOR_DB,
                  ceil_db: float = RSSI_CEIL_DB) -> RssiFeedback:
    """Uniform quantization of ``10 log10(alpha)`` over ``[floor_db, ceil_db]`` (clipped)."""
    if not 1 <= bits <= 16:
        raise ValueError("bits must be in [1, 16]")
    if not ceil_db > floor_db:
        raise ValueError("ceil_db must exceed floor_db")
    levels = 2 ** bits - 1
    step = (ceil_db - floor_db) / levels
    with np.errstate(divide="ignore"):
        db = 10 * np.log10(np.asarray(feedback.alpha, dtype=float))
    code = np.clip(np.rint((np.clip(db, floor_db, ceil_db) - floor_db) / step), 0, levels)
    return RssiFeedback(feedback.alpha, code.astype(np.uint16), bits, floor_db, ceil_db)


def dequantize_rssi(code, bits: int = 8, floor_db: float = RSSI_FLOOR_DB, ceil_db: float = RSSI_CEIL_DB) -> np.ndarray:
    """Bin centre (watts) of each code."""
    step = (ceil_db - floor_db) / (2 ** bits - 1)
    return 10 ** ((floor_db + np.asarray(code, dtype=float) * step) / 10)


# ------------------------------------------------------------------ codebooks
@dataclass(frozen=True)
class AnalogCodebook:
    """``codewords[m]`` is an (L_m, N_T, N_RF) stack of 2-bit analog beamformers."""

    codewords: tuple

    def __post_init__(self):
        cws = tuple(np.asarray(c, dtype=complex) for c in self.codewords)
        for m, c in enumerate(cws):
            if c.ndim != 3 or c.shape[0] < 1:
                raise ValueError(f"AP {m}: codebook must be a non-empty (L, N_T, N_RF) stack")
            if not in_alphabet(c, 1e-12):
                raise ValueError(f"AP {m}: entries outside {{1, -1, i, -i}}")
            if len({k.tobytes() for k in phase_index(c)}) != c.shape[0]:
                raise ValueError(f"AP {m}: repeated codewords")
            c.setflags(write=False)
        object.__setattr__(self, "codewords", cws)

    @property
    def sizes(self) -> List[int]:
        return [c.shape[0] for c in self.codewords]

    def __getitem__(self, m: int) -> np.ndarray:
        return self.codewords[m]

    def __len__(self) -> int:
        return len(self.codewords)

    def indices(self) -> List[np.ndarray]:
        """Phase-index (0..3) canonical form of every codeword."""
        return [phase_index(c).astype(np.uint8) for c in self.codewords]

    @classmethod
    def from_indices(cls, indices: Sequence[np.ndarray]) -> "AnalogCodebook":
        return cls(tuple(ALPHABET[np.asarray(i, dtype=int)] for i in indices))


def _bases(codewords: np.ndarray) -> np.ndarray:
    """Orthonormal column bases, (L, N_T, N_RF); the LS residual of U on A is
    ``||U||^2 - ||Q^H U||^2``."""
    left, s, _ = np.linalg.svd(codewords, full_matrices=False)
    keep = s > 1e-10 * s[..., :1]  # collinear columns span less than N_RF dimensions
    return left * keep[..., None, :]


def residuals(codewords: np.ndarray, U: np.ndarray) -> np.ndarray:
    """LS residual of each target ``U[s]`` (N_T, N_U) on each codeword, (S, L)."""
    Q = _bases(np.asarray(codewords))
    U = np.asarray(U)
    proj = np.einsum("lnr,snu->slru", np.conj(Q), U)
    total = np.sum(np.abs(U) ** 2, axis=(-1, -2))
    return np.maximum(total[:, None] - np.sum(np.abs(proj) ** 2, axis=(-1, -2)), 0.0)


def prune_codebook(candidates: np.ndarray, targets: np.ndarray, assignment: np.ndarray, target_size: int):
    """Drop least-used codewords one at a time, moving their samples to the best survivor.

    ``assignment[s]`` is the candidate initially used by target s.  Ties in
    usage drop the latest candidate.  Returns (kept candidate indices ordered
    by usage, final assignment).
    """
    n = len(candidates)
    Q = _bases(candidates)
    alive = np.ones(n, dtype=bool)
    assignment = np.asarray(assignment).copy()
    counts = np.bincount(assignment, minlength=n)
    total = np.sum(np.abs(targets) ** 2, axis=(-1, -2))
    for _ in range(n - max(target_size, 1)):
        live = np.flatnonzero(alive)
        c = counts[live]
        drop = live[np.flatnonzero(c == c.min())[-1]]
        alive[drop] = False
        moved = np.flatnonzero(assignment == drop)
        if moved.size:
            live = np.flatnonzero(alive)
            proj = np.einsum("lnr,snu->slru", np.conj(Q[live]), targets[moved])
            res = total[moved, None] - np.sum(np.abs(proj) ** 2, axis=(-1, -2))
            new = live[np.argmin(res, axis=1)]
            np.add.at(counts, new, 1)
            assignment[moved] = new
        counts[drop] = 0
    kept = np.flatnonzero(alive)
    kept = kept[np.argsort(-counts[kept], kind="stable")]
    return kept, assignment


def design_codebook(fdp_solutions: np.ndarray, n_rf: int, target_size=16,
                    config: Optional[PeAltminConfig] = None) -> AnalogCodebook:
    """Per-AP analog codebooks from fully digital solutions.

    1. PE-AltMin on every AP block of every sample gives candidate beamformers.
    2. Identical candidates (entry-wise) are merged and their usage counted.
    3. The least-used candidate is discarded and its samples re-assigned to
       their best remaining codeword, until ``target_size`` remain.

    ``fdp_solutions`` is (S, M, N_T, N_U); ``target_size`` an int or per-AP list.
    """
    U = np.asarray(fdp_solutions)
    if U.ndim != 4 or U.shape[0] == 0:
        raise ValueError("need a non-empty (S, M, N_T, N_U) stack of FDP solutions")
    S, M = U.shape[:2]
    sizes = [target_size] * M if np.isscalar(target_size) else list(target_size)
    if len(sizes) != M or min(sizes) < 1:
        raise ValueError("target_size must be >= 1 for every AP")
    books = []
    for m in range(M):
        keys, cands, assign = {}, [], np.empty(S, dtype=int)
        for s in range(S):
            A, _, _ = pe_altmin(U[s, m], n_rf, config)
            key = phase_index(A).tobytes()
            if key not in keys:
                keys[key] = len(cands)
                cands.append(A)
            assign[s] = keys[key]
        cands = np.array(cands)
        log.info("AP %d: %d distinct candidates from %d samples", m, len(cands), S)
        kept, _ = prune_codebook(cands, U[:, m], assign, sizes[m])
        books.append(cands[kept])
    return AnalogCodebook(tuple(books))
