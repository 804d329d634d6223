"""Synthetic cell-free scenarios: AP/user geometry and clustered multipath channels.

Channels follow a Saleh-Valenzuela style model over a uniform linear array:
one line-of-sight ray plus a few scattering clusters, scaled by a
log-distance path gain.  Every random draw comes from a named stream derived
from the master seed, so a sample's channels depend only on
``(seed, sample, purpose, index)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

# Stream purposes; values are part of the on-disk determinism contract.
PURPOSE_DROP = 0
PURPOSE_CHANNEL = 1
PURPOSE_RSSI = 2
PURPOSE_SSB = 3
PURPOSE_INIT = 4
PURPOSE_SHUFFLE = 5


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``key`` under the master ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class Geometry:
    """Street-like layout: a ``length`` x ``width`` rectangle, users dropped in
    ``user_region`` (x0, y0, x1, y1), APs on the street axis facing the users."""

    length: float = 100.0
    width: float = 20.0
    # None: (0.3 length, 0, 0.7 length, width).
    user_region: Optional[tuple] = None
    # None: M APs spread evenly along the street axis, ends included.
    ap_positions: Optional[tuple] = None
    user_drop: str = "uniform"
    min_distance: float = 5.0

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("street dimensions must be positive")
        if self.user_drop not in ("uniform",):
            raise ValueError(f"unknown user_drop {self.user_drop!r}")
        if self.ap_positions is not None:
            object.__setattr__(self, "ap_positions", tuple(tuple(float(c) for c in p) for p in self.ap_positions))
        if self.user_region is not None:
            region = tuple(float(c) for c in self.user_region)
            if len(region) != 4 or region[2] <= region[0] or region[3] <= region[1]:
                raise ValueError("user_region must be (x0, y0, x1, y1) with x1 > x0, y1 > y0")
            object.__setattr__(self, "user_region", region)

    def region(self) -> tuple:
        if self.user_region is not None:
            return self.user_region
        return (0.3 * self.length, 0.0, 0.7 * self.length, self.width)


@dataclass(frozen=True)
class Multipath:
    n_clusters: int = 2
    rays_per_cluster: int = 4
    angle_spread: float = 0.05
    path_loss_exponent: float = 2.0
    wavelength: float = 0.0107
    los_k_factor_db: float = 13.0
    antenna_spacing: float = 0.5

    def __post_init__(self):
        if self.n_clusters < 0 or self.rays_per_cluster < 1:
            raise ValueError("need n_clusters >= 0 and rays_per_cluster >= 1")
        if self.angle_spread < 0 or self.wavelength <= 0 or self.antenna_spacing <= 0:
            raise ValueError("angle_spread, wavelength and antenna_spacing must be valid")


@dataclass(frozen=True)
class ScenarioConfig:
    M: int = 2
    N_T: int = 8
    N_RF: int = 2
    N_U: int = 2
    K: int = 4
    sigma2: float = 1e-13
    p_max: float = 1.0
    geometry: Geometry = field(default_factory=Geometry)
    multipath: Multipath = field(default_factory=Multipath)
    seed: int = 0

    def __post_init__(self):
        if self.M < 1 or self.N_U < 1 or self.K < 1:
            raise ValueError("M, N_U and K must be at least 1")
        if not 1 <= self.N_RF < self.N_T:
            raise ValueError(f"need 1 <= N_RF < N_T, got N_RF={self.N_RF}, N_T={self.N_T}")
        if not self.sigma2 > 0 or not self.p_max > 0:
            raise ValueError("sigma2 and p_max must be positive")
        if isinstance(self.geometry, dict):
            object.__setattr__(self, "geometry", Geometry(**self.geometry))
        if isinstance(self.multipath, dict):
            object.__setattr__(self, "multipath", Multipath(**self.multipath))
        if self.geometry.ap_positions is not None and len(self.geometry.ap_positions) != self.M:
            raise ValueError("ap_positions must list exactly M positions")

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def ap_positions(self) -> np.ndarray:
        """(M, 2) AP coordinates in metres."""
        geo = self.geometry
        if geo.ap_positions is not None:
            return np.asarray(geo.ap_positions, dtype=float)
        x = np.array([0.0]) if self.M == 1 else np.linspace(0.0, geo.length, self.M)
        return np.stack([x, np.full(self.M, geo.width / 2)], axis=1)

    def ap_orientations(self) -> np.ndarray:
        """Broadside azimuth of each AP's array, pointing at the user-region centre."""
        x0, y0, x1, y1 = self.geometry.region()
        d = np.array([(x0 + x1) / 2, (y0 + y1) / 2]) - self.ap_positions()
        return np.arctan2(d[:, 1], d[:, 0])


def steering_vector(n: int, theta: float, spacing: float = 0.5) -> np.ndarray:
    """ULA response ``exp(i 2 pi spacing k sin(theta))`` for k = 0..n-1."""
    k = np.arange(n)
    return np.exp(1j * 2 * np.pi * spacing * k * np.sin(theta))


def path_gain(distance: float, multipath: Multipath) -> float:
    """Log-distance power gain with free-space loss at the 1 m reference."""
    fs = (multipath.wavelength / (4 * np.pi)) ** 2
    return fs * max(distance, 1e-9) ** (-multipath.path_loss_exponent)


def multipath_response(n: int, gains, angles, spacing: float = 0.5, gain: float = 1.0) -> np.ndarray:
    """``sqrt(gain) * sum_r gains[r] * steering_vector(n, angles[r])``."""
    gains = np.asarray(gains, dtype=complex).ravel()
    angles = np.asarray(angles, dtype=float).ravel()
    k = np.arange(n)
    a = np.exp(1j * 2 * np.pi * spacing * np.outer(np.sin(angles), k))
    return np.sqrt(gain) * (gains @ a)


def generate_channel(config: ScenarioConfig, ap_index: int, user_position, rng: np.random.Generator) -> np.ndarray:
    """Channel vector (length N_T) between AP ``ap_index`` and a user at ``user_position``."""
    mp = config.multipath
    ap = config.ap_positions()[ap_index]
    delta = np.asarray(user_position, dtype=float) - ap
    distance = float(np.hypot(*delta))
    theta_los = np.arctan2(delta[1], delta[0]) - config.ap_orientations()[ap_index]
    theta_los = (theta_los + np.pi) % (2 * np.pi) - np.pi

    k_factor = 10 ** (mp.los_k_factor_db / 10)
    if mp.n_clusters == 0:
        p_los, p_cluster = 1.0, 0.0
    else:
        p_los = k_factor / (1 + k_factor)
        p_cluster = (1 - p_los) / mp.n_clusters

    gains = [np.sqrt(p_los) * np.exp(1j * rng.uniform(0, 2 * np.pi))]
    angles = [theta_los]
    for _ in range(mp.n_clusters):
        centre = rng.uniform(-np.pi / 2, np.pi / 2)
        spread = rng.laplace(0.0, mp.angle_spread / np.sqrt(2), mp.rays_per_cluster)
        g = rng.standard_normal((mp.rays_per_cluster, 2)) @ np.array([1, 1j]) / np.sqrt(2)
        gains.extend(np.sqrt(p_cluster / mp.rays_per_cluster) * g)
        angles.extend(centre + spread)
    return multipath_response(config.N_T, gains, angles, mp.antenna_spacing, path_gain(distance, mp))


def drop_users(config: ScenarioConfig, sample: int, seed: int) -> np.ndarray:
    """(N_U, 2) user positions, rejecting drops closer than ``min_distance`` to any AP."""
    geo = config.geometry
    x0, y0, x1, y1 = geo.region()
    aps = config.ap_positions()
    out = np.empty((config.N_U, 2))
    for u in range(config.N_U):
        rng = stream(seed, sample, PURPOSE_DROP, u)
        for _ in range(10_000):
            p = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
            if np.min(np.hypot(*(aps - p).T)) >= geo.min_distance:
                break
        else:
            raise ValueError("user region lies entirely within min_distance of the APs")
        out[u] = p
    return out


@dataclass(frozen=True)
class ChannelSet:
    """Channels of one user drop; ``h[u, m]`` is the length-N_T vector from AP m to user u."""

    h: np.ndarray

    def __post_init__(self):
        if self.h.ndim != 3:
            raise ValueError("h must be indexed [user, ap, antenna]")
        self.h.setflags(write=False)

    @property
    def n_users(self) -> int:
        return self.h.shape[0]

    @property
    def n_aps(self) -> int:
        return self.h.shape[1]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.h)):
            raise ValueError("channel has non-finite entries")
        blocked = ~np.any(self.h.reshape(self.n_users, -1) != 0, axis=1)
        if np.any(blocked):
            raise ValueError(f"users {np.flatnonzero(blocked).tolist()} are fully blocked")


@dataclass(frozen=True)
class Dataset:
    config: ScenarioConfig
    channels: np.ndarray  # (S, N_U, M, N_T)
    user_positions: np.ndarray  # (S, N_U, 2)
    seed: int = 0
    split: float = 0.85

    def __post_init__(self):
        if not 0 < self.split <= 1:
            raise ValueError("split must be in (0, 1]")
        c = self.config
        if self.channels.shape[1:] != (c.N_U, c.M, c.N_T):
            raise ValueError(f"channel shape {self.channels.shape} does not match config")
        self.channels.setflags(write=False)
        self.user_positions.setflags(write=False)

    def __len__(self) -> int:
        return self.channels.shape[0]

    @property
    def samples(self) -> list:
        return [ChannelSet(h) for h in self.channels]

    def __iter__(self) -> Iterator[ChannelSet]:
        return iter(self.samples)

    @property
    def n_train(self) -> int:
        return min(len(self), max(1, int(round(self.split * len(self)))))

    @property
    def train_indices(self) -> np.ndarray:
        return np.arange(self.n_train)

    @property
    def test_indices(self) -> np.ndarray:
        return np.arange(self.n_train, len(self))

    def subset(self, indices: Sequence[int], split: Optional[float] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.config, self.channels[idx].copy(), self.user_positions[idx].copy(),
                       self.seed, self.split if split is None else split)

    def train(self) -> "Dataset":
        return self.subset(self.train_indices, split=1.0)

    def test(self) -> "Dataset":
        return self.subset(self.test_indices, split=1.0)


def generate_dataset(config: ScenarioConfig, n_samples: int, seed: Optional[int] = None, split: float = 0.85) -> Dataset:
    """Draw ``n_samples`` independent user drops and their channels."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    seed = config.seed if seed is None else seed
    h = np.empty((n_samples, config.N_U, config.M, config.N_T), dtype=complex)
    pos = np.empty((n_samples, config.N_U, 2))
    for s in range(n_samples):
        pos[s] = drop_users(config, s, seed)
        for m in range(config.M):
            for u in range(config.N_U):
                h[s, u, m] = generate_channel(config, m, pos[s, u], stream(seed, s, PURPOSE_CHANNEL, m, u))
    return Dataset(config, h, pos, seed, split)


def mean_snr_db(channels: np.ndarray, sigma2: float, p_max: float = 1.0) -> float:
    """Average full-power matched-filter SNR ``p_max * E||h_u||^2 / sigma2`` in dB.

    The expectation runs over users and drops; ``channels`` is (S, N_U, M, N_T)
    or a single (N_U, M, N_T) drop.
    """
    h = np.asarray(channels)
    gain = np.mean(np.sum(np.abs(h) ** 2, axis=(-1, -2)))
    return float(10 * np.log10(p_max * gain / sigma2))


def sigma2_for_snr(channels: np.ndarray, snr_db: float, p_max: float = 1.0) -> float:
    """Noise power giving ``mean_snr_db(channels, sigma2) == snr_db``."""
    return float(10 ** ((mean_snr_db(channels, 1.0, p_max) - snr_db) / 10))


def dbw_to_watts(dbw: float) -> float:
    return float(10 ** (np.asarray(dbw) / 10))


def watts_to_dbw(w: float) -> float:
    return float(10 * np.log10(w))
