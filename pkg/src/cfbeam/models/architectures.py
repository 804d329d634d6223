"""FullDeC and PartDeC networks.

Inputs are standardized RSSI codes shaped (B, M, N_U, K).  Regression heads
emit complex coefficients as interleaved (real, imag) pairs in user-major,
chain-minor order: entry ``2 * (u * n + r) + {0: real, 1: imag}`` where ``n``
is N_T (FDP) or N_RF (HBF).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..neural import layers as L
from ..neural import tensor as T
from ..neural.tensor import Tensor

# Real coefficients sent from the network controller to each AP per PartDeC inference.
PARTDEC_BOTTLENECK = 200

VARIANTS = ("fdp", "hbf")


@dataclass(frozen=True)
class ArchConfig:
    """Layer widths; defaults follow the reference sizing."""

    conv_channels: Tuple[int, ...] = (32, 32)
    local_widths: Tuple[int, ...] = (512, 512)
    trunk_width: int = 1024
    bottleneck: int = PARTDEC_BOTTLENECK
    head_width: int = 1024
    kernel: int = 3
    dropout: float = 0.1
    slope: float = 0.01


def decode_complex(raw: Tensor, n_users: int, n_chains: int) -> Tuple[Tensor, Tensor]:
    """(B, 2 n_users n_chains) -> real and imaginary (B, n_chains, n_users) tensors."""
    x = raw.reshape(raw.shape[0], n_users, n_chains, 2)
    re = T.getitem(x, (slice(None), slice(None), slice(None), 0)).swapaxes(1, 2)
    im = T.getitem(x, (slice(None), slice(None), slice(None), 1)).swapaxes(1, 2)
    return re, im


def encode_complex(z: np.ndarray) -> np.ndarray:
    """Inverse of :func:`decode_complex` for a complex (B, n_chains, n_users) array."""
    z = np.swapaxes(np.asarray(z), -1, -2)
    return np.stack([z.real, z.imag], axis=-1).reshape(z.shape[0], -1)


class Heads:
    """Regression head (and classifier for HBF) on top of a shared feature vector."""

    def __init__(self, width: int, n_reg: int, n_cls: Optional[int], rng: np.random.Generator):
        self.reg = L.Dense(width, n_reg, rng, init="glorot")
        self.cls = None if n_cls is None else L.Dense(width, n_cls, rng, init="glorot")

    def __call__(self, z: Tensor):
        reg = self.reg(z)
        probs = None if self.cls is None else T.softmax(self.cls(z), axis=-1)
        return reg, probs

    def named_params(self, prefix: str) -> Dict[str, Tensor]:
        out = self.reg.named_params(prefix + "reg.")
        if self.cls is not None:
            out.update(self.cls.named_params(prefix + "cls."))
        return out

    def specs(self) -> List[L.ModelSpec]:
        out = [L.ModelSpec((self.reg.n_in,), (L.LayerSpec("dense", self.reg.n_in, self.reg.n_out),))]
        if self.cls is not None:
            out.append(L.ModelSpec((self.cls.n_in,), (L.LayerSpec("dense", self.cls.n_in, self.cls.n_out),
                                                      L.LayerSpec("softmax"))))
        return out


class _Model:
    """Shared bookkeeping: variant, dimensions, input statistics, parameter naming."""

    def __init__(self, variant: str, M: int, N_T: int, N_RF: int, N_U: int, K: int,
                 codebook_sizes: Optional[Sequence[int]], arch: ArchConfig):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if variant == "hbf":
            if codebook_sizes is None or len(codebook_sizes) != M or min(codebook_sizes) < 1:
                raise ValueError("HBF models need one codebook size >= 1 per AP")
        self.variant, self.M, self.N_T, self.N_RF, self.N_U, self.K = variant, M, N_T, N_RF, N_U, K
        self.codebook_sizes = None if codebook_sizes is None else [int(c) for c in codebook_sizes]
        self.arch = arch
        # Feature standardization (scalar mean / std of the RSSI codes), set by the trainer.
        self.input_stats = np.array([0.0, 1.0])

    @property
    def n_chains(self) -> int:
        return self.N_T if self.variant == "fdp" else self.N_RF

    @property
    def n_reg(self) -> int:
        return 2 * self.n_chains * self.N_U

    def n_cls(self, m: int) -> Optional[int]:
        return None if self.variant == "fdp" else self.codebook_sizes[m]

    def standardize(self, codes: np.ndarray) -> np.ndarray:
        mean, std = self.input_stats
        return (np.asarray(codes, dtype=float) - mean) / std

    def _sequentials(self) -> Dict[str, L.Sequential]:
        raise NotImplementedError

    def named_params(self) -> Dict[str, Tensor]:
        out = {}
        for name, seq in self._sequentials().items():
            out.update(seq.named_params(name + "."))
        for name, heads in self._heads().items():
            out.update(heads.named_params(name + "."))
        return out

    def named_buffers(self) -> Dict[str, np.ndarray]:
        out = {"input_stats": self.input_stats}
        for name, seq in self._sequentials().items():
            out.update(seq.named_buffers(name + "."))
        return out

    def load_state(self, params: Dict[str, np.ndarray], buffers: Dict[str, np.ndarray]) -> None:
        own = self.named_params()
        missing = set(own) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, t in own.items():
            v = np.asarray(params[k], dtype=float)
            if v.shape != t.data.shape:
                raise ValueError(f"parameter {k}: shape {v.shape} != {t.data.shape}")
            t.data = v.copy()
        seqs = self._sequentials()
        for k, v in buffers.items():
            if k == "input_stats":
                self.input_stats = np.asarray(v, dtype=float).copy()
                continue
            head, _, rest = k.partition(".")
            seqs[head].set_buffer(rest, v)

    def state(self) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        return ({k: t.data.copy() for k, t in self.named_params().items()},
                {k: np.array(v, copy=True) for k, v in self.named_buffers().items()})


class LocalDNN:
    """One AP's network: conv blocks over its (N_U x K) RSSI grid, dense blocks, heads."""

    def __init__(self, N_U: int, K: int, n_reg: int, n_cls: Optional[int], arch: ArchConfig,
                 rng: np.random.Generator):
        self.spec = L.conv_stack((1, N_U, K), arch.conv_channels, arch.local_widths, arch.kernel,
                                 arch.dropout, arch.slope)
        self.body = L.build(self.spec, rng)
        self.heads = Heads(arch.local_widths[-1], n_reg, n_cls, rng)

    def __call__(self, x: Tensor, train: bool = False, rng=None):
        return self.heads(self.body(x, train, rng))

    def specs(self) -> List[L.ModelSpec]:
        return [self.spec] + self.heads.specs()


class FullDeCModel(_Model):
    """M independent local DNNs; network m reads only AP m's RSSIs."""

    kind = "fulldec"

    def __init__(self, variant: str, M: int, N_T: int, N_RF: int, N_U: int, K: int,
                 codebook_sizes: Optional[Sequence[int]] = None, arch: Optional[ArchConfig] = None,
                 seed: int = 0):
        super().__init__(variant, M, N_T, N_RF, N_U, K, codebook_sizes, arch or ArchConfig())
        self.nets = []
        for m in range(M):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, m)))
            self.nets.append(LocalDNN(N_U, K, self.n_reg, self.n_cls(m), self.arch, rng))

    def _sequentials(self):
        return {f"ap{m}": net.body for m, net in enumerate(self.nets)}

    def _heads(self):
        return {f"ap{m}": net.heads for m, net in enumerate(self.nets)}

    def local(self, m: int, x_m, train: bool = False, rng=None):
        """AP m's outputs from its own standardized RSSI grid (B, N_U, K)."""
        x_m = T.as_tensor(x_m)
        return self.nets[m](x_m.reshape(x_m.shape[0], 1, self.N_U, self.K), train, rng)

    def forward(self, x, train: bool = False, rng=None):
        """(B, M, N_U, K) features -> list over APs of (regression, probabilities)."""
        x = T.as_tensor(x)
        return [self.local(m, T.getitem(x, (slice(None), m)), train, rng) for m in range(self.M)]

    def specs(self, m: int = 0) -> List[L.ModelSpec]:
        return self.nets[m].specs()


class PartDeCModel(_Model):
    """Shared trunk over all RSSIs; per-AP heads split at the fronthaul bottleneck.

    The trunk and each head's first (bottleneck-wide) block run at the network
    controller; the bottleneck activations are the only values sent to AP m,
    which runs the rest of its head.
    """

    kind = "partdec"

    def __init__(self, variant: str, M: int, N_T: int, N_RF: int, N_U: int, K: int,
                 codebook_sizes: Optional[Sequence[int]] = None, arch: Optional[ArchConfig] = None,
                 seed: int = 0):
        super().__init__(variant, M, N_T, N_RF, N_U, K, codebook_sizes, arch or ArchConfig())
        a = self.arch
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, 1000)))
        self.trunk_spec = L.conv_stack((M, N_U, K), a.conv_channels, (a.trunk_width,), a.kernel, a.dropout, a.slope)
        self.trunk = L.build(self.trunk_spec, rng)
        self.nc_spec = L.ModelSpec((a.trunk_width,), tuple(L.dense_block(a.trunk_width, a.bottleneck, 0.0, a.slope)))
        self.ap_spec = L.ModelSpec((a.bottleneck,), tuple(L.dense_block(a.bottleneck, a.head_width, a.dropout, a.slope)))
        self.nc_heads, self.ap_bodies, self.ap_heads = [], [], []
        for m in range(M):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, m)))
            self.nc_heads.append(L.build(self.nc_spec, rng))
            self.ap_bodies.append(L.build(self.ap_spec, rng))
            self.ap_heads.append(Heads(a.head_width, self.n_reg, self.n_cls(m), rng))

    def _sequentials(self):
        out = {"trunk": self.trunk}
        for m in range(self.M):
            out[f"nc{m}"] = self.nc_heads[m]
            out[f"ap{m}"] = self.ap_bodies[m]
        return out

    def _heads(self):
        return {f"ap{m}": self.ap_heads[m] for m in range(self.M)}

    def network_side(self, x, train: bool = False, rng=None) -> List[Tensor]:
        """Trunk plus bottleneck blocks: the per-AP fronthaul payloads (B, bottleneck)."""
        z = self.trunk(T.as_tensor(x), train, rng)
        return [self.nc_heads[m](z, train, rng) for m in range(self.M)]

    def ap_side(self, m: int, payload, train: bool = False, rng=None):
        return self.ap_heads[m](self.ap_bodies[m](T.as_tensor(payload), train, rng))

    def forward(self, x, train: bool = False, rng=None):
        payloads = self.network_side(x, train, rng)
        return [self.ap_side(m, payloads[m], train, rng) for m in range(self.M)]

    def specs(self, m: int = 0) -> List[L.ModelSpec]:
        return [self.trunk_spec, self.nc_spec, self.ap_spec] + self.ap_heads[m].specs()


def build_model(kind: str, variant: str, M: int, N_T: int, N_RF: int, N_U: int, K: int,
                codebook_sizes=None, arch: Optional[ArchConfig] = None, seed: int = 0):
    if kind == "fulldec":
        return FullDeCModel(variant, M, N_T, N_RF, N_U, K, codebook_sizes, arch, seed)
    if kind == "partdec":
        return PartDeCModel(variant, M, N_T, N_RF, N_U, K, codebook_sizes, arch, seed)
    raise ValueError(f"unknown architecture {kind!r}")
