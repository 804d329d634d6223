"""Training loop, deployed (online) inference, and evaluation for the DNN architectures."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .. import metrics
from ..channel import PURPOSE_SHUFFLE, stream
from ..neural import tensor as T
from ..neural.optim import AdamState, adam_step
from ..precoding import FdpPrecoder, HbfPrecoder, normalize_power
from . import losses
from .architectures import FullDeCModel, PartDeCModel, decode_complex

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-6
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    loss_mode: str = "exact"  # or "sampled" for the score-function estimator
    mc_samples: int = 16
    p_max: float = 1.0
    # Samples per epoch used to report the training sum-rate (0: all).
    train_eval_samples: int = 2000

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1, epochs >= 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be nonnegative")
        if self.loss_mode not in ("exact", "sampled"):
            raise ValueError("loss_mode must be 'exact' or 'sampled'")


@dataclass
class TrainResult:
    curve: List[dict] = field(default_factory=list)  # epoch, train_sum_rate, test_sum_rate, loss
    best_epoch: int = -1
    best_test_sum_rate: float = -np.inf
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def write_curve(self, path, config_hash: str = "") -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["config_hash", "epoch", "train_sum_rate", "test_sum_rate", "loss"])
            for row in self.curve:
                w.writerow([config_hash, row["epoch"], repr(row["train_sum_rate"]),
                            repr(row["test_sum_rate"]), repr(row["loss"])])


def input_statistics(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=float)
    std = float(codes.std())
    return np.array([float(codes.mean()), std if std > 0 else 1.0])


def features(model, codes: np.ndarray) -> np.ndarray:
    """Quantized RSSI codes (S, N_U, M, K) -> standardized model input (S, M, N_U, K)."""
    return model.standardize(np.swapaxes(np.asarray(codes), 1, 2))


def _split_outputs(model, outputs):
    """Model outputs -> (list of probs or None, list of re, list of im) per AP."""
    probs, res, ims = [], [], []
    for reg, p in outputs:
        re, im = decode_complex(reg, model.N_U, model.n_chains)
        probs.append(p)
        res.append(re)
        ims.append(im)
    return probs, res, ims


def batch_loss(model, x: np.ndarray, g: np.ndarray, codebook, cfg: TrainConfig, rng, train: bool = True):
    outputs = model.forward(x, train, rng)
    probs, res, ims = _split_outputs(model, outputs)
    if model.variant == "fdp":
        return losses.loss_fdp(T.stack(res, axis=1), T.stack(ims, axis=1), g, cfg.p_max)
    return losses.loss_hbf(probs, res, ims, g, codebook, cfg.p_max, cfg.loss_mode, rng=rng,
                           n_samples=cfg.mc_samples)


# ---------------------------------------------------------------- deployment
def assemble(model, outputs, codebook=None, p_max: float = 1.0):
    """Per-AP eval outputs -> globally normalized precoder (HBF picks argmax codewords)."""
    coeffs = []
    sel = []
    for m, (reg, p) in enumerate(outputs):
        re, im = decode_complex(T.as_tensor(reg), model.N_U, model.n_chains)
        coeffs.append(re.data + 1j * im.data)
        if model.variant == "hbf":
            sel.append(np.argmax(np.asarray(getattr(p, "data", p)), axis=-1))  # first maximum on ties
    if model.variant == "fdp":
        return normalize_power(FdpPrecoder(np.stack(coeffs, axis=1)), p_max)
    sel = np.stack(sel, axis=1)  # (B, M)
    A = np.stack([np.asarray(codebook[m])[sel[:, m]] for m in range(model.M)], axis=1)
    return normalize_power(HbfPrecoder(A, np.stack(coeffs, axis=1), sel), p_max)


def predict(model, x: np.ndarray, codebook=None, p_max: float = 1.0, chunk: int = 4096):
    """Deployed precoders for standardized inputs ``x`` (S, M, N_U, K)."""
    parts = []
    for s in range(0, len(x), chunk):
        parts.append(assemble(model, model.forward(x[s:s + chunk], False), codebook, p_max))
    if model.variant == "fdp":
        return FdpPrecoder(np.concatenate([p.U for p in parts]))
    return HbfPrecoder(np.concatenate([p.A for p in parts]), np.concatenate([p.W for p in parts]),
                       np.concatenate([p.selection for p in parts]))


def deployed_sum_rate(model, x, h, sigma2, codebook=None, p_max: float = 1.0) -> np.ndarray:
    pre = predict(model, x, codebook, p_max)
    return metrics.sum_rate(metrics.sinr_fdp(h, pre.digital(), sigma2))


def infer_fulldec(model: FullDeCModel, m: int, x_m: np.ndarray) -> dict:
    """AP m's online output from its own standardized RSSIs (B, N_U, K).

    Returns the raw digital coefficients (B, n_chains, N_U), the HBF codeword
    (argmax, lowest index on ties) and the fronthaul coefficient count (zero).
    """
    reg, p = model.local(m, np.asarray(x_m, dtype=float), False)
    re, im = decode_complex(reg, model.N_U, model.n_chains)
    out = {"coefficients": re.data + 1j * im.data, "fronthaul": 0, "raw": reg.data}
    if model.variant == "hbf":
        out["codeword"] = np.argmax(p.data, axis=-1)
        out["probs"] = p.data
    return out


def infer_partdec(model: PartDeCModel, x: np.ndarray) -> dict:
    """Split online inference: trunk and bottleneck blocks at the network
    controller, then each AP's head on its received payload."""
    from ..accounting import signaling

    payloads = [p.data for p in model.network_side(np.asarray(x, dtype=float), False)]
    outputs = [model.ap_side(m, payloads[m], False) for m in range(model.M)]
    report = signaling("partdec", model.M, model.N_T, model.N_RF, model.N_U, model.K)
    delivered = sum(p.shape[-1] for p in payloads)
    if delivered != report.down_count:
        raise AssertionError("bottleneck width disagrees with the signaling count")
    return {"payloads": payloads, "outputs": [(r.data, None if p is None else p.data) for r, p in outputs],
            "signaling": report}


# ------------------------------------------------------------------- training
def train(model, x: np.ndarray, h: np.ndarray, sigma2: float, cfg: TrainConfig, train_idx, test_idx,
          codebook=None) -> TrainResult:
    """Minimize the unsupervised loss; keep the parameters that score best on the test split.

    ``x`` standardized inputs (S, M, N_U, K); ``h`` channels (S, N_U, M, N_T).
    """
    if model.variant == "hbf" and codebook is None:
        raise ValueError("HBF training needs a codebook")
    train_idx = np.asarray(train_idx)
    test_idx = np.asarray(test_idx)
    g = np.asarray(h) / np.sqrt(sigma2)
    params = model.named_params()
    state = AdamState()
    result = TrainResult()
    n_eval = len(train_idx) if cfg.train_eval_samples <= 0 else min(cfg.train_eval_samples, len(train_idx))
    eval_train = train_idx[:n_eval]

    def score(idx):
        if len(idx) == 0:
            return float("nan")
        return float(np.mean(deployed_sum_rate(model, x[idx], h[idx], sigma2, codebook, cfg.p_max)))

    result.params, result.buffers = model.state()
    stale = 0
    for epoch in range(cfg.epochs):
        rng = stream(cfg.seed, PURPOSE_SHUFFLE, epoch)
        order = train_idx[rng.permutation(len(train_idx))]
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                with T.Tape() as tape:
                    loss = batch_loss(model, x[idx], g[idx], codebook, cfg, rng, train=True)
                grads = tape.gradient(loss, params)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            if not all(np.all(np.isfinite(v)) for v in grads.values()):
                raise TrainingDivergedError(f"non-finite gradient at epoch {epoch}, batch {b}")
            adam_step(params, grads, cfg.lr, cfg.weight_decay, state)
            total += loss.item() * len(idx)
            count += len(idx)
        tr, te = score(eval_train), score(test_idx)
        result.curve.append({"epoch": epoch, "train_sum_rate": tr, "test_sum_rate": te,
                             "loss": total / max(count, 1)})
        log.info("epoch %d: loss %.4f train %.4f test %.4f", epoch, total / max(count, 1), tr, te)
        target = te if len(test_idx) else tr
        if target > result.best_test_sum_rate:
            result.best_test_sum_rate, result.best_epoch = target, epoch
            result.params, result.buffers = model.state()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break
    if cfg.epochs > 0:
        model.load_state(result.params, result.buffers)
    return result


# ----------------------------------------------------------------- evaluation
@dataclass
class Evaluation:
    scheme: str
    sigma2: float
    sinr: np.ndarray  # (S, N_U)

    @property
    def sum_rates(self) -> np.ndarray:
        return metrics.sum_rate(self.sinr)

    @property
    def mean_sum_rate(self) -> float:
        return float(np.mean(self.sum_rates))

    def reports(self) -> List[metrics.RateReport]:
        return metrics.reports_from_sinr(self.sinr)

    def cdf(self):
        return metrics.rate_cdf(self.reports())


def evaluate(precoder_fn, h: np.ndarray, sigma2_sweep: Sequence[float], scheme: str = "") -> List[Evaluation]:
    """Score ``precoder_fn(sigma2) -> precoder`` on channels ``h`` at every noise level."""
    out = []
    for s2 in sigma2_sweep:
        pre = precoder_fn(s2)
        out.append(Evaluation(scheme, float(s2), metrics.sinr_fdp(h, pre.digital(), s2)))
    return out
