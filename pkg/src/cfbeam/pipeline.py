"""Experiment orchestration: generate, beam-train, design codebooks, run baselines,
train the DNNs, evaluate and account.  Every artifact carries the config hash."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import accounting, beamtraining, channel, metrics, precoding
from . import io as cio
from .channel import PURPOSE_RSSI, Dataset, stream
from .models import architectures as arch_mod
from .models import training

log = logging.getLogger(__name__)

DNN_SCHEMES = {
    "FULLDEC_FDP": ("fulldec", "fdp"),
    "FULLDEC_HBF": ("fulldec", "hbf"),
    "PARTDEC_FDP": ("partdec", "fdp"),
    "PARTDEC_HBF": ("partdec", "hbf"),
}
BASELINES = ("CB", "ZF", "OFDP", "PEALTMIN_OFDP", "PEALTMIN_ZF")


@dataclass
class SweepPoint:
    index: int
    label: float  # the configured value (dBW or mean-SNR dB)
    sigma2: float

    @property
    def noise_dbw(self) -> float:
        return channel.watts_to_dbw(self.sigma2)

    @property
    def key(self) -> int:
        """Stream key for this noise level (nonnegative integer, millidB resolution)."""
        return int(round((self.noise_dbw + 1000.0) * 1000))


@dataclass
class RunResult:
    config_hash: str
    sweep: List[SweepPoint]
    evaluations: Dict[Tuple[str, int], training.Evaluation] = field(default_factory=dict)
    train_results: Dict[Tuple[str, int], training.TrainResult] = field(default_factory=dict)
    models: Dict[Tuple[str, int], object] = field(default_factory=dict)
    codebook: Optional[beamtraining.AnalogCodebook] = None
    files: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    def mean_sum_rate(self, scheme: str, index: int) -> float:
        if index < 0:
            index += len(self.sweep)
        return self.evaluations[(scheme, index)].mean_sum_rate


# --------------------------------------------------------------------- stages
def make_dataset(cfg: cio.ExperimentConfig) -> Dataset:
    return channel.generate_dataset(cfg.scenario, cfg.n_samples, cfg.scenario.seed, cfg.split)


def resolve_sweep(cfg: cio.ExperimentConfig, dataset: Dataset) -> List[SweepPoint]:
    if cfg.noise_dbw:
        return [SweepPoint(i, float(v), channel.dbw_to_watts(v)) for i, v in enumerate(cfg.noise_dbw)]
    p_max = cfg.scenario.p_max
    return [SweepPoint(i, float(v), channel.sigma2_for_snr(dataset.channels, v, p_max))
            for i, v in enumerate(cfg.snr_db)]


def dnn_point_indices(cfg: cio.ExperimentConfig) -> List[int]:
    n = len(cfg.sweep)
    return sorted({i % n for i in cfg.dnn_points})


def design_ssb(cfg: cio.ExperimentConfig, dataset: Dataset) -> beamtraining.SsbSet:
    return beamtraining.design_ssb(dataset, cfg.scenario.K, oversample=cfg.beamtraining.ssb_oversample)


def measure(cfg: cio.ExperimentConfig, dataset: Dataset, ssb, point: SweepPoint) -> beamtraining.RssiFeedback:
    rng = stream(cfg.scenario.seed, PURPOSE_RSSI, point.key)
    fb = beamtraining.measure_rssi(dataset.channels, ssb, point.sigma2, rng)
    bt = cfg.beamtraining
    return beamtraining.quantize_rssi(fb, bt.bits, bt.floor_db, bt.ceil_db)


def fdp_solutions(h: np.ndarray, sigma2: float, source: str, p_max: float = 1.0) -> np.ndarray:
    if source == "zf":
        return precoding.zero_forcing(h, p_max).U
    return precoding.solve_ofdp(h, sigma2, p_max)[1].U


def make_codebook(cfg: cio.ExperimentConfig, dataset: Dataset, sigma2: float) -> beamtraining.AnalogCodebook:
    bt = cfg.beamtraining
    idx = dataset.train_indices[:bt.codebook_samples]
    U = fdp_solutions(dataset.channels[idx], sigma2, bt.codebook_source, cfg.scenario.p_max)
    return beamtraining.design_codebook(U, cfg.scenario.N_RF, bt.codebook_size)


def free_hbf(h: np.ndarray, U: np.ndarray, n_rf: int, p_max: float = 1.0) -> precoding.HbfPrecoder:
    """Per-sample free 2-bit PE-AltMin factorization of a batch of FDP solutions."""
    parts = [precoding.hbf_from_fdp(h[s], precoding.FdpPrecoder(U[s]), None, p_max=p_max, n_rf=n_rf)
             for s in range(len(h))]
    return precoding.HbfPrecoder(np.stack([p.A for p in parts]), np.stack([p.W for p in parts]))


def baseline_precoder(scheme: str, h: np.ndarray, sigma2: float, cfg: cio.ExperimentConfig, cache: dict):
    p_max, n_rf = cfg.scenario.p_max, cfg.scenario.N_RF
    if scheme == "CB":
        return precoding.conjugate_beamforming(h, p_max)
    if scheme == "ZF":
        if "ZF" not in cache:
            cache["ZF"] = precoding.zero_forcing(h, p_max)
        return cache["ZF"]
    if scheme == "OFDP":
        if "OFDP" not in cache:
            cache["OFDP"] = precoding.solve_ofdp(h, sigma2, p_max)[1]
        return cache["OFDP"]
    if scheme == "PEALTMIN_OFDP":
        return free_hbf(h, baseline_precoder("OFDP", h, sigma2, cfg, cache).U, n_rf, p_max)
    if scheme == "PEALTMIN_ZF":
        return free_hbf(h, baseline_precoder("ZF", h, sigma2, cfg, cache).U, n_rf, p_max)
    raise ValueError(f"{scheme} is not a baseline")


def new_model(cfg: cio.ExperimentConfig, scheme: str, codebook=None, seed: Optional[int] = None):
    kind, variant = DNN_SCHEMES[scheme]
    sc = cfg.scenario
    sizes = codebook.sizes if (variant == "hbf" and codebook is not None) else None
    return arch_mod.build_model(kind, variant, sc.M, sc.N_T, sc.N_RF, sc.N_U, sc.K, sizes, cfg.arch,
                                cfg.train.seed if seed is None else seed)


def train_dnn(cfg: cio.ExperimentConfig, scheme: str, dataset: Dataset, feedback, sigma2: float, codebook=None):
    model = new_model(cfg, scheme, codebook)
    model.input_stats = training.input_statistics(feedback.alpha_q[dataset.train_indices])
    x = training.features(model, feedback.alpha_q)
    result = training.train(model, x, dataset.channels, sigma2, cfg.train, dataset.train_indices,
                            dataset.test_indices, codebook if model.variant == "hbf" else None)
    return model, result


def dnn_precoder(model, feedback, idx, codebook, p_max):
    x = training.features(model, feedback.alpha_q[idx])
    return training.predict(model, x, codebook if model.variant == "hbf" else None, p_max)


# ------------------------------------------------------------- checkpoints
def save_checkpoint(path, model, metadata: Optional[dict] = None) -> None:
    params, buffers = model.state()
    tensors = {f"param/{k}": v for k, v in params.items()}
    tensors.update({f"buffer/{k}": v for k, v in buffers.items()})
    meta = {"kind": model.kind, "variant": model.variant,
            "dims": [model.M, model.N_T, model.N_RF, model.N_U, model.K],
            "codebook_sizes": model.codebook_sizes, "arch": cio.config_to_dict(model.arch)}
    meta.update(metadata or {})
    cio.save_container(path, tensors, meta)


def load_checkpoint(path):
    tensors, meta = cio.load_container(path)
    arch = arch_mod.ArchConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["arch"].items()})
    model = arch_mod.build_model(meta["kind"], meta["variant"], *meta["dims"], meta["codebook_sizes"], arch)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    buffers = {k[7:]: v for k, v in tensors.items() if k.startswith("buffer/")}
    model.load_state(params, buffers)
    return model, meta


def codebook_tensors(codebook: beamtraining.AnalogCodebook) -> Dict[str, np.ndarray]:
    return {f"ap{m}": idx.astype(np.int64) for m, idx in enumerate(codebook.indices())}


def codebook_from_tensors(tensors: Dict[str, np.ndarray]) -> beamtraining.AnalogCodebook:
    return beamtraining.AnalogCodebook.from_indices([tensors[f"ap{m}"] for m in range(len(tensors))])


def dataset_tensors(dataset: Dataset) -> Dict[str, np.ndarray]:
    return {"channels": dataset.channels, "user_positions": dataset.user_positions}


def dataset_from_container(path, cfg: cio.ExperimentConfig) -> Dataset:
    tensors, meta = cio.load_container(path)
    return Dataset(cfg.scenario, tensors["channels"], tensors["user_positions"],
                   meta.get("seed", cfg.scenario.seed), meta.get("split", cfg.split))


# ---------------------------------------------------------------- reports
def table_rows(cfg: cio.ExperimentConfig, codebook_sizes=None, l_iters: int = 18,
               rates: Optional[Dict[str, float]] = None) -> List[tuple]:
    """Table-1-shaped rows (scheme, up, down, RM, rate) at the scenario's dimensions."""
    sc = cfg.scenario
    rows = []
    for scheme in cfg.schemes:
        sig = accounting.signaling(scheme, sc.M, sc.N_T, sc.N_RF, sc.N_U, sc.K)
        if scheme in DNN_SCHEMES:
            sizes = codebook_sizes or [cfg.beamtraining.codebook_size] * sc.M
            model = new_model(cfg.replace(), scheme, _Sizes(sizes))
            rm = accounting.rm_dnn(model)
        elif scheme in ("OFDP", "PEALTMIN_OFDP"):
            rm = None  # iterative search; no closed form
        else:
            rm = accounting.complexity(scheme, sc.M, sc.N_T, sc.N_RF, sc.N_U, l_iters).rm_count
        rows.append((scheme, sig.up_count, sig.down_count, rm, None if rates is None else rates.get(scheme)))
    return rows


class _Sizes:
    def __init__(self, sizes):
        self.sizes = list(sizes)


# --------------------------------------------------------------- orchestration
class OutputLock:
    """Exclusive ownership of an output directory through a lock file."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".cfbeam.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = self.path.open("x")
        except FileExistsError as exc:
            raise cio.ContainerError(f"output directory is locked by another run ({self.path})") from exc
        with fd:
            fd.write(str(time.time()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def run_experiment(cfg: cio.ExperimentConfig, out_dir=None, write: bool = True) -> RunResult:
    """Full pipeline; with ``write`` the artifacts land in ``out_dir`` (default cfg.output_dir)."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    if write:
        with OutputLock(out):
            return _run(cfg, out, True)
    return _run(cfg, out, False)


def _run(cfg: cio.ExperimentConfig, out: Path, write: bool) -> RunResult:
    chash = cio.config_hash(cfg)
    stamp = {"config_hash": chash, "seed": cfg.scenario.seed}
    timings = {}
    t0 = time.perf_counter()
    dataset = make_dataset(cfg)
    timings["generate"] = time.perf_counter() - t0
    sweep = resolve_sweep(cfg, dataset)
    result = RunResult(chash, sweep, timings=timings)
    files = {}

    def save(name, tensors, meta=None):
        if write:
            path = out / name
            cio.save_container(path, tensors, {**stamp, **(meta or {})})
            files[name] = cio.file_digest(path)

    save("dataset.cfbf", dataset_tensors(dataset), {"split": cfg.split, "n_samples": cfg.n_samples})
    test = dataset.test_indices
    h_test = dataset.channels[test]
    dnn_schemes = [s for s in cfg.schemes if s in DNN_SCHEMES]
    dnn_idx = dnn_point_indices(cfg)

    ssb = None
    codebook = None
    if dnn_schemes:
        t0 = time.perf_counter()
        ssb = design_ssb(cfg, dataset)
        save("ssb.cfbf", {"beams": ssb.beams})
        timings["ssb"] = time.perf_counter() - t0
        if any(DNN_SCHEMES[s][1] == "hbf" for s in dnn_schemes):
            t0 = time.perf_counter()
            codebook = make_codebook(cfg, dataset, sweep[dnn_idx[-1]].sigma2)
            save("codebook.cfbf", codebook_tensors(codebook), {"sizes": codebook.sizes})
            timings["codebook"] = time.perf_counter() - t0
    result.codebook = codebook

    t0 = time.perf_counter()
    for point in sweep:
        cache: dict = {}
        for scheme in cfg.schemes:
            if scheme in DNN_SCHEMES:
                continue
            pre = baseline_precoder(scheme, h_test, point.sigma2, cfg, cache)
            result.evaluations[(scheme, point.index)] = training.Evaluation(
                scheme, point.sigma2, metrics.sinr_fdp(h_test, pre.digital(), point.sigma2))
    timings["baselines"] = time.perf_counter() - t0

    for i in dnn_idx if dnn_schemes else []:
        point = sweep[i]
        feedback = measure(cfg, dataset, ssb, point)
        for scheme in dnn_schemes:
            t0 = time.perf_counter()
            model, tr = train_dnn(cfg, scheme, dataset, feedback, point.sigma2, codebook)
            timings[f"train_{scheme}_{i}"] = time.perf_counter() - t0
            pre = dnn_precoder(model, feedback, test, codebook, cfg.scenario.p_max)
            result.evaluations[(scheme, i)] = training.Evaluation(
                scheme, point.sigma2, metrics.sinr_fdp(h_test, pre.digital(), point.sigma2))
            result.models[(scheme, i)] = model
            result.train_results[(scheme, i)] = tr
            if write:
                name = f"checkpoint_{scheme.lower()}_{i}.cfbf"
                save_checkpoint(out / name, model, {**stamp, "sigma2": point.sigma2, "best_epoch": tr.best_epoch})
                files[name] = cio.file_digest(out / name)
                curve = out / f"curve_{scheme.lower()}_{i}.csv"
                tr.write_curve(curve, chash)
                files[curve.name] = cio.file_digest(curve)

    if write:
        rows = [(chash, f"{p.noise_dbw!r}", s, repr(result.evaluations[(s, p.index)].mean_sum_rate))
                for p in sweep for s in cfg.schemes if (s, p.index) in result.evaluations]
        with open(out / "sum_rate.csv", "w", newline="") as f:
            f.write("config_hash,noise_dBW,scheme,mean_sum_rate\n")
            for r in rows:
                f.write(",".join(r) + "\n")
        files["sum_rate.csv"] = cio.file_digest(out / "sum_rate.csv")
        for i in dnn_idx if dnn_schemes else [len(sweep) - 1]:
            path = out / f"user_rates_{i}.csv"
            with open(path, "w", newline="") as f:
                f.write("config_hash,scheme,sample_id,user,sinr,rate\n")
                for s in cfg.schemes:
                    ev = result.evaluations.get((s, i))
                    if ev is None:
                        continue
                    rates = metrics.rates(ev.sinr)
                    for sid in range(ev.sinr.shape[0]):
                        for u in range(ev.sinr.shape[1]):
                            f.write(f"{chash},{s},{int(test[sid])},{u},{ev.sinr[sid, u]!r},{rates[sid, u]!r}\n")
            files[path.name] = cio.file_digest(path)
        sizes = codebook.sizes if codebook is not None else None
        top = sweep[dnn_idx[-1]].index
        rates = {s: result.evaluations[(s, top)].mean_sum_rate for s in cfg.schemes if (s, top) in result.evaluations}
        accounting.write_table_csv(out / "complexity.csv", table_rows(cfg, sizes, rates=rates), chash)
        files["complexity.csv"] = cio.file_digest(out / "complexity.csv")
        cio.save_config(cfg, out / "config.json")
        manifest = {"config_hash": chash, "seed": cfg.scenario.seed, "files": files,
                    "sweep": [{"index": p.index, "label": p.label, "noise_dBW": p.noise_dbw} for p in sweep]}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    result.files = files
    return result
