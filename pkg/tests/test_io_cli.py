import csv
import json

import numpy as np
import pytest

from cfbeam import cli
from cfbeam import io as cio
from cfbeam import pipeline as pl
from cfbeam.channel import ScenarioConfig
from cfbeam.models import TrainConfig
from cfbeam.models.architectures import ArchConfig

TINY_ARCH = ArchConfig(conv_channels=(2,), local_widths=(8,), trunk_width=8, head_width=8)


def tiny_config(**kw):
    base = dict(n_samples=120, snr_db=(3.0, 23.0), train=TrainConfig(epochs=1, batch_size=40),
                arch=TINY_ARCH, beamtraining=cio.BeamTrainingConfig(codebook_size=2, codebook_samples=40))
    base.update(kw)
    return cio.ExperimentConfig(**base)


def write_config(path, cfg):
    cio.save_config(cfg, path)
    return str(path)


# ---------------------------------------------------------------- container
def test_empty_container_round_trip():
    tensors, meta = cio.decode_container(cio.encode_container({}))
    assert tensors == {} and meta == {}


def test_single_element_round_trip_bit_exact(tmp_path):
    p = tmp_path / "one.cfbf"
    x = np.array([np.pi])
    cio.save_container(p, {"x": x}, {"k": 1})
    t, meta = cio.load_container(p)
    assert t["x"].tobytes() == x.tobytes() and meta == {"k": 1}
    assert p.read_bytes()[:5] == b"CFBF1"


def test_all_kinds_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    src = {"real": rng.standard_normal((3, 2, 4)), "complex": rng.standard_normal(5) + 1j * rng.standard_normal(5),
           "int": rng.integers(-10, 10, (2, 3)), "scalar": np.array(2.5), "empty": np.zeros((0, 3)),
           "uint8": np.arange(4, dtype=np.uint8), "weird": np.array([np.nan, np.inf, -0.0, 5e-324])}
    out, _ = cio.decode_container(cio.encode_container(src, {"note": "x"}))
    for k, v in src.items():
        assert out[k].shape == v.shape
        expected = v.astype(np.int64) if v.dtype.kind in "iu" else v
        assert out[k].tobytes() == np.ascontiguousarray(expected).tobytes(), k


def test_corruption_is_detected(tmp_path):
    data = bytearray(cio.encode_container({"x": np.arange(3.0)}))
    bad = bytes(data[:-1]) + bytes([data[-1] ^ 1])
    with pytest.raises(cio.ContainerError, match="CRC"):
        cio.decode_container(bad)
    flipped = bytearray(data)
    flipped[20] ^= 0xFF
    with pytest.raises(cio.ContainerError):
        cio.decode_container(bytes(flipped))
    with pytest.raises(cio.ContainerError):
        cio.decode_container(b"NOPE" + bytes(30))
    assert issubclass(cio.ContainerError, OSError)


# ------------------------------------------------------------------- config
def test_minimal_file_gets_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"scenario": {"M": 3}}))
    cfg = cio.load_config(p)
    assert cfg.scenario.M == 3 and cfg.scenario.N_T == ScenarioConfig().N_T
    assert cfg.train == TrainConfig() and cfg.split == 0.85
    p.write_text("{}")
    assert cio.load_config(p) == cio.ExperimentConfig()


def test_unknown_key_is_named(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"scenario": {"antennas": 8}}))
    with pytest.raises(cio.ConfigError, match="scenario.antennas"):
        cio.load_config(p)
    p.write_text(json.dumps({"scenario": {"multipath": {"rays_per_cluster": 3, "bogus": 1}}}))
    with pytest.raises(cio.ConfigError, match="bogus"):
        cio.load_config(p)
    with pytest.raises(cio.ConfigError):
        cio.config_from_dict({"schemes": ["MMSE"]})
    with pytest.raises(cio.ConfigError):
        cio.config_from_dict({"scenario": {"N_RF": 9, "N_T": 8}})


def test_reference_scale_config_round_trips(tmp_path):
    cfg = cio.ExperimentConfig(scenario=ScenarioConfig(M=4, N_T=64, N_RF=8, N_U=4, K=16))
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    cio.save_config(cfg, a)
    loaded = cio.load_config(a)
    assert loaded == cfg
    cio.save_config(loaded, b)
    assert a.read_text() == b.read_text()
    assert cio.config_hash(loaded) == cio.config_hash(cfg)


def test_overrides():
    cfg = cio.apply_overrides(cio.ExperimentConfig(), ["scenario.M=3", "train.lr=0.01", "noise_dbw=[-100, -90]"])
    assert cfg.scenario.M == 3 and cfg.train.lr == 0.01
    assert cfg.noise_dbw == (-100.0, -90.0) and cfg.snr_db == ()
    with pytest.raises(cio.ConfigError, match="scenario.nope"):
        cio.apply_overrides(cfg, ["scenario.nope=1"])
    with pytest.raises(cio.ConfigError):
        cio.apply_overrides(cfg, ["just-a-key"])


def test_config_hash_sensitivity():
    a = cio.ExperimentConfig()
    assert cio.config_hash(a) == cio.config_hash(cio.ExperimentConfig())
    assert cio.config_hash(a) != cio.config_hash(a.replace(n_samples=10))
    assert cio.config_hash(a) == cio.config_hash(a.replace(output_dir="elsewhere"))


# --------------------------------------------------------------- pipeline
def test_cb_only_run_trains_nothing(tmp_path):
    cfg = tiny_config(schemes=("CB",))
    res = pl.run_experiment(cfg, tmp_path)
    assert res.train_results == {} and res.models == {}
    assert not list(tmp_path.glob("checkpoint_*"))
    assert set(k[0] for k in res.evaluations) == {"CB"} and len(res.evaluations) == 2
    rows = list(csv.reader(open(tmp_path / "sum_rate.csv")))
    assert rows[0] == ["config_hash", "noise_dBW", "scheme", "mean_sum_rate"]
    assert all(r[0] == res.config_hash for r in rows[1:])


def test_rerun_is_bit_identical(tmp_path):
    cfg = tiny_config(schemes=("ZF", "FULLDEC_HBF", "PARTDEC_FDP"))
    a = pl.run_experiment(cfg, tmp_path / "a")
    b = pl.run_experiment(cfg, tmp_path / "b")
    assert a.files == b.files
    assert {"dataset.cfbf", "ssb.cfbf", "codebook.cfbf", "sum_rate.csv"} <= set(a.files)
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert ma["config_hash"] == a.config_hash and ma["files"] == a.files
    for name in ("sum_rate.csv", "complexity.csv", "user_rates_1.csv"):
        for row in list(csv.reader(open(tmp_path / "a" / name)))[1:]:
            assert row[0] == a.config_hash


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config(schemes=("FULLDEC_HBF",))
    res = pl.run_experiment(cfg, tmp_path)
    model = res.models[("FULLDEC_HBF", 1)]
    loaded, meta = pl.load_checkpoint(tmp_path / "checkpoint_fulldec_hbf_1.cfbf")
    assert meta["config_hash"] == res.config_hash
    x = np.random.default_rng(1).standard_normal((4, 2, 2, 4))
    for (r1, p1), (r2, p2) in zip(model.forward(x), loaded.forward(x)):
        assert r1.data.tobytes() == r2.data.tobytes() and p1.data.tobytes() == p2.data.tobytes()


def test_output_lock(tmp_path):
    (tmp_path / ".cfbeam.lock").write_text("other")
    with pytest.raises(cio.ContainerError, match="lock"):
        pl.run_experiment(tiny_config(schemes=("CB",)), tmp_path)
    (tmp_path / ".cfbeam.lock").unlink()
    pl.run_experiment(tiny_config(schemes=("CB",)), tmp_path)
    assert not (tmp_path / ".cfbeam.lock").exists()


# --------------------------------------------------------------------- CLI
@pytest.mark.filterwarnings("ignore:overflow")
def test_cli_exit_codes(tmp_path, capsys):
    cfgp = write_config(tmp_path / "c.json", tiny_config(schemes=("CB",)))
    assert cli.main(["signaling-report", "--config", cfgp, "--out-dir", str(tmp_path)]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert cli.main(["compare", "--config", str(bad)]) == 2
    assert cli.main(["compare", "--config", cfgp, "--set", "train.lr=-1"]) == 2
    assert cli.main(["compare", "--config", str(tmp_path / "missing.json")]) == 4
    # a huge learning rate overflows the first update
    assert cli.main(["train", "--config", cfgp, "--scheme", "FULLDEC_FDP", "--out-dir", str(tmp_path),
                     "--set", "train.lr=1e306", "--epochs", "3"]) == 3
    err = capsys.readouterr().err
    assert "config error" in err and "I/O error" in err and "numerical error" in err


def test_cli_subcommands_smoke(tmp_path, capsys):
    cfgp = write_config(tmp_path / "c.json", tiny_config())
    out = str(tmp_path / "o")
    run = lambda *a: cli.main([a[0], "--config", cfgp, "--out-dir", out, *a[1:]])
    assert run("generate-channels") == 0
    ds = str(tmp_path / "o" / "dataset.cfbf")
    assert run("design-codebook", "--dataset", ds) == 0
    cb = str(tmp_path / "o" / "codebook.cfbf")
    assert run("train", "--dataset", ds, "--codebook", cb, "--scheme", "PARTDEC_HBF") == 0
    ck = str(tmp_path / "o" / "checkpoint_partdec_hbf_1.cfbf")
    assert run("evaluate", "--dataset", ds, "--checkpoint", ck) == 0
    assert run("compare", "--dataset", ds, "--schemes", "CB,zf") == 0
    assert run("complexity-report") == 0
    assert run("signaling-report") == 0
    assert run("run", "--schemes", "CB,FULLDEC_FDP", "--noise-dbw=-110,-95") == 0
    text = capsys.readouterr().out
    assert "sizes" in text and "best epoch" in text
    rows = list(csv.reader(open(tmp_path / "o" / "compare.csv")))
    assert {r[2] for r in rows[1:]} == {"CB", "ZF"}
    ev = list(csv.reader(open(tmp_path / "o" / "evaluate.csv")))
    assert len(ev) == 3
    sub = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert [p["noise_dBW"] for p in sub["sweep"]] == [-110.0, -95.0]
    cx = list(csv.reader(open(tmp_path / "o" / "complexity.csv")))
    assert cx[0][:2] == ["config_hash", "scheme"]


def test_cli_flag_precedence(tmp_path):
    cfgp = write_config(tmp_path / "c.json", tiny_config(n_samples=50))
    args = cli.build_parser().parse_args(["run", "--config", cfgp, "--set", "n_samples=70", "--n-samples", "90"])
    assert cli._config(args).n_samples == 90
    args = cli.build_parser().parse_args(["run", "--config", cfgp, "--set", "n_samples=70"])
    assert cli._config(args).n_samples == 70
