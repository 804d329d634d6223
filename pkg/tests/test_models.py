import numpy as np
import pytest

from cfbeam import metrics as mt
from cfbeam import precoding as pc
from cfbeam.models import architectures as ar
from cfbeam.models import losses as ls
from cfbeam.models import training as tr
from cfbeam.neural import layers as L
from cfbeam.neural import tensor as T

from oracles import brute_force_hbf, crandn, fd_check

SMALL = ar.ArchConfig(conv_channels=(3,), local_widths=(8,), trunk_width=12, head_width=8, dropout=0.0)


def random_books(rng, sizes, n_t, n_rf):
    return [pc.ALPHABET[rng.integers(0, 4, (s, n_t, n_rf))] for s in sizes]


def hbf_inputs(rng, B=3, M=2, n_t=4, n_rf=2, n_u=2, sizes=(3, 3)):
    g = crandn(rng, B, n_u, M, n_t) * 2
    books = random_books(rng, sizes, n_t, n_rf)
    W = crandn(rng, B, M, n_rf, n_u)
    logits = [rng.standard_normal((B, s)) for s in sizes]
    return g, books, W, logits


def softmax_np(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def call_loss_hbf(probs, W, g, books):
    M = g.shape[2]
    return ls.loss_hbf([T.as_tensor(p) for p in probs], [T.Tensor(W[:, m].real) for m in range(M)],
                       [T.Tensor(W[:, m].imag) for m in range(M)], g, books).item()


# ---------------------------------------------------------------- loss_hbf
def test_loss_hbf_degenerate_single_codeword():
    rng = np.random.default_rng(0)
    g, books, W, _ = hbf_inputs(rng, M=1, sizes=(1,))
    probs = [np.ones((3, 1))]
    A = books[0][None].repeat(3, axis=0)
    pre = pc.normalize_power(pc.HbfPrecoder(A, W), 1.0)
    expected = -np.mean(mt.sum_rate(mt.sinr_hbf(g, pre.A, pre.W, 1.0)))
    assert call_loss_hbf(probs, W, g, books) == pytest.approx(expected, rel=1e-12)


def test_loss_hbf_one_hot_gives_selected_tuple():
    rng = np.random.default_rng(1)
    g, books, W, _ = hbf_inputs(rng)
    pick = (2, 0)
    probs = [np.eye(3)[[pick[m]] * 3] for m in range(2)]
    A = np.stack([books[m][pick[m]] for m in range(2)])[None].repeat(3, axis=0)
    pre = pc.normalize_power(pc.HbfPrecoder(A, W), 1.0)
    expected = -np.mean(mt.sum_rate(mt.sinr_hbf(g, pre.A, pre.W, 1.0)))
    assert call_loss_hbf(probs, W, g, books) == pytest.approx(expected, rel=1e-12)


def test_loss_hbf_matches_brute_force_enumeration():
    rng = np.random.default_rng(2)
    g, books, W, logits = hbf_inputs(rng)
    probs = [softmax_np(z) for z in logits]
    got = call_loss_hbf(probs, W, g, books)
    assert got == pytest.approx(brute_force_hbf(probs, W, g, books), rel=1e-10)


def test_loss_hbf_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    g, books, W, logits = hbf_inputs(rng, B=2)
    wr = [T.parameter(W[:, m].real) for m in range(2)]
    wi = [T.parameter(W[:, m].imag) for m in range(2)]
    zs = [T.parameter(z) for z in logits]
    params = {f"{k}{m}": t for k, ts in (("wr", wr), ("wi", wi), ("z", zs)) for m, t in enumerate(ts)}

    def f():
        return ls.loss_hbf([T.softmax(z) for z in zs], wr, wi, g, books)

    assert fd_check(f, params) < 1e-4


def test_loss_hbf_expected_rate_bound():
    rng = np.random.default_rng(4)
    g, books, W, logits = hbf_inputs(rng, B=1)
    probs = [softmax_np(z) for z in logits]
    rates = ls.hbf_tuple_rates([W[:, m].real for m in range(2)], [W[:, m].imag for m in range(2)], g, books).data[0]
    best = np.argmax(rates)
    assert call_loss_hbf(probs, W, g, books) > -rates[best]
    idx = ls.tuple_index([3, 3])[best]
    onehot = [np.eye(3)[[idx[m]]] for m in range(2)]
    assert call_loss_hbf(onehot, W, g, books) == pytest.approx(-rates[best], rel=1e-12)


def test_loss_hbf_cap_and_modes():
    with pytest.raises(ls.EnumerationCapError, match="sampled"):
        ls.tuple_index([300, 300])
    rng = np.random.default_rng(5)
    g, books, W, logits = hbf_inputs(rng)
    probs = [T.Tensor(softmax_np(z)) for z in logits]
    wr = [W[:, m].real for m in range(2)]
    wi = [W[:, m].imag for m in range(2)]
    with pytest.raises(ValueError):
        ls.loss_hbf(probs, wr, wi, g, books, mode="sampled")
    with pytest.raises(ValueError):
        ls.loss_hbf(probs, wr, wi, g, books, mode="other")
    # the sampled surrogate's value is a Monte Carlo estimate of the exact loss
    exact = ls.loss_hbf(probs, wr, wi, g, books).item()
    draws = [ls.loss_hbf(probs, wr, wi, g, books, mode="sampled", rng=np.random.default_rng(k),
                         n_samples=64).item() for k in range(40)]
    assert abs(np.mean(draws) - exact) < 4 * np.std(draws) / np.sqrt(len(draws)) + 1e-12


# ---------------------------------------------------------------- loss_fdp
def test_loss_fdp_zf_injected():
    rng = np.random.default_rng(6)
    h = crandn(rng, 5, 2, 2, 4)
    U = pc.zero_forcing(h).U
    got = ls.loss_fdp(T.Tensor(U.real), T.Tensor(U.imag), h / np.sqrt(0.1)).item()
    assert got == pytest.approx(-np.mean(mt.sum_rate(mt.sinr_fdp(h, U, 0.1))), rel=1e-12)


def test_loss_fdp_rejects_zero_precoder():
    with pytest.raises(ValueError):
        ls.loss_fdp(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 2, 2))), np.ones((1, 2, 1, 2)))


def test_loss_fdp_random_matches_metrics():
    rng = np.random.default_rng(7)
    h = crandn(rng, 6, 3, 2, 4)
    U = crandn(rng, 6, 2, 4, 3)
    Un = pc.normalize_power(pc.FdpPrecoder(U), 2.0).U
    got = ls.loss_fdp(T.Tensor(U.real), T.Tensor(U.imag), h / np.sqrt(0.5), p_max=2.0).item()
    assert abs(got + np.mean(mt.sum_rate(mt.sinr_fdp(h, Un, 0.5)))) < 1e-12 * max(1.0, abs(got))


# ---------------------------------------------------------------- training
def tiny_problem(variant="fdp", kind="fulldec", S=40, M=2, n_t=4, n_rf=2, n_u=2, K=3, seed=0):
    rng = np.random.default_rng(seed)
    h = crandn(rng, S, n_u, M, n_t)
    codes = rng.integers(0, 256, (S, n_u, M, K))
    sizes = [3] * M if variant == "hbf" else None
    model = ar.build_model(kind, variant, M, n_t, n_rf, n_u, K, sizes, SMALL, seed)
    model.input_stats = tr.input_statistics(codes)
    x = tr.features(model, codes)
    books = random_books(rng, [3] * M, n_t, n_rf) if variant == "hbf" else None
    return model, x, h, books


def test_lr_zero_leaves_parameters_unchanged():
    model, x, h, books = tiny_problem("hbf")
    before, _ = model.state()
    cfg = tr.TrainConfig(batch_size=16, lr=0.0, weight_decay=1e-3, epochs=1)
    tr.train(model, x, h, 0.5, cfg, np.arange(30), np.arange(30, 40), books)
    after, _ = model.state()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_single_sample_overfit_is_monotone_over_windows():
    model, x, h, _ = tiny_problem("fdp", S=1)
    cfg = tr.TrainConfig(batch_size=1, lr=1e-3, weight_decay=0.0, epochs=200, patience=10_000)
    res = tr.train(model, x, h, 0.5, cfg, [0], [])
    rates = np.array([r["train_sum_rate"] for r in res.curve])
    assert len(rates) == 200
    windows = rates.reshape(10, 20).mean(axis=1)
    assert np.all(np.diff(windows) >= 0)
    assert windows[-1] > windows[0]


def test_divergence_is_reported():
    model, x, h, _ = tiny_problem("fdp")
    next(iter(model.named_params().values())).data[...] = np.nan
    with pytest.raises(tr.TrainingDivergedError):
        tr.train(model, x, h, 0.5, tr.TrainConfig(batch_size=16, epochs=1), np.arange(30), np.arange(30, 40))
    assert issubclass(tr.TrainingDivergedError, FloatingPointError)


def test_training_improves_and_checkpoints_best():
    model, x, h, books = tiny_problem("hbf", S=80)
    cfg = tr.TrainConfig(batch_size=20, lr=1e-2, epochs=15)
    res = tr.train(model, x, h, 0.5, cfg, np.arange(60), np.arange(60, 80), books)
    tests = [r["test_sum_rate"] for r in res.curve]
    assert res.best_test_sum_rate == max(tests) and tests[res.best_epoch] == max(tests)
    now = np.mean(tr.deployed_sum_rate(model, x[60:], h[60:], 0.5, books))
    assert now == pytest.approx(res.best_test_sum_rate, rel=1e-12)


# -------------------------------------------------------------- deployment
@pytest.mark.parametrize("variant", ["fdp", "hbf"])
def test_fulldec_locality(variant):
    model, x, h, books = tiny_problem(variant)
    ref = tr.infer_fulldec(model, 0, x[:, 0])
    x2 = x.copy()
    x2[:, 1] += np.random.default_rng(9).standard_normal(x2[:, 1].shape)
    out = model.forward(x2)
    assert out[0][0].data.tobytes() == ref["raw"].tobytes()
    assert ref["fronthaul"] == 0


def test_fulldec_one_hot_classifier_selects_that_codeword():
    model, x, h, books = tiny_problem("hbf")
    cls = model.nets[1].heads.cls
    cls.params["weight"].data[...] = 0.0
    cls.params["bias"].data[...] = [0.0, 0.0, 60.0]
    assert np.all(tr.infer_fulldec(model, 1, x[:, 1])["codeword"] == 2)
    cls.params["bias"].data[...] = [5.0, 5.0, 0.0]
    assert np.all(tr.infer_fulldec(model, 1, x[:, 1])["codeword"] == 0)  # lowest index on ties


@pytest.mark.parametrize("variant", ["fdp", "hbf"])
def test_fulldec_assembly_matches_centralized(variant):
    model, x, h, books = tiny_problem(variant)
    parts = [tr.infer_fulldec(model, m, x[:, m]) for m in range(model.M)]
    W = np.stack([p["coefficients"] for p in parts], axis=1)
    if variant == "fdp":
        U = W
    else:
        A = np.stack([books[m][parts[m]["codeword"]] for m in range(model.M)], axis=1)
        U = A @ W
    U = U * np.sqrt(1.0 / np.sum(np.abs(U) ** 2, axis=(1, 2, 3), keepdims=True))
    local = mt.sum_rate(mt.sinr_fdp(h, U, 0.5))
    np.testing.assert_allclose(local, tr.deployed_sum_rate(model, x, h, 0.5, books), rtol=1e-12)


@pytest.mark.parametrize("variant", ["fdp", "hbf"])
def test_partdec_split_equals_monolithic(variant):
    model, x, h, books = tiny_problem(variant, kind="partdec")
    split = tr.infer_partdec(model, x)
    for m in range(model.M):
        mono = L.Sequential(model.trunk.layers + model.nc_heads[m].layers + model.ap_bodies[m].layers)
        reg, p = model.ap_heads[m](mono(x))
        np.testing.assert_allclose(split["outputs"][m][0], reg.data, rtol=1e-12, atol=1e-12)
        if variant == "hbf":
            np.testing.assert_allclose(split["outputs"][m][1], p.data, rtol=1e-12, atol=1e-12)
        assert split["payloads"][m].shape == (len(x), ar.PARTDEC_BOTTLENECK)


@pytest.mark.parametrize("dims", [(1, 4, 2, 2, 3), (3, 8, 2, 3, 2), (2, 6, 3, 1, 4)])
def test_partdec_downlink_independent_of_dimensions(dims):
    M, n_t, n_rf, n_u, K = dims
    model = ar.PartDeCModel("fdp", M, n_t, n_rf, n_u, K, arch=SMALL)
    x = np.random.default_rng(10).standard_normal((2, M, n_u, K))
    rep = tr.infer_partdec(model, x)["signaling"]
    assert rep.down_count == 200 * M and rep.up_count == K * M * n_u


def test_partdec_signaling_reference_dimensions():
    model = ar.PartDeCModel("hbf", 4, 64, 8, 4, 16, [2] * 4, arch=SMALL)
    rep = tr.infer_partdec(model, np.zeros((1, 4, 4, 16)))["signaling"]
    assert (rep.up_count, rep.down_count) == (256, 800)


# -------------------------------------------------------------- evaluation
def test_evaluate_empty_sweep():
    assert tr.evaluate(lambda s2: None, np.zeros((1, 1, 1, 2)), []) == []


def test_zf_sum_rate_non_decreasing_as_noise_falls():
    rng = np.random.default_rng(11)
    h = crandn(rng, 30, 2, 2, 4)
    ev = tr.evaluate(lambda s2: pc.zero_forcing(h), h, [10.0, 1.0, 0.1, 1e-3], "ZF")
    rates = [e.mean_sum_rate for e in ev]
    assert np.all(np.diff(rates) >= 0)
    assert ev[0].scheme == "ZF" and len(ev[0].reports()) == 30


@pytest.mark.parametrize("kind, variant", [("fulldec", "fdp"), ("fulldec", "hbf"), ("partdec", "fdp"),
                                           ("partdec", "hbf")])
def test_emitted_precoders_meet_power_budget(kind, variant):
    model, x, h, books = tiny_problem(variant, kind=kind)
    pre = tr.predict(model, x, books, p_max=3.0)
    np.testing.assert_allclose(np.sum(np.abs(pre.digital()) ** 2, axis=(1, 2, 3)), 3.0, rtol=1e-9)
    if variant == "hbf":
        assert pc.in_alphabet(pre.A)
