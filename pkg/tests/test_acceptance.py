"""Acceptance suite: one PASS/FAIL line per criterion, collected in ACCEPTANCE.

The lines are printed as each test finishes (visible with ``-s``) and again in
the terminal summary by the hook in conftest.
"""

import time

import numpy as np
import pytest

from eikfnet import numeric as nm
from eikfnet.cli import main
from eikfnet.config import RunConfig, save_config
from eikfnet.data import (generate_synthetic, invert_scaler, normalized_adjacency, plant_structures,
                          save_distances, save_series)
from eikfnet.graph_repr import gcn_apply, init_tgcn, tgcn_unroll
from eikfnet.hg_infer import edge_probabilities, gumbel_noise, gumbel_sample, init_embeddings, pairwise_similarity
from eikfnet.hg_repr import (fuse_hgat_hgt, hgat_edge_agg, hgat_forward, hgt_forward, init_hg_fusion, init_hgat,
                             init_hgt)
from eikfnet.model import EIKFNet
from eikfnet.numeric import Tensor
from eikfnet.pipeline import build_model, observation_mask, prepare_data
from eikfnet.projection import gln_forward, init_projection
from eikfnet.temporal import VAR_FLOOR, init_fusion, init_head, moe_fuse, uncertainty_head
from eikfnet.training import (Adam, compute_metrics, evaluate, gaussian_nll, ha_baseline, mae_loss,
                              train_loop)

from test_graph_repr import plain_gru, random_graph
from test_hg_repr import brute_hgat, random_incidence
from test_hg_infer import gumbel_max_oracle

ACCEPTANCE: dict[int, str] = {}

pytestmark = pytest.mark.slow


def record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


# --- shared training runs -----------------------------------------------------
_RUNS: dict = {}


@pytest.fixture(scope="module")
def planted_data():
    dist, adjacency, incidence = plant_structures(12, 3, seed=0)
    syn = generate_synthetic(12, 2000, adjacency, incidence, seed=0)
    return dist, syn


def trained(planted_data, **overrides):
    """Train the default configuration with dotted overrides; cached per key."""
    key = tuple(sorted(overrides.items()))
    if key not in _RUNS:
        dist, syn = planted_data
        cfg = RunConfig()
        for path, value in overrides.items():
            section, name = path.split(".")
            setattr(getattr(cfg, section), name, value)
        start = time.perf_counter()
        data = prepare_data(cfg, syn.series, dist)
        model = build_model(cfg, data)
        result = train_loop(model, data, cfg.train)
        elapsed = time.perf_counter() - start
        _RUNS[key] = (cfg, data, model, result, evaluate(model, data.test, data.scaler), elapsed)
    return _RUNS[key]


# --- 1 ------------------------------------------------------------------------
def gradient_cases():
    """(name, loss closure, parameters, stencil order) on instances within the size limits."""
    rng = np.random.default_rng(100)
    n, m, d, tau, ups = 6, 3, 4, 4, 3
    cases = []

    x = Tensor(rng.standard_normal((n, 5)), requires_grad=True)
    w = Tensor(rng.uniform(0, 1, (n, 5)), requires_grad=True)
    c = rng.standard_normal((n, 5))
    cases.append(("numeric.softmax", lambda: (nm.softmax(x, -1, weights=w) * c).sum(), [x, w], 2))
    y = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    cy = rng.standard_normal((n, d))
    cases.append(("numeric.layer_norm", lambda: (nm.layer_norm(y) * cy).sum(), [y], 2))

    pp = init_projection(rng, tau, d)
    hist = rng.standard_normal((2, n, tau))
    cp = rng.standard_normal((2, n, d))
    cases.append(("projection", lambda: (gln_forward(hist, pp) * cp).sum(), list(pp.values()), 2))

    emb = init_embeddings(rng, n, m, d)
    noise = gumbel_noise(rng, (n, m, 2))
    ci = rng.standard_normal((n, m))

    def infer():
        P = edge_probabilities(pairwise_similarity(emb["hg.node_emb"], emb["hg.edge_emb"]))
        return (gumbel_sample(P, 0.5, noise=noise, straight_through=False).value * ci).sum()

    cases.append(("hg_infer", infer, list(emb.values()), 2))

    xh = Tensor(rng.standard_normal((2, n, d)), requires_grad=True)
    inc = Tensor(rng.uniform(0.2, 1.0, (n, m)), requires_grad=True)
    ph = init_hgat(rng, d, 2)
    ph.update(init_hgt(rng, d, 2))
    ph.update(init_hg_fusion(rng, d))
    ch = rng.standard_normal((2, n, d))

    def hg():
        return (fuse_hgat_hgt(hgt_forward(xh, ph, 2), hgat_forward(xh, inc, ph, heads=2), ph) * ch).sum()

    cases.append(("hg_repr", hg, [xh, inc] + list(ph.values()), 2))

    pg = init_tgcn(rng, 2, d)
    a_hat = normalized_adjacency(random_graph(rng, n))
    mask = (rng.random((2, n, tau)) > 0.3).astype(float)
    cases.append(("graph_repr", lambda: (tgcn_unroll(hist, pg, a_hat, mask) * cp).sum(), list(pg.values()), 2))

    pt = init_head(rng, d, ups, uncertainty=True)
    pt.update(init_fusion(rng, d))
    a = Tensor(rng.standard_normal((2, n, d)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, n, d)), requires_grad=True)
    ct = rng.standard_normal((2, n, ups))

    def temporal():
        mu, var = uncertainty_head(moe_fuse(a, b, pt), pt)
        return (mu * ct).sum() + nm.log(var).sum()

    cases.append(("temporal", temporal, [a, b] + list(pt.values()), 2))

    target = rng.standard_normal((2, n, ups))
    mu = Tensor(rng.standard_normal((2, n, ups)), requires_grad=True)
    var = Tensor(rng.uniform(0.5, 2.0, (2, n, ups)), requires_grad=True)
    cases.append(("training.mae_loss", lambda: mae_loss(target, mu), [mu], 2))
    cases.append(("training.gaussian_nll", lambda: gaussian_nll(target, mu, var), [mu, var], 2))

    from eikfnet.config import ModelConfig
    ring = np.roll(np.eye(n), 1, axis=1)
    model = EIKFNet(ModelConfig(d=d, num_hyperedges=m, hgt_heads=2, attn_dropout=0.0, uncertainty=True),
                    n, tau, ups, ring + ring.T, seed=0)
    mnoise = gumbel_noise(rng, (n, m, 2))

    def full():
        s = gumbel_sample(model.edge_probs(), model.cfg.gamma, noise=mnoise, straight_through=False)
        out = model.forward(hist, train=True, incidence=s)
        return gaussian_nll(target, out.mean, out.var)

    # composite gradients reach ~1e-9 in places, below what a 2-point stencil resolves
    cases.append(("model (full forward)", full, list(model.params.values()), 4))
    return cases


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    errors = {name: nm.gradient_check(f, params, h=1e-4 if order == 4 else 1e-5, order=order)
              for name, f, params, order in gradient_cases()}
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = max(errors.values()) < 1e-4 and elapsed < 60
    record(1, ok, f"max rel err {errors[worst]:.2e} ({worst}) over {len(errors)} modules/ops, {elapsed:.1f} s")
    assert ok, errors


# --- 2 ------------------------------------------------------------------------
def test_criterion_2_oracle_equivalences():
    rng = np.random.default_rng(200)
    n, tau, d = 6, 4, 4
    gru_err = 0.0
    for _ in range(5):
        hist = rng.standard_normal((n, tau))
        p = init_tgcn(rng, 1, d)
        out = tgcn_unroll(hist, p, normalized_adjacency(np.zeros((n, n)))).data
        for i in range(n):
            ref = plain_gru([np.array([hist[i, s]]) for s in range(tau)], p)
            gru_err = max(gru_err, np.abs(out[i] - ref).max())

    hgat_err = 0.0
    for heads in (1, 2, 1, 2, 1):
        x = rng.standard_normal((6, d))
        inc = random_incidence(rng, 6, 4)
        p = init_hgat(rng, d, heads)
        edges, nodes = brute_hgat(x, inc, p, heads)
        hgat_err = max(hgat_err, np.abs(hgat_edge_agg(x, inc, p, heads).data - edges).max(),
                       np.abs(hgat_forward(x, inc, p, heads).data - nodes).max())

    gcn_err = 0.0
    for _ in range(5):
        a = random_graph(rng, n)
        x, w = rng.standard_normal((n, 3)), rng.standard_normal((3, d))
        deg = a.sum(1) + 1
        dense = np.zeros((n, d))
        for i in range(n):
            for j in range(n):
                aij = a[i, j] + (i == j)
                dense[i] += aij / np.sqrt(deg[i] * deg[j]) * (x[j] @ w)
        gcn_err = max(gcn_err, np.abs(gcn_apply(x, normalized_adjacency(a), w).data - dense).max())

    ok = max(gru_err, hgat_err, gcn_err) <= 1e-12
    record(2, ok, f"T-GCN vs GRU {gru_err:.1e}, HgAT vs loops {hgat_err:.1e}, GCN vs dense {gcn_err:.1e} (tol 1e-12)")
    assert ok


# --- 3 ------------------------------------------------------------------------
def test_criterion_3_gumbel_statistics():
    rng = np.random.default_rng(300)
    emb = init_embeddings(rng, 6, 3, 4)
    P = edge_probabilities(pairwise_similarity(emb["hg.node_emb"], emb["hg.edge_emb"])).data
    draws = 100_000
    hard = gumbel_sample(np.broadcast_to(P, (draws,) + P.shape), 0.05, rng=np.random.default_rng(301)).hard
    freq = hard.mean(axis=0)
    oracle_rng = np.random.default_rng(302)
    mc = np.array([[gumbel_max_oracle(P[i, j, 0], P[i, j, 1], draws, oracle_rng) for j in range(3)]
                   for i in range(6)])
    freq_err = max(np.abs(freq - mc).max(), np.abs(freq - sig(P[..., 0] - P[..., 1])).max())

    # literal reading: every soft sample at gamma=0.001 within 0.001 of 0 or 1
    soft = gumbel_sample(np.broadcast_to(P, (draws,) + P.shape), 0.001,
                         rng=np.random.default_rng(303)).soft.data
    near = np.minimum(soft, 1.0 - soft) <= 0.001
    a = 0.001 * np.log(999.0)
    expected_off = (sig(a - (P[..., 0] - P[..., 1])) - sig(-a - (P[..., 0] - P[..., 1]))).mean()

    with nm.no_grad():
        e1 = gumbel_sample(P, mode="eval").hard
        e2 = gumbel_sample(P, mode="eval", rng=np.random.default_rng(9)).hard
    deterministic = np.array_equal(e1, e2)

    ok = freq_err <= 0.01 and near.all() and deterministic
    record(3, ok, f"hard freq err {freq_err:.4f} (tol 0.01); gamma=0.001 soft within 0.001 of {{0,1}}: "
                  f"{near.mean():.5f} of {near.size} (closed-form miss rate {expected_off:.5f}); "
                  f"eval deterministic {deterministic}")
    assert ok


# --- 4 ------------------------------------------------------------------------
def test_criterion_4_attention_and_normalisation_invariants():
    rng = np.random.default_rng(400)
    n, m, d = 6, 3, 4
    row_err = 0.0
    for _ in range(10):
        x = rng.standard_normal((2, n, d)) * 3
        inc = random_incidence(rng, n, m)
        p = init_hgat(rng, d, 2)
        p.update(init_hgt(rng, d, 2))
        rec = []
        hgat_forward(x, inc, p, heads=2, record=rec)
        hgt_forward(x, p, 2, record=rec)
        for _, w, support in rec:
            rows = w.sum(axis=-1)
            if support is not None:
                rows = rows[..., support.any(axis=-1)]
            row_err = max(row_err, np.abs(rows - 1.0).max())

    y = rng.uniform(-1, 1, (200, 8))
    ln = nm.layer_norm(Tensor(y)).data
    var = y.var(axis=-1)
    ln_mean = np.abs(ln.mean(axis=-1)).max()
    ln_var = np.abs(ln.var(axis=-1) - var / (var + nm.LN_EPS)).max()
    ln_unit = np.abs(nm.layer_norm(Tensor(y * 1e3)).data.var(axis=-1) - 1.0).max()

    eq_err, bitwise, trials = 0.0, 0, 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = r.standard_normal((n, d))
        inc = random_incidence(r, n, m)
        p = init_hgat(r, d)
        p.update(init_hgt(r, d, 2))
        p.update(init_hg_fusion(r, d))
        pg = init_tgcn(r, 1, d)
        a = random_graph(r, n)
        hist = r.standard_normal((n, 4))
        perm = r.permutation(n)

        def hg(xx, ii):
            return fuse_hgat_hgt(hgt_forward(xx, p, 2), hgat_forward(xx, ii, p), p).data

        pairs = [(hg(x[perm], inc[perm]), hg(x, inc)[perm]),
                 (tgcn_unroll(hist[perm], pg, normalized_adjacency(a[np.ix_(perm, perm)])).data,
                  tgcn_unroll(hist, pg, normalized_adjacency(a)).data[perm])]
        for got, want in pairs:
            trials += 1
            bitwise += np.array_equal(got, want)
            eq_err = max(eq_err, np.abs(got - want).max())

    ok = row_err <= 1e-12 and ln_mean <= 1e-10 and ln_var <= 1e-12 and ln_unit <= 1e-8 and eq_err <= 1e-12
    record(4, ok, f"attention rows |sum-1| {row_err:.1e}; layer norm mean {ln_mean:.1e}, var contract "
                  f"{ln_var:.1e}; permutation equivariance max dev {eq_err:.1e} (tol 1e-12, "
                  f"bitwise in {bitwise}/{trials})")
    assert ok


# --- 5 ------------------------------------------------------------------------
def test_criterion_5_uncertainty_recovers_mle():
    rng = np.random.default_rng(500)
    data = rng.normal(-2.0, 0.7, 800)
    mu = Tensor(np.zeros(1), requires_grad=True)
    raw = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam({"mu": mu, "raw": raw}, lr=0.05)
    floor_ok = True
    for _ in range(3000):
        var = nm.softplus(raw) + VAR_FLOOR
        floor_ok &= bool(np.all(var.data >= VAR_FLOOR))
        g = nm.backward(gaussian_nll(data, nm.broadcast(mu, data.shape), nm.broadcast(var, data.shape)))
        opt.step({"mu": g[mu], "raw": g[raw]})
    var = float(nm.softplus(raw).data[0] + VAR_FLOOR)
    mean_rel = abs(mu.data[0] - data.mean()) / abs(data.mean())
    var_rel = abs(var - data.var()) / data.var()

    p = init_head(rng, 4, 3, uncertainty=True)
    p["head.bvar"].data[:] = -1e4
    _, v = uncertainty_head(rng.standard_normal((50, 4)) * 100, p)
    floor_ok &= bool(np.all(v.data >= VAR_FLOOR))

    ok = mean_rel <= 0.01 and var_rel <= 0.01 and floor_ok
    record(5, ok, f"mean rel err {mean_rel:.1e}, biased variance rel err {var_rel:.1e} (tol 1e-2); "
                  f"variance floor held {floor_ok}")
    assert ok


# --- 6 ------------------------------------------------------------------------
def test_criterion_6_beats_historical_average(planted_data):
    cfg, data, model, result, report, elapsed = trained(planted_data)
    truth = invert_scaler(data.test.target, data.scaler, axis=-2)
    ha = invert_scaler(ha_baseline(data.test.history, cfg.data.upsilon, data.test.history_mask),
                       data.scaler, axis=-2)
    ha_mae = compute_metrics(truth, ha, data.test.target_mask).overall.mae
    gain = 1.0 - report.mae / ha_mae
    ok = gain >= 0.2 and elapsed < 15 * 60 and len(result.history) <= 30
    record(6, ok, f"test MAE {report.mae:.4f} vs HA {ha_mae:.4f} ({gain:.1%} lower, need 20%); "
                  f"{len(result.history)} epochs in {elapsed:.0f} s")
    assert ok


# --- 7 ------------------------------------------------------------------------
RATES = [0.0, 0.1, 0.3, 0.5]


def test_criterion_7_missingness_trend(planted_data):
    dist, syn = planted_data
    parts, ok = [], True
    for scheme in ("point", "block"):
        maes, realised = [], []
        for rate in RATES:
            overrides = {} if rate == 0 else {"missing.scheme": scheme, "missing.rate": rate}
            cfg, *_, report, _ = trained(planted_data, **overrides)
            mask = observation_mask(cfg, syn.series)
            realised.append(0.0 if mask is None else 1.0 - mask.mean())
            maes.append(report.mae)
        monotone = all(b >= a * (1 - 0.02) for a, b in zip(maes, maes[1:]))
        rates_ok = all(abs(r - t) <= 0.02 for r, t in zip(realised, RATES))
        ok &= monotone and rates_ok
        parts.append(f"{scheme}: MAE " + "/".join(f"{v:.3f}" for v in maes)
                     + " rates " + "/".join(f"{v:.3f}" for v in realised))
    record(7, ok, "; ".join(parts) + " (2% band, rate tol 0.02)")
    assert ok


# --- 8 ------------------------------------------------------------------------
def test_criterion_8_spatial_matters_more_than_temporal(planted_data):
    full = trained(planted_data)[4].mae
    no_spatial = trained(planted_data, **{"model.enable_spatial": False})[4].mae
    no_temporal = trained(planted_data, **{"model.enable_temporal": False})[4].mae
    ok = no_spatial - full > no_temporal - full
    record(8, ok, f"full {full:.4f}; w/o spatial +{no_spatial - full:.4f}; w/o temporal "
                  f"{no_temporal - full:+.4f}")
    assert ok


# --- 9 ------------------------------------------------------------------------
def test_criterion_9_cmd_train_is_deterministic(tmp_path, planted_data):
    dist, syn = planted_data
    save_series(tmp_path / "series.csv", syn.series)
    save_distances(tmp_path / "distances.csv", syn.series.sensor_ids, dist)
    cfg = RunConfig()
    cfg.data.series_path, cfg.data.distance_path = "series.csv", "distances.csv"
    cfg.train.epochs, cfg.train.seed = 3, 11
    save_config(tmp_path / "config.json", cfg)
    codes = [main(["train", "--config", str(tmp_path / "config.json"), "--out", str(tmp_path / name)])
             for name in ("a", "b")]
    same_log = (tmp_path / "a" / "epochs.csv").read_bytes() == (tmp_path / "b" / "epochs.csv").read_bytes()
    same_ck = (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
    ok = codes == [0, 0] and same_log and same_ck
    record(9, ok, f"exit codes {codes}; epoch logs identical {same_log}; checkpoints identical {same_ck}")
    assert ok
