"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line (see ``acceptance_log``) that is
repeated in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from acceptance_log import record
from htnet import metrics
from htnet.checkpoint import checkpoint_bytes, parse_checkpoint
from htnet.cli import main
from htnet.config import synth_run_config
from htnet.evaluation import loso_split
from htnet.features import FlowField, compute_flow, compute_strain
from htnet.features.apex import histogram_correlation, roi_histogram, spot_apex, Rect
from htnet.features.composite import CompositeFlowMap, flow_file_bytes, parse_flow_bytes
from htnet.gradcheck import check_gradients
from htnet.model import HTNet, ModelConfig, local_msa, parameter_shapes
from htnet.synth import separable_composites
from htnet.tensor import Tensor, conv2d_3x3, matmul, maxpool2d_3x3
from htnet.training import TrainConfig, accuracy, fit, weighted_cross_entropy
from oracles import attention_loops, conv_loops, matmul_loops, maxpool_loops, metrics_loops
from test_evaluation import check_partition, manifest_from_sizes
from test_features import blob_pair, engineered_peak


def test_c01_full_model_gradient_check():
    rng = np.random.default_rng(2024)
    model = HTNet(ModelConfig(), seed=1)
    x = Tensor(rng.normal(size=(2, 28, 28, 3)))
    labels = [0, 2]
    weights = [0.7, 1.3, 1.0]
    start = time.perf_counter()
    report = check_gradients(
        lambda: weighted_cross_entropy(model(x), labels, weights), model.params, n_probes=50, h=1e-5, rng=rng
    )
    elapsed = time.perf_counter() - start
    ok = len(report.probes) >= 50 and report.max_rel_error < 1e-4 and elapsed < 60
    record(1, "full-model gradient check", ok,
           f"{len(report.probes)} probes, max rel err {report.max_rel_error:.2e}, "
           f"{report.rejected} kink-crossing probes redrawn, {elapsed:.1f}s")
    assert ok


def test_c02_oracle_equivalence():
    rng = np.random.default_rng(7)
    worst = {"matmul": 0.0, "conv": 0.0, "maxpool": 0.0, "attention": 0.0}
    for _ in range(100):
        m, k, n = rng.integers(1, 7, size=3)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        worst["matmul"] = max(worst["matmul"], np.abs(matmul(Tensor(a), Tensor(b)).data - matmul_loops(a, b)).max())

        cin, cout = rng.integers(1, 4, size=2)
        h, w = rng.integers(3, 8, size=2)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        xc, wc, bc = rng.normal(size=(cin, h, w)), rng.normal(size=(cout, cin, 3, 3)), rng.normal(size=cout)
        got = conv2d_3x3(Tensor(xc), Tensor(wc), Tensor(bc), stride, pad).data
        worst["conv"] = max(worst["conv"], np.abs(got - conv_loops(xc, wc, bc, stride, pad)).max())

        got = maxpool2d_3x3(Tensor(xc), stride, pad).data
        worst["maxpool"] = max(worst["maxpool"], np.abs(got - maxpool_loops(xc, stride, pad)[0]).max())

        tokens, heads, hd = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        d = int(rng.integers(2, 7))
        xa = rng.normal(size=(tokens, d))
        p = {"a.wq": rng.normal(size=(d, heads * hd)), "a.wk": rng.normal(size=(d, heads * hd)),
             "a.wv": rng.normal(size=(d, heads * hd)), "a.wo": rng.normal(size=(heads * hd, d))}
        got = local_msa(Tensor(xa), heads, hd, {k: Tensor(v) for k, v in p.items()}, "a").data
        ref = attention_loops(xa, p["a.wq"], p["a.wk"], p["a.wv"], p["a.wo"], heads, hd)
        worst["attention"] = max(worst["attention"], np.abs(got - ref).max())
    ok = max(worst.values()) < 1e-10
    record(2, "loop-oracle equivalence x100 each", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_c03_strain_closed_forms():
    x = np.arange(16.0)[None, :].repeat(12, 0)
    constant = compute_strain(FlowField(np.full_like(x, 1.7), np.full_like(x, -0.4)))
    a, b = -1.35, 0.8
    su = compute_strain(FlowField(a * x, np.zeros_like(x)))[1:-1, 1:-1]
    sv = compute_strain(FlowField(np.zeros_like(x), b * x))[1:-1, 1:-1]
    err_u = np.abs(su - abs(a)).max()
    err_v = np.abs(sv - abs(b) / math.sqrt(2)).max()
    ok = not constant.any() and err_u < 1e-9 and err_v < 1e-9
    record(3, "strain closed forms", ok,
           f"constant max {constant.max():.1e}, |a| err {err_u:.1e}, |b|/sqrt2 err {err_v:.1e}")
    assert ok


def test_c04_apex_spotting():
    rng = np.random.default_rng(11)
    frame = rng.integers(0, 256, size=(32, 32)).astype(float)
    roi = Rect(3, 4, 20, 25)
    d = histogram_correlation(roi_histogram(frame, roi), roi_histogram(frame.copy(), roi))
    hits = 0
    for trial in range(100):
        seq, rois, k = engineered_peak(np.random.default_rng(1000 + trial))
        hits += spot_apex(seq, rois) == k
    ok = abs(d - 1.0) <= 1e-12 and hits == 100
    record(4, "apex spotting", ok, f"identical-frame |d-1| {abs(d - 1):.1e}, engineered peak {hits}/100")
    assert ok


def test_c05_flow_recovery():
    onset, apex, interior = blob_pair(2, 0)
    start = time.perf_counter()
    flow = compute_flow(onset, apex)
    elapsed = time.perf_counter() - start
    mu, mv = flow.u[interior].mean(), flow.v[interior].mean()
    ok = abs(mu - 2.0) <= 0.25 and abs(mv) <= 0.25 and elapsed < 10
    record(5, "blob translation (2, 0)", ok, f"mean u {mu:.4f}, mean v {mv:.4f}, {elapsed:.2f}s")
    assert ok


def test_c06_locality():
    rng = np.random.default_rng(5)
    cfg = ModelConfig()
    params = {k: Tensor(rng.normal(size=s) * 0.2) for k, s in parameter_shapes(cfg).items()}
    model = HTNet(cfg, params)
    worst, changed = 0.0, 0
    for _ in range(20):
        x = rng.normal(size=(1, 28, 28, 3))
        block = int(rng.integers(16))
        r, c = divmod(block, 4)
        y = x.copy()
        rows, cols = rng.integers(0, 7, size=(2, int(rng.integers(1, 20))))
        y[0, 7 * r + rows, 7 * c + cols] += rng.normal(size=(len(rows), 3))
        a, b = model.level_tokens(x, 0).data, model.level_tokens(y, 0).data
        others = [i for i in range(16) if i != block]
        worst = max(worst, np.abs(a[0, others] - b[0, others]).max())
        changed += bool(np.abs(a[0, block] - b[0, block]).max() > 0)
    ok = worst == 0.0 and changed == 20
    record(6, "block locality x20", ok, f"max diff outside block {worst}, perturbed block changed {changed}/20")
    assert ok


def test_c07_metric_oracles():
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(1000):
        cm = rng.integers(0, 40, size=(3, 3))
        cm[np.arange(3), np.arange(3)] += rng.integers(0, 2, size=3)
        cm[cm.sum(axis=1) == 0, 0] = 1
        u, r = metrics_loops(cm.tolist())
        mismatches += metrics.uf1(cm) != u or metrics.uar(cm) != r
    hand = [[5, 0, 0], [0, 0, 5], [0, 0, 5]]
    uar, uf1 = metrics.uar(hand), metrics.uf1(hand)
    ok = mismatches == 0 and abs(uar - 0.6667) <= 1e-4 and abs(uar - 2 / 3) <= 1e-12 and abs(uf1 - 0.5556) <= 1e-4
    record(7, "metric oracles", ok, f"{mismatches}/1000 mismatches, hand case UAR {uar:.12f} UF1 {uf1:.6f}")
    assert ok


def test_c08_loso_partition():
    rng = np.random.default_rng(8)
    for _ in range(100):
        m = manifest_from_sizes(rng.integers(1, 7, size=int(rng.integers(2, 12))), rng)
        check_partition(m, loso_split(m))
    record(8, "LOSO partition x100", True, "disjoint, exhaustive, subject-leak-free")


def test_c09_overfit_separable_set():
    x, y = separable_composites(32, seed=0)
    base = synth_run_config(0)
    model = HTNet(base.model, seed=0)
    history = []

    def stop_when_perfect(epoch, loss):
        history.append(accuracy(model, x, y))
        return history[-1] == 1.0

    start = time.perf_counter()
    fit(model, x, y, TrainConfig(learning_rate=1e-3, epochs=200, batch_size=16, seed=0), on_epoch=stop_when_perfect)
    elapsed = time.perf_counter() - start
    ok = history[-1] == 1.0 and elapsed < 300
    record(9, "overfit 32 separable samples", ok,
           f"train acc {history[-1]:.3f} after {len(history)} epochs, {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_c10_synthetic_loso(tmp_path):
    assert main(["make-synth", "--out", str(tmp_path / "corpus")]) == 0
    data = tmp_path / "corpus" / "manifest.csv"
    config = str(tmp_path / "corpus" / "config.json")
    assert main(["spot", "--manifest", str(data), "--config", config, "--out", str(tmp_path / "corpus" / "spotted.csv")]) == 0
    assert main(["extract", "--manifest", str(tmp_path / "corpus" / "spotted.csv"), "--config", config,
                 "--out", str(tmp_path / "flows")]) == 0
    reports, times = [], []
    for repeat in range(2):
        start = time.perf_counter()
        assert main(["eval-loso", "--manifest", str(tmp_path / "corpus" / "spotted.csv"), "--config", config,
                     "--features", str(tmp_path / "flows"), "--out", str(tmp_path / f"eval{repeat}")]) == 0
        times.append(time.perf_counter() - start)
        report = json.loads((tmp_path / f"eval{repeat}" / "report.json").read_text())
        report.pop("created_at")
        reports.append(report)
    uf1 = reports[0]["pooled"]["uf1"]
    same = reports[0] == reports[1]
    ok = uf1 >= 0.85 and same and max(times) < 1800 and len(reports[0]["folds"]) == 12
    record(10, "synthetic-corpus LOSO", ok,
           f"pooled UF1 {uf1:.4f} UAR {reports[0]['pooled']['uar']:.4f}, repeats identical {same}, "
           f"runs {times[0]:.0f}s / {times[1]:.0f}s")
    assert ok


def test_c11_geometry():
    cfg = ModelConfig()
    model = HTNet(cfg, seed=0)
    x = np.random.default_rng(0).normal(size=(1, 28, 28, 3))
    grids, sides = [], []
    for level in range(cfg.levels):
        tokens = model.level_tokens(x, level)
        grids.append(int(math.isqrt(tokens.shape[1])))
        sides.append(grids[-1] * int(math.isqrt(tokens.shape[2])))
    ok = grids == [4, 2, 1] and sides == [28, 14, 7]
    record(11, "block geometry", ok, f"grids {grids}, sides {sides}")
    assert ok


def test_c12_file_round_trips():
    rng = np.random.default_rng(12)
    flow_ok = ckpt_ok = 0
    cfg = ModelConfig(dims=(4, 6, 8), heads=(1, 2, 1), head_dim=3, layers=(1, 0, 1), head_hidden=5)
    for _ in range(100):
        h, w = rng.integers(1, 40, size=2)
        data = rng.normal(size=(h, w, 3)) * 10.0 ** rng.integers(-300, 300)
        back = parse_flow_bytes(flow_file_bytes(CompositeFlowMap(data)))
        flow_ok += back.data.tobytes() == data.tobytes()

        params = {k: Tensor(rng.normal(size=s) * rng.uniform(0.1, 1e3)) for k, s in parameter_shapes(cfg).items()}
        model = HTNet(cfg, dict(params))
        loaded = parse_checkpoint(checkpoint_bytes(model))
        ckpt_ok += loaded.cfg == cfg and all(
            loaded.params[k].data.tobytes() == v.data.tobytes() for k, v in model.params.items()
        )
    ok = flow_ok == 100 and ckpt_ok == 100
    record(12, "HTFM / checkpoint round trips", ok, f"flow maps {flow_ok}/100, checkpoints {ckpt_ok}/100 bit-exact")
    assert ok
