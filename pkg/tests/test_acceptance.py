"""Acceptance checks, one per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` or
``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import math
import statistics
import sys
import time

import numpy as np
import pytest

from blindfl import fhe
from blindfl.attack import (
    FirstLayerMissing,
    GradientMask,
    LayerGradient,
    analytic_first_layer_recovery,
    expected_subset_sensitivity,
    layer_sensitivity,
    mask_gradient,
    psnr,
    single_sample_gradient,
    ssim,
)
from blindfl.keydist import explore
from blindfl.model import ModelParams, lenet5_registry, serialize_matrix
from blindfl.runtime import FederationConfig, Kind, WireMessage, decode_message, encode_message, run_experiment
from blindfl.runtime.codec import FrameCapExceeded, MalformedFrame, encode_plain_matrices, plain_payload_size
from blindfl.segmentation import (
    aggregate_encrypted,
    aggregate_plain,
    build_response,
    compute_quota,
    encrypt_response,
    generate_request_matrix,
)
from blindfl.training import MlpSpec, loss, loss_and_gradients

LENET5_ROWS = [
    ("conv1.weight", 150, 728),
    ("conv1.bias", 6, 152),
    ("conv2.weight", 2400, 9728),
    ("conv2.bias", 16, 192),
    ("conv3.weight", 48000, 192128),
    ("conv3.bias", 120, 608),
    ("fc1.weight", 493920, 1975808),
    ("fc1.bias", 84, 464),
    ("fc2.weight", 840, 3488),
    ("fc2.bias", 10, 168),
]


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


def test_criterion_01_byte_accounting(verdict):
    start = time.perf_counter()
    reg = lenet5_registry()
    model = reg.random(np.random.default_rng(0))
    sizes = [len(serialize_matrix(m)) for m in model]
    rows_ok = [(e.name, e.params, n) for e, n in zip(reg.entries, sizes)] == LENET5_ROWS
    total = sum(sizes)
    elapsed = time.perf_counter() - start
    verdict(1, rows_ok and total == 2_183_464 and elapsed < 1, f"total={total} bytes, rows match={rows_ok}, {elapsed:.2f}s")


def test_criterion_02_request_matrix(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    violations = 0
    for _ in range(1500):
        M = int(rng.integers(1, 129))
        c = int(rng.integers(2, 21))
        p = int(rng.integers(1, c + 1))
        R = generate_request_matrix(M, c, p, rng)
        N = math.ceil(M * p / c)
        violations += int(R.N != N or compute_quota(M, p, c) != N)
        violations += int((R.rows.sum(axis=1) < N).sum() + (R.rows.sum(axis=0) < p).sum())
    elapsed = time.perf_counter() - start
    verdict(2, violations == 0 and elapsed < 10, f"1500 configs, {violations} violations, {elapsed:.1f}s")


def _random_federation(rng, params, round_id):
    M = int(rng.integers(1, 13))
    c = int(rng.integers(2, 11))
    p = int(rng.integers(1, c + 1))
    shapes = [tuple(int(d) for d in rng.integers(1, 9, size=rng.integers(1, 3))) for _ in range(M)]
    models = [ModelParams.from_arrays([rng.uniform(-1, 1, s) for s in shapes]) for _ in range(c)]
    ts = [int(t) for t in rng.integers(1, 500, c)]
    R = generate_request_matrix(M, c, p, rng)
    plain = [build_response(m, R.row(i + 1), ts[i], i + 1) for i, m in enumerate(models)]
    keys = fhe.keygen(params, rng, round_id)
    enc = [encrypt_response(r, keys.public, rng) for r in plain]
    W = aggregate_plain(plain, R)
    out = aggregate_encrypted(enc, R, round_id=round_id)
    return max(float(np.max(np.abs(fhe.decrypt_matrix(keys.secret, em).values - W[em.index].values))) for em in out)


def test_criterion_03_encrypted_equals_plain(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(33)
    ckks_err = max(_random_federation(rng, fhe.desk_profile("ckks"), k + 1) for k in range(50))
    oracle_err = max(_random_federation(rng, fhe.desk_profile("oracle"), k + 1) for k in range(50))
    elapsed = time.perf_counter() - start
    ok = ckks_err < 1e-3 and oracle_err == 0 and elapsed < 300
    verdict(3, ok, f"50 federations each: ckks max err {ckks_err:.2e}, oracle max err {oracle_err}, {elapsed:.0f}s")


def test_criterion_04_kd_release_safety(verdict):
    start = time.perf_counter()
    details, ok = [], True
    for c in range(1, 5):
        res = explore(c)
        expected = math.factorial(c) ** 3
        ok &= not res.counterexamples and not res.dead_ends and res.complete_traces == expected
        details.append(f"c={c}: {res.states} states, {res.complete_traces} traces")
    elapsed = time.perf_counter() - start
    verdict(4, ok and elapsed < 30, "; ".join(details) + f"; 0 counterexamples expected, {elapsed:.1f}s")


def test_criterion_05_accuracy_parity(verdict):
    start = time.perf_counter()
    base_acc, blind_acc = [], []
    for seed in range(5):
        base = FederationConfig(clients=10, selected=10, rounds=20, samples=2000, fhe="off", segmentation=False, seed=seed)
        blind = base.with_(fhe="ckks", segmentation=True)
        assert blind.p == 5
        base_acc.append(run_experiment(base)[-1].mean_accuracy)
        blind_acc.append(run_experiment(blind)[-1].mean_accuracy)
    gap = 100 * (np.mean(base_acc) - np.mean(blind_acc))
    elapsed = time.perf_counter() - start
    verdict(
        5,
        abs(gap) <= 2.0 and elapsed < 600,
        f"baseline {np.mean(base_acc):.4f}, BlindFL {np.mean(blind_acc):.4f}, gap {gap:+.2f} pp, {elapsed:.0f}s",
    )


def _aggregation_time(p, rng, params, models, ts):
    R = generate_request_matrix(len(models[0]), len(models), p, rng)
    keys = fhe.keygen(params, rng, 1)
    plain = [build_response(m, R.row(i + 1), ts[i], i + 1) for i, m in enumerate(models)]
    enc = [encrypt_response(r, keys.public, rng) for r in plain]
    start = time.perf_counter()
    aggregate_encrypted(enc, R, round_id=1)
    return time.perf_counter() - start


def test_criterion_06_cms_speedup(verdict):
    rng = np.random.default_rng(6)
    params = fhe.desk_profile("ckks")
    spec = MlpSpec((64, 32, 32, 16, 16, 10))
    models = [spec.init(rng) for _ in range(10)]
    ts = [200] * 10
    half, full = [], []
    for _ in range(5):
        half.append(_aggregation_time(5, rng, params, models, ts))
        full.append(_aggregation_time(10, rng, params, models, ts))
    ratio = statistics.median(half) / statistics.median(full)
    verdict(6, ratio <= 0.7, f"median p=5 {1e3 * statistics.median(half):.0f} ms vs p=10 {1e3 * statistics.median(full):.0f} ms, ratio {ratio:.3f}")


def test_criterion_07_bytes_linearity(verdict):
    reg = lenet5_registry()
    rng = np.random.default_rng(7)
    model = reg.random(rng)
    M, c = len(model), 10
    ks = list(range(1, M + 1))
    means = []
    exact = True
    for k in ks:
        per_draw = []
        for draw in range(100):
            R = generate_request_matrix(M, c, k, rng)
            sizes = [plain_payload_size(model, [j + 1 for j in np.flatnonzero(R.row(i))]) for i in range(1, c + 1)]
            if draw < 2 and k in (1, M // 2):
                for i in range(1, c + 1):
                    chosen = [model[j + 1] for j in np.flatnonzero(R.row(i))]
                    exact &= len(encode_plain_matrices(chosen, 100)) == sizes[i - 1]
            per_draw.append(np.mean(sizes))
        means.append(np.mean(per_draw))
    slope = float(np.polyfit(ks, means, 1)[0])
    target = reg.total_bytes / M
    one_kb = means[0] / 1000
    ok = abs(slope / target - 1) <= 0.05 and abs(one_kb / 218 - 1) <= 0.05 and exact
    verdict(7, ok, f"slope {slope:.0f} B/matrix vs {target:.0f}, 1-matrix mean {one_kb:.1f} KB vs 218 KB, codec exact={exact}")


def test_criterion_08_sensitivity_linearity(verdict):
    rng = np.random.default_rng(8)
    spec = MlpSpec((64, 48, 32, 24, 16, 12, 10), "tanh")
    x = rng.random(64)
    report = layer_sensitivity(single_sample_gradient(spec, spec.init(rng), x, 3))
    N, S = report.N, report.total
    ns = np.arange(0, N + 1)
    ys = np.array([expected_subset_sensitivity(report, int(n), 10_000, rng) for n in ns])
    slope = float(ns @ ys / (ns @ ns))
    resid = ys - slope * ns
    r2 = 1 - float(resid @ resid) / float(((ys - ys.mean()) ** 2).sum())
    ok = r2 > 0.999 and abs(slope / (S / N) - 1) <= 0.02
    verdict(8, ok, f"slope {slope:.5g} vs S/N {S / N:.5g}, R^2 {r2:.6f}")


def test_criterion_09_recovery_dichotomy(verdict):
    rng = np.random.default_rng(9)
    spec = MlpSpec((64, 32, 16, 10))
    worst, missing = 0.0, 0
    for _ in range(20):
        x = rng.random(64)
        grad = single_sample_gradient(spec, spec.init(rng), x, int(rng.integers(10)))
        keep = {1} | {int(k) for k in rng.choice([2, 3], size=int(rng.integers(0, 3)), replace=False)}
        worst = max(worst, float(np.max(np.abs(analytic_first_layer_recovery(mask_gradient(grad, GradientMask(keep, 3)), spec) - x))))
        try:
            analytic_first_layer_recovery(mask_gradient(grad, GradientMask({2, 3}, 3)), spec)
        except FirstLayerMissing:
            missing += 1
    a = rng.random((8, 8))
    b = np.clip(a, 0.2, 0.8)
    trivial = psnr(a, a) == 100.0 and abs(psnr(b, b + 0.1) - 20.0) < 1e-9 and abs(ssim(a, a) - 1.0) < 1e-12
    toy = LayerGradient({1: np.array([[0.5, 1.0], [0.0, 0.0]]), 2: np.array([0.5, 0.0])}, {1: (1, 2)})
    trivial &= analytic_first_layer_recovery(toy, MlpSpec((2, 2))).tolist() == [1.0, 2.0]
    ok = worst < 1e-10 and missing == 20 and trivial
    verdict(9, ok, f"max recovery error {worst:.1e}, FirstLayerMissing {missing}/20, metric examples ok={trivial}")


def test_criterion_10_gradient_correctness(verdict):
    rng = np.random.default_rng(10)
    worst = 0.0
    h = 1e-6
    for _ in range(20):
        widths = (int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(2, 4)))
        spec = MlpSpec(widths, "tanh")
        model = spec.init(rng)
        xb, yb = rng.normal(size=(5, widths[0])), rng.integers(0, widths[-1], 5)
        _, grads = loss_and_gradients(spec, model, xb, yb)
        arrays = model.arrays()
        for k, g in enumerate(grads):
            fd = np.zeros(g.size)
            for i in range(g.size):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[k].flat[i] += h
                minus[k].flat[i] -= h
                fd[i] = (loss(spec, model.replace(plus), xb, yb) - loss(spec, model.replace(minus), xb, yb)) / (2 * h)
            scale = max(np.max(np.abs(g)), np.max(np.abs(fd)), 1e-12)
            worst = max(worst, float(np.max(np.abs(g.ravel() - fd)) / scale))
    verdict(10, worst < 1e-4, f"20 tanh networks, max relative error {worst:.2e}")


def test_criterion_11_codec_fuzz(verdict):
    rng = np.random.default_rng(11)
    bad_roundtrips = 0
    accepted_corruptions = 0
    for _ in range(10_000):
        msg = WireMessage(Kind(int(rng.integers(1, 7))), int(rng.integers(0, 2**63)), int(rng.integers(0, 2**32)),
                          rng.bytes(int(rng.integers(0, 200))))
        frame = encode_message(msg)
        bad_roundtrips += decode_message(frame) != msg
        cut = int(rng.integers(0, len(frame)))
        flip = bytearray(frame)
        flip[int(rng.integers(0, len(frame)))] ^= 1 << int(rng.integers(0, 8))
        for broken in (frame[:cut], bytes(flip)):
            try:
                decode_message(broken)
                accepted_corruptions += 1
            except (MalformedFrame, FrameCapExceeded):
                pass
    params = {s: fhe.FheParams(s, 32, 40, (60, 40, 40, 60), "test") for s in ("ckks", "oracle")}
    keys = {s: fhe.keygen(p, rng, 1) for s, p in params.items()}
    ct_bad = 0
    for k in range(10_000):
        scheme = ("ckks", "oracle")[k % 2]
        ct = fhe.encrypt_vector(keys[scheme].public, rng.uniform(-1, 1, int(rng.integers(1, 17))), rng)
        if k % 3 == 0:
            ct = fhe.mul_plain(ct, int(rng.integers(1, 50)))
        ct = ct.with_chunk(int(rng.integers(0, 4)), 4)
        buf = fhe.serialize_ciphertext(ct)
        back, end = fhe.deserialize_ciphertext(buf, 0, params[scheme])
        ct_bad += not (back == ct and end == len(buf))
        flip = bytearray(buf)
        flip[int(rng.integers(0, len(buf)))] ^= 1 << int(rng.integers(0, 8))
        for broken in (buf[: int(rng.integers(0, len(buf)))], bytes(flip)):
            try:
                fhe.deserialize_ciphertext(broken, 0, params[scheme])
                accepted_corruptions += 1
            except fhe.SerializationError:
                pass
    ok = bad_roundtrips == 0 and ct_bad == 0 and accepted_corruptions == 0
    verdict(
        11,
        ok,
        f"10000 frames + 10000 ciphertexts: {bad_roundtrips + ct_bad} roundtrip failures, {accepted_corruptions} corruptions accepted",
    )


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
