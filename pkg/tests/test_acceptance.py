"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured value
and the threshold it was checked against. Run directly with
``pytest tests/test_acceptance.py -v`` (the training criteria take ~15 min on
one CPU core).
"""
import itertools
import json
import math
import time

import numpy as np
import pytest

from attnaspp import cli
from attnaspp import layers as L
from attnaspp.data import (
    SynthConfig, gen_synthetic, iter_batches, parse_nifti, write_nifti,
)
from attnaspp.data.samples import decode_pgm, decode_tensor, encode_pgm, encode_tensor
from attnaspp.gradcheck import CASES, TOLERANCE, run_gradcheck, summarize
from attnaspp.metrics import accuracy, dsc, iou_foreground, miou
from attnaspp.models import (
    ModelSpec, build, count_blocks, decode_checkpoint, encode_checkpoint,
)
from attnaspp.optim import CosineSchedule, cosine_lr
from attnaspp.tensor import Tensor
from attnaspp.train import fit_batch

VARIANT_ORDER = ("unet", "att_unet", "att_unet_spp", "att_unet_aspp")


@pytest.fixture
def verdict(capsys):
    def report(tag: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {tag}: {detail}")
        assert ok, f"{tag}: {detail}"
    return report


# ---------------------------------------------------------------- 1

def test_c01_gradient_suite(verdict):
    t0 = time.perf_counter()
    rows = summarize(run_gradcheck(seeds=range(5)))
    elapsed = time.perf_counter() - t0
    worst = max(err for _, err, _, _ in rows)
    failing = [name for name, _, _, ok in rows if not ok]
    required = {"conv2d_r1", "conv2d_r2", "matmul_1x1", "batchnorm_train", "attention_gate",
                "aspp_block", "spp_block", "upsample_bilinear", "dice_bce_loss"}
    ok = not failing and required <= set(CASES) and worst < TOLERANCE and elapsed < 60
    verdict("C1 gradient suite", ok,
            f"{len(rows)} ops x 5 seeds, worst rel err {worst:.2e} (< {TOLERANCE:.0e}), "
            f"failing {failing or 'none'}, {elapsed:.1f} s (< 60 s)")


# ---------------------------------------------------------------- 2

def _direct(x, w, stride, r, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - r * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - r * (k - 1) - 1) // stride + 1
    y = np.zeros((n, o, ho, wo))
    for i, j, a, b in itertools.product(range(ho), range(wo), range(k), range(k)):
        p, q = i * stride - pad + r * a, j * stride - pad + r * b
        if 0 <= p < h and 0 <= q < wd:
            y[:, :, i, j] += x[:, :, p, q] @ w[:, :, a, b].T
    return y


def test_c02_dilated_conv_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_direct = worst_inflated = 0.0
    cases = 0
    for r, k, s in itertools.product((1, 2, 3), (1, 3, 5), (1, 2)):
        for pad in sorted({0, 1, r * (k - 1) // 2}):
            x = rng.normal(size=(2, 3, r * (k - 1) + 4, r * (k - 1) + 5))
            w = rng.normal(size=(2, 3, k, k))
            got = L.conv2d(Tensor(x), Tensor(w), None, s, r, pad).data
            ref = _direct(x, w, s, r, pad)
            zi = np.zeros((2, 3, r * (k - 1) + 1, r * (k - 1) + 1))
            zi[:, :, ::r, ::r] = w
            inflated = L.conv2d(Tensor(x), Tensor(zi), None, s, 1, pad).data
            scale = np.maximum(np.abs(ref), 1.0)
            worst_direct = max(worst_direct, float(np.max(np.abs(got - ref) / scale)))
            worst_inflated = max(worst_inflated, float(np.max(np.abs(got - inflated) / scale)))
            cases += 1
    elapsed = time.perf_counter() - t0
    ok = worst_direct < 1e-6 and worst_inflated < 1e-6 and elapsed < 10
    verdict("C2 dilated conv oracle", ok,
            f"{cases} (r,s,pad,K) cases, rel err vs direct {worst_direct:.1e}, "
            f"vs zero-inflated {worst_inflated:.1e} (< 1e-6), {elapsed:.2f} s (< 10 s)")


# ---------------------------------------------------------------- 3

def test_c03_attention_gate_contracts(verdict):
    rng = np.random.default_rng(0)
    lo, hi = 1.0, 0.0
    for _ in range(1000):
        f_l, f_g = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        gate = L.AttentionGate(f_l, f_g, rng=rng, dtype=np.float64)
        scale = 10 ** rng.uniform(-1, 2)
        for t in gate.parameters():
            t.data = rng.normal(0, scale, t.shape)
        hw = int(rng.integers(1, 5))
        _, alpha = gate(Tensor(rng.normal(0, scale, (2, f_l, hw, hw))),
                        Tensor(rng.normal(0, scale, (2, f_g, hw, hw))))
        lo, hi = min(lo, alpha.data.min()), max(hi, alpha.data.max())
    fresh = L.AttentionGate(8, 16, rng=rng, dtype=np.float64)
    x = rng.normal(size=(2, 8, 6, 6))
    x_hat, alpha0 = fresh(Tensor(x), Tensor(rng.normal(size=(2, 16, 6, 6))))
    zero_psi = bool(np.all(alpha0.data == 0.5) and np.array_equal(x_hat.data, 0.5 * x))
    hand = L.AttentionGate(1, 1, 1, dtype=np.float64)
    for t, v in ((hand.w_x, 1.0), (hand.w_g, 1.0), (hand.b_g, 0.0), (hand.psi, 1.0),
                 (hand.b_psi, 0.0)):
        t.data[...] = v
    h_hat, h_alpha = hand(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.full((1, 1, 1, 1), -2.0)))
    hand_ok = h_alpha.data.item() == 0.5 and h_hat.data.item() == 0.5
    ok = lo >= 0.0 and hi <= 1.0 and zero_psi and hand_ok
    verdict("C3 attention gate", ok,
            f"alpha range over 1000 inputs [{lo:.3g}, {hi:.3g}] within [0,1]; "
            f"zero-psi alpha == 0.5 exactly: {zero_psi}; scalar hand case (0.5, 0.5): {hand_ok}")


# ---------------------------------------------------------------- 4

def test_c04_schedule_exactness(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        eta_max = float(rng.uniform(1e-6, 1.0))
        eta_min = float(rng.uniform(0.0, eta_max))
        t_i = int(rng.integers(1, 1000))
        t_cur = int(rng.integers(0, t_i + 1))
        # independent half-angle form of the same curve
        ref = eta_min + (eta_max - eta_min) * math.cos(math.pi * t_cur / (2 * t_i)) ** 2
        worst = max(worst, abs(cosine_lr(eta_min, eta_max, t_cur, t_i) - ref))
    ends = cosine_lr(1e-5, 1e-3, 0, 100) == 1e-3 and cosine_lr(1e-5, 1e-3, 100, 100) == 1e-5
    s = CosineSchedule(eta_max=1e-3, eta_min=1e-5, t_i=10, restart=True)
    for _ in range(10):
        s.epoch_tick()
    restart_ok = s.t_cur == 0 and s.lr_at() == 1e-3
    ok = worst < 1e-12 and ends and restart_ok
    verdict("C4 schedule", ok,
            f"max |lr - oracle| {worst:.1e} (< 1e-12) over 1000 tuples; "
            f"endpoints exact: {ends}; restart back to eta_max: {restart_ok}")


# ---------------------------------------------------------------- 5

def test_c05_topology(verdict):
    net = build(ModelSpec(variant="att_unet_aspp", depth=4, base_channels=16, input_size=240))
    counts = count_blocks(net)
    y = net.eval()(Tensor(np.zeros((1, 1, 240, 240), np.float32)))
    ok = counts["attention_gates"] == 4 and counts["aspp_blocks"] == 3 \
        and y.shape == (1, 1, 240, 240)
    verdict("C5 topology", ok,
            f"{counts['attention_gates']} attention gates (== 4), {counts['aspp_blocks']} "
            f"ASPP blocks (== 3), 240x240 input -> {y.shape[2]}x{y.shape[3]} output")


# ---------------------------------------------------------------- 6

def test_c06_overfit_one_batch(verdict):
    samples = gen_synthetic(SynthConfig(size=64, seed=0), 8)
    x, y = next(iter_batches(samples, 8))
    net = build(ModelSpec(variant="att_unet_aspp", base_channels=16, input_size=64), 0)
    t0 = time.perf_counter()
    res = fit_batch(net, x, y, steps=300, lr=1e-3, target_dsc=0.99, check_every=10)
    elapsed = time.perf_counter() - t0
    ok = res["dsc"] >= 0.99 and res["steps"] <= 300 and elapsed < 600
    verdict("C6 overfit", ok,
            f"training-set DSC {res['dsc']:.4f} (>= 0.99) after {res['steps']} steps "
            f"(<= 300), {elapsed:.0f} s (< 600 s)")


# ---------------------------------------------------------------- 7 and 8

@pytest.fixture(scope="module")
def desk_compare(tmp_path_factory):
    """Desk dataset (250 synthetic, 200/25/25) and one compare run over all variants."""
    root = tmp_path_factory.mktemp("desk")
    data = root / "data"
    assert cli.main(["synth", "--n", "250", "--seed", "0", "--split", "200,25,25",
                     "--out", str(data)]) == 0
    out = root / "compare"
    t0 = time.perf_counter()
    code = cli.main(["compare", "--preset", "desk", "--seed", "0",
                     "--train-manifest", str(data / "train.tsv"),
                     "--val-manifest", str(data / "val.tsv"),
                     "--test-manifest", str(data / "test.tsv"), "--out", str(out)])
    return {"code": code, "out": out, "seconds": time.perf_counter() - t0}


def test_c07_generalization(verdict, desk_compare):
    rep = json.loads((desk_compare["out"] / "att_unet_aspp" / "report.json").read_text())
    t = rep["test"]
    minutes = (rep["timings"]["train_seconds"] + rep["timings"]["test_inference_seconds"]) / 60
    cfg = rep["config"]
    setup = (cfg["epochs"] == 15 and len(rep["lr_trace"]) == 15 and rep["lr_trace"][0] == 1e-3
             and rep["lr_trace"][-1] == cosine_lr(0.0, 1e-3, 14, 15)
             and [cfg["data"][k]["n"] for k in ("train", "val", "test")] == [200, 25, 25])
    ok = setup and t["dsc"] >= 0.85 and t["acc"] >= 0.97 and minutes < 45
    verdict("C7 generalization", ok,
            f"att_unet_aspp 200/25/25, 15 cosine epochs: test DSC {t['dsc']:.4f} (>= 0.85), "
            f"Acc {t['acc']:.4f} (>= 0.97), {minutes:.1f} min (< 45)")


def test_c08_comparison_harness(verdict, desk_compare):
    out = desk_compare["out"]
    summary = json.loads((out / "compare.json").read_text())
    rows = summary["rows"]
    names = [r["model"] for r in rows]
    in_range = all(0.0 <= r[k] <= 1.0 for r in rows for k in ("dsc", "miou", "acc"))
    runs = summary["runs"]
    seeds = {runs[v]["seed"] for v in names}
    data = {json.dumps(runs[v]["data"], sort_keys=True) for v in names}
    table = (out / "compare.txt").read_text().splitlines()
    ok = (desk_compare["code"] == 0 and names == list(VARIANT_ORDER) and in_range
          and len(seeds) == 1 and len(data) == 1 and len(table) == 6)
    order = table[-1].split(": ", 1)[-1] if table else "?"
    verdict("C8 comparison harness", ok,
            f"{len(rows)} variants x 3 metrics, all in [0,1]: {in_range}; shared seed "
            f"{sorted(seeds)} and data fingerprint ({len(data)} distinct); observed DSC order "
            f"{order} (reported, not asserted); {desk_compare['seconds'] / 60:.1f} min")


# ---------------------------------------------------------------- 9

def test_c09_metric_oracles(verdict):
    rng = np.random.default_rng(0)
    mismatches, worst_identity = 0, 0.0
    for _ in range(100):
        p = rng.uniform(size=(8, 8)) < rng.uniform()
        t = rng.uniform(size=(8, 8)) < rng.uniform()
        cells = [(i, j) for i in range(8) for j in range(8)]
        P = {c for c in cells if p[c]}
        T = {c for c in cells if t[c]}
        B, C = set(cells) - P, set(cells) - T
        jac = lambda a, b: 1.0 if not (a | b) else len(a & b) / len(a | b)  # noqa: E731
        want = (1.0 if not (P or T) else 2 * len(P & T) / (len(P) + len(T)),
                (jac(P, T) + jac(B, C)) / 2,
                (len(P & T) + len(B & C)) / 64)
        mismatches += (dsc(p, t), miou(p, t), accuracy(p, t)) != want
        i = iou_foreground(p, t)
        worst_identity = max(worst_identity, abs(dsc(p, t) - 2 * i / (1 + i)))
    ok = mismatches == 0 and worst_identity < 1e-12
    verdict("C9 metric oracles", ok,
            f"{mismatches} of 100 8x8 pairs differ from the set oracle (== 0); "
            f"dsc-iou identity error {worst_identity:.1e} (< 1e-12)")


# ---------------------------------------------------------------- 10

def test_c10_io_round_trips(verdict, tmp_path):
    rng = np.random.default_rng(0)
    nifti_ok = True
    for dt in (np.uint8, np.int16, np.float32, np.float64):
        data = (rng.normal(size=(16, 16, 8)) * 50).astype(dt)
        for endian in ("<", ">"):
            vol = parse_nifti(write_nifti(data, endian=endian))
            nifti_ok &= (vol.dims == data.shape and vol.data.dtype == data.dtype
                         and vol.data.tobytes() == data.tobytes() and vol.endian == endian)
    state = build(ModelSpec(variant="att_unet_aspp", base_channels=2, input_size=32)).state_dict()
    back = decode_checkpoint(encode_checkpoint(state))
    ckpt_ok = list(back) == list(state) and all(
        back[k].dtype == state[k].dtype and back[k].tobytes() == state[k].tobytes() for k in state)
    img = rng.uniform(size=(64, 64)).astype(np.float32)
    mask = (rng.uniform(size=(64, 64)) > 0.8).astype(np.uint8)
    ten = encode_tensor(img)
    ten_ok = decode_tensor(ten).tobytes() == img.tobytes() and len(ten) == 16 + 4 * 4096
    pgm_ok = np.array_equal(decode_pgm(encode_pgm(mask)) > 0, mask > 0)
    runs = []
    for name in ("a", "b"):
        assert cli.main(["synth", "--n", "20", "--seed", "9", "--out", str(tmp_path / name)]) == 0
        runs.append({p.relative_to(tmp_path / name): p.read_bytes()
                     for p in sorted((tmp_path / name).rglob("*")) if p.is_file()})
    synth_ok = runs[0] == runs[1] and len(runs[0]) == 42
    ok = nifti_ok and ckpt_ok and ten_ok and pgm_ok and synth_ok
    verdict("C10 I/O round trips", ok,
            f"NIfTI 4 dtypes x both byte orders: {nifti_ok}; checkpoint: {ckpt_ok}; "
            f"TEN1: {ten_ok}; PGM: {pgm_ok}; same-seed synth byte-identical: {synth_ok}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
