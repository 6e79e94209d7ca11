"""Acceptance gate: one test per shipped guarantee.

Run `pytest tests/test_acceptance.py -v` to get one pass/fail line per
criterion. The trend test trains nine full runs and dominates the
clock (budgeted at 15 minutes, typically ~8); everything else is
seconds.
"""

import decimal
import time

import numpy as np
import pytest

from scprompt.autodiff import Graph, grad_check
from scprompt.cli import run as cli_run
from scprompt.dataset import GenSpec, generate, load_set, save_set
from scprompt.errors import DataFormatError
from scprompt.losses import bce_with_logits, cross_entropy
from scprompt.model import (EncoderConfig, ModelConfig, ar_reason,
                            init_params, roi_align_features)
from scprompt.rng import RngStream
from scprompt.scpt import read_tensor, write_tensor
from scprompt.softprompt import PromptPool, bind, fuse, gate, permuted_pool, \
    synthesize
from scprompt.training import (TrainRunConfig, ablate_experts,
                               load_checkpoint, save_checkpoint, train)
from scprompt.visual import estimate_flow, to_grayscale

TINY_CLASSES = ("move-left", "move-right", "expand", "still")


# 1 ------------------------------------------------------ gradient integrity


def test_c1_gradient_integrity(capsys):
    started = time.perf_counter()
    assert cli_run(["gradcheck", "--tolerance", "1e-5"]) == 0
    elapsed = time.perf_counter() - started
    line = capsys.readouterr().out.strip().splitlines()[-1]
    fields = dict(part.split("=", 1) for part in line.split())
    assert fields["status"] == "ok"
    assert float(fields["max_rel_err"]) <= 1e-5
    assert elapsed < 60.0


# 2 -------------------------------------------------------- loss correctness


def _naive_bce_decimal(x, y, prec=50):
    with decimal.localcontext() as ctx:
        ctx.prec = prec
        one = decimal.Decimal(1)
        total = decimal.Decimal(0)
        for xi, yi in zip(x.ravel(), y.ravel()):
            s = one / (one + (-decimal.Decimal(float(xi))).exp())
            yd = decimal.Decimal(int(yi))
            total -= yd * s.ln() + (one - yd) * (one - s).ln()
        return float(total / x.size)


def test_c2_loss_correctness():
    for c in (2, 4, 8):
        g = Graph()
        loss = cross_entropy(g, g.input(np.zeros((3, c))), [0, c - 1, 1])
        assert abs(float(loss.value) - np.log(c)) <= 1e-10

    x = np.array([[1e4, -1e4], [-1e4, 1e4]])
    y = np.array([[1.0, 0.0], [1.0, 0.0]])
    g = Graph()
    node = g.input(x)
    loss = bce_with_logits(g, node, y)
    stable = np.mean(np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x))))
    assert np.isfinite(float(loss.value))
    assert float(loss.value) == pytest.approx(stable, abs=1e-12)
    g.backward(loss)
    assert np.all(np.isfinite(node.grad))

    rng = np.random.default_rng(42)
    for _ in range(1000):
        logits = rng.normal(size=(4, 6)) * rng.uniform(0.5, 20)
        labels = rng.integers(0, 6, size=4)
        shift = rng.uniform(-1e3, 1e3)
        _, base = (lambda gr: (gr, cross_entropy(gr, gr.input(logits),
                                                 labels)))(Graph())
        _, moved = (lambda gr: (gr, cross_entropy(gr, gr.input(
            logits + shift), labels)))(Graph())
        assert abs(float(base.value) - float(moved.value)) <= 1e-10

    rng = np.random.default_rng(43)
    for _ in range(1000):
        x = rng.uniform(-30, 30, size=(2, 3))
        y = rng.integers(0, 2, size=(2, 3)).astype(float)
        g = Graph()
        loss = bce_with_logits(g, g.input(x), y)
        assert abs(float(loss.value) - _naive_bce_decimal(x, y)) <= 1e-10


# 3 ------------------------------------------------------------- scp algebra


def test_c3_scp_algebra():
    rng = RngStream(2024)
    for trial in range(100):
        r = rng.child("trial", trial)
        l = int(r.integers(1, 9))
        tokens = int(r.integers(1, 5))
        channels = int(r.integers(1, 7))
        pool = PromptPool.init(r.child("pool"), tokens, channels, l)
        feats = r.child("feats").normal((2, tokens, channels))

        def run_pool(p):
            g = Graph()
            b = bind(g, p)
            w = gate(g, b, g.input(feats, "f"))
            return w.value, synthesize(g, b, w).value

        weights, prompt = run_pool(pool)
        assert np.all(weights > 0.0) and np.all(weights < 1.0)

        perm = r.child("perm").permutation(l)
        _, permuted = run_pool(permuted_pool(pool, perm))
        assert prompt.tobytes() == permuted.tobytes()

        alpha = 2.0 ** int(r.integers(-3, 4))
        scaled = PromptPool(experts=alpha * pool.experts,
                            gate_weight=pool.gate_weight,
                            gate_bias=pool.gate_bias)
        _, scaled_prompt = run_pool(scaled)
        assert (alpha * prompt).tobytes() == scaled_prompt.tobytes()


# 4 ------------------------------------------------------------- flow oracle


def _flow_oracle(frame_a, frame_b, bs, r):
    ga, gb = to_grayscale(frame_a), to_grayscale(frame_b)
    h, w = ga.shape
    hb, wb = h // bs, w // bs
    dy_out = np.zeros((hb, wb))
    dx_out = np.zeros((hb, wb))
    for bi in range(hb):
        for bj in range(wb):
            a = ga[bi * bs:(bi + 1) * bs, bj * bs:(bj + 1) * bs]
            best = None
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    y0, x0 = bi * bs + dy, bj * bs + dx
                    if y0 < 0 or x0 < 0 or y0 + bs > h or x0 + bs > w:
                        continue
                    sad = np.abs(a - gb[y0:y0 + bs, x0:x0 + bs]).sum()
                    key = (sad, dy * dy + dx * dx)
                    if best is None or key < best[0]:
                        best = (key, dy, dx)
            dy_out[bi, bj], dx_out[bi, bj] = best[1], best[2]
    return dy_out, dx_out


def test_c4_flow_oracle_equivalence():
    rng = np.random.default_rng(77)
    pairs = [(rng.uniform(size=(32, 32, 3)), rng.uniform(size=(32, 32, 3)))
             for _ in range(100)]
    for bs in (4, 8):
        for radius in (1, 2, 3):
            for frame_a, frame_b in pairs:
                flow = estimate_flow(frame_a, frame_b, bs, radius)
                dy, dx = _flow_oracle(frame_a, frame_b, bs, radius)
                assert np.array_equal(flow.dy, dy)
                assert np.array_equal(flow.dx, dx)

    frame = np.random.default_rng(78).uniform(size=(32, 32, 3))
    moved = np.roll(frame, (1, 2), axis=(0, 1))     # dy=1, dx=2
    flow = estimate_flow(frame, moved, 4, 3)
    assert np.all(flow.dx[1:-1, 1:-1] == 2.0)
    assert np.all(flow.dy[1:-1, 1:-1] == 1.0)


# 5 -------------------------------------------------------------- roi oracle


def _bilinear_oracle(grid, box, out_size):
    hg, wg, c = grid.shape
    x0, y0, x1, y1 = box
    out = np.zeros((out_size, out_size, c))
    for gy in range(out_size):
        for gx in range(out_size):
            u = x0 + (gx + 0.5) / out_size * (x1 - x0)
            v = y0 + (gy + 0.5) / out_size * (y1 - y0)
            cx = min(max(u * wg - 0.5, 0.0), wg - 1.0)
            cy = min(max(v * hg - 0.5, 0.0), hg - 1.0)
            ix, iy = int(np.floor(cx)), int(np.floor(cy))
            jx, jy = min(ix + 1, wg - 1), min(iy + 1, hg - 1)
            fx, fy = cx - ix, cy - iy
            top = (1 - fx) * grid[iy, ix] + fx * grid[iy, jx]
            bot = (1 - fx) * grid[jy, ix] + fx * grid[jy, jx]
            out[gy, gx] = (1 - fy) * top + fy * bot
    return out


def test_c5_roi_oracle_equivalence():
    rng = np.random.default_rng(55)
    for _ in range(100):
        hg = int(rng.integers(2, 17))
        wg = int(rng.integers(2, 17))
        grid = rng.normal(size=(hg, wg, 3))
        x0, y0 = rng.uniform(0, 0.8, 2)
        box = [x0, y0, x0 + rng.uniform(0.05, 1.0 - x0),
               y0 + rng.uniform(0.05, 1.0 - y0)]
        out = roi_align_features(grid, box, out_size=5)
        np.testing.assert_allclose(out, _bilinear_oracle(grid, box, 5),
                                   rtol=0, atol=1e-9)
    const = np.full((4, 7, 3), 0.37)
    assert np.all(roi_align_features(const, [0.05, 0.2, 0.55, 0.95], 5)
                  == 0.37)


# 6 ----------------------------------------------------------- ar recurrence


def test_c6_ar_identity_prefix_sum():
    cfg = ModelConfig(height=8, width=8, n_classes=4, m_clips=2,
                      ar_nonlinearity="identity",
                      encoder=EncoderConfig(patch_size=4, channels=8,
                                            heads=2))
    params = init_params(cfg, RngStream(0))
    params["ar.w"][:] = np.eye(8)
    params["ar.b"][:] = 0.0
    rng = np.random.default_rng(66)
    for _ in range(100):
        m = int(rng.integers(1, 17))
        seq = list(rng.normal(size=(m, 8)))
        want = seq[0].copy()
        for x in seq[1:]:
            want = want + x
        assert ar_reason(params, cfg, seq).tobytes() == want.tobytes()


# 7 ------------------------------------------------------- trend reproduction


def test_c7_trend_reproduction(tmp_path):
    """Mean val top-1 over seeds {0,1,2} at identical budgets must show
    scp-concat >= baseline + 3 points and flow >= baseline + 1 point,
    inside a 15 minute wall clock."""
    started = time.perf_counter()
    data = tmp_path / "data"
    save_set(generate(GenSpec(seed=0)), data)

    scores = {}
    for mode in ("none", "scp-concat", "flow"):
        finals = []
        for seed in (0, 1, 2):
            cfg = TrainRunConfig(data_dir=str(data),
                                 out_dir=str(tmp_path / f"{mode}-s{seed}"),
                                 prompt_mode=mode, seed=seed)
            finals.append(train(cfg)["final"]["top1"])
        scores[mode] = finals
        print(f"{mode}: {finals} mean={np.mean(finals):.3f}")

    elapsed = time.perf_counter() - started
    baseline = float(np.mean(scores["none"]))
    scp = float(np.mean(scores["scp-concat"]))
    flow = float(np.mean(scores["flow"]))
    print(f"baseline={baseline:.3f} scp={scp:.3f} flow={flow:.3f} "
          f"wall={elapsed:.0f}s")
    assert scp >= baseline + 0.03, (scores, "scp margin")
    assert flow >= baseline + 0.01, (scores, "flow margin")
    assert elapsed <= 900.0


# 8 -------------------------------------------------------- ablation harness


def test_c8_ablation_harness(tmp_path):
    data = tmp_path / "data"
    save_set(generate(GenSpec(classes=TINY_CLASSES, n_train=16, n_val=8,
                              seed=3)), data)

    def run_once(out):
        cfg = TrainRunConfig(data_dir=str(data), out_dir=str(out),
                             prompt_mode="scp-concat", epochs=1,
                             batch_size=8, init_std=0.05,
                             init_scheme="flat",
                             schedule={"base_lr": 0.01},
                             encoder={"patch_size": 8, "channels": 8,
                                      "depth": 1, "heads": 2})
        return ablate_experts(cfg, [4, 8, 16, 32])

    rows = run_once(tmp_path / "a")
    assert [r["l"] for r in rows] == [4, 8, 16, 32]
    assert all(r["error"] == "" for r in rows)
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in rows)
    again = run_once(tmp_path / "b")
    assert [r["accuracy"] for r in rows] == [r["accuracy"] for r in again]


# 9 ------------------------------------------------ determinism, persistence


def test_c9_determinism_and_persistence(tmp_path):
    ds = generate(GenSpec(classes=TINY_CLASSES, n_train=8, n_val=4, seed=5))
    data = tmp_path / "data"
    save_set(ds, data)
    back = load_set(data)
    for a, b in zip(ds.clips, back.clips):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.masks.tobytes() == b.masks.tobytes()
        assert a.boxes.tobytes() == b.boxes.tobytes()

    cfg = TrainRunConfig(data_dir=str(data), out_dir=str(tmp_path / "run"),
                         epochs=1, batch_size=4, init_std=0.05,
                         init_scheme="flat", schedule={"base_lr": 0.01},
                         encoder={"patch_size": 8, "channels": 8,
                                  "depth": 1, "heads": 2})
    train(cfg)
    artifacts = ("report.json", "history.csv", "curves.png",
                 "checkpoint_001.ckpt")
    first = {n: (tmp_path / "run" / n).read_bytes() for n in artifacts}
    train(cfg)
    for n in artifacts:
        assert (tmp_path / "run" / n).read_bytes() == first[n], n

    params, model_cfg = load_checkpoint(tmp_path / "run"
                                        / "checkpoint_001.ckpt")
    save_checkpoint(tmp_path / "resaved.ckpt", params, model_cfg)
    reread, _ = load_checkpoint(tmp_path / "resaved.ckpt")
    for name in params.names():
        assert params[name].tobytes() == reread[name].tobytes()

    tensor_path = tmp_path / "tensor.scpt"
    checksum = write_tensor(tensor_path, np.arange(24.0).reshape(2, 3, 4))
    blob = bytearray(tensor_path.read_bytes())
    blob[-3] ^= 0x40
    tensor_path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError, match="checksum"):
        read_tensor(tensor_path, expected_checksum=checksum)

    clip_file = next(data.glob("clip_*.scpt"))
    blob = bytearray(clip_file.read_bytes())
    blob[-1] ^= 0x01
    clip_file.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError, match="checksum"):
        load_set(data)
