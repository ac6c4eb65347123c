"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line through the ``acceptance`` fixture; the
lines are printed in the terminal summary under "acceptance criteria".
"""
import math
import time

import numpy as np
import pytest

from splitstream import experiments as ex
from splitstream import fp8, nn, transport
from splitstream.config import ExperimentConfig
from splitstream.data import make_synthetic
from splitstream.engine import SplitEngine, partition
from splitstream.fp8 import Fp8Format
from splitstream.metrics import distance_correlation, reduction_report
from splitstream.protocol import CommState, FixedSchedule, LossBasedSchedule, LossTracker, update_state

SEEDS = (0, 1, 2)
A, B, C = CommState.A, CommState.B, CommState.C


def code_values(fmt):
    """Decode all 256 codes straight from the bit fields."""
    codes = np.arange(256)
    m = fmt.mbit
    e = (codes >> m) & ((1 << fmt.ebit) - 1)
    frac = (codes & ((1 << m) - 1)).astype(np.float64)
    mag = np.where(e == 0, np.ldexp(frac / 2**m, 1 - fmt.bias),
                   np.ldexp(1 + frac / 2**m, e - fmt.bias))
    return np.where(codes & 0x80, -mag, mag)


# ---------------------------------------------------------------- 1


def test_01_synchronous_equivalence(acceptance):
    t0 = time.perf_counter()
    ds = make_synthetic(2000, 10, (3, 8, 8), difficulty=2.5, seed=0)
    spec = nn.vgg_desk_spec(3, 12, 8, 10)
    results = {}
    for dtype in (np.float64, np.float32):
        model = nn.build_model(spec, 3, seed=0, input_shape=(3, 8, 8), dtype=dtype)
        ref = nn.build_model(spec, 3, seed=0, input_shape=(3, 8, 8), dtype=dtype)
        clients = partition(ds.x, ds.y, 1, 32, seed=0)
        with SplitEngine(model, clients, LossBasedSchedule(0.0), 0.05) as eng:
            eng.train(20)
        ref_losses = []
        for _ in range(20):
            total = sum(nn.monolithic_step(ref, xb, yb, 0.05) for _, xb, yb in clients[0].batches())
            ref_losses.append(total / clients[0].num_batch)
        losses = np.array([r.avg_loss for r in eng.log.records])
        rel_loss = np.max(np.abs(losses - ref_losses) / np.abs(ref_losses))
        rel_w = max(np.max(np.abs(p - q)) / max(np.max(np.abs(q)), 1e-300)
                    for p, q in zip(model.parameters(), ref.parameters()))
        results[dtype] = (losses.tolist() == ref_losses, model.to_checkpoint() == ref.to_checkpoint(),
                          rel_loss, rel_w, eng.log.states)
    exact64 = results[np.float64][0] and results[np.float64][1]
    close32 = results[np.float32][2] <= 1e-6 and results[np.float32][3] <= 1e-6
    all_a = all(set(r[4]) == {"A"} for r in results.values())
    elapsed = time.perf_counter() - t0
    n_params = nn.build_model(spec, 3, 0, (3, 8, 8)).num_parameters()
    ok = acceptance.check(1, "synchronous equivalence vs monolithic trainer",
                          exact64 and close32 and all_a and elapsed < 120,
                          f"{n_params} params, 64-bit exact={exact64}, 32-bit loss rel "
                          f"{results[np.float32][2]:.1e} weight rel {results[np.float32][3]:.1e}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_02_state_machine(acceptance):
    problems = []
    thr, last = 0.5, 2.0
    # dyadic losses keep last - avg exact: delta 0.25 / 0.5 / 0.75
    for entering in (A, B, C):
        for avg, rel in ((1.75, "<"), (1.5, "="), (1.25, ">")):
            tr = update_state(entering, LossTracker(thr, 2, 1, 2 * avg, last))
            if entering is A:
                want = B  # reference reset, delta 0 < thr
            else:
                want = A if rel in "=>" else C
            if tr.state is not want:
                problems.append(f"{entering}{rel}: got {tr.state}")
    rng = np.random.Generator(np.random.PCG64(2))
    for i in range(2000):
        thr = 0.0 if i % 4 == 0 else float(rng.uniform(1e-4, 0.5))
        losses = np.abs(rng.standard_normal(rng.integers(1, 80))).cumsum()[::-1] * rng.uniform(0.01, 1) \
            if i % 2 else rng.uniform(0, 3, rng.integers(1, 80))
        state, t, seq = A, LossTracker(thr, 1), []
        for v in losses:
            seq.append(state)
            tr = update_state(state, t.reset().add(float(v)))
            state, t = tr.state, tr.tracker
        if thr == 0 and set(seq) != {A}:
            problems.append(f"thr=0 gave {seq}")
        if thr > 0 and any(p is A and q is A for p, q in zip(seq, seq[1:])):
            problems.append(f"consecutive A at thr={thr}")
    ok = acceptance.check(2, "update_state conformance and properties", not problems,
                          f"9 exhaustive cases + 2000 random sequences, {len(problems)} violations")
    assert ok, problems[:5]


# ---------------------------------------------------------------- 3


def test_03_codec_exhaustive(acceptance):
    t0 = time.perf_counter()
    problems = []
    rng = np.random.Generator(np.random.PCG64(3))
    for ebit in (3, 4, 5, 6):
        for bias in range(-16, 17):
            fmt = Fp8Format(ebit, bias)
            vals = code_values(fmt)
            if not np.array_equal(fp8.decode(np.arange(256, dtype=np.uint8), fmt), vals):
                problems.append(f"{fmt}: decode")
            if not np.array_equal(fp8.encode(vals, fmt), np.arange(256)):
                problems.append(f"{fmt}: round-trip")
            pos = np.sort(vals[vals > 0])
            if fp8.format_range(fmt) != (pos[0], pos[-1]):
                problems.append(f"{fmt}: range")
            grid = np.sort(np.concatenate([vals, (pos[1:] + pos[:-1]) / 2, -(pos[1:] + pos[:-1]) / 2,
                                           rng.uniform(-2 * pos[-1], 2 * pos[-1], 4000),
                                           np.exp(rng.uniform(np.log(pos[0] / 4), np.log(pos[-1]), 4000))]))
            q = fp8.decode(fp8.encode(grid, fmt), fmt)
            if np.any(np.diff(q) < 0):
                problems.append(f"{fmt}: monotonicity")
            x = rng.uniform(pos[0], pos[-1], 4000) * rng.choice([-1, 1], 4000)
            ax = np.abs(x)
            hi_idx = np.clip(np.searchsorted(pos, ax), 1, len(pos) - 1)
            ulp = pos[hi_idx] - pos[hi_idx - 1]
            err = np.abs(fp8.decode(fp8.encode(x, fmt), fmt) - x)
            if np.any(err > 0.5 * ulp):
                problems.append(f"{fmt}: error above half ulp")
    elapsed = time.perf_counter() - t0
    ok = acceptance.check(3, "codec exhaustive over ebit 3..6, bias -16..16", not problems and elapsed < 10,
                          f"132 formats, {len(problems)} violations, {elapsed:.1f}s")
    assert ok, problems[:5]


# ---------------------------------------------------------------- 4


def test_04_search_guarantee(acceptance):
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(4))
    bad, found = [], 0
    for i in range(1000):
        n = int(rng.integers(16, 4096))
        scale = 10 ** rng.uniform(-4, 3)
        if i % 2:
            x = rng.standard_normal(n) * scale
            x[x < 0] = 0  # ReLU-like, about half zeros
        else:
            x = rng.lognormal(0, rng.uniform(0.25, 10), n) * scale * rng.choice([-1, 1], n)
        fmt = fp8.search_format(x)
        if fmt is None:
            continue
        found += 1
        lo, hi = fp8.format_range(fmt)
        a = np.abs(x)
        clipped = np.count_nonzero((a > hi) | ((a > 0) & (a < lo)))
        if clipped / x.size >= 0.01:
            bad.append((i, str(fmt), clipped / x.size))
    zero_none = fp8.search_format(np.zeros(100)) is None
    elapsed = time.perf_counter() - t0
    ok = acceptance.check(4, "search_format clip < 1% whenever a format is returned",
                          not bad and zero_none and elapsed < 30,
                          f"{found}/1000 formats found, {len(bad)} violations, {elapsed:.1f}s")
    assert ok, bad[:5]


# ---------------------------------------------------------------- 5


def test_05_byte_accounting(acceptance):
    batch = 16
    ds = make_synthetic(8 * batch, 10, (3, 8, 8), seed=5)
    model = nn.build_model(nn.vgg_desk_spec(), 3, seed=5, input_shape=(3, 8, 8))
    clients = partition(ds.x, ds.y, 1, batch, seed=5)
    with SplitEngine(model, clients, FixedSchedule("ABCCA"), 0.05) as eng:
        eng.train(5)
        frames = eng.transcript()
    a = g = batch * int(np.prod(model.cut_shape)) * 4
    payload = eng.log.payload_bytes
    expect = 8 * (2 * (a + g) + a)
    hdr = transport.frame_overhead(4, False)
    n_msgs = 8 * 2 + 8 + 0 + 0 + 8 * 2  # A, B, C, C, A
    header_ok = eng.log.total("header_bytes") == hdr * n_msgs
    handoff_ok = eng.log.total("handoff_bytes") == 5 * (len(model.to_checkpoint("client"))
                                                       + transport.frame_overhead(1, False))
    conserved = eng.total.total_frame_bytes == sum(len(f) for f in frames)
    ok = acceptance.check(5, "payload bytes for ABCCA, num_batch=8 equal 8(2(a+g)+a)",
                          payload == expect and header_ok and handoff_ok and conserved
                          and eng.num_batch == 8,
                          f"payload {payload} vs {expect}; headers/handoff separate={header_ok and handoff_ok}")
    assert ok


# ---------------------------------------------------------------- 6, 7


@pytest.fixture(scope="module")
def desk_sweeps(tmp_path_factory):
    out = {}
    for seed in SEEDS:
        cfg = ExperimentConfig(seed=seed, quantize=True)
        out[seed] = ex.sweep_threshold(cfg, tmp_path_factory.mktemp(f"sweep{seed}"))
    return out


def test_06_threshold_sweep(acceptance, desk_sweeps):
    thresholds = ExperimentConfig().thresholds
    base_acc = np.mean([desk_sweeps[s]["baseline_accuracy"] for s in SEEDS])
    rows = []
    for thr in thresholds:
        logs = [desk_sweeps[s]["logs"][thr] for s in SEEDS]
        bases = [desk_sweeps[s]["baseline_log"] for s in SEEDS]
        acc = np.mean([lg.final_accuracy for lg in logs])
        red = min(reduction_report(b, lg)["communication"] for b, lg in zip(bases, logs))
        a_max = max(lg.update_epochs for lg in logs)
        good = acc >= base_acc - 0.01 and red >= 3 and a_max <= 0.3 * 60
        rows.append((thr, acc, red, a_max, good))
    passing = [r for r in rows if r[4]]
    detail = f"A0={base_acc:.3f}; " + "; ".join(
        f"l={t:g}: acc {a:.3f} red {r:.1f}x A<={m}" for t, a, r, m, _ in rows)
    ok = acceptance.check(6, "desk threshold sweep (3 seeds)", base_acc >= 0.9 and bool(passing), detail)
    assert ok


def test_07_quantization_ratio(acceptance, desk_sweeps):
    ratio_problems = []
    min_total_ratio = math.inf
    loss_gaps, always_gaps = [], []
    for seed in SEEDS:
        cfg = ExperimentConfig(seed=seed, quantize=True)
        datasets = ex.load_datasets(cfg)
        treated = desk_sweeps[seed]["logs"][cfg.l_thred]
        for r in treated.records:
            quantized = r.act_fp8_format not in ("", "raw", "-") and (
                r.state != "A" or r.grad_fp8_format not in ("", "raw", "-"))
            if r.payload == 0 or not quantized:
                continue
            if 4 * r.payload != r.payload_up_raw + r.payload_down_raw:
                ratio_problems.append((seed, r.epoch))
            n_msgs = r.client_forward + r.client_backward
            raw_total = r.payload_up_raw + r.payload_down_raw + r.header_bytes - 3 * n_msgs
            min_total_ratio = min(min_total_ratio, raw_total / (r.payload + r.header_bytes))
        # same schedule without quantization
        train_set, test_set = datasets
        eng = ex.build_engine(cfg.replace(quantize=False), train_set, test_set)
        eng.schedule = FixedSchedule(treated.states)
        with eng:
            eng.train(cfg.epochs)
        loss_gaps.append(abs(treated.final_accuracy - eng.log.final_accuracy))
        quant_a, _ = ex.run(cfg.replace(schedule="always_A"), datasets)
        always_gaps.append(quant_a.final_accuracy - desk_sweeps[seed]["baseline_accuracy"])
    mean_always = abs(float(np.mean(always_gaps)))
    ok = acceptance.check(
        7, "FP8 payload is 1/4 of raw; accuracy gap <= 1 pt at equal schedule",
        not ratio_problems and min_total_ratio >= 3.9 and max(loss_gaps) <= 0.01 and mean_always <= 0.01,
        f"min ratio incl. headers {min_total_ratio:.3f}, loss-based gaps "
        f"{[round(100 * g, 1) for g in loss_gaps]} pt, always-A gaps "
        f"{[round(100 * g, 1) for g in always_gaps]} pt (mean {100 * mean_always:.2f})")
    assert ok, ratio_problems[:5]


# ---------------------------------------------------------------- 8


def test_08_loss_based_vs_naive(acceptance, tmp_path):
    rows = []
    for seed in SEEDS:
        cfg = ExperimentConfig(seed=seed, cut="large")
        res = ex.compare_naive(cfg, tmp_path / f"s{seed}")
        rows.append((res["loss_based_accuracy"], res["naive_accuracy"], res["budget"],
                     res["loss_based_payload_bytes"] == res["naive_payload_bytes"]))
    loss_acc = np.mean([r[0] for r in rows])
    naive_acc = np.mean([r[1] for r in rows])
    equal_bytes = all(r[3] for r in rows)
    ok = acceptance.check(8, "loss-based vs naive at matched A-epoch counts (large cut, 3 seeds)",
                          loss_acc >= naive_acc - 0.01 and equal_bytes,
                          f"loss-based {loss_acc:.3f} vs naive {naive_acc:.3f}, budgets "
                          f"{[r[2] for r in rows]}, equal payload={equal_bytes}")
    assert ok


# ---------------------------------------------------------------- 9


def test_09_privacy_probe(acceptance, tmp_path):
    rng = np.random.Generator(np.random.PCG64(9))
    x = rng.standard_normal((256, 3, 8, 8))
    self_score = distance_correlation(x, x).score
    indep = distance_correlation(rng.standard_normal(512), rng.standard_normal(512)).score
    res = ex.privacy_probe(ExperimentConfig(seed=0), tmp_path)
    settings = [r["setting"] for r in res["rows"]]
    written = (tmp_path / "privacy.json").exists() and (tmp_path / "privacy.csv").exists()
    ok = acceptance.check(
        9, "privacy probe sanity and report",
        abs(self_score - 1) <= 1e-9 and indep < 0.1 and written
        and settings == ["baseline", "async", "async+quant"],
        f"dCor(X,X)={self_score:.12f}, independent={indep:.3f}, scores "
        + ", ".join(f"{r['setting']}={r['dcor']:.3f}" for r in res["rows"]))
    assert ok


# ---------------------------------------------------------------- 10


def fuzz_frames(n, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    seeds = []
    for k in range(8):
        shape = tuple(int(d) for d in rng.integers(1, 5, rng.integers(0, 5)))
        msg_type = transport.MsgType.ACT if k % 2 else transport.MsgType.GRAD
        tensor = rng.standard_normal(shape).astype(np.float32)
        if k % 3 == 0:
            tensor = fp8.quantize_tensor(tensor, Fp8Format(4, 7))
        labels = list(rng.integers(0, 10, shape[0] if shape else 1)) if msg_type == transport.MsgType.ACT else []
        seeds.append(transport.encode_message(transport.tensor_message(msg_type, 1, k, k, tensor, labels)))
    for i in range(n):
        kind = i % 4
        if kind == 0:
            yield rng.bytes(int(rng.integers(0, 80)))
        elif kind == 1:
            yield transport.MAGIC + rng.bytes(int(rng.integers(0, 80)))
        else:
            b = bytearray(seeds[i % len(seeds)])
            if kind == 2:
                for _ in range(int(rng.integers(1, 6))):
                    b[int(rng.integers(0, len(b)))] = int(rng.integers(0, 256))
            else:
                cut = int(rng.integers(0, len(b) + 8))
                b = b[:cut] + rng.bytes(max(0, cut - len(b)))
            yield bytes(b)


def test_10_transport_equivalence(acceptance):
    cfg = ExperimentConfig(epochs=6, n_train=400, n_test=100, clients=2, quantize=True, seed=10)
    datasets = ex.load_datasets(cfg)
    runs = {}
    for name in ("memory", "tcp"):
        eng = ex.build_engine(cfg, *datasets, transport=name)
        with eng:
            eng.train(cfg.epochs)
            runs[name] = (eng.transcript(), eng.model.to_checkpoint(), eng.log.states)
    same = runs["memory"][:2] == runs["tcp"][:2]
    crashes, decoded = [], 0
    for frame in fuzz_frames(100_000, seed=10):
        try:
            transport.decode_message(frame)
            decoded += 1
        except transport.DecodeError:
            pass
        except Exception as exc:  # noqa: BLE001 - any other exception is a decoder bug
            crashes.append(repr(exc))
    ok = acceptance.check(10, "memory vs TCP transcripts/weights; 1e5 fuzzed frames",
                          same and not crashes,
                          f"{len(runs['memory'][0])} frames identical={same}, states "
                          f"{''.join(runs['tcp'][2])}, fuzz: {decoded} decoded, {len(crashes)} crashes")
    assert ok, crashes[:5]


# ---------------------------------------------------------------- 11


def test_11_gradient_check(acceptance):
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(11))
    spec = [nn.conv3x3(2, 3), nn.relu(), nn.maxpool2x2(), nn.conv3x3(3, 4), nn.relu(),
            nn.flatten(), nn.dense(4 * 2 * 2, 5), nn.relu(), nn.dense(5, 3)]
    errs = {}
    for cut in (3, 6):
        model = nn.build_model(spec, cut, seed=11, input_shape=(2, 4, 4), dtype=np.float64)
        x, y = rng.standard_normal((4, 2, 4, 4)), rng.integers(0, 3, 4)
        pre = x
        margins = []
        for layer in model.layers:
            if layer.kind == "relu":
                margins.append(np.min(np.abs(pre)))
            pre = layer.forward(pre)[0]
        errs[cut] = (model.grad_check(x, y), min(margins))
    kinds = {s.kind for s in spec}
    elapsed = time.perf_counter() - t0
    worst = max(e for e, _ in errs.values())
    ok = acceptance.check(11, "finite-difference gradient check on every layer kind",
                          worst <= 1e-4 and len(kinds) == 5 and elapsed < 60,
                          f"max rel err {worst:.1e}, min |relu input| "
                          f"{min(m for _, m in errs.values()):.1e}, {elapsed:.1f}s")
    assert ok
