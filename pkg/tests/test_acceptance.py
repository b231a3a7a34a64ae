"""Acceptance suite: one test per contract, each recorded as a PASS/FAIL line in the summary."""

import math
import random
import struct
import time
from fractions import Fraction

import numpy as np

from conftest import ACCEPTANCE_RESULTS
from helpers import noise_chunk
from streamforge import protocol
from streamforge.buffer import BankError, Group, MemoryBank
from streamforge.cli import main
from streamforge.conditioning import TraceEvent, aggregate_audio
from streamforge.core import (
    SessionConfig, chunk_duration_exact, level_for, make_chunk, reference_latent,
)
from streamforge.denoise import (
    CountingEngine, DriftModel, ToyFlowModel, full_sequence_oracle, make_generated_gt,
    mix_memory_source,
)
from streamforge.masks import build_group_mask
from streamforge.pipeline import (
    CommConfig, StageCost, Strategy, comm_cost, run_pipelined, sequential_baseline,
    uniform_records,
)
from streamforge.protocol import HEADER_SIZE, FrameType, ProtocolError, WireFrame, decode_frame
from streamforge.scheduler import ChunkScheduler, Phase, SyntheticConditions, run_session

QUANTUM_S = 1e-6


def verdict(name, ok, detail):
    ACCEPTANCE_RESULTS.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, detail


def scheduler(cfg, engine, **kw):
    sched = ChunkScheduler(cfg, engine, **kw)
    sched.warmup(reference_latent(cfg))
    return sched


def test_ac01_buffer_capacity():
    cfg = SessionConfig(latent_dim=4)
    rng = random.Random(101)
    nrng = np.random.default_rng(101)
    t0 = time.perf_counter()
    max_lt = max_stream = rejected = 0
    for _ in range(10):
        bank = MemoryBank(reference_latent(cfg), cfg)
        for _ in range(1000):
            before = bank.dump()
            op = rng.choice(["admit", "admit_bad", "step", "promote", "replace", "snapshot"])
            try:
                if op == "admit":
                    bank.admit_noise_chunk(noise_chunk(bank.last_admitted + 1, cfg, nrng))
                elif op == "admit_bad":
                    bank.admit_noise_chunk(noise_chunk(bank.last_admitted + rng.choice([0, 2]), cfg, nrng))
                elif op == "step":
                    nxt = [c.with_data(c.data, level_for(cfg.ladder, max(c.noise_level.ladder_index - 1, 0)))
                           for c in bank.stream]
                    bank.advance_stream(nxt)
                elif op == "promote":
                    bank.promote_clean_chunk()
                elif op == "replace":
                    st = bank.short_term
                    cid = st.chunk_id if st is not None and rng.random() < 0.8 else 10**6
                    bank.replace_short_term(make_chunk(cid, np.zeros((3, 4)), level_for(cfg.ladder, 0), cfg, ""))
                else:
                    bank.snapshot_context()
            except BankError:
                rejected += 1
                assert bank.dump() == before
            bank.check_invariants()
            max_lt = max(max_lt, len(bank.long_term))
            max_stream = max(max_stream, len(bank.stream))
    elapsed = time.perf_counter() - t0
    ok = max_lt <= 3 and max_stream <= 3 and elapsed < 5.0
    verdict("AC1 buffer capacity", ok,
            f"max|LT|={max_lt} max|S|={max_stream} rejected={rejected} runtime={elapsed:.2f}s")


def test_ac02_throughput():
    cfg = SessionConfig(latent_dim=4)
    sched = scheduler(cfg, ToyFlowModel())
    records = sched.run(SyntheticConditions(200))
    steady = [tr for tr in sched.trace if tr.phase == Phase.STEADY]
    one_each = all(tr.emitted is not None for tr in steady)
    dur = chunk_duration_exact(cfg)
    video = sum((Fraction(r.video_pts_range[1]) - Fraction(r.video_pts_range[0]) for r in records),
                Fraction(0))
    exact_ranges = all(r.video_pts_range == (float(r.chunk_id * dur), float((r.chunk_id + 1) * dur))
                       for r in records)
    ok = one_each and len(records) == 200 and exact_ranges and \
        records[-1].video_pts_range[1] == float(200 * dur)
    verdict("AC2 throughput", ok,
            f"{len(steady)} steady ticks all emit={one_each}; video={float(video):.6f}s "
            f"== 200 x {dur} = {float(200 * dur)}")


def test_ac03_three_nfe():
    cfg = SessionConfig(latent_dim=4)
    stream, repair = CountingEngine(ToyFlowModel()), CountingEngine(ToyFlowModel())
    sched = scheduler(cfg, stream, repair_engine=repair)
    records = sched.run(SyntheticConditions(50))
    expected = (1.0, 0.6667, 0.3333, 0.0)
    worst = max(max(abs(a - b) for a, b in zip(r.noise_history, (1.0, 2 / 3, 1 / 3, 0.0)))
                for r in records)
    shapes = all(len(r.noise_history) == 4 for r in records)
    st = sched.state
    ok = (shapes and worst <= 1e-9 and st.stream_nfes == 3 * len(records)
          and stream.chunk_nfes == st.stream_nfes and repair.chunk_nfes == st.refine_calls)
    verdict("AC3 3-NFE", ok,
            f"history={expected} max dev={worst:.1e}; stream NFEs={st.stream_nfes} "
            f"= 3 x {len(records)}; refinement NFEs={st.refine_calls} ({len(st.refinements)} firings)")


def test_ac04_ttff():
    cfg = SessionConfig(latent_dim=4)
    events = [TraceEvent(0.0, "prompt", text="p"), TraceEvent(0.0, "audio", samples=np.zeros(160_000)),
              TraceEvent(10.0, "end")]
    records = run_session(cfg, reference_latent(cfg), events, ToyFlowModel())
    tick = run_pipelined(records, StageCost(480, 60), chunk_duration_s=0.48).metrics.ttff_s
    nominal = run_pipelined(records, StageCost(500, 60), chunk_duration_s=0.5).metrics.ttff_s
    ok = abs(tick - 1.50) <= QUANTUM_S and abs(nominal - 1.56) <= QUANTUM_S
    verdict("AC4 TTFF", ok, f"tick=0.48s -> {tick:.6f}s; tick=0.5s -> {nominal:.6f}s")


def test_ac05_mask_asymmetry():
    rng = random.Random(5)
    bad = 0
    for _ in range(1000):
        context = [Group("Ref")] + [Group("LT", i) for i in range(rng.randint(0, 3))]
        if rng.random() < 0.7:
            context.append(Group("ST"))
        stream = [Group("S", i) for i in range(rng.randint(1, 3))]
        rest = context[1:] + stream
        rng.shuffle(rest)
        layout = [context[0]] + rest
        m = build_group_mask(layout).allowed
        is_s = np.array([g.is_stream for g in layout])
        ok = (not m[np.ix_(~is_s, is_s)].any() and m[is_s].all()
              and (~m).sum() == (~is_s).sum() * is_s.sum()
              and m[np.ix_(~is_s, ~is_s)].all())
        bad += not ok
    verdict("AC5 mask asymmetry", bad == 0, f"1000 layouts, {bad} violations")


def test_ac06_refinement_efficacy():
    cfg = SessionConfig(latent_dim=4)
    bias = np.zeros(4)
    bias[0] = 0.01
    inner = ToyFlowModel()
    sched = scheduler(cfg, DriftModel(inner, bias), repair_engine=inner)
    ref = reference_latent(cfg)
    firings = []
    original = sched.refine

    def spy():
        bank = sched.bank
        others = (bank.reference.data.tobytes(),
                  [c.data.tobytes() for c in bank.long_term], [c.data.tobytes() for c in bank.stream])
        err_before = inner.error(bank.short_term, ref)
        st_before = bank.short_term.data.tobytes()
        result = original()
        after = (bank.reference.data.tobytes(),
                 [c.data.tobytes() for c in bank.long_term], [c.data.tobytes() for c in bank.stream])
        firings.append((err_before, inner.error(bank.short_term, ref), others == after,
                        st_before != bank.short_term.data.tobytes()))
        return result

    sched.refine = spy
    sched.run(SyntheticConditions(100))
    improved = all(a < b for b, a, _, _ in firings)
    isolated = all(iso and changed for _, _, iso, changed in firings)
    ok = len(firings) == 12 and improved and isolated
    worst = max(a / b for b, a, _, _ in firings)
    verdict("AC6 refinement efficacy", ok,
            f"{len(firings)} firings, all improved={improved} (worst after/before={worst:.2e}), "
            f"only short-term changed={isolated}")


def test_ac07_bottleneck_law():
    rng = np.random.default_rng(7)
    worst = 0.0
    faster = True
    for _ in range(50):
        d, v = (round(float(x), 3) for x in rng.uniform(5, 800, size=2))
        recs = uniform_records(60, 2)
        piped = run_pipelined(recs, StageCost(d, v))
        seq = sequential_baseline(recs, StageCost(d, v))
        worst = max(worst, abs(piped.metrics.steady_period_ms - max(d, v)))
        faster &= piped.metrics.elapsed_s < seq.metrics.elapsed_s
    ok = worst <= 1e-3 and faster
    verdict("AC7 pipeline bottleneck", ok,
            f"50 (d,v) pairs: max |period - max(d,v)| = {worst:.4f} ms; pipelined faster={faster}")


def test_ac08_comm_cost():
    rng = random.Random(8)
    bad = 0
    for _ in range(100):
        frames = rng.randint(2, 64)
        cfg = CommConfig(rng.randint(2, 16), rng.randint(1, 48), frames, rng.randint(1, 4096),
                         rng.randint(1, frames - 1))
        tok, frm = comm_cost(Strategy.TOKEN_LEVEL, cfg), comm_cost(Strategy.FRAME_LEVEL, cfg)
        bad += not (2 * frm.messages == tok.messages and frm.bytes < tok.bytes)
    verdict("AC8 comm cost", bad == 0, f"100 configs, {bad} violations")


def test_ac09_audio_rate():
    one_second = len(aggregate_audio(np.zeros(16000)))
    rng = np.random.default_rng(9)
    lengths = list(range(0, 3201)) + [int(n) for n in rng.integers(0, 16000 * 60, 40)]
    bad = [n for n in lengths if len(aggregate_audio(np.zeros(n))) != math.ceil(n / 640)]
    verdict("AC9 audio rate", one_second == 25 and not bad,
            f"1 s -> {one_second} frames; {len(lengths)} lengths, {len(bad)} mismatches")


def test_ac10_oracle_equivalence():
    worst = 0.0
    for seed, cfg in enumerate([SessionConfig(latent_dim=8, rng_seed=s) for s in range(4)]
                               + [SessionConfig(latent_dim=8, micro_steps=2, rng_seed=9)]):
        conds = [SyntheticConditions(20).condition_for(i) for i in range(20)]
        oracle = full_sequence_oracle(conds, ToyFlowModel(), cfg, reference_latent(cfg))
        stream = scheduler(cfg, ToyFlowModel()).run(SyntheticConditions(20))
        assert len(oracle) == len(stream) == 20
        worst = max(worst, max(float(np.max(np.abs(a.data - b.chunk.data))) for a, b in zip(oracle, stream)))
    verdict("AC10 oracle equivalence", worst <= 1e-9, f"5 sessions x 20 chunks, max |diff| = {worst:.1e}")


def test_ac11_self_forcing_prep():
    cfg = SessionConfig(latent_dim=8)
    ref = reference_latent(cfg)
    rng = np.random.default_rng(11)
    worst = 0.0
    for cid in range(20):
        gt = make_chunk(cid, rng.standard_normal((3, 8)), level_for(cfg.ladder, 0), cfg, "")
        exact = ToyFlowModel(target_fn=lambda c, d, r, g=gt: g.data)
        for t in cfg.ladder:
            out = make_generated_gt(gt, t, exact, cfg.ladder, rng, ref)
            worst = max(worst, float(np.max(np.abs(out.data - gt.data))))
    draws = np.random.default_rng(2025)
    gen = make_chunk(0, np.ones((3, 8)), level_for(cfg.ladder, 0), cfg, "")
    freq = sum(mix_memory_source(gt, gen, 0.3, draws)[1] == "generated" for _ in range(10_000)) / 10_000
    ok = worst <= 1e-9 and abs(freq - 0.3) <= 0.02
    verdict("AC11 self-forcing prep", ok, f"GT recovery max |diff| = {worst:.1e}; p=0.3 freq = {freq:.4f}")


def test_ac12_protocol_fuzz():
    rng = random.Random(12)
    types = list(FrameType)
    crashes = outcomes = 0
    for i in range(100_000):
        mode = i % 4
        if mode == 0:
            blob = rng.randbytes(rng.randint(0, 24))
        elif mode == 1:
            blob = struct.pack("<IB", rng.getrandbits(32), rng.getrandbits(8)) + rng.randbytes(rng.randint(0, 8))
        else:
            frame = WireFrame(rng.choice(types), rng.randbytes(rng.randint(0, 32)))
            blob = bytearray(protocol.encode_frame(frame))
            if mode == 3 and blob:
                blob[rng.randrange(len(blob))] = rng.getrandbits(8)
            blob = bytes(blob)
        try:
            result = decode_frame(blob)
            if result is not None:
                frame, used = result
                outcomes += used == HEADER_SIZE + len(frame.payload)
        except ProtocolError:
            pass
        except Exception:
            crashes += 1
    roundtrip_bad = 0
    for _ in range(10_000):
        frame = WireFrame(rng.choice(types), rng.randbytes(rng.randint(0, 256)))
        data = protocol.encode_frame(frame)
        roundtrip_bad += decode_frame(data) != (frame, len(data))
    verdict("AC12 protocol fuzz", crashes == 0 and roundtrip_bad == 0,
            f"100000 inputs, {crashes} crashes; 10000 round trips, {roundtrip_bad} failures")


def test_ac13_determinism(tmp_path):
    trace = tmp_path / "session.trace"
    trace.write_text("0.0 prompt hello\n0.0 audio tone 250 0.4 48000\n1.5 prompt wave\n4.0 end\n")
    logs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.jsonl"
        assert main(["run", "--trace", str(trace), "--out", str(out), "--seed", "13", "--sim-clock"]) == 0
        logs.append(out.read_bytes())
    ok = logs[0] == logs[1] and len(logs[0]) > 0
    verdict("AC13 determinism", ok, f"two runs, {len(logs[0])} bytes each, identical={logs[0] == logs[1]}")
