import random

import pytest

from nlemu.corpus import GeneratorSpec, default_corpus, generate_shellcode
from nlemu.cpu import (
    AccessEvent,
    AccessKind,
    ControlEvent,
    ExecutionTrace,
    LayoutConfig,
    TerminationReason,
    run_chain,
)
from nlemu.detector import (
    BASELINE_MODES,
    EXTENDED_MODES,
    ScanConfig,
    classify_trace,
    detect_getpc_events,
    scan_buffer,
    with_threshold,
    worker_count,
)
from nlemu.ingest import DataBuffer

BASE = 0x00400000
LISTING_1 = bytes.fromhex("685e5690c3ffd4")


def synthetic(controls=(), reads=(), length=4096):
    events = [AccessEvent(AccessKind.READ, a, 1, BASE, BASE <= a < BASE + length) for a in reads]
    return ExecutionTrace(
        entry_offset=0, entry_eip=BASE, retired=len(events) + 1,
        termination=TerminationReason.BUDGET_EXHAUSTED, events=events, controls=list(controls),
        buffer_base=BASE, buffer_length=length, stack_bottom=0x0011F000, stack_top=0x0012F000,
        fs_base=0x7FFD0000,
    )


def call_rel_at_start():
    return ControlEvent("call_rel", BASE, 0, BASE + 5, BASE + 5, 0x0012EFEC)


# -- detect_getpc_events ----------------------------------------------------------

def test_call_pop_yields_one_call_rel_event():
    trace = run_chain(DataBuffer(bytes.fromhex("e8000000005e") + b"\x90" * 4), 0)
    (event,) = detect_getpc_events(trace, BASELINE_MODES)
    assert event.kind == "call_rel"
    assert event.recovered_address == BASE + 5


def test_nop_sled_has_no_events():
    trace = run_chain(DataBuffer(b"\x90" * 64), 0)
    assert detect_getpc_events(trace, EXTENDED_MODES) == []


def test_listing_1_needs_indirect_mode():
    trace = run_chain(DataBuffer(LISTING_1), 0)
    assert detect_getpc_events(trace, {"call_rel"}) == []
    (event,) = detect_getpc_events(trace, {"call_rel", "call_indirect"})
    assert event.kind == "call_indirect"
    assert event.recovered_address == BASE + len(LISTING_1)


def test_call_out_of_buffer_is_not_getpc():
    # CALL to a stack address is not a call_rel GetPC even if it returns.
    trace = synthetic([ControlEvent("call_rel", BASE, 0, 0x0012E000, BASE + 5, 0x0012EFEC)], [])
    assert detect_getpc_events(trace, BASELINE_MODES) == []


def test_fstenv_requires_slot_read():
    env = 0x0012EFE0
    slot = env + 12
    control = ControlEvent("fnstenv", BASE + 2, 0, env, BASE, slot)
    unread = synthetic([control], [])
    assert detect_getpc_events(unread, BASELINE_MODES) == []
    read = synthetic([control], [])
    read.events.append(AccessEvent(AccessKind.READ, slot, 4, BASE + 6, False))
    (event,) = detect_getpc_events(read, BASELINE_MODES)
    assert event.kind == "fstenv" and event.recovered_address == BASE


def test_fs_probe_is_mode_gated():
    trace = synthetic()
    trace.events.append(AccessEvent(AccessKind.READ, trace.fs_base + 4, 4, BASE, False))
    assert detect_getpc_events(trace, BASELINE_MODES) == []
    (event,) = detect_getpc_events(trace, EXTENDED_MODES)
    assert event.kind == "fs_stack_probe" and event.recovered_address == trace.stack_top


# -- classify_trace ---------------------------------------------------------------

def test_getpc_then_32_reads_is_shellcode():
    trace = synthetic([call_rel_at_start()], [BASE + 100 + i for i in range(32)])
    verdict = classify_trace(trace, ScanConfig())
    assert verdict.is_shellcode
    assert verdict.offset == 0 and verdict.read_count == 32
    assert verdict.getpc.kind == "call_rel"


def test_reads_without_getpc_never_convict():
    trace = synthetic([], [BASE + i for i in range(500)])
    assert classify_trace(trace, ScanConfig()).label == "benign"


def test_empty_trace_is_benign():
    trace = synthetic()
    trace.termination = TerminationReason.DECODE_ERROR
    verdict = classify_trace(trace, ScanConfig())
    assert verdict.label == "benign" and verdict.offset is None


def test_reads_must_follow_getpc():
    # Reads logged before the call do not count.
    reads = [BASE + i for i in range(40)]
    trace = synthetic([ControlEvent("call_rel", BASE, 40, BASE + 5, BASE + 5, 0x0012EFEC)], reads)
    assert classify_trace(trace, ScanConfig()).label == "benign"


def test_distinct_addresses_counted():
    trace = synthetic([call_rel_at_start()], [BASE + 100] * 50 + [BASE + 101 + i for i in range(6)])
    assert classify_trace(trace, ScanConfig()).label == "benign"
    assert classify_trace(trace, ScanConfig(payload_read_threshold=7)).is_shellcode


def test_config_validation():
    with pytest.raises(ValueError):
        ScanConfig(payload_read_threshold=0)
    with pytest.raises(ValueError):
        ScanConfig(instruction_budget=0)
    with pytest.raises(ValueError):
        ScanConfig(getpc_modes={"seh"})


# -- scan_buffer ------------------------------------------------------------------

def test_random_4k_is_benign():
    data = random.Random(42).randbytes(4096)
    report = scan_buffer(DataBuffer(data))
    assert report.verdict.label == "benign"
    assert len(report.chains) + len(report.skipped) == 4096
    assert len(report.chains) <= 4096
    assert not report.skipped


def test_empty_buffer():
    report = scan_buffer(b"")
    assert report.verdict.label == "benign"
    assert report.chains == [] and report.length == 0


@pytest.mark.parametrize("k", [0, 1, 137, 900])
def test_planted_call_rel_sample(k):
    sample = generate_shellcode(GeneratorSpec("call_rel_pop", payload_length=64), seed=k)
    rng = random.Random(k)
    carrier = rng.randbytes(k) + sample.data + rng.randbytes(200)
    report = scan_buffer(DataBuffer(carrier))
    assert report.verdict.is_shellcode
    assert report.verdict.offset <= k


def test_offset_soundness():
    sample = generate_shellcode(GeneratorSpec("fstenv", payload_length=32), seed=3)
    data = random.Random(1).randbytes(50) + sample.data
    config = ScanConfig()
    report = scan_buffer(DataBuffer(data), config)
    k = report.verdict.offset
    trace = run_chain(DataBuffer(data), k, config.chain_config())
    again = classify_trace(trace, config)
    assert again == report.verdict


def test_smallest_convicting_offset_reported():
    sample = generate_shellcode(GeneratorSpec("call_rel_pop", payload_length=32), seed=8)
    data = sample.data + b"\x90" * 10 + sample.data
    report = scan_buffer(DataBuffer(data))
    assert report.verdict.offset == min(report.convicting_offsets)


def test_wall_budget_skips_tail_offsets():
    data = random.Random(9).randbytes(20000)
    report = scan_buffer(DataBuffer(data), ScanConfig(wall_budget=1))
    assert report.skipped
    assert report.skipped == list(range(report.skipped[0], 20000))
    assert [c.offset for c in report.chains] == list(range(report.skipped[0]))


def test_budget_ceiling():
    data = bytes.fromhex("b940420f00" "e2fe") + random.Random(4).randbytes(300)
    config = ScanConfig(instruction_budget=500)
    report = scan_buffer(DataBuffer(data), config)
    assert max(c.retired for c in report.chains) == 500
    assert all(c.retired <= 500 for c in report.chains)


def test_parallel_scan_matches_serial(monkeypatch):
    monkeypatch.setattr("nlemu.detector.usable_cpus", lambda: 8)
    sample = generate_shellcode(GeneratorSpec("call_rel_pop", payload_length=16), seed=1)
    data = random.Random(2).randbytes(1500) + sample.data + random.Random(3).randbytes(500)
    config = ScanConfig(wall_budget=None)
    serial = scan_buffer(DataBuffer(data), config, jobs=1)
    parallel = scan_buffer(DataBuffer(data), config, jobs=3)
    assert serial == parallel
    assert serial.verdict.is_shellcode


def test_workers_capped_at_usable_cpus(monkeypatch):
    monkeypatch.setattr("nlemu.detector.usable_cpus", lambda: 2)
    assert [worker_count(j) for j in (0, 1, 2, 8)] == [1, 1, 2, 2]


def test_threshold_and_mode_monotonicity():
    corpus = default_corpus(per_variant=2)
    corpus = [s for s in corpus if s.variant != "time_exhaust"]
    convicted = {}
    for profile in ("baseline", "extended"):
        for t in (1, 8, 64):
            config = with_threshold(ScanConfig.for_profile(profile), t)
            convicted[profile, t] = {i for i, s in enumerate(corpus)
                                     if scan_buffer(DataBuffer(s.data), config).verdict.is_shellcode}
    for profile in ("baseline", "extended"):
        assert convicted[profile, 64] <= convicted[profile, 8] <= convicted[profile, 1]
    for t in (1, 8, 64):
        assert convicted["baseline", t] <= convicted["extended", t]
    # Adding modes without moving the buffer is monotone too.
    for s in corpus:
        base = scan_buffer(DataBuffer(s.data), ScanConfig())
        more = scan_buffer(DataBuffer(s.data), ScanConfig(getpc_modes=EXTENDED_MODES))
        assert not base.verdict.is_shellcode or more.verdict.is_shellcode


def test_profiles():
    ext = ScanConfig.extended()
    assert ext.getpc_modes == EXTENDED_MODES
    assert ext.layout == LayoutConfig(buffer_on_stack=True)
    assert ScanConfig.for_profile("baseline").getpc_modes == BASELINE_MODES
    with pytest.raises(ValueError):
        ScanConfig.for_profile("paranoid")
