"""GetPC-followed-by-payload-reads classification over every buffer offset."""

from __future__ import annotations

import gc
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple

from .cpu import (
    AccessKind,
    ChainConfig,
    ChainRunner,
    ExecutionTrace,
    LayoutConfig,
    RegisterPolicy,
    TerminationReason,
    run_chain,
)
from .cpu.decoder import VALID_FIRST_BYTE, DecodeError, decode_instruction
from .cpu.loop_guard import CONTINUE, LOOP_DETECTED, loop_guard
from .ingest import DataBuffer

__all__ = [
    "GETPC_MODES",
    "BASELINE_MODES",
    "EXTENDED_MODES",
    "ScanConfig",
    "GetPCEvent",
    "Verdict",
    "ChainSummary",
    "DetectionReport",
    "detect_getpc_events",
    "classify_trace",
    "scan_buffer",
    "scan_buffers",
    "loop_guard",
    "CONTINUE",
    "LOOP_DETECTED",
]

GETPC_MODES = ("call_rel", "fstenv", "call_indirect", "stack_scan_fs")
BASELINE_MODES = frozenset({"call_rel", "fstenv"})
EXTENDED_MODES = frozenset(GETPC_MODES)

_DECODE_ERROR = TerminationReason.DECODE_ERROR
SHELLCODE = "shellcode"
BENIGN = "benign"


@dataclass(frozen=True)
class ScanConfig:
    payload_read_threshold: int = 8
    instruction_budget: int = 8192
    wall_budget: float | None = 2000.0  # milliseconds per buffer
    getpc_modes: frozenset = BASELINE_MODES
    loop_guard_window: int = 64
    register_policy: RegisterPolicy = field(default_factory=RegisterPolicy.zeroed)
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    syscall_model: bool = False
    profile: str = "baseline"

    def __post_init__(self):
        if self.payload_read_threshold < 1:
            raise ValueError("payload_read_threshold must be >= 1")
        if self.instruction_budget < 1:
            raise ValueError("instruction_budget must be >= 1")
        unknown = set(self.getpc_modes) - set(GETPC_MODES)
        if unknown:
            raise ValueError(f"unknown GetPC modes: {sorted(unknown)}")
        object.__setattr__(self, "getpc_modes", frozenset(self.getpc_modes))

    @classmethod
    def baseline(cls, **overrides) -> "ScanConfig":
        return cls(**overrides)

    @classmethod
    def extended(cls, **overrides) -> "ScanConfig":
        """Indirect-call and TIB stack-probe GetPC, buffer mapped on the stack."""
        overrides.setdefault("getpc_modes", EXTENDED_MODES)
        overrides.setdefault("layout", LayoutConfig(buffer_on_stack=True))
        return cls(profile="extended", **overrides)

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "ScanConfig":
        if profile == "baseline":
            return cls.baseline(**overrides)
        if profile == "extended":
            return cls.extended(**overrides)
        raise ValueError(f"unknown profile {profile!r}")

    def chain_config(self) -> ChainConfig:
        return ChainConfig(
            instruction_budget=self.instruction_budget,
            register_policy=self.register_policy,
            layout=self.layout,
            loop_guard_window=self.loop_guard_window,
            syscall_model=self.syscall_model,
        )

    def echo(self) -> dict:
        return {
            "profile": self.profile,
            "payload_read_threshold": self.payload_read_threshold,
            "instruction_budget": self.instruction_budget,
            "wall_budget_ms": self.wall_budget,
            "getpc_modes": sorted(self.getpc_modes),
            "loop_guard_window": self.loop_guard_window,
            "register_policy": self.register_policy.describe(),
            "buffer_on_stack": self.layout.buffer_on_stack,
            "syscall_model": self.syscall_model,
        }


@dataclass(frozen=True)
class GetPCEvent:
    kind: str  # call_rel | call_indirect | fstenv | fs_stack_probe
    at_eip: int
    recovered_address: int
    position: int  # access-log index from which later reads count


@dataclass(frozen=True)
class Verdict:
    label: str
    offset: int | None = None
    getpc: GetPCEvent | None = None
    read_count: int = 0
    termination: str | None = None

    @property
    def is_shellcode(self) -> bool:
        return self.label == SHELLCODE


def _slot_read_after(trace: ExecutionTrace, start: int, slot: int) -> bool:
    for e in trace.events[start:]:
        if e.kind is AccessKind.READ and e.addr <= slot < e.addr + e.size:
            return True
    return False


def detect_getpc_events(trace: ExecutionTrace, modes: Iterable[str]) -> list[GetPCEvent]:
    """GetPC occurrences in ``trace``, in execution order, filtered by ``modes``."""
    modes = frozenset(modes)
    found: list[GetPCEvent] = []
    for c in trace.controls:
        if c.kind == "call_rel":
            if "call_rel" in modes and trace.in_buffer(c.target):
                found.append(GetPCEvent("call_rel", c.at_eip, c.value, c.log_index))
        elif c.kind == "call_indirect":
            if ("call_indirect" in modes
                    and (trace.in_buffer(c.target) or trace.in_stack(c.target))
                    and _slot_read_after(trace, c.log_index, c.slot)):
                found.append(GetPCEvent("call_indirect", c.at_eip, c.value, c.log_index))
        elif c.kind == "fnstenv":
            if "fstenv" in modes and _slot_read_after(trace, c.log_index, c.slot):
                found.append(GetPCEvent("fstenv", c.at_eip, c.value, c.log_index))
    if "stack_scan_fs" in modes:
        top_field = (trace.fs_base + 4) & 0xFFFFFFFF
        bottom_field = (trace.fs_base + 8) & 0xFFFFFFFF
        for i, e in enumerate(trace.events):
            if e.kind is AccessKind.READ and (e.addr == top_field or e.addr == bottom_field):
                value = trace.stack_top if e.addr == top_field else trace.stack_bottom
                found.append(GetPCEvent("fs_stack_probe", e.at_eip, value, i + 1))
    found.sort(key=lambda ev: ev.position)
    return found


def classify_trace(trace: ExecutionTrace, config: ScanConfig,
                   events: list[GetPCEvent] | None = None) -> Verdict:
    """Shellcode iff some GetPC event is followed by enough distinct in-buffer reads.

    The earliest event sees a superset of every later event's reads, so it is
    the one that decides and the one reported as evidence.
    """
    termination = trace.termination
    if events is None:
        events = detect_getpc_events(trace, config.getpc_modes)
    if not events:
        return Verdict(BENIGN, termination=termination)
    first = events[0]
    count = trace.distinct_buffer_reads(first.position)
    if count >= config.payload_read_threshold:
        return Verdict(SHELLCODE, trace.entry_offset, first, count, termination)
    return Verdict(BENIGN, termination=termination)


class ChainSummary(NamedTuple):
    offset: int
    retired: int
    termination: str
    getpc: tuple[str, ...] = ()
    buffer_reads: int = 0
    verdict: str = BENIGN
    evidence_reads: int = 0


@dataclass
class DetectionReport:
    buffer_id: str
    length: int
    chains: list[ChainSummary]
    skipped: list[int]
    verdict: Verdict
    config: dict
    elapsed: float = field(default=0.0, compare=False)
    origin: tuple[str, int] | None = None

    @property
    def convicting_offsets(self) -> list[int]:
        return [c.offset for c in self.chains if c.verdict == SHELLCODE]

    def termination_counts(self) -> dict[str, int]:
        return dict(sorted(Counter(c.termination for c in self.chains).items()))


def _summarize(trace: ExecutionTrace, config: ScanConfig) -> ChainSummary:
    reads = trace.distinct_buffer_reads() if trace.events else 0
    if not trace.controls and "stack_scan_fs" not in config.getpc_modes:
        return ChainSummary(trace.entry_offset, trace.retired, trace.termination, (), reads)
    events = detect_getpc_events(trace, config.getpc_modes)
    verdict = classify_trace(trace, config, events)
    return ChainSummary(trace.entry_offset, trace.retired, trace.termination,
                        tuple(e.kind for e in events), reads, verdict.label, verdict.read_count)


def _scan_range(data: bytes, base: int, start: int, stop: int, config: ScanConfig,
                deadline: float | None) -> tuple[list[ChainSummary], list[Verdict], int]:
    """Run chains for offsets [start, stop); returns summaries, convictions and
    the first offset not reached (``stop`` when all ran)."""
    # Chains allocate many short-lived acyclic objects; cyclic GC passes
    # over them only cost time. Nothing here forms reference cycles (cached
    # decode errors are stored without tracebacks), so refcounting frees it all.
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        return _scan_offsets(data, base, start, stop, config, deadline)
    finally:
        if was_enabled:
            gc.enable()


def _scan_offsets(data: bytes, base: int, start: int, stop: int, config: ScanConfig,
                  deadline: float | None) -> tuple[list[ChainSummary], list[Verdict], int]:
    cache: dict = {}
    runner = ChainRunner(DataBuffer(data, base), config.chain_config(), cache)
    summaries = []
    convictions = []
    clock = time.perf_counter
    valid_first = VALID_FIRST_BYTE
    for offset in range(start, stop):
        if deadline is not None and clock() > deadline:
            return summaries, convictions, offset
        if not valid_first[data[offset]]:
            summaries.append(ChainSummary(offset, 0, _DECODE_ERROR))
            continue
        first = cache.get(offset)
        if first is None:
            try:
                first = cache[offset] = decode_instruction(data, offset)
            except DecodeError as exc:
                first = cache[offset] = exc.with_traceback(None)
        if type(first) is DecodeError:
            # Identical to what run_chain reports for an undecodable entry.
            summaries.append(ChainSummary(offset, 0, _DECODE_ERROR))
            continue
        trace = runner.run_reusing(offset)
        summary = _summarize(trace, config)
        summaries.append(summary)
        if summary.verdict == SHELLCODE:
            convictions.append(classify_trace(trace, config))
    return summaries, convictions, stop


def usable_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # not available on every platform
        return os.cpu_count() or 1


def worker_count(jobs: int) -> int:
    """Workers actually started for ``jobs``.

    More processes than CPUs only make each buffer's wall budget cover less
    emulation, so the request is capped at the CPUs this process may use.
    """
    return max(1, min(jobs, usable_cpus()))


def _scan_task(args):
    return _scan_range(*args)


def scan_buffer(buffer: DataBuffer | bytes, config: ScanConfig | None = None, *,
                buffer_id: str = "buffer", jobs: int = 1) -> DetectionReport:
    """Emulate from every offset of ``buffer`` and aggregate the verdicts.

    The wall budget is checked between chains; offsets not reached in time
    are listed in ``skipped``. With ``jobs > 1`` offsets are split into
    contiguous blocks run in worker processes and merged in offset order.
    """
    config = config or ScanConfig()
    if not isinstance(buffer, DataBuffer):
        buffer = DataBuffer(bytes(buffer)) if buffer else None
    started = time.perf_counter()
    if buffer is None or len(buffer) == 0:
        return DetectionReport(buffer_id, 0, [], [], Verdict(BENIGN), config.echo(), 0.0)
    n = len(buffer.data)
    deadline = None if config.wall_budget is None else started + config.wall_budget / 1000
    jobs = min(worker_count(jobs), n)
    if jobs == 1:
        results = [_scan_range(buffer.data, buffer.base, 0, n, config, deadline)]
        bounds = [(0, n)]
    else:
        step_size = -(-n // jobs)
        bounds = [(lo, min(n, lo + step_size)) for lo in range(0, n, step_size)]
        tasks = [(buffer.data, buffer.base, lo, hi, config, deadline) for lo, hi in bounds]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_scan_task, tasks))
    chains: list[ChainSummary] = []
    skipped: list[int] = []
    convictions: list[Verdict] = []
    for (lo, hi), (summaries, convicted, reached) in zip(bounds, results):
        chains.extend(summaries)
        convictions.extend(convicted)
        skipped.extend(range(reached, hi))
    verdict = min(convictions, key=lambda v: v.offset) if convictions else Verdict(BENIGN)
    return DetectionReport(
        buffer_id=buffer_id,
        length=n,
        chains=chains,
        skipped=skipped,
        verdict=verdict,
        config=config.echo(),
        elapsed=time.perf_counter() - started,
        origin=buffer.origin,
    )


def _scan_one(args):
    buffer, config, buffer_id = args
    return scan_buffer(buffer, config, buffer_id=buffer_id)


def scan_buffers(buffers: list[tuple[str, DataBuffer]], config: ScanConfig, jobs: int = 1) -> list[DetectionReport]:
    """Scan several buffers, fanning whole buffers out to ``jobs`` workers."""
    tasks = [(buf, config, name) for name, buf in buffers]
    jobs = worker_count(jobs)
    if jobs <= 1 or len(tasks) <= 1:
        if len(tasks) == 1 and jobs > 1:
            name, buf = buffers[0]
            return [scan_buffer(buf, config, buffer_id=name, jobs=jobs)]
        return [_scan_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_scan_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def with_threshold(config: ScanConfig, threshold: int) -> ScanConfig:
    return replace(config, payload_read_threshold=threshold)
