import random

import pytest
from hypothesis import given, settings, strategies as st

from nlemu.cpu import (
    DEFAULT_STACK_SIZE,
    DEFAULT_STACK_TOP,
    FPU_ENV_IP_OFFSET,
    AccessKind,
    ChainConfig,
    ChainRunner,
    DecodeError,
    LayoutConfig,
    LayoutError,
    RegisterPolicy,
    TerminationReason,
    decode_instruction,
    init_state,
    run_chain,
    step,
)
from nlemu.ingest import DataBuffer

LISTING_1 = bytes.fromhex("685e5690c3ffd4")
SMALL = LayoutConfig(stack_size=0x200)


def boot(code: bytes, policy=None, layout=None):
    return init_state(policy or RegisterPolicy.zeroed(), layout or LayoutConfig(), code)


def run_steps(state, memory, n, config=None):
    outcomes = []
    for _ in range(n):
        out = step(state, memory, config)
        outcomes.append(out)
        if out.terminated:
            break
    return outcomes


# -- init_state ------------------------------------------------------------

def test_zeroed_policy():
    state, _ = boot(b"\x90")
    esp = state.reg("esp")
    assert esp == DEFAULT_STACK_TOP - 16
    assert [v for i, v in enumerate(state.regs) if i != 4] == [0] * 7
    assert state.fpu_last_ip == 0
    assert state.flags == {"CF": False, "ZF": False, "SF": False, "OF": False}


def test_randomized_policy_is_a_function_of_seed():
    a, _ = boot(b"\x90", RegisterPolicy.randomized(7))
    b, _ = boot(b"\x90", RegisterPolicy.randomized(7))
    c, _ = boot(b"\x90", RegisterPolicy.randomized(8))
    assert a.regs == b.regs
    assert a.regs != c.regs
    assert a.reg("esp") == DEFAULT_STACK_TOP - 16


def test_fixed_policy():
    state, _ = boot(b"\x90", RegisterPolicy.fixed(esi=0x1234))
    assert state.reg("esi") == 0x1234
    with pytest.raises(ValueError):
        RegisterPolicy.fixed(esp=1)


def test_tib_stack_fields():
    state, memory = boot(b"\x90")
    assert memory.peek_dword(state.fs_base + 4) == DEFAULT_STACK_TOP
    assert memory.peek_dword(state.fs_base + 8) == DEFAULT_STACK_TOP - DEFAULT_STACK_SIZE


def test_buffer_on_stack_layout():
    code = b"\x90" * 32
    layout = LayoutConfig(buffer_on_stack=True)
    state, memory = boot(code, layout=layout)
    bottom = memory.peek_dword(state.fs_base + 8)
    assert memory.buffer.base == bottom == DEFAULT_STACK_TOP - DEFAULT_STACK_SIZE - len(code)
    assert state.eip == memory.buffer.base


def test_overlapping_layout_rejected():
    with pytest.raises(LayoutError):
        boot(b"\x90" * 64, layout=LayoutConfig(buffer_base=DEFAULT_STACK_TOP - 32))
    with pytest.raises(LayoutError):
        boot(b"")


def test_one_buffer_and_one_tib():
    _, memory = boot(b"\x90")
    kinds = [r.kind.value for r in memory.regions]
    assert kinds.count("buffer") == 1 and kinds.count("tib") == 1
    for i, a in enumerate(memory.regions):
        for b in memory.regions[i + 1:]:
            assert a.end <= b.base or b.end <= a.base


# -- step -------------------------------------------------------------------

def test_nop_step():
    state, memory = boot(b"\x90")
    x = state.eip
    out = step(state, memory)
    assert out.terminated is None
    assert out.next.eip == x + 1
    assert out.events == []


def test_xor_self_clears_and_sets_flags():
    state, memory = boot(b"\x31\xc0", RegisterPolicy.fixed(eax=0xDEADBEEF))
    step(state, memory)
    assert state.reg("eax") == 0
    assert state.zf and not state.sf


def test_call_pop_getpc():
    state, memory = boot(bytes.fromhex("e8000000005e"))
    a = state.eip
    run_steps(state, memory, 2)
    assert state.reg("esi") == a + 5


def test_listing_1_leaves_esi_after_call_esp():
    state, memory = boot(LISTING_1)
    a = state.eip
    outs = run_steps(state, memory, 6)  # push, call esp, then pop/push/nop/ret on the stack
    assert all(o.terminated is None for o in outs)
    assert state.reg("esi") == a + len(LISTING_1)
    assert state.eip == a + len(LISTING_1)


def test_fstenv_saves_fpu_instruction_pointer():
    # FLDZ; NOP; FNSTENV [ESP-12]; the saved IP lands at [ESP].
    state, memory = boot(bytes.fromhex("d9ee90d97424f4"))
    a = state.eip
    step(state, memory)
    assert state.fpu_last_ip == a
    step(state, memory)
    assert state.fpu_last_ip == a
    step(state, memory)
    esp = state.reg("esp")
    assert memory.peek_dword(esp - 12 + FPU_ENV_IP_OFFSET) == a


def test_fpu_last_ip_zero_until_fpu_op():
    state, memory = boot(b"\x90\x90\xd9\xee")
    run_steps(state, memory, 2)
    assert state.fpu_last_ip == 0
    step(state, memory)
    assert state.fpu_last_ip == state.eip - 2


def test_memory_operands_are_logged():
    code = bytes.fromhex("50" "58" "8b06" "8906")  # push eax; pop eax; mov eax,[esi]; mov [esi],eax
    state, memory = boot(code + b"\x90" * 8)
    state.regs[6] = memory.buffer.base + 8
    outs = run_steps(state, memory, 4)
    kinds = [[e.kind for e in o.events] for o in outs]
    assert kinds == [[AccessKind.WRITE], [AccessKind.READ], [AccessKind.READ], [AccessKind.WRITE]]
    assert len(memory.access_log) == 4
    assert [e.in_buffer for e in memory.access_log] == [False, False, True, True]


def test_self_modifying_code_is_seen_by_next_fetch():
    # mov byte [esi+4], 0x40 turns the INT3 at offset 4 into INC EAX.
    code = bytes.fromhex("c6460440" "cc")
    state, memory = boot(code)
    state.regs[6] = memory.buffer.base
    outs = run_steps(state, memory, 2)
    assert outs[-1].terminated is None
    assert state.reg("eax") == 1


def test_rdtsc_is_synthetic_and_monotonic():
    state, memory = boot(bytes.fromhex("0f31" "89c3" "0f31"))
    run_steps(state, memory, 3)
    first, second = state.reg("ebx"), state.reg("eax")
    assert first == 0 and second == 2 * 40
    assert state.reg("edx") == 0


def test_sysenter_unmodeled_by_default():
    state, memory = boot(bytes.fromhex("b8110000000f34"))
    outs = run_steps(state, memory, 2)
    assert outs[-1].terminated is TerminationReason.SYSCALL_UNMODELED


def test_faults():
    # read of an unmapped address
    state, memory = boot(bytes.fromhex("a100000000"))
    assert step(state, memory).terminated is TerminationReason.MEMORY_FAULT
    # write into the read-only TIB
    state, memory = boot(bytes.fromhex("a30000fd7f"))
    assert step(state, memory).terminated is TerminationReason.MEMORY_FAULT
    # undecodable byte
    state, memory = boot(b"\x0f\x0b")
    assert step(state, memory).terminated is TerminationReason.DECODE_ERROR
    # unmodeled instruction
    state, memory = boot(b"\xcc")
    assert step(state, memory).terminated is TerminationReason.UNMODELED_INSTRUCTION


# -- run_chain ---------------------------------------------------------------

def test_single_ret_chain():
    trace = run_chain(DataBuffer(b"\xc3"), 0)
    assert trace.retired == 1
    assert trace.termination in (TerminationReason.MEMORY_FAULT, TerminationReason.CLEAN_RETURN)


def test_jump_to_self_detected_on_second_visit():
    trace = run_chain(DataBuffer(b"\xeb\xfe"), 0)
    assert trace.termination is TerminationReason.LOOP_DETECTED
    assert trace.retired == 2


def test_counted_loop_with_writes_runs_into_budget():
    # mov ecx,1000000; L: mov [esi],ecx; loop L   (ESI points into the buffer)
    code = bytes.fromhex("b940420f00" "890e" "e2fc") + b"\x00" * 8
    config = ChainConfig(register_policy=RegisterPolicy.fixed(esi=0x00400000 + 9))
    trace = run_chain(DataBuffer(code), 0, config)
    assert trace.termination is TerminationReason.BUDGET_EXHAUSTED
    assert trace.retired == config.instruction_budget


def test_jump_outside_regions_faults():
    trace = run_chain(DataBuffer(bytes.fromhex("e900100000")), 0)
    assert trace.termination is TerminationReason.MEMORY_FAULT


def test_entry_offset_bounds():
    with pytest.raises(IndexError):
        run_chain(DataBuffer(b"\x90"), 1)


def test_decoder_output_matches_fetch():
    trace = run_chain(DataBuffer(b"\x90\x90\x0f\x0b"), 0)
    assert trace.termination is TerminationReason.DECODE_ERROR
    assert trace.retired == 2


# -- properties -------------------------------------------------------------

# Bias random code towards instructions that touch memory and move ESP.
FRAGMENTS = [bytes.fromhex(h) for h in (
    "50", "5e", "56", "58", "c3", "e800000000", "ffd4", "8906", "8b06", "3006", "46", "4e",
    "d9ee", "d97424f4", "e2fa", "75f8", "ebfe", "f3aa", "a4", "0f31", "31c0", "01f0",
)]
code_strategy = st.lists(
    st.one_of(st.sampled_from(FRAGMENTS), st.binary(min_size=1, max_size=3)), min_size=1, max_size=24
).map(b"".join)


def snapshot(memory):
    return {r.base: bytes(r.data) for r in memory.regions}


@settings(max_examples=150)
@given(code_strategy, st.integers(0, 2**32 - 1))
def test_step_invariants(code, seed):
    state, memory = init_state(RegisterPolicy.randomized(seed), SMALL, code)
    state.regs[6] = memory.buffer.base  # keep ESI-relative operands in the buffer
    buf = memory.buffer
    stack = memory.stack
    for _ in range(60):
        before = snapshot(memory)
        eip = state.eip
        region = memory.find(eip)
        try:
            inst = decode_instruction(bytes(region.data), eip - region.base) if region else None
        except DecodeError:
            inst = None
        out = step(state, memory, ChainConfig(loop_guard_window=0))
        after = snapshot(memory)
        written = {e.addr + k for e in out.events
                   if e.kind in (AccessKind.WRITE, AccessKind.SYSCALL_WRITE) for k in range(e.size)}
        for base, old in before.items():
            new = after[base]
            for i, (x, y) in enumerate(zip(old, new)):
                if x != y:
                    assert base + i in written
        for e in out.events:
            assert e.in_buffer == (buf.base <= e.addr < buf.base + buf.length)
        if out.terminated:
            break
        assert stack.base <= state.reg("esp") <= stack.end
        if inst is not None and inst.mnemonic == "call":
            assert memory.peek_dword(state.reg("esp")) == eip + inst.length
        if inst is not None and inst.mnemonic in ("fnstenv", "fstenv"):
            (c,) = [c for c in memory.control_log if c.at_eip == eip][-1:]
            assert memory.peek_dword(c.target + FPU_ENV_IP_OFFSET) == state.fpu_last_ip


def test_chain_isolation_and_order_independence():
    rng = random.Random(2024)
    for trial in range(3):
        data = bytes(rng.getrandbits(8) for _ in range(256))
        # Plant a self-modifying decryptor so chains do write into the buffer.
        data = bytes.fromhex("e8000000005e" "8036aa" "46" "ebfa") + data[11:]
        buf = DataBuffer(data)
        forward = ChainRunner(buf)
        reference = [forward.run(i) for i in range(256)]
        backward = ChainRunner(buf)
        reverse = [backward.run_reusing(i) for i in reversed(range(256))][::-1]
        assert reverse == reference
        shuffled = ChainRunner(buf)
        order = list(range(256))
        rng.shuffle(order)
        got = {i: shuffled.run_reusing(i) for i in order}
        assert [got[i] for i in range(256)] == reference
        assert any(e.kind is AccessKind.WRITE and e.in_buffer for t in reference for e in t.events)


def test_pairwise_order_independence():
    rng = random.Random(5)
    data = bytes(rng.getrandbits(8) for _ in range(256))
    buf = DataBuffer(data)
    for _ in range(200):
        i, j = rng.randrange(256), rng.randrange(256)
        r1, r2 = ChainRunner(buf), ChainRunner(buf)
        a = (r1.run_reusing(i), r1.run_reusing(j))
        b = (r2.run_reusing(j), r2.run_reusing(i))
        assert a == (b[1], b[0])


@settings(max_examples=60)
@given(code_strategy, st.integers(0, 2**32 - 1), st.integers(1, 300))
def test_determinism_and_budget_ceiling(code, seed, budget):
    config = ChainConfig(instruction_budget=budget, register_policy=RegisterPolicy.randomized(seed))
    buf = DataBuffer(code)
    for offset in range(len(code)):
        a = run_chain(buf, offset, config)
        b = run_chain(buf, offset, config)
        assert a == b
        assert a.final_state.regs == b.final_state.regs
        assert a.retired <= budget
