"""CPU state, tracked memory image, single-step execution and chain runs."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import NamedTuple

from .decoder import (
    CONDITIONS, EAX, ECX, EDI, EDX, ESI, ESP, REG_NAMES, DecodeError, Imm, Instruction, Mem, Reg, Rel,
    decode_instruction,
)

MASK32 = 0xFFFFFFFF
DEFAULT_BUFFER_BASE = 0x00400000
DEFAULT_STACK_TOP = 0x0012F000
DEFAULT_STACK_SIZE = 0x10000
DEFAULT_TIB_BASE = 0x7FFD0000
DEFAULT_SCRATCH_BASE = 0x00A00000
TIB_SIZE = 0x1000
# [ESP] holds this at chain start; returning to it ends the chain cleanly.
RETURN_SENTINEL = 0xFFFF0000
TSC_PER_INSTRUCTION = 40
STATUS_SUCCESS = 0
STATUS_ACCESS_VIOLATION = 0xC0000005
FPU_ENV_SIZE = 28
FPU_ENV_IP_OFFSET = 12

_SIZE_MASK = {1: 0xFF, 2: 0xFFFF, 4: MASK32}
_SIGN_BIT = {1: 0x80, 2: 0x8000, 4: 0x80000000}


class TerminationReason(str, Enum):
    BUDGET_EXHAUSTED = "budget_exhausted"
    DECODE_ERROR = "decode_error"
    MEMORY_FAULT = "memory_fault"
    LOOP_DETECTED = "loop_detected"
    CLEAN_RETURN = "clean_return"
    UNMODELED_INSTRUCTION = "unmodeled_instruction"
    SYSCALL_UNMODELED = "syscall_unmodeled"


class AccessKind(str, Enum):
    READ = "read"
    WRITE = "write"
    FETCH = "execute-fetch"
    # Accesses performed on the chain's behalf by a modeled system call.
    SYSCALL_READ = "syscall_read"
    SYSCALL_WRITE = "syscall_write"


class RegionKind(str, Enum):
    BUFFER = "buffer"
    STACK = "stack"
    TIB = "tib"
    SCRATCH = "scratch"


class AccessEvent(NamedTuple):
    kind: AccessKind
    addr: int
    size: int
    at_eip: int
    in_buffer: bool


class ControlEvent(NamedTuple):
    """Control-transfer or FPU-environment event, positioned in the access log.

    ``log_index`` is the access-log length right after the instruction
    finished, so events at or beyond it happened strictly later.
    """

    kind: str  # "call_rel", "call_indirect", "fnstenv"
    at_eip: int
    log_index: int
    target: int  # call destination / environment address
    value: int  # pushed return address / saved FPU instruction pointer
    slot: int  # address where ``value`` was stored


class LayoutError(ValueError):
    pass


class MachineFault(Exception):
    """A step could not complete; carries the termination reason."""

    def __init__(self, reason: TerminationReason, detail: str = ""):
        self.reason = reason
        self.detail = detail

    def __str__(self) -> str:
        return f"{self.reason}: {self.detail}" if self.detail else str(self.reason)


@dataclass(frozen=True)
class RegisterPolicy:
    """How general registers are initialised before a chain runs."""

    kind: str = "zeroed"
    seed: int = 0
    values: tuple = ()

    @classmethod
    def zeroed(cls) -> "RegisterPolicy":
        return cls("zeroed")

    @classmethod
    def randomized(cls, seed: int) -> "RegisterPolicy":
        return cls("randomized", seed=seed)

    @classmethod
    def fixed(cls, **values: int) -> "RegisterPolicy":
        for name in values:
            if name not in REG_NAMES or name == "esp":
                raise ValueError(f"cannot fix register {name!r}")
        return cls("fixed", values=tuple(sorted(values.items())))

    def register_vector(self) -> list[int]:
        if self.kind == "zeroed":
            return [0] * 8
        if self.kind == "randomized":
            rng = random.Random(self.seed)
            return [rng.getrandbits(32) for _ in range(8)]
        if self.kind == "fixed":
            regs = [0] * 8
            for name, value in self.values:
                regs[REG_NAMES.index(name)] = value & MASK32
            return regs
        raise ValueError(f"unknown register policy {self.kind!r}")

    def describe(self) -> str:
        if self.kind == "randomized":
            return f"randomized({self.seed})"
        if self.kind == "fixed":
            return "fixed(" + ",".join(f"{k}=0x{v:x}" for k, v in self.values) + ")"
        return self.kind


@dataclass(frozen=True)
class LayoutConfig:
    buffer_base: int = DEFAULT_BUFFER_BASE
    stack_top: int = DEFAULT_STACK_TOP
    stack_size: int = DEFAULT_STACK_SIZE
    tib_base: int = DEFAULT_TIB_BASE
    scratch_base: int = DEFAULT_SCRATCH_BASE
    # Map the buffer just below the stack, inside the stack range the TIB
    # advertises, as if the payload had been delivered onto the thread stack.
    buffer_on_stack: bool = False

    def placement(self, length: int) -> tuple[int, int, int]:
        """Return (buffer base, advertised stack bottom, stack top)."""
        top = self.stack_top
        stack_base = top - self.stack_size
        if self.buffer_on_stack:
            buffer_base = stack_base - length
            return buffer_base, buffer_base, top
        return self.buffer_base, stack_base, top


@dataclass
class CpuState:
    regs: list[int]
    eip: int
    cf: bool = False
    zf: bool = False
    sf: bool = False
    of: bool = False
    fpu_last_ip: int = 0
    fs_base: int = DEFAULT_TIB_BASE
    retired: int = 0

    @property
    def flags(self) -> dict[str, bool]:
        return {"CF": self.cf, "ZF": self.zf, "SF": self.sf, "OF": self.of}

    def reg(self, name: str) -> int:
        return self.regs[REG_NAMES.index(name)]

    def copy(self) -> "CpuState":
        return CpuState(list(self.regs), self.eip, self.cf, self.zf, self.sf, self.of,
                        self.fpu_last_ip, self.fs_base, self.retired)

    def state_hash(self) -> int:
        return hash((self.eip, tuple(self.regs), self.cf, self.zf, self.sf, self.of))


class Region:
    """One mapped range. Backing bytes are copied on first write."""

    __slots__ = ("base", "end", "length", "kind", "writable", "executable", "data", "owned", "origin")

    def __init__(self, base: int, data, kind: RegionKind, writable: bool = True,
                 executable: bool = True, owned: bool = False):
        self.base = base
        self.length = len(data)
        self.end = base + self.length
        self.kind = kind
        self.writable = writable
        self.executable = executable
        self.data = data
        self.owned = owned
        self.origin = data

    def contains(self, addr: int, size: int = 1) -> bool:
        return self.base <= addr and addr + size <= self.end

    def mutable(self) -> bytearray:
        if not self.owned:
            self.data = bytearray(self.data)
            self.owned = True
        return self.data

    def snapshot(self) -> bytes:
        return bytes(self.data)

    def __repr__(self) -> str:
        return f"Region({self.kind.value}, 0x{self.base:08x}+0x{self.length:x})"


class MemoryImage:
    def __init__(self, regions: list[Region], *, validate: bool = True):
        if validate:
            self._validate(regions)
        kinds = [r.kind for r in regions]
        self.regions = regions
        self.buffer = regions[kinds.index(RegionKind.BUFFER)]
        self.tib = regions[kinds.index(RegionKind.TIB)]
        self.stack = regions[kinds.index(RegionKind.STACK)]
        self.access_log: list[AccessEvent] = []
        self.control_log: list[ControlEvent] = []
        self.next_scratch = 0

    @staticmethod
    def _validate(regions: list[Region]) -> None:
        for i, a in enumerate(regions):
            for b in regions[i + 1:]:
                if a.base < b.end and b.base < a.end:
                    raise LayoutError(f"{a!r} overlaps {b!r}")
        kinds = [r.kind for r in regions]
        if kinds.count(RegionKind.BUFFER) != 1 or kinds.count(RegionKind.TIB) != 1:
            raise LayoutError("need exactly one buffer and one tib region")
        if kinds.count(RegionKind.STACK) != 1:
            raise LayoutError("need exactly one stack region")

    def find(self, addr: int, size: int = 1) -> Region | None:
        for r in self.regions:
            if r.base <= addr and addr + size <= r.end:
                return r
        return None

    def peek(self, addr: int, size: int) -> bytes:
        """Read bytes without logging (for tests and inspection)."""
        r = self.find(addr, size)
        if r is None:
            raise KeyError(f"0x{addr:08x} not mapped")
        off = addr - r.base
        return bytes(r.data[off:off + size])

    def peek_dword(self, addr: int) -> int:
        return int.from_bytes(self.peek(addr, 4), "little")

    def add_scratch(self, base: int, length: int) -> Region:
        region = Region(base, bytearray(length), RegionKind.SCRATCH, owned=True)
        for r in self.regions:
            if r.base < region.end and base < r.end:
                raise LayoutError(f"scratch 0x{base:08x} overlaps {r!r}")
        self.regions.append(region)
        return region


@lru_cache(maxsize=16)
def _stack_template(size: int, esp_offset: int) -> bytes:
    data = bytearray(size)
    data[esp_offset:esp_offset + 4] = RETURN_SENTINEL.to_bytes(4, "little")
    return bytes(data)


@lru_cache(maxsize=16)
def _tib_template(tib_base: int, stack_top: int, stack_bottom: int) -> bytes:
    data = bytearray(TIB_SIZE)
    data[0x00:0x04] = MASK32.to_bytes(4, "little")  # end of SEH chain
    data[0x04:0x08] = stack_top.to_bytes(4, "little")
    data[0x08:0x0C] = stack_bottom.to_bytes(4, "little")
    data[0x18:0x1C] = tib_base.to_bytes(4, "little")
    return bytes(data)


@lru_cache(maxsize=256)
def _check_layout(layout: LayoutConfig, base: int, length: int) -> None:
    top = layout.stack_top
    MemoryImage._validate([
        Region(base, range(length), RegionKind.BUFFER),
        Region(top - layout.stack_size, range(layout.stack_size), RegionKind.STACK),
        Region(layout.tib_base, range(TIB_SIZE), RegionKind.TIB),
    ])


def init_state(policy: RegisterPolicy, layout: LayoutConfig, buffer: bytes,
               buffer_base: int | None = None) -> tuple[CpuState, MemoryImage]:
    """Build a fresh CPU state and memory image around ``buffer``.

    ``buffer_base`` overrides ``layout.buffer_base`` unless the layout maps
    the buffer onto the stack.
    """
    if not buffer:
        raise LayoutError("empty buffer")
    base, bottom, top = layout.placement(len(buffer))
    if buffer_base is not None and not layout.buffer_on_stack:
        base = buffer_base
    if base < 0 or base + len(buffer) > 1 << 32:
        raise LayoutError("buffer outside the 32-bit address space")
    stack_base = top - layout.stack_size
    esp = top - 16
    regions = [
        Region(base, buffer if type(buffer) is bytes else bytes(buffer), RegionKind.BUFFER),
        Region(stack_base, _stack_template(layout.stack_size, esp - stack_base), RegionKind.STACK),
        Region(layout.tib_base, _tib_template(layout.tib_base, top, bottom), RegionKind.TIB,
               writable=False, executable=False),
    ]
    _check_layout(layout, base, len(buffer))
    memory = MemoryImage(regions, validate=False)
    regs = policy.register_vector()
    regs[ESP] = esp
    state = CpuState(regs, base, fs_base=layout.tib_base)
    return state, memory


@dataclass(frozen=True)
class ChainConfig:
    instruction_budget: int = 8192
    wall_budget_ms: float | None = None
    register_policy: RegisterPolicy = field(default_factory=RegisterPolicy.zeroed)
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    loop_guard_window: int = 64
    syscall_model: bool = False
    alloc_syscall: int = 0x11
    read_syscall: int = 0xBA
    log_fetches: bool = False

    def __post_init__(self):
        if self.instruction_budget < 1:
            raise ValueError("instruction_budget must be >= 1")


@dataclass
class StepOutcome:
    events: list[AccessEvent]
    next: CpuState
    terminated: TerminationReason | None = None
    detail: str = ""


class Machine:
    """Executes instructions against one CpuState/MemoryImage pair.

    The state and memory are updated in place.
    """

    def __init__(self, state: CpuState, memory: MemoryImage, config: ChainConfig | None = None,
                 decode_cache: dict | None = None):
        self.state = state
        self.memory = memory
        self.config = config or ChainConfig()
        self.log = memory.access_log
        self.controls = memory.control_log
        self.buf = memory.buffer
        self.stk = memory.stack
        self.shared_cache = decode_cache if decode_cache is not None else {}
        self.local_cache: dict[int, Instruction | DecodeError] = {}
        # Set once the buffer differs from the bytes the shared cache decoded.
        self.dirty = False
        tib = memory.tib.data
        self.stack_hi = int.from_bytes(tib[4:8], "little")
        self.stack_lo = int.from_bytes(tib[8:12], "little")

    def reset(self, regs: list[int], eip: int) -> None:
        """Prepare for a new chain: undo the previous chain's writes and
        start from ``regs``/``eip`` with clear flags and empty logs."""
        buf, stk = self.buf, self.stk
        for e in self.log:
            kind = e.kind
            if kind is AccessKind.WRITE or kind is AccessKind.SYSCALL_WRITE:
                addr = e.addr
                for r in (buf, stk):
                    if r.base <= addr < r.end:
                        off = addr - r.base
                        r.data[off:off + e.size] = r.origin[off:off + e.size]
                        break
        memory = self.memory
        del memory.regions[3:]
        memory.next_scratch = 0
        memory.access_log = self.log = []
        memory.control_log = self.controls = []
        self.dirty = False
        if self.local_cache:
            self.local_cache = {}
        st = self.state
        st.regs = list(regs)
        st.eip = eip
        st.cf = st.zf = st.sf = st.of = False
        st.fpu_last_ip = 0
        st.retired = 0

    # -- memory -----------------------------------------------------------

    def _region(self, addr: int, size: int) -> Region:
        b = self.buf
        if b.base <= addr and addr + size <= b.end:
            return b
        s = self.stk
        if s.base <= addr and addr + size <= s.end:
            return s
        for r in self.memory.regions:
            if r.base <= addr and addr + size <= r.end:
                return r
        raise MachineFault(TerminationReason.MEMORY_FAULT, f"unmapped 0x{addr:08x}/{size}")

    def read(self, addr: int, size: int, at: int, kind: AccessKind = AccessKind.READ) -> int:
        addr &= MASK32
        r = self._region(addr, size)
        self.log.append(AccessEvent(kind, addr, size, at, r is self.buf))
        off = addr - r.base
        if size == 1:
            return r.data[off]
        return int.from_bytes(r.data[off:off + size], "little")

    def write(self, addr: int, size: int, value: int, at: int,
              kind: AccessKind = AccessKind.WRITE) -> None:
        addr &= MASK32
        r = self._region(addr, size)
        if not r.writable:
            raise MachineFault(TerminationReason.MEMORY_FAULT, f"read-only 0x{addr:08x}")
        self.log.append(AccessEvent(kind, addr, size, at, r is self.buf))
        data = r.data if r.owned else r.mutable()
        off = addr - r.base
        if size == 1:
            data[off] = value & 0xFF
        else:
            data[off:off + size] = (value & _SIZE_MASK[size]).to_bytes(size, "little")
        if r is self.buf:
            self.dirty = True
            cache = self.local_cache
            for k in range(off - 14, off + size):
                cache.pop(k, None)

    def write_bytes(self, addr: int, payload: bytes, at: int, kind: AccessKind) -> None:
        addr &= MASK32
        r = self._region(addr, max(1, len(payload)))
        if not r.writable:
            raise MachineFault(TerminationReason.MEMORY_FAULT, f"read-only 0x{addr:08x}")
        self.log.append(AccessEvent(kind, addr, len(payload), at, r is self.buf))
        data = r.data if r.owned else r.mutable()
        off = addr - r.base
        data[off:off + len(payload)] = payload
        if r is self.buf:
            self.dirty = True
            for k in range(off - 14, off + len(payload)):
                self.local_cache.pop(k, None)

    def read_bytes(self, addr: int, size: int, at: int, kind: AccessKind) -> bytes:
        addr &= MASK32
        r = self._region(addr, max(1, size))
        self.log.append(AccessEvent(kind, addr, size, at, r is self.buf))
        off = addr - r.base
        return bytes(r.data[off:off + size])

    # -- fetch/decode -------------------------------------------------------

    def fetch(self, eip: int) -> Instruction:
        b = self.buf
        off = eip - b.base
        if 0 <= off < b.length:
            if self.dirty:
                inst = self.local_cache.get(off)
                if inst is None:
                    try:
                        inst = decode_instruction(b.data, off)
                    except DecodeError as exc:
                        inst = exc.with_traceback(None)  # cached: keep no frames alive
                    self.local_cache[off] = inst
            else:
                cache = self.shared_cache
                inst = cache.get(off)
                if inst is None:
                    try:
                        inst = decode_instruction(b.data, off)
                    except DecodeError as exc:
                        inst = exc.with_traceback(None)  # cached: keep no frames alive
                    cache[off] = inst
            if type(inst) is DecodeError:
                raise MachineFault(TerminationReason.DECODE_ERROR, str(inst))
        else:
            r = None
            for cand in self.memory.regions:
                if cand.base <= eip < cand.end:
                    r = cand
                    break
            if r is None or not r.executable:
                raise MachineFault(TerminationReason.MEMORY_FAULT, f"execute 0x{eip:08x}")
            try:
                inst = decode_instruction(r.data, eip - r.base)
            except DecodeError as exc:
                raise MachineFault(TerminationReason.DECODE_ERROR, str(exc)) from None
        if self.config.log_fetches:
            self.log.append(AccessEvent(AccessKind.FETCH, eip, inst.length, eip, 0 <= off < b.length))
        return inst

    # -- operands -----------------------------------------------------------

    def ea(self, m: Mem) -> int:
        regs = self.state.regs
        a = m.disp
        if m.base is not None:
            a += regs[m.base]
        if m.index is not None:
            a += regs[m.index] * m.scale
        if m.seg is not None:
            a += self.state.fs_base
        return a & MASK32

    def get(self, op, at: int) -> int:
        t = type(op)
        if t is Reg:
            v = self.state.regs[op.num] if op.size == 4 or op.num < 4 else self.state.regs[op.num - 4] >> 8
            return v & _SIZE_MASK[op.size]
        if t is Imm:
            return op.value
        return self.read(self.ea(op), op.size, at)

    def put(self, op, value: int, at: int, addr: int | None = None) -> None:
        regs = self.state.regs
        if type(op) is Reg:
            size = op.size
            if size == 4:
                regs[op.num] = value & MASK32
            elif size == 2:
                regs[op.num] = (regs[op.num] & 0xFFFF0000) | (value & 0xFFFF)
            elif op.num < 4:
                regs[op.num] = (regs[op.num] & 0xFFFFFF00) | (value & 0xFF)
            else:
                n = op.num - 4
                regs[n] = (regs[n] & 0xFFFF00FF) | ((value & 0xFF) << 8)
        else:
            self.write(self.ea(op) if addr is None else addr, op.size, value, at)

    def push(self, value: int, at: int) -> int:
        regs = self.state.regs
        sp = (regs[ESP] - 4) & MASK32
        self.write(sp, 4, value, at)
        regs[ESP] = sp
        return sp

    def pop(self, at: int) -> int:
        regs = self.state.regs
        value = self.read(regs[ESP], 4, at)
        regs[ESP] = (regs[ESP] + 4) & MASK32
        return value

    def _set_szf(self, r: int, size: int) -> None:
        st = self.state
        st.zf = r == 0
        st.sf = bool(r & _SIGN_BIT[size])

    # -- execution ----------------------------------------------------------

    def step(self) -> None:
        """Execute one instruction; raises MachineFault to terminate."""
        st = self.state
        eip = st.eip
        inst = None
        if not self.dirty and not self.config.log_fetches:
            inst = self.shared_cache.get(eip - self.buf.base)
            if type(inst) is not Instruction:
                inst = None
        if inst is None:
            inst = self.fetch(eip)
        st.eip = (eip + inst.length) & MASK32
        _DISPATCH[inst.mnemonic](self, inst, eip)
        st.retired += 1
        sp = st.regs[ESP]
        if sp < self.stack_lo or sp > self.stack_hi:
            raise MachineFault(TerminationReason.MEMORY_FAULT, f"esp 0x{sp:08x} left the stack")

    def _nop(self, inst, at):
        pass

    def _mov(self, inst, at):
        dst, src = inst.operands
        self.put(dst, self.get(src, at), at)

    def _lea(self, inst, at):
        dst, src = inst.operands
        if type(src) is not Mem:
            raise MachineFault(TerminationReason.UNMODELED_INSTRUCTION, "lea with register operand")
        a = src.disp
        regs = self.state.regs
        if src.base is not None:
            a += regs[src.base]
        if src.index is not None:
            a += regs[src.index] * src.scale
        regs[dst.num] = a & MASK32

    def _push_op(self, inst, at):
        self.push(self.get(inst.operands[0], at), at)

    def _pop_op(self, inst, at):
        dst = inst.operands[0]
        value = self.pop(at)
        if type(dst) is Mem:
            # Address is computed after ESP has been incremented.
            self.write(self.ea(dst), 4, value, at)
        else:
            self.put(dst, value, at)

    def _xchg(self, inst, at):
        a, b = inst.operands
        if type(a) is Mem:
            addr = self.ea(a)
            va = self.read(addr, a.size, at)
            vb = self.get(b, at)
            self.write(addr, a.size, vb, at)
            self.put(b, va, at)
        else:
            va = self.get(a, at)
            vb = self.get(b, at)
            self.put(a, vb, at)
            self.put(b, va, at)

    def _incdec(self, inst, at):
        dst = inst.operands[0]
        size = dst.size
        addr = self.ea(dst) if type(dst) is Mem else None
        v = self.read(addr, size, at) if addr is not None else self.get(dst, at)
        mask = _SIZE_MASK[size]
        sign = _SIGN_BIT[size]
        if inst.mnemonic == "inc":
            r = (v + 1) & mask
            self.state.of = r == sign
        else:
            r = (v - 1) & mask
            self.state.of = v == sign
        self._set_szf(r, size)
        self.put(dst, r, at, addr)

    def _alu(self, inst, at):
        dst, src = inst.operands
        name = inst.mnemonic
        size = dst.size
        addr = self.ea(dst) if type(dst) is Mem else None
        a = self.read(addr, size, at) if addr is not None else self.get(dst, at)
        b = self.get(src, at)
        mask = _SIZE_MASK[size]
        sign = _SIGN_BIT[size]
        st = self.state
        if name == "add":
            r = (a + b) & mask
            st.cf = a + b > mask
            st.of = bool(~(a ^ b) & (a ^ r) & sign)
        elif name == "sub" or name == "cmp":
            r = (a - b) & mask
            st.cf = a < b
            st.of = bool((a ^ b) & (a ^ r) & sign)
        else:
            if name == "xor":
                r = a ^ b
            elif name == "or":
                r = a | b
            else:
                r = a & b
            st.cf = st.of = False
        st.zf = r == 0
        st.sf = bool(r & sign)
        if name != "cmp" and name != "test":
            self.put(dst, r, at, addr)

    def _not(self, inst, at):
        dst = inst.operands[0]
        addr = self.ea(dst) if type(dst) is Mem else None
        v = self.read(addr, dst.size, at) if addr is not None else self.get(dst, at)
        self.put(dst, ~v & _SIZE_MASK[dst.size], at, addr)

    def _neg(self, inst, at):
        dst = inst.operands[0]
        size = dst.size
        addr = self.ea(dst) if type(dst) is Mem else None
        v = self.read(addr, size, at) if addr is not None else self.get(dst, at)
        r = -v & _SIZE_MASK[size]
        st = self.state
        st.cf = v != 0
        st.of = v == _SIGN_BIT[size]
        self._set_szf(r, size)
        self.put(dst, r, at, addr)

    def _branch_target(self, op, at) -> int:
        if type(op) is Rel:
            return (self.state.eip + op.disp) & MASK32
        return self.get(op, at)

    def _jmp(self, inst, at):
        self.state.eip = self._branch_target(inst.operands[0], at)

    def _jcc(self, inst, at):
        st = self.state
        cc = inst.cond
        base = cc >> 1
        if base == 0:
            taken = st.of
        elif base == 1:
            taken = st.cf
        elif base == 2:
            taken = st.zf
        elif base == 3:
            taken = st.cf or st.zf
        elif base == 4:
            taken = st.sf
        elif base == 6:
            taken = st.sf != st.of
        else:
            taken = st.zf or st.sf != st.of
        if cc & 1:
            taken = not taken
        if taken:
            st.eip = (st.eip + inst.operands[0].disp) & MASK32

    def _call(self, inst, at):
        op = inst.operands[0]
        target = self._branch_target(op, at)
        ret = self.state.eip
        slot = self.push(ret, at)
        self.state.eip = target
        kind = "call_rel" if type(op) is Rel else "call_indirect"
        self.controls.append(ControlEvent(kind, at, len(self.log), target, ret, slot))

    def _ret(self, inst, at):
        target = self.pop(at)
        if inst.operands:
            self.state.regs[ESP] = (self.state.regs[ESP] + inst.operands[0].value) & MASK32
        if target == RETURN_SENTINEL:
            self.state.eip = target
            self.state.retired += 1
            raise MachineFault(TerminationReason.CLEAN_RETURN)
        self.state.eip = target

    def _loop(self, inst, at):
        regs = self.state.regs
        regs[ECX] = (regs[ECX] - 1) & MASK32
        if regs[ECX]:
            self.state.eip = (self.state.eip + inst.operands[0].disp) & MASK32

    def _string(self, inst, at):
        st = self.state
        regs = st.regs
        if inst.rep:
            if regs[ECX] == 0:
                return
        name = inst.mnemonic
        if name == "stosb":
            self.write(regs[EDI], 1, regs[EAX], at)
            regs[EDI] = (regs[EDI] + 1) & MASK32
        elif name == "movsb":
            v = self.read(regs[ESI], 1, at)
            self.write(regs[EDI], 1, v, at)
            regs[ESI] = (regs[ESI] + 1) & MASK32
            regs[EDI] = (regs[EDI] + 1) & MASK32
        else:
            v = self.read(regs[ESI], 1, at)
            regs[EAX] = (regs[EAX] & 0xFFFFFF00) | v
            regs[ESI] = (regs[ESI] + 1) & MASK32
        if inst.rep:
            regs[ECX] = (regs[ECX] - 1) & MASK32
            if regs[ECX]:
                # One iteration per step; stay on the instruction.
                st.eip = at

    def _fldz(self, inst, at):
        self.state.fpu_last_ip = at

    def _fnstenv(self, inst, at):
        addr = self.ea(inst.operands[0])
        fip = self.state.fpu_last_ip
        words = (0xFFFF037F, 0xFFFF0000, 0xFFFFFFFF, fip, 0x001B, 0, 0xFFFF0000)
        env = b"".join(w.to_bytes(4, "little") for w in words)
        self.write_bytes(addr, env, at, AccessKind.WRITE)
        self.controls.append(ControlEvent("fnstenv", at, len(self.log), addr, fip,
                                          (addr + FPU_ENV_IP_OFFSET) & MASK32))

    def _rdtsc(self, inst, at):
        tsc = self.state.retired * TSC_PER_INSTRUCTION
        regs = self.state.regs
        regs[EAX] = tsc & MASK32
        regs[EDX] = (tsc >> 32) & MASK32

    def _sysenter(self, inst, at):
        if not self.config.syscall_model:
            raise MachineFault(TerminationReason.SYSCALL_UNMODELED, f"sysenter eax=0x{self.state.regs[EAX]:x}")
        regs = self.state.regs
        edx = regs[EDX]
        status = self._syscall(regs[EAX], (edx + 8) & MASK32, at)
        # Resume through the first pushed return address, as the user-mode
        # fast-call stub does after SYSEXIT.
        ret = self.read(edx, 4, at, AccessKind.SYSCALL_READ)
        regs[EAX] = status
        regs[ESP] = (edx + 4) & MASK32
        self.state.eip = ret

    def _int(self, inst, at):
        vector = inst.operands[0].value
        if vector != 0x2E:
            raise MachineFault(TerminationReason.UNMODELED_INSTRUCTION, f"int 0x{vector:x}")
        if not self.config.syscall_model:
            raise MachineFault(TerminationReason.SYSCALL_UNMODELED, f"int 2e eax=0x{self.state.regs[EAX]:x}")
        regs = self.state.regs
        regs[EAX] = self._syscall(regs[EAX], regs[EDX], at)

    def _syscall(self, number: int, args: int, at: int) -> int:
        cfg = self.config

        def arg(i: int) -> int:
            return self.read((args + 4 * i) & MASK32, 4, at, AccessKind.SYSCALL_READ)

        if number == cfg.alloc_syscall:
            base_ptr, size_ptr = arg(1), arg(3)
            size = self.read(size_ptr, 4, at, AccessKind.SYSCALL_READ)
            size = max(0x1000, (size + 0xFFF) & ~0xFFF)
            if size > 0x100000:
                return STATUS_ACCESS_VIOLATION
            mem = self.memory
            base = self.config.layout.scratch_base + mem.next_scratch
            mem.next_scratch += size
            mem.add_scratch(base, size)
            self.write(base_ptr, 4, base, at, AccessKind.SYSCALL_WRITE)
            self.write(size_ptr, 4, size, at, AccessKind.SYSCALL_WRITE)
            return STATUS_SUCCESS
        if number == cfg.read_syscall:
            src, dst, size, done_ptr = arg(1), arg(2), arg(3), arg(4)
            if size > 0x100000:
                return STATUS_ACCESS_VIOLATION
            try:
                data = self.read_bytes(src, size, at, AccessKind.SYSCALL_READ)
                self.write_bytes(dst, data, at, AccessKind.SYSCALL_WRITE)
                if done_ptr:
                    self.write(done_ptr, 4, size, at, AccessKind.SYSCALL_WRITE)
            except MachineFault:
                return STATUS_ACCESS_VIOLATION
            return STATUS_SUCCESS
        raise MachineFault(TerminationReason.SYSCALL_UNMODELED, f"service 0x{number:x}")


_DISPATCH = {
    "nop": Machine._nop, "mov": Machine._mov, "lea": Machine._lea, "push": Machine._push_op,
    "pop": Machine._pop_op, "xchg": Machine._xchg, "inc": Machine._incdec, "dec": Machine._incdec,
    "add": Machine._alu, "or": Machine._alu, "and": Machine._alu, "sub": Machine._alu,
    "xor": Machine._alu, "cmp": Machine._alu, "test": Machine._alu, "not": Machine._not,
    "neg": Machine._neg, "jmp": Machine._jmp, "call": Machine._call, "ret": Machine._ret,
    "loop": Machine._loop, "stosb": Machine._string, "movsb": Machine._string,
    "lodsb": Machine._string, "fldz": Machine._fldz, "fnstenv": Machine._fnstenv,
    "fstenv": Machine._fnstenv, "rdtsc": Machine._rdtsc, "sysenter": Machine._sysenter,
    "int": Machine._int,
}
_DISPATCH.update({name: Machine._jcc for name in CONDITIONS.values()})


def step(state: CpuState, memory: MemoryImage, config: ChainConfig | None = None) -> StepOutcome:
    """Execute exactly one instruction, updating ``state`` and ``memory`` in place."""
    start = len(memory.access_log)
    machine = Machine(state, memory, config)
    try:
        machine.step()
    except MachineFault as fault:
        return StepOutcome(memory.access_log[start:], state, fault.reason, fault.detail)
    return StepOutcome(memory.access_log[start:], state)


@dataclass
class ExecutionTrace:
    entry_offset: int
    entry_eip: int
    retired: int
    termination: TerminationReason
    events: list[AccessEvent]
    controls: list[ControlEvent]
    buffer_base: int
    buffer_length: int
    stack_bottom: int
    stack_top: int
    fs_base: int
    detail: str = ""
    elapsed: float = field(default=0.0, compare=False)
    final_state: CpuState | None = field(default=None, compare=False, repr=False)
    memory: MemoryImage | None = field(default=None, compare=False, repr=False)

    def in_buffer(self, addr: int) -> bool:
        return self.buffer_base <= addr < self.buffer_base + self.buffer_length

    def in_stack(self, addr: int) -> bool:
        return self.stack_bottom <= addr < self.stack_top

    def distinct_buffer_reads(self, start: int = 0) -> int:
        return len({e.addr for e in self.events[start:] if e.kind is AccessKind.READ and e.in_buffer})


class ChainRunner:
    """Runs chains over one buffer, sharing the setup work between offsets.

    Every chain still starts from a fresh CpuState and an unmodified copy of
    the buffer; only immutable templates and decoded instructions are shared.
    """

    def __init__(self, buffer, config: ChainConfig | None = None, decode_cache: dict | None = None):
        self.config = config = config or ChainConfig()
        data = getattr(buffer, "data", buffer)
        self.data = data if type(data) is bytes else bytes(data)
        if not self.data:
            raise LayoutError("empty buffer")
        layout = config.layout
        base, bottom, top = layout.placement(len(self.data))
        explicit = getattr(buffer, "base", None)
        if explicit is not None and not layout.buffer_on_stack:
            base = explicit
        if base < 0 or base + len(self.data) > 1 << 32:
            raise LayoutError("buffer outside the 32-bit address space")
        _check_layout(layout, base, len(self.data))
        self.base = base
        self.stack_base = top - layout.stack_size
        self.esp = top - 16
        self.stack_template = _stack_template(layout.stack_size, self.esp - self.stack_base)
        self.tib = Region(layout.tib_base, _tib_template(layout.tib_base, top, bottom), RegionKind.TIB,
                          writable=False, executable=False)
        self.regs = config.register_policy.register_vector()
        self.regs[ESP] = self.esp
        self.decode_cache = decode_cache if decode_cache is not None else {}
        self._machine: Machine | None = None

    def fresh(self, entry_offset: int) -> Machine:
        regions = [
            Region(self.base, self.data, RegionKind.BUFFER),
            Region(self.stack_base, self.stack_template, RegionKind.STACK),
            self.tib,
        ]
        memory = MemoryImage(regions, validate=False)
        state = CpuState(list(self.regs), (self.base + entry_offset) & MASK32, fs_base=self.tib.base)
        return Machine(state, memory, self.config, self.decode_cache)

    def run(self, entry_offset: int) -> ExecutionTrace:
        """Run one chain on private state; the trace keeps final state and memory."""
        if not 0 <= entry_offset < len(self.data):
            raise IndexError(f"entry offset {entry_offset} outside buffer of {len(self.data)} bytes")
        return self._drive(self.fresh(entry_offset), entry_offset, keep=True)

    def run_reusing(self, entry_offset: int) -> ExecutionTrace:
        """Like :meth:`run`, but recycles one machine between calls.

        The returned trace carries no final state or memory image, since
        both are reset by the next call.
        """
        machine = self._machine
        if machine is None:
            machine = self._machine = self.fresh(entry_offset)
        else:
            machine.reset(self.regs, (self.base + entry_offset) & MASK32)
        return self._drive(machine, entry_offset, keep=False)

    def _drive(self, machine: Machine, entry_offset: int, keep: bool) -> ExecutionTrace:
        clock = time.perf_counter
        started = clock()
        config = self.config
        st = machine.state
        regs = st.regs
        # Machine.step inlined, with the shared-cache fetch fast path.
        cache = machine.shared_cache
        base = self.base
        fetch = machine.fetch
        dispatch = _DISPATCH
        fast_fetch = not config.log_fetches
        lo, hi = machine.stack_lo, machine.stack_hi
        # LoopGuard inlined: the step index at which each key was last seen;
        # a repeat within ``window`` steps is a loop.
        window = config.loop_guard_window
        guard = window > 0
        seen: dict = {}
        budget = config.instruction_budget
        deadline = None if config.wall_budget_ms is None else started + config.wall_budget_ms / 1000
        termination = TerminationReason.BUDGET_EXHAUSTED
        detail = ""
        try:
            while st.retired < budget:
                eip = st.eip
                inst = cache.get(eip - base) if fast_fetch and not machine.dirty else None
                if type(inst) is not Instruction:
                    inst = fetch(eip)
                st.eip = (eip + inst.length) & MASK32
                dispatch[inst.mnemonic](machine, inst, eip)
                st.retired += 1
                sp = regs[ESP]
                if sp < lo or sp > hi:
                    raise MachineFault(TerminationReason.MEMORY_FAULT, f"esp 0x{sp:08x} left the stack")
                if guard:
                    key = (st.eip, st.cf, st.zf, st.sf, st.of, *regs)
                    n = st.retired
                    last = seen.get(key)
                    if last is not None and n - last <= window:
                        termination = TerminationReason.LOOP_DETECTED
                        break
                    seen[key] = n
                if deadline is not None and not st.retired & 1023 and clock() > deadline:
                    break
        except MachineFault as fault:
            termination = fault.reason
            detail = fault.detail
        state = st
        memory = machine.memory
        return ExecutionTrace(
            entry_offset, self.base + entry_offset, state.retired, termination,
            memory.access_log, memory.control_log, self.base, len(self.data),
            machine.stack_lo, machine.stack_hi, state.fs_base, detail,
            clock() - started, state if keep else None, memory if keep else None,
        )


def run_chain(buffer, entry_offset: int, config: ChainConfig | None = None, *,
              decode_cache: dict | None = None) -> ExecutionTrace:
    """Emulate one candidate chain starting at ``entry_offset`` of ``buffer``.

    ``buffer`` is a DataBuffer-like object (``data``/``base`` attributes) or
    plain bytes mapped at the layout's buffer base. Chains never observe each
    other's writes.
    """
    return ChainRunner(buffer, config, decode_cache).run(entry_offset)
