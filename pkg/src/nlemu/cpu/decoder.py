"""IA-32 decoder for the emulated instruction subset.

Only 32-bit addressing is understood. Anything outside the subset raises
:class:`DecodeError` instead of being guessed at, which the chain runner
turns into a ``decode_error`` termination.

Decoded values are plain slotted dataclasses and are shared between callers
(register operands and memory expressions come from caches), so treat them
as read-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

__all__ = [
    "REG_NAMES",
    "REG8_NAMES",
    "CONDITIONS",
    "MAX_LENGTH",
    "DecodeError",
    "Reg",
    "Imm",
    "Mem",
    "Rel",
    "Instruction",
    "decode_instruction",
]

EAX, ECX, EDX, EBX, ESP, EBP, ESI, EDI = range(8)
REG_NAMES = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")
REG8_NAMES = ("al", "cl", "dl", "bl", "ah", "ch", "dh", "bh")
REG16_NAMES = ("ax", "cx", "dx", "bx", "sp", "bp", "si", "di")

# Jcc condition nibbles. Parity (0xA/0xB) is not modeled.
CONDITIONS = {
    0x0: "jo", 0x1: "jno", 0x2: "jb", 0x3: "jae",
    0x4: "jz", 0x5: "jnz", 0x6: "jbe", 0x7: "ja",
    0x8: "js", 0x9: "jns",
    0xC: "jl", 0xD: "jge", 0xE: "jle", 0xF: "jg",
}

MAX_LENGTH = 15


class DecodeError(Exception):
    """The bytes at ``offset`` are not a supported instruction.

    ``reason`` is ``invalid_opcode`` or ``truncated``.
    """

    def __init__(self, reason: str, offset: int, detail: str = ""):
        self.reason = reason
        self.offset = offset
        self.detail = detail

    def __str__(self) -> str:
        text = f"{self.reason} at offset {self.offset}"
        return f"{text}: {self.detail}" if self.detail else text


@dataclass(slots=True)
class Reg:
    num: int
    size: int = 4

    def __str__(self) -> str:
        names = {4: REG_NAMES, 2: REG16_NAMES, 1: REG8_NAMES}[self.size]
        return names[self.num]


@dataclass(slots=True)
class Imm:
    value: int
    size: int = 4

    def __str__(self) -> str:
        return f"0x{self.value:x}"


@dataclass(slots=True)
class Mem:
    base: int | None
    index: int | None
    scale: int
    disp: int
    size: int
    seg: str | None = None

    def __str__(self) -> str:
        parts = []
        if self.base is not None:
            parts.append(REG_NAMES[self.base])
        if self.index is not None:
            parts.append(f"{REG_NAMES[self.index]}*{self.scale}")
        if self.disp or not parts:
            parts.append(f"0x{self.disp:x}")
        width = {1: "byte", 2: "word", 4: "dword", 28: "env"}.get(self.size, "mem")
        seg = f"{self.seg}:" if self.seg else ""
        return f"{width} {seg}[{'+'.join(parts)}]"


@dataclass(slots=True)
class Rel:
    """Branch displacement, relative to the end of the instruction."""

    disp: int

    def __str__(self) -> str:
        return f"${self.disp:+d}"


@dataclass(slots=True)
class Instruction:
    mnemonic: str
    operands: tuple
    length: int
    rep: bool = False
    opsize: bool = False
    cond: int = -1

    def __str__(self) -> str:
        text = self.mnemonic
        if self.rep and text in ("stosb", "movsb", "lodsb"):
            text = "rep " + text
        if self.operands:
            text += " " + ", ".join(str(op) for op in self.operands)
        return text


_REG = {size: tuple(Reg(n, size) for n in range(8)) for size in (1, 2, 4)}
_ALU_BY_BLOCK = {0x00: "add", 0x08: "or", 0x20: "and", 0x28: "sub", 0x30: "xor", 0x38: "cmp"}
_GROUP1 = ("add", "or", None, None, "and", "sub", "xor", "cmp")  # adc/sbb unmodeled
_SIMPLE_MOV = {0x88: "mov", 0x89: "mov", 0x8A: "mov", 0x8B: "mov",
               0x84: "test", 0x85: "test", 0x86: "xchg", 0x87: "xchg"}
_STRING = {0xA4: "movsb", 0xAA: "stosb", 0xAC: "lodsb"}

# Opcodes that accept the 0x66 operand-size prefix.
_OPSIZE_OK = frozenset(
    [base + k for base in _ALU_BY_BLOCK for k in (1, 3, 5)]
    + [0x81, 0x83, 0x85, 0x89, 0x8B, 0xA9, 0xC7, 0xF7]
    + list(range(0xB8, 0xC0))
)

_PREFIXES = frozenset((0xF3, 0x66, 0x64, 0x9B))

# First bytes (after prefixes) that can start a supported instruction.
_VALID_FIRST = bytearray(256)
for _b in range(256):
    if (_b < 0x40 and (_b & 0xF8) in _ALU_BY_BLOCK and (_b & 7) < 6) or 0x40 <= _b <= 0x5F:
        _VALID_FIRST[_b] = 1
for _b in (0x68, 0x6A, 0x80, 0x81, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8A, 0x8B, 0x8D, 0x8F,
           0xA0, 0xA1, 0xA2, 0xA3, 0xA4, 0xA8, 0xA9, 0xAA, 0xAC, 0xC2, 0xC3, 0xC6, 0xC7, 0xCC, 0xCD,
           0xD9, 0xE2, 0xE8, 0xE9, 0xEB, 0xF6, 0xF7, 0xFE, 0xFF, 0x0F):
    _VALID_FIRST[_b] = 1
for _b in range(0x70, 0x80):
    _VALID_FIRST[_b] = (_b & 0xF) in CONDITIONS
for _b in range(0x90, 0x98):
    _VALID_FIRST[_b] = 1
for _b in range(0xB0, 0xC0):
    _VALID_FIRST[_b] = 1
for _b in _PREFIXES:
    _VALID_FIRST[_b] = 1
_VALID_FIRST = bytes(_VALID_FIRST)
# Nonzero for bytes that may start a supported instruction (prefixes included).
VALID_FIRST_BYTE = _VALID_FIRST


@lru_cache(maxsize=65536)
def _mem(base, index, scale, disp, size, seg) -> Mem:
    return Mem(base, index, scale, disp, size, seg)


def _s8(b: int) -> int:
    return b - 0x100 if b & 0x80 else b


def _s32(v: int) -> int:
    return v - 0x100000000 if v & 0x80000000 else v


class _Short(Exception):
    """Ran past the 15-byte window or the end of the data."""


def _imm(data, pos: int, end: int, size: int) -> int:
    if pos + size > end:
        raise _Short
    if size == 1:
        return data[pos]
    return int.from_bytes(data[pos:pos + size], "little")


def _modrm(data, pos: int, end: int, size: int, seg):
    """Decode ModRM (+SIB, displacement) at ``pos``.

    Returns (reg field, r/m operand, position after the operand bytes).
    """
    if pos >= end:
        raise _Short
    modrm = data[pos]
    pos += 1
    mod = modrm >> 6
    reg = (modrm >> 3) & 7
    rm = modrm & 7
    if mod == 3:
        return reg, _REG[size if size in _REG else 4][rm], pos
    base = rm
    index = None
    scale = 1
    if rm == 4:
        if pos >= end:
            raise _Short
        sib = data[pos]
        pos += 1
        scale = 1 << (sib >> 6)
        idx = (sib >> 3) & 7
        index = None if idx == 4 else idx
        base = sib & 7
        if base == 5 and mod == 0:
            return reg, _mem(None, index, scale, _imm(data, pos, end, 4), size, seg), pos + 4
    elif rm == 5 and mod == 0:
        return reg, _mem(None, None, 1, _imm(data, pos, end, 4), size, seg), pos + 4
    if mod == 1:
        if pos >= end:
            raise _Short
        disp = _s8(data[pos]) & 0xFFFFFFFF
        pos += 1
    elif mod == 2:
        disp = _imm(data, pos, end, 4)
        pos += 4
    else:
        disp = 0
    return reg, _mem(base, index, scale, disp, size, seg), pos


def decode_instruction(data, offset: int = 0) -> Instruction:
    """Decode one instruction starting at ``data[offset]``.

    Raises DecodeError with reason ``invalid_opcode`` for bytes outside the
    supported subset (or longer than 15 bytes) and ``truncated`` when the
    instruction runs past the end of ``data``.
    """
    n = len(data)
    if not 0 <= offset < n:
        raise DecodeError("truncated", offset, "offset outside data")
    op = data[offset]
    if not _VALID_FIRST[op]:
        raise DecodeError("invalid_opcode", offset)
    end = offset + MAX_LENGTH if offset + MAX_LENGTH < n else n
    try:
        return _decode(data, offset, end, op)
    except _Short:
        pass
    # Raised outside the handler so the error carries no context chain
    # (cached errors would otherwise keep the decoding frames alive).
    if end == n and offset + MAX_LENGTH > n:
        raise DecodeError("truncated", offset)
    raise DecodeError("invalid_opcode", offset, "longer than 15 bytes")


def _decode(data, offset: int, end: int, op: int) -> Instruction:
    pos = offset + 1
    rep = opsize = fwait = False
    seg = None
    while op in _PREFIXES:
        if op == 0xF3 and not rep:
            rep = True
        elif op == 0x66 and not opsize:
            opsize = True
        elif op == 0x64 and seg is None:
            seg = "fs"
        elif op == 0x9B and not fwait:
            fwait = True
        else:
            raise DecodeError("invalid_opcode", offset, "repeated prefix")
        if pos >= end:
            raise _Short
        op = data[pos]
        pos += 1
    if not _VALID_FIRST[op]:
        raise DecodeError("invalid_opcode", offset)
    if opsize and op not in _OPSIZE_OK:
        raise DecodeError("invalid_opcode", offset, f"operand-size prefix on 0x{op:02x}")
    if fwait and op != 0xD9:
        raise DecodeError("invalid_opcode", offset, "fwait")
    vsize = 2 if opsize else 4

    if op < 0x40:
        if op == 0x0F:
            if pos >= end:
                raise _Short
            op2 = data[pos]
            pos += 1
            if op2 == 0x31:
                return Instruction("rdtsc", (), pos - offset, rep, opsize)
            if op2 == 0x34:
                return Instruction("sysenter", (), pos - offset, rep, opsize)
            if 0x80 <= op2 <= 0x8F and (op2 & 0xF) in CONDITIONS:
                cc = op2 & 0xF
                rel = Rel(_s32(_imm(data, pos, end, 4)))
                return Instruction(CONDITIONS[cc], (rel,), pos + 4 - offset, rep, opsize, cc)
            raise DecodeError("invalid_opcode", offset, f"0f {op2:02x}")
        name = _ALU_BY_BLOCK[op & 0xF8]
        form = op & 7
        if form == 4:
            ops = (_REG[1][EAX], Imm(_imm(data, pos, end, 1), 1))
            return Instruction(name, ops, pos + 1 - offset, rep, opsize)
        if form == 5:
            ops = (_REG[vsize][EAX], Imm(_imm(data, pos, end, vsize), vsize))
            return Instruction(name, ops, pos + vsize - offset, rep, opsize)
        size = 1 if form in (0, 2) else vsize
        reg, rm, pos = _modrm(data, pos, end, size, seg)
        ops = (rm, _REG[size][reg]) if form < 2 else (_REG[size][reg], rm)
        return Instruction(name, ops, pos - offset, rep, opsize)
    if op < 0x60:
        name = ("inc", "dec", "push", "pop")[(op - 0x40) >> 3]
        return Instruction(name, (_REG[4][op & 7],), pos - offset, rep, opsize)
    if op == 0x68:
        return Instruction("push", (Imm(_imm(data, pos, end, 4)),), pos + 4 - offset, rep, opsize)
    if op == 0x6A:
        imm = Imm(_s8(_imm(data, pos, end, 1)) & 0xFFFFFFFF)
        return Instruction("push", (imm,), pos + 1 - offset, rep, opsize)
    if 0x70 <= op <= 0x7F:
        cc = op & 0xF
        rel = Rel(_s8(_imm(data, pos, end, 1)))
        return Instruction(CONDITIONS[cc], (rel,), pos + 1 - offset, rep, opsize, cc)
    if op in (0x80, 0x81, 0x83):
        size = 1 if op == 0x80 else vsize
        reg, rm, pos = _modrm(data, pos, end, size, seg)
        name = _GROUP1[reg]
        if name is None:
            raise DecodeError("invalid_opcode", offset, "adc/sbb")
        if op == 0x81:
            imm = _imm(data, pos, end, vsize)
            pos += vsize
        else:
            imm = _imm(data, pos, end, 1)
            pos += 1
            if op == 0x83:
                imm = _s8(imm) & (0xFFFF if vsize == 2 else 0xFFFFFFFF)
        return Instruction(name, (rm, Imm(imm, size)), pos - offset, rep, opsize)
    if op in _SIMPLE_MOV:
        size = 1 if not op & 1 else vsize
        reg, rm, pos = _modrm(data, pos, end, size, seg)
        ops = (_REG[size][reg], rm) if op in (0x8A, 0x8B) else (rm, _REG[size][reg])
        return Instruction(_SIMPLE_MOV[op], ops, pos - offset, rep, opsize)
    if op == 0x8D:
        reg, rm, pos = _modrm(data, pos, end, 4, None)
        return Instruction("lea", (_REG[4][reg], rm), pos - offset, rep, opsize)
    if op == 0x8F:
        reg, rm, pos = _modrm(data, pos, end, 4, seg)
        if reg != 0:
            raise DecodeError("invalid_opcode", offset)
        return Instruction("pop", (rm,), pos - offset, rep, opsize)
    if op == 0x90:
        return Instruction("nop", (), pos - offset, rep, opsize)
    if op < 0x98:
        return Instruction("xchg", (_REG[4][EAX], _REG[4][op & 7]), pos - offset, rep, opsize)
    if op <= 0xA3:
        size = 1 if op in (0xA0, 0xA2) else 4
        mem = _mem(None, None, 1, _imm(data, pos, end, 4), size, seg)
        ops = (_REG[size][EAX], mem) if op <= 0xA1 else (mem, _REG[size][EAX])
        return Instruction("mov", ops, pos + 4 - offset, rep, opsize)
    if op in _STRING:
        return Instruction(_STRING[op], (), pos - offset, rep, opsize)
    if op == 0xA8:
        return Instruction("test", (_REG[1][EAX], Imm(_imm(data, pos, end, 1), 1)), pos + 1 - offset, rep, opsize)
    if op == 0xA9:
        ops = (_REG[vsize][EAX], Imm(_imm(data, pos, end, vsize), vsize))
        return Instruction("test", ops, pos + vsize - offset, rep, opsize)
    if op <= 0xB7:
        return Instruction("mov", (_REG[1][op & 7], Imm(_imm(data, pos, end, 1), 1)), pos + 1 - offset, rep, opsize)
    if op <= 0xBF:
        ops = (_REG[vsize][op & 7], Imm(_imm(data, pos, end, vsize), vsize))
        return Instruction("mov", ops, pos + vsize - offset, rep, opsize)
    if op == 0xC2:
        return Instruction("ret", (Imm(_imm(data, pos, end, 2), 2),), pos + 2 - offset, rep, opsize)
    if op == 0xC3:
        return Instruction("ret", (), pos - offset, rep, opsize)
    if op in (0xC6, 0xC7):
        size = 1 if op == 0xC6 else vsize
        reg, rm, pos = _modrm(data, pos, end, size, seg)
        if reg != 0:
            raise DecodeError("invalid_opcode", offset)
        return Instruction("mov", (rm, Imm(_imm(data, pos, end, size), size)), pos + size - offset, rep, opsize)
    if op == 0xCC:
        return Instruction("int", (Imm(3, 1),), pos - offset, rep, opsize)
    if op == 0xCD:
        return Instruction("int", (Imm(_imm(data, pos, end, 1), 1),), pos + 1 - offset, rep, opsize)
    if op == 0xD9:
        if pos >= end:
            raise _Short
        modrm = data[pos]
        if modrm == 0xEE and not fwait:
            return Instruction("fldz", (), pos + 1 - offset, rep, opsize)
        if modrm >> 6 != 3 and (modrm >> 3) & 7 == 6:
            _, rm, pos = _modrm(data, pos, end, 28, seg)
            return Instruction("fstenv" if fwait else "fnstenv", (rm,), pos - offset, rep, opsize)
        raise DecodeError("invalid_opcode", offset, "fpu")
    if op == 0xE2:
        return Instruction("loop", (Rel(_s8(_imm(data, pos, end, 1))),), pos + 1 - offset, rep, opsize)
    if op == 0xE8:
        return Instruction("call", (Rel(_s32(_imm(data, pos, end, 4))),), pos + 4 - offset, rep, opsize)
    if op == 0xE9:
        return Instruction("jmp", (Rel(_s32(_imm(data, pos, end, 4))),), pos + 4 - offset, rep, opsize)
    if op == 0xEB:
        return Instruction("jmp", (Rel(_s8(_imm(data, pos, end, 1))),), pos + 1 - offset, rep, opsize)
    if op in (0xF6, 0xF7):
        size = 1 if op == 0xF6 else vsize
        reg, rm, pos = _modrm(data, pos, end, size, seg)
        if reg == 0:
            return Instruction("test", (rm, Imm(_imm(data, pos, end, size), size)), pos + size - offset, rep, opsize)
        if reg == 2:
            return Instruction("not", (rm,), pos - offset, rep, opsize)
        if reg == 3:
            return Instruction("neg", (rm,), pos - offset, rep, opsize)
        raise DecodeError("invalid_opcode", offset, "mul/div group")
    if op == 0xFE:
        reg, rm, pos = _modrm(data, pos, end, 1, seg)
        if reg > 1:
            raise DecodeError("invalid_opcode", offset)
        return Instruction("inc" if reg == 0 else "dec", (rm,), pos - offset, rep, opsize)
    # 0xFF group
    reg, rm, pos = _modrm(data, pos, end, 4, seg)
    name = ("inc", "dec", "call", None, "jmp", None, "push", None)[reg]
    if name is None:
        raise DecodeError("invalid_opcode", offset, "far call/jmp")
    return Instruction(name, (rm,), pos - offset, rep, opsize)
