"""A tiny IA-32 assembler for the handful of encodings the generators emit.

Layouts are resolved by rebuilding until label positions stop moving, so
instruction forms may depend on label distances.
"""

from __future__ import annotations

import random
from typing import Callable

from ..cpu.decoder import EAX, EBP, EBX, ECX, EDI, EDX, ESI, ESP, REG_NAMES

GENERAL = (EAX, ECX, EDX, EBX, EBP, ESI, EDI)
# Registers usable as a byte pointer in ``[reg]`` without SIB or disp8 forms.
POINTER_REGS = (EAX, ECX, EDX, EBX, ESI, EDI)
LOW_BYTE_REGS = (EAX, ECX, EDX, EBX)


class AsmError(ValueError):
    pass


def reg_number(reg: int | str) -> int:
    if isinstance(reg, str):
        try:
            return REG_NAMES.index(reg.lower())
        except ValueError:
            raise AsmError(f"unknown register {reg!r}") from None
    if not 0 <= reg < 8:
        raise AsmError(f"unknown register {reg!r}")
    return reg


def modrm(mod: int, reg: int, rm: int) -> int:
    return (mod << 6) | (reg << 3) | rm


def d32(value: int) -> bytes:
    return (value & 0xFFFFFFFF).to_bytes(4, "little")


def nul_free(code: bytes) -> bool:
    return 0 not in code


def fits8(value: int) -> bool:
    return -128 <= value <= 127


class Asm:
    """Byte buffer with labels and rel8 fixups."""

    def __init__(self, known: dict[str, int] | None = None):
        self.code = bytearray()
        self.labels: dict[str, int] = {}
        self.known = known or {}
        self._fixups: list[tuple[int, str]] = []

    def __len__(self) -> int:
        return len(self.code)

    def here(self) -> int:
        return len(self.code)

    def at(self, name: str) -> int:
        """Position of ``name`` from the previous pass (0 on the first)."""
        return self.known.get(name, 0)

    def label(self, name: str) -> None:
        self.labels[name] = len(self.code)

    def raw(self, *chunks: bytes | int) -> None:
        for c in chunks:
            if isinstance(c, int):
                self.code.append(c & 0xFF)
            else:
                self.code += c

    def jump8(self, opcode: int, target: str) -> None:
        self.code.append(opcode)
        self._fixups.append((len(self.code), target))
        self.code.append(0)

    def finish(self) -> bytes:
        for pos, name in self._fixups:
            disp = self.labels[name] - (pos + 1)
            if not fits8(disp):
                raise AsmError(f"jump to {name} out of rel8 range ({disp})")
            self.code[pos] = disp & 0xFF
        return bytes(self.code)


def assemble(build: Callable[[Asm], None], max_passes: int = 12) -> tuple[bytes, dict[str, int]]:
    """Run ``build`` until its label positions are a fixed point."""
    known: dict[str, int] = {}
    for _ in range(max_passes):
        asm = Asm(known)
        build(asm)
        code = asm.finish()
        if asm.labels == known:
            return code, asm.labels
        known = asm.labels
    raise AsmError("layout did not converge")


# -- encodings -----------------------------------------------------------------

def push_r(r: int) -> bytes:
    return bytes([0x50 + r])


def pop_r(r: int) -> bytes:
    return bytes([0x58 + r])


def inc_r(r: int) -> bytes:
    return bytes([0x40 + r])


def dec_r(r: int) -> bytes:
    return bytes([0x48 + r])


def mov_r_imm(r: int, value: int) -> bytes:
    return bytes([0xB8 + r]) + d32(value)


def mov_r8_imm(r: int, value: int) -> bytes:
    return bytes([0xB0 + r, value & 0xFF])


def mov_r_r(dst: int, src: int) -> bytes:
    return bytes([0x89, modrm(3, src, dst)])


def xor_r_r(dst: int, src: int) -> bytes:
    return bytes([0x31, modrm(3, src, dst)])


def add_r_r(dst: int, src: int) -> bytes:
    return bytes([0x01, modrm(3, src, dst)])


def not_r(r: int) -> bytes:
    return bytes([0xF7, modrm(3, 2, r)])


def alu_r_imm(ext: int, r: int, value: int, short: bool | None = None) -> bytes:
    """``ext``: 0 add, 1 or, 4 and, 5 sub, 6 xor, 7 cmp."""
    if short is None:
        short = fits8(value)
    if short:
        return bytes([0x83, modrm(3, ext, r), value & 0xFF])
    return bytes([0x81, modrm(3, ext, r)]) + d32(value)


def lea_r_disp(dst: int, base: int, disp: int) -> bytes:
    if base in (ESP, EBP):
        raise AsmError("lea base must not be esp/ebp")
    if fits8(disp):
        return bytes([0x8D, modrm(1, dst, base), disp & 0xFF])
    return bytes([0x8D, modrm(2, dst, base)]) + d32(disp)


def xor_mem8_imm(r: int, key: int) -> bytes:
    return bytes([0x80, modrm(0, 6, r), key])


def xor_mem8_r8(r: int, key_reg: int) -> bytes:
    return bytes([0x30, modrm(0, key_reg, r)])


# -- polymorphic building blocks -------------------------------------------------

def load_constant(r: int, value: int, u: float, require_nul_free: bool) -> bytes:
    """Some encoding that leaves ``value`` in register ``r``; ``u`` in [0, 1) picks it."""
    value &= 0xFFFFFFFF
    forms = [mov_r_imm(r, value), mov_r_imm(r, ~value) + not_r(r)]
    if value < 0x80:
        forms.append(bytes([0x6A, value]) + pop_r(r))
    if require_nul_free:
        forms = [f for f in forms if nul_free(f)]
    # XOR-masked immediate; the mask is derived from ``u`` so the form is stable.
    mask = 0x01010101 | int(u * 0xFFFFFFFF) & 0x7F7F7F7F
    for _ in range(256):
        pair = mov_r_imm(r, value ^ mask) + alu_r_imm(6, r, mask, short=False)
        if not require_nul_free or nul_free(pair):
            forms.append(pair)
            break
        mask = (mask * 0x9E3779B1 + 0x01010101) & 0xFFFFFFFF | 0x01010101
    if not forms:
        raise AsmError(f"no nul-free encoding of 0x{value:x}")
    return forms[int(u * len(forms))]


def add_constant(r: int, value: int, u: float, require_nul_free: bool) -> bytes:
    """Encoding of ``r += value`` (flags clobbered)."""
    value = value & 0xFFFFFFFF
    signed = value - (1 << 32) if value & 0x80000000 else value
    neg = -signed
    forms = [alu_r_imm(0, r, signed), alu_r_imm(5, r, neg if fits8(neg) else neg & 0xFFFFFFFF)]
    if r not in (ESP, EBP):
        forms.append(lea_r_disp(r, r, signed))
    if require_nul_free:
        forms = [f for f in forms if nul_free(f)]
        if not forms:
            # Split into two nul-free imm32 additions.
            a = 0x01010101 | int(u * 0xFFFFFFFF) & 0x7F7F7F7F
            for _ in range(256):
                pair = alu_r_imm(0, r, a, short=False) + alu_r_imm(0, r, (value - a) & 0xFFFFFFFF, short=False)
                if nul_free(pair):
                    return pair
                a = (a * 0x9E3779B1 + 0x01010101) & 0xFFFFFFFF | 0x01010101
            raise AsmError(f"no nul-free addition of 0x{value:x}")
    return forms[int(u * len(forms))]


def increment(r: int, u: float) -> bytes:
    forms = [inc_r(r), alu_r_imm(0, r, 1), alu_r_imm(5, r, -1)]
    if r not in (ESP, EBP):
        forms.append(lea_r_disp(r, r, 1))
    return forms[int(u * len(forms))]


def junk_unit(rng: random.Random, flags_live: bool = False, avoid: tuple[int, ...] = ()) -> bytes:
    """One no-op-equivalent unit: registers (other than ESP) and memory are
    unchanged afterwards; flags too when ``flags_live``."""
    r = rng.choice([x for x in GENERAL if x not in avoid] or [EAX])
    kinds = ["nop", "xchg", "mov", "pushpop"]
    if not flags_live:
        kinds += ["incdec", "addsub"]
    kind = rng.choice(kinds)
    if kind == "nop":
        return b"\x90"
    if kind == "xchg":
        return b"\x90" if r == EAX else bytes([0x87, modrm(3, r, r)])
    if kind == "mov":
        return mov_r_r(r, r) if rng.random() < 0.5 else bytes([0x8B, modrm(3, r, r)])
    if kind == "pushpop":
        return push_r(r) + pop_r(r)
    if kind == "incdec":
        pair = [inc_r(r), dec_r(r)]
        rng.shuffle(pair)
        return pair[0] + pair[1]
    k = rng.randint(1, 0x7F)
    return alu_r_imm(0, r, k) + alu_r_imm(5, r, k)


def junk(rng: random.Random, density: float, flags_live: bool = False, cap: int = 4) -> bytes:
    """Zero or more junk units; each further unit is added with probability ``density``."""
    out = bytearray()
    for _ in range(cap):
        if rng.random() >= density:
            break
        out += junk_unit(rng, flags_live)
    return bytes(out)


__all__ = [
    "GENERAL",
    "POINTER_REGS",
    "LOW_BYTE_REGS",
    "AsmError",
    "Asm",
    "assemble",
    "reg_number",
    "EAX", "ECX", "EDX", "EBX", "ESP", "EBP", "ESI", "EDI",
]
