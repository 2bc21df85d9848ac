"""Samples built to slip past the GetPC/payload-read heuristic."""

from __future__ import annotations

import random

from . import asm as A
from .asm import EAX, EBX, ECX, EDI, EDX, ESI, Asm, assemble
from .shellcode import (
    BENIGN,
    DEFAULT_THRESHOLD,
    SHELLCODE,
    CorpusSample,
    LoopPlan,
    ParamError,
    emit_decrypt_loop,
    emit_getpc,
    encode_payload_xor,
    inert_payload,
    pick_key,
)

EVASION_KINDS = ("stack_scan_fs", "syscall_copy", "time_exhaust", "piq_selfmod", "fpu_dependent")

_DEFAULTS = {
    "stack_scan_fs": {"payload_length": 64, "marker": "4e4c454d", "junk_density": 0.0},
    "syscall_copy": {"payload_length": 64, "alloc_syscall": 0x11, "read_syscall": 0xBA, "junk_density": 0.0},
    "time_exhaust": {"payload_length": 64, "count": 1_000_000, "junk_density": 0.0},
    "piq_selfmod": {"payload_length": 64, "junk_density": 0.0},
    "fpu_dependent": {"payload_length": 64, "junk_density": 0.0},
}

# Delay loops cost four instructions per pass against the default budget of 8192.
SHORT_DELAY_MAX = 1024
LONG_DELAY_MIN = 2048

PAGE_EXECUTE_READWRITE = 0x40
MEM_COMMIT = 0x1000


def _params(kind: str, params: dict | None) -> dict:
    if kind not in _DEFAULTS:
        raise ParamError(f"unknown evasion kind {kind!r}")
    merged = dict(_DEFAULTS[kind])
    for name, value in (params or {}).items():
        if name not in merged:
            raise ParamError(f"{kind} takes no parameter {name!r}")
        merged[name] = value
    if not isinstance(merged["payload_length"], int) or merged["payload_length"] < 1:
        raise ParamError("payload_length must be a positive integer")
    if not 0.0 <= merged["junk_density"] <= 1.0:
        raise ParamError("junk_density must lie in [0, 1]")
    return merged


def emit_evasion(kind: str, params: dict | None = None, seed: int = 0) -> CorpusSample:
    """Build one evasion sample of ``kind``; ``params`` override the defaults
    (payload_length, junk_density and a kind-specific knob)."""
    p = _params(kind, params)
    rng = random.Random(f"evasion:{kind}:{seed}")
    plaintext = inert_payload(p["payload_length"])
    key = pick_key(rng, plaintext, nul_free=True)
    encoded = encode_payload_xor(plaintext, key)
    sample = _BUILDERS[kind](rng, p, key, encoded)
    sample.seed = seed
    sample.key = key
    sample.plaintext_payload = plaintext
    sample.params = p
    return sample


def _sample(kind: str, code: bytes, labels: dict, payload_at: tuple[str, int], *,
            extended: str = BENIGN, requires: dict | None = None, notes: str = "") -> CorpusSample:
    spans = {"payload": (labels["payload"], len(code))}
    return CorpusSample(
        data=code, variant=kind, seed=0, entry_offset=0, key=None, plaintext_payload=b"",
        expected_baseline_verdict=BENIGN, expected_extended_verdict=extended,
        payload_location=payload_at, spans=spans, requires=requires or {}, notes=notes,
    )


def _stack_scan_fs(rng: random.Random, p: dict, key: int, encoded: bytes) -> CorpusSample:
    try:
        marker = bytes.fromhex(p["marker"])
    except (TypeError, ValueError):
        raise ParamError("marker must be hex text") from None
    if len(marker) != 4:
        raise ParamError("marker must be 4 bytes")
    value = int.from_bytes(marker, "little")
    if value == 0:
        raise ParamError("marker must be nonzero")
    plan = LoopPlan.draw(rng, ESI, avoid=(EAX, EDX, EBX, EDI))
    junk_seed = rng.getrandbits(32)
    d = p["junk_density"]

    def build(a: Asm) -> None:
        jrng = random.Random(junk_seed)
        a.raw(A.junk(jrng, d))
        a.raw(b"\x64\xa1\x08\x00\x00\x00")          # mov eax, fs:[8]   (stack bottom)
        a.raw(b"\x64\x8b\x15\x04\x00\x00\x00")      # mov edx, fs:[4]   (stack top)
        a.raw(A.mov_r_imm(EBX, value - 1), A.inc_r(EBX))  # the marker never appears literally
        a.label("scan")
        a.raw(b"\x39\x18")                          # cmp [eax], ebx
        a.jump8(0x74, "found")
        a.raw(A.inc_r(EAX))
        a.raw(b"\x39\xd0")                          # cmp eax, edx
        a.jump8(0x72, "scan")
        a.raw(b"\xc3")                              # not found: give up
        a.label("found")
        a.raw(A.lea_r_disp(ESI, EAX, 4), A.mov_r_r(EDI, ESI))
        a.raw(A.junk(jrng, d))
        emit_decrypt_loop(a, plan, key=key, length=len(encoded), density=d, nul_free=False, jrng=jrng)
        a.raw(b"\xff\xe7")                          # jmp edi
        a.label("marker")
        a.raw(marker)
        a.label("payload")
        a.raw(encoded)

    code, labels = assemble(build)
    if code.find(marker) != labels["marker"]:
        raise ParamError("marker occurs inside the scanner; choose another marker")
    return _sample(
        "stack_scan_fs", code, labels, ("buffer", labels["payload"]), extended=SHELLCODE,
        requires={"buffer_on_stack": True},
        notes="no GetPC: locates itself by scanning the TIB stack range for a marker; "
              "caught by the stack-probe mode when the buffer lies on the stack",
    )


def _syscall_copy(rng: random.Random, p: dict, key: int, encoded: bytes) -> CorpusSample:
    plan = LoopPlan.draw(rng, EDI, avoid=(ESI,))
    junk_seed = rng.getrandbits(32)
    d = p["junk_density"]
    alloc, copy = p["alloc_syscall"], p["read_syscall"]
    for n in (alloc, copy):
        if not isinstance(n, int) or not 0 <= n <= 0xFFFFFFFF:
            raise ParamError("syscall numbers must be 32-bit integers")

    def build(a: Asm) -> None:
        jrng = random.Random(junk_seed)
        a.raw(A.junk(jrng, d))
        a.label("getpc")
        a.raw(emit_getpc("call_rel_pop", ESI))
        anchor = a.at("getpc") + 5

        def rel(name: str) -> int:
            return a.at(name) - anchor

        copy_size = a.at("end") - a.at("body")
        a.raw(A.xor_r_r(EAX, EAX))
        a.raw(b"\x6a", PAGE_EXECUTE_READWRITE)              # push PAGE_EXECUTE_READWRITE
        a.raw(b"\x68", A.d32(MEM_COMMIT))                   # push MEM_COMMIT
        a.raw(A.lea_r_disp(EBX, ESI, rel("size")), A.push_r(EBX))  # push offset region_size_ptr
        a.raw(A.push_r(EAX))
        a.raw(A.lea_r_disp(EBX, ESI, rel("out")), A.push_r(EBX))   # push offset out_base
        a.raw(b"\x6a\xff")                                  # push -1
        a.raw(A.lea_r_disp(EBX, ESI, rel("ret1")), A.push_r(EBX), A.push_r(EBX))
        a.raw(A.mov_r_r(EDX, 4))                            # mov edx, esp
        a.raw(A.mov_r_imm(EAX, alloc))
        a.raw(b"\x0f\x34")                                  # sysenter
        a.label("ret1")
        a.raw(A.push_r(EAX))
        a.raw(b"\x68", A.d32(copy_size))                    # push REGION_SIZE
        a.raw(b"\xff\x76", rel("out") & 0xFF)               # push dword [out_base]
        a.raw(A.lea_r_disp(EBX, ESI, rel("body")), A.push_r(EBX))  # push offset shellcode
        a.raw(b"\x6a\xff")
        a.raw(A.lea_r_disp(EBX, ESI, rel("ret2")), A.push_r(EBX), A.push_r(EBX))
        a.raw(A.mov_r_r(EDX, 4))
        a.raw(A.mov_r_imm(EAX, copy))
        a.raw(b"\x0f\x34")
        a.label("ret2")
        a.raw(b"\x8b\x7e", rel("out") & 0xFF)               # mov edi, [out_base]
        a.raw(b"\xff\xe7")                                  # jmp edi
        a.label("out")
        a.raw(b"\x90\x90\x90\x90")
        a.label("size")
        a.raw(A.d32(copy_size))
        # Copied to the new region and run there; EDI holds the copy's base.
        a.label("body")
        a.raw(A.junk(jrng, d))
        a.raw(A.add_constant(EDI, a.at("payload") - a.at("body"), plan.forms[5], False))
        emit_decrypt_loop(a, plan, key=key, length=len(encoded), density=d, nul_free=False, jrng=jrng)
        a.label("payload")
        a.raw(encoded)
        a.label("end")

    code, labels = assemble(build)
    for name in ("size", "out", "body", "ret1", "ret2"):
        if not A.fits8(labels[name] - labels["getpc"] - 5):
            raise ParamError("layout exceeds disp8 reach; lower junk_density")
    return _sample(
        "syscall_copy", code, labels, ("scratch", labels["payload"] - labels["body"]),
        requires={"syscall_model": True},
        notes="copies itself with allocate/read-memory system calls so the copy's reads are not "
              "the decryptor's; dies unmodeled without syscall modeling and evades with it",
    )


def _time_exhaust(rng: random.Random, p: dict, key: int, encoded: bytes) -> CorpusSample:
    count = p["count"]
    if not isinstance(count, int) or not 1 <= count <= 0xFFFFFFFF:
        raise ParamError("count must be a positive 32-bit integer")
    if SHORT_DELAY_MAX < count < LONG_DELAY_MIN:
        # Whether the default budget is exhausted first depends on junk and
        # payload size here, so no ground truth could be promised.
        raise ParamError(f"count must be <= {SHORT_DELAY_MAX} or >= {LONG_DELAY_MIN}")
    plan = LoopPlan.draw(rng, ESI, avoid=(ECX, EDX))
    junk_seed = rng.getrandbits(32)
    forms = plan.forms
    d = p["junk_density"]

    def build(a: Asm) -> None:
        jrng = random.Random(junk_seed)
        a.raw(A.junk(jrng, d))
        a.raw(A.load_constant(ECX, count, forms[3], True))
        a.raw(A.xor_r_r(EDX, EDX))
        a.label("delay")
        a.raw(A.inc_r(EDX), A.push_r(EDX), A.pop_r(EDX))   # one stack write per pass
        a.jump8(0xE2, "delay")
        a.label("getpc")
        a.raw(emit_getpc("call_rel_pop", ESI))
        anchor = a.at("getpc") + 5
        # The payload pointer only comes out right once EDX has reached count.
        a.raw(A.add_r_r(ESI, EDX))
        a.raw(A.add_constant(ESI, a.at("payload") - anchor - count, forms[4], True))
        emit_decrypt_loop(a, plan, key=key, length=len(encoded), density=d, nul_free=False, jrng=jrng)
        a.label("payload")
        a.raw(encoded)

    code, labels = assemble(build)
    sample = _sample(
        "time_exhaust", code, labels, ("buffer", labels["payload"]),
        requires={"instruction_budget": 4 * count + 64 * len(encoded) + 4096},
        notes="a counted delay loop outlasts the instruction budget before GetPC runs",
    )
    if count <= SHORT_DELAY_MAX and len(encoded) >= DEFAULT_THRESHOLD:
        sample.expected_baseline_verdict = sample.expected_extended_verdict = SHELLCODE
        sample.notes = "delay loop short enough to finish within the default budget"
    return sample


def _piq_selfmod(rng: random.Random, p: dict, key: int, encoded: bytes) -> CorpusSample:
    plan = LoopPlan.draw(rng, ESI, avoid=(EAX, ECX, EDI))
    junk_seed = rng.getrandbits(32)
    d = p["junk_density"]

    def build(a: Asm) -> None:
        jrng = random.Random(junk_seed)
        a.raw(A.junk(jrng, d))
        a.label("getpc")
        a.raw(emit_getpc("call_rel_pop", ESI))
        anchor = a.at("getpc") + 5
        a.raw(A.lea_r_disp(EDI, ESI, a.at("tail") - anchor))
        a.raw(A.mov_r8_imm(EAX, 0xCC))
        width = a.at("tail_end") - a.at("tail")
        a.raw(b"\x6a", max(width, 1), A.pop_r(ECX))
        a.raw(b"\xf3\xaa")                          # rep stosb over the next instruction
        a.label("tail")
        a.raw(A.add_constant(ESI, a.at("payload") - anchor, plan.forms[4], False))
        a.label("tail_end")
        emit_decrypt_loop(a, plan, key=key, length=len(encoded), density=d, nul_free=False, jrng=jrng)
        a.label("payload")
        a.raw(encoded)

    code, labels = assemble(build)
    return _sample(
        "piq_selfmod", code, labels, ("buffer", labels["payload"]),
        requires={"prefetch_queue": True},
        notes="REP STOSB overwrites the next instruction with INT3; a CPU running the prefetched "
              "bytes decrypts, an emulator with write-through fetch stops",
    )


def _fpu_dependent(rng: random.Random, p: dict, key: int, encoded: bytes) -> CorpusSample:
    plan = LoopPlan.draw(rng, ESI, avoid=(EBX,))
    junk_seed = rng.getrandbits(32)
    d = p["junk_density"]

    def build(a: Asm) -> None:
        jrng = random.Random(junk_seed)
        a.raw(A.junk(jrng, d))
        a.label("getpc")
        a.raw(emit_getpc("call_rel_pop", ESI))
        anchor = a.at("getpc") + 5
        a.raw(b"\xd9\xe8\xd9\xe8")                  # fld1; fld1
        a.raw(b"\xde\xc1")                          # faddp st(1), st
        a.raw(b"\xdb\x5c\x24\xfc")                  # fistp dword [esp-4]
        a.raw(b"\x8b\x5c\x24\xfc")                  # mov ebx, [esp-4]   (= 2)
        a.raw(A.add_r_r(ESI, EBX))
        a.raw(A.add_constant(ESI, a.at("payload") - anchor - 2, plan.forms[4], False))
        emit_decrypt_loop(a, plan, key=key, length=len(encoded), density=d, nul_free=False, jrng=jrng)
        a.label("payload")
        a.raw(encoded)

    code, labels = assemble(build)
    return _sample(
        "fpu_dependent", code, labels, ("buffer", labels["payload"]),
        requires={"fpu": True},
        notes="the payload pointer depends on an FPU sum the emulator does not model",
    )


_BUILDERS = {
    "stack_scan_fs": _stack_scan_fs,
    "syscall_copy": _syscall_copy,
    "time_exhaust": _time_exhaust,
    "piq_selfmod": _piq_selfmod,
    "fpu_dependent": _fpu_dependent,
}
