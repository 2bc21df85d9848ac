"""Polymorphic XOR-decryptor shellcode with an inert payload."""

from __future__ import annotations

import hashlib
import random
from dataclasses import asdict, dataclass, field

from . import asm as A
from .asm import ECX, ESI, ESP, Asm, assemble

GETPC_VARIANTS = ("call_rel_pop", "fstenv", "call_indirect_push", "none_register_assume")

# Offset within the emitted GetPC block of the address the target register
# ends up holding: the POP after CALL $+0, the FPU op whose address FNSTENV
# saves, the byte after CALL ESP, or the (empty) block itself.
GETPC_ANCHOR = {"call_rel_pop": 5, "fstenv": 0, "call_indirect_push": 7, "none_register_assume": 0}

# Detector default; the generator predicts verdicts for it.
DEFAULT_THRESHOLD = 8

SHELLCODE = "shellcode"
BENIGN = "benign"

_MARKER = b"INERT-PAYLOAD/"


class SpecError(ValueError):
    pass


class ParamError(ValueError):
    pass


class UnsupportedRegister(ValueError):
    pass


def inert_payload(length: int) -> bytes:
    """Plaintext for every sample: INT3 followed by a repeating text marker.

    Execution of the decrypted payload stops at once on the INT3, which the
    emulator treats as unmodeled.
    """
    if length < 1:
        raise ValueError("payload length must be >= 1")
    body = (_MARKER * (length // len(_MARKER) + 1))[: length - 1]
    return b"\xcc" + body


def encode_payload_xor(payload: bytes, key: int, *, nul_free: bool = False) -> bytes:
    """XOR every byte with ``key``. Involutive.

    Raises KeyError when ``nul_free`` is set and the key would put a 0x00 in
    the output (that is, ``key`` occurs in ``payload``).
    """
    if not payload:
        raise ValueError("payload must be nonempty")
    if not 0 <= key <= 0xFF:
        raise ValueError(f"key {key} is not a byte")
    if nul_free and key in payload:
        raise KeyError(key)
    return bytes(b ^ key for b in payload)


def emit_getpc(variant: str, target_register: int | str = ESI, *, fwait: bool = False) -> bytes:
    """GetPC code leaving a known address in ``target_register``.

    The register receives the address ``GETPC_ANCHOR[variant]`` bytes into
    the returned block: the POP for ``call_rel_pop``, the FLDZ for ``fstenv``
    and the end of the block for ``call_indirect_push``. ``none_register_assume``
    emits nothing; the register is assumed to already point at the block.
    """
    r = A.reg_number(target_register)
    if r == ESP:
        raise UnsupportedRegister("esp cannot receive the program counter")
    if variant == "call_rel_pop":
        return b"\xe8\x00\x00\x00\x00" + A.pop_r(r)
    if variant == "fstenv":
        # FLDZ; F(N)STENV [ESP-12]; POP r  (the saved FPU IP lands at [ESP]).
        return b"\xd9\xee" + (b"\x9b" if fwait else b"") + b"\xd9\x74\x24\xf4" + A.pop_r(r)
    if variant == "call_indirect_push":
        # PUSH <pop r; push r; nop; ret>; CALL ESP
        stub = A.pop_r(r) + A.push_r(r) + b"\x90\xc3"
        return b"\x68" + stub + b"\xff\xd4"
    if variant == "none_register_assume":
        return b""
    raise SpecError(f"unknown GetPC variant {variant!r}")


@dataclass(frozen=True)
class GeneratorSpec:
    getpc_variant: str = "call_rel_pop"
    payload_length: int = 64
    junk_density: float = 0.0
    register_permutation_seed: int | None = None
    nul_free: bool = True
    key: int | None = None

    def __post_init__(self):
        if self.getpc_variant not in GETPC_VARIANTS:
            raise SpecError(f"unknown GetPC variant {self.getpc_variant!r}")
        if self.payload_length < 1:
            raise SpecError("payload_length must be >= 1")
        if not 0.0 <= self.junk_density <= 1.0:
            raise SpecError("junk_density must lie in [0, 1]")
        if self.key is not None:
            if not 1 <= self.key <= 0xFF:
                raise SpecError("key must be a nonzero byte")
            if self.nul_free and self.key in inert_payload(self.payload_length):
                raise SpecError(f"key 0x{self.key:02x} yields a NUL byte with nul_free set")


@dataclass
class CorpusSample:
    """Generated bytes plus the ground truth needed to evaluate them."""

    data: bytes
    variant: str
    seed: int
    entry_offset: int
    key: int | None
    plaintext_payload: bytes
    expected_baseline_verdict: str
    expected_extended_verdict: str
    # Where the decrypted payload ends up: ("buffer", offset) or ("scratch", offset).
    payload_location: tuple[str, int] = ("buffer", 0)
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)
    # Conditions under which emulated decryption succeeds.
    requires: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    notes: str = ""

    def __len__(self) -> int:
        return len(self.data)

    @property
    def payload_digest(self) -> str:
        return hashlib.sha256(self.plaintext_payload).hexdigest()

    def metadata(self) -> dict:
        meta = asdict(self)
        del meta["data"], meta["plaintext_payload"]
        meta["length"] = len(self.data)
        meta["payload_length"] = len(self.plaintext_payload)
        meta["payload_digest"] = self.payload_digest
        meta["payload_location"] = list(self.payload_location)
        meta["spans"] = {k: list(v) for k, v in self.spans.items()}
        return meta


def pick_key(rng: random.Random, plaintext: bytes, nul_free: bool) -> int:
    while True:
        key = rng.randint(1, 0xFF)
        try:
            encode_payload_xor(plaintext, key, nul_free=nul_free)
        except KeyError:
            continue
        return key


@dataclass(frozen=True)
class LoopPlan:
    """Register and form choices for one decryption loop."""

    ptr: int
    counter: int
    key_reg: int | None
    use_loop: bool
    forms: tuple[float, ...]  # uniform draws picking encodings
    junk_seed: int

    @classmethod
    def draw(cls, rng: random.Random, ptr: int, avoid: tuple[int, ...] = ()) -> "LoopPlan":
        counters = [r for r in A.GENERAL if r != ptr and r not in avoid]
        counter = rng.choice(counters)
        spare = [r for r in A.LOW_BYTE_REGS if r not in (ptr, counter) and r not in avoid]
        key_reg = rng.choice(spare) if spare and rng.random() < 0.5 else None
        use_loop = counter == ECX and rng.random() < 0.5
        return cls(ptr, counter, key_reg, use_loop, tuple(rng.random() for _ in range(6)),
                   rng.getrandbits(32))


def emit_decrypt_loop(a: Asm, plan: LoopPlan, *, key: int, length: int, density: float,
                      nul_free: bool, jrng: random.Random, loop_label: str = "loop") -> None:
    """Counter and key setup, then ``length`` iterations of XOR [ptr], key.

    ``plan.ptr`` must already point at the first encoded byte.
    """
    u = plan.forms
    a.raw(A.load_constant(plan.counter, length, u[0], nul_free))
    a.raw(A.junk(jrng, density))
    if plan.key_reg is not None:
        a.raw(A.mov_r8_imm(plan.key_reg, key))
        a.raw(A.junk(jrng, density))
    a.label(loop_label)
    if plan.key_reg is not None:
        a.raw(A.xor_mem8_r8(plan.ptr, plan.key_reg))
    else:
        a.raw(A.xor_mem8_imm(plan.ptr, key))
    a.raw(A.junk(jrng, density))
    a.raw(A.increment(plan.ptr, u[1]))
    a.raw(A.junk(jrng, density))
    if plan.use_loop:
        a.jump8(0xE2, loop_label)
    else:
        if u[2] < 0.5:
            a.raw(A.dec_r(plan.counter))
        else:
            a.raw(A.alu_r_imm(5, plan.counter, 1))
        a.jump8(0x75, loop_label)


def _expected(variant: str, payload_length: int) -> tuple[str, str]:
    strong = payload_length >= DEFAULT_THRESHOLD
    baseline = SHELLCODE if strong and variant in ("call_rel_pop", "fstenv") else BENIGN
    extended = SHELLCODE if strong and variant != "none_register_assume" else BENIGN
    return baseline, extended


def generate_shellcode(spec: GeneratorSpec, seed: int) -> CorpusSample:
    """[junk] GetPC [junk] pointer setup, decryption loop, encoded payload.

    Register choice follows ``spec.register_permutation_seed`` (``seed`` when
    unset); junk, key and encoding choices follow ``seed``. The plaintext
    depends only on the payload length.
    """
    perm = random.Random(f"regs:{spec.register_permutation_seed if spec.register_permutation_seed is not None else seed}")
    rng = random.Random(f"shellcode:{spec.getpc_variant}:{spec.payload_length}:{seed}")
    plaintext = inert_payload(spec.payload_length)
    key = spec.key if spec.key is not None else pick_key(rng, plaintext, spec.nul_free)
    encoded = encode_payload_xor(plaintext, key, nul_free=spec.nul_free)

    ptr = perm.choice(A.POINTER_REGS)
    plan = LoopPlan.draw(perm, ptr)
    fwait = rng.random() < 0.5
    ptr_form = rng.random()
    junk_seed = rng.getrandbits(32)
    getpc = emit_getpc(spec.getpc_variant, ptr, fwait=fwait)
    density = spec.junk_density

    def build(a: Asm) -> None:
        jrng = random.Random(junk_seed)
        a.raw(A.junk(jrng, density))
        a.label("getpc")
        a.raw(getpc)
        a.label("decryptor")
        a.raw(A.junk(jrng, density))
        anchor = a.at("getpc") + GETPC_ANCHOR[spec.getpc_variant]
        a.raw(A.add_constant(ptr, a.at("payload") - anchor, ptr_form, spec.nul_free))
        a.raw(A.junk(jrng, density))
        emit_decrypt_loop(a, plan, key=key, length=spec.payload_length, density=density,
                          nul_free=spec.nul_free, jrng=jrng)
        a.label("payload")
        a.raw(encoded)

    code, labels = assemble(build)
    baseline, extended = _expected(spec.getpc_variant, spec.payload_length)
    requires: dict = {}
    if spec.getpc_variant == "none_register_assume":
        # Offset into the sample that the register is assumed to hold.
        requires["registers"] = {A.REG_NAMES[ptr]: labels["getpc"]}
    variant_names = {
        "call_rel_pop": "xor_call_rel",
        "fstenv": "xor_fstenv",
        "call_indirect_push": "xor_call_indirect",
        "none_register_assume": "xor_none_register",
    }
    return CorpusSample(
        data=code,
        variant=variant_names[spec.getpc_variant],
        seed=seed,
        entry_offset=0,
        key=key,
        plaintext_payload=plaintext,
        expected_baseline_verdict=baseline,
        expected_extended_verdict=extended,
        payload_location=("buffer", labels["payload"]),
        spans={
            "getpc": (labels["getpc"], labels["decryptor"]),
            "decryptor": (labels["decryptor"], labels["payload"]),
            "payload": (labels["payload"], len(code)),
        },
        requires=requires,
        params={
            "getpc_variant": spec.getpc_variant,
            "payload_length": spec.payload_length,
            "junk_density": spec.junk_density,
            "register_permutation_seed": spec.register_permutation_seed,
            "nul_free": spec.nul_free,
            "pointer_register": A.REG_NAMES[ptr],
            "counter_register": A.REG_NAMES[plan.counter],
        },
        notes=_NOTES[spec.getpc_variant],
    )


_NOTES = {
    "call_rel_pop": "CALL $+0 / POP GetPC; caught by the baseline profile",
    "fstenv": "FLDZ / FNSTENV / POP GetPC; caught by the baseline profile",
    "call_indirect_push": "indirect CALL ESP into a pushed stub; evades baseline, caught by the call_indirect mode",
    "none_register_assume": "no GetPC; relies on a register already pointing at the code, which the emulator cannot know",
}
