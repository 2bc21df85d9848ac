import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from nlemu.corpus import (
    BACKGROUND_KINDS,
    EVASION_KINDS,
    GETPC_VARIANTS,
    VARIANTS,
    GeneratorSpec,
    ParamError,
    SidecarError,
    SpecError,
    UnsupportedRegister,
    default_corpus,
    emit_evasion,
    emit_getpc,
    emulable,
    emulate_sample,
    encode_payload_xor,
    generate_background,
    generate_shellcode,
    generate_variant,
    read_corpus,
    read_sample,
    recover_plaintext,
    write_sample,
)
from nlemu.cpu import (
    FPU_ENV_IP_OFFSET,
    ChainConfig,
    RegisterPolicy,
    TerminationReason,
    init_state,
    LayoutConfig,
    run_chain,
    step,
)
from nlemu.detector import ScanConfig, detect_getpc_events, scan_buffer
from nlemu.ingest import DataBuffer


# -- encode_payload_xor ------------------------------------------------------------

def test_xor_examples():
    assert encode_payload_xor(b"\x00\x00\x00", 0xAA) == b"\xaa\xaa\xaa"
    assert encode_payload_xor(b"\xde\xad", 0xFF) == b"\x21\x52"


@given(st.binary(min_size=1, max_size=200), st.integers(0, 255))
def test_xor_involution(payload, key):
    assert encode_payload_xor(encode_payload_xor(payload, key), key) == payload


def test_xor_nul_free_rejects_key_in_payload():
    with pytest.raises(KeyError):
        encode_payload_xor(b"\x41\x42", 0x42, nul_free=True)
    with pytest.raises(ValueError):
        encode_payload_xor(b"", 1)


# -- emit_getpc --------------------------------------------------------------------

def test_call_rel_pop_bytes():
    assert emit_getpc("call_rel_pop", "esi") == bytes.fromhex("e8000000005e")


def test_call_indirect_push_is_the_indirect_call_listing():
    assert emit_getpc("call_indirect_push", "esi") == bytes.fromhex("685e5690c3ffd4")


def test_none_register_assume_emits_nothing():
    assert emit_getpc("none_register_assume", "esi") == b""


def test_esp_target_rejected():
    with pytest.raises(UnsupportedRegister):
        emit_getpc("call_rel_pop", "esp")
    with pytest.raises(SpecError):
        emit_getpc("seh", "esi")


@pytest.mark.parametrize("variant,anchor", [("call_rel_pop", 5), ("call_indirect_push", 7)])
@pytest.mark.parametrize("reg", ["eax", "ecx", "edx", "ebx", "ebp", "esi", "edi"])
def test_call_getpc_recovers_address(variant, anchor, reg):
    code = emit_getpc(variant, reg)
    state, memory = init_state(RegisterPolicy.zeroed(), LayoutConfig(), code + b"\x90")
    a = state.eip
    steps = {"call_rel_pop": 2, "call_indirect_push": 6}[variant]
    for _ in range(steps):
        assert step(state, memory).terminated is None
    assert state.reg(reg) == a + anchor


@pytest.mark.parametrize("fwait", [False, True])
def test_fstenv_getpc_recovers_fpu_op_address(fwait):
    code = emit_getpc("fstenv", "ebx", fwait=fwait)
    state, memory = init_state(RegisterPolicy.zeroed(), LayoutConfig(), code + b"\x90")
    a = state.eip
    for _ in range(4 if fwait else 3):
        assert step(state, memory).terminated is None
    assert state.reg("ebx") == a
    # The saved-IP field of the stored environment held that same address.
    env = memory.control_log[-1].target
    assert memory.peek_dword(env + FPU_ENV_IP_OFFSET) == a


# -- generate_shellcode ---------------------------------------------------------------

def test_polymorphism_and_shared_plaintext():
    spec = GeneratorSpec("call_rel_pop", payload_length=64)
    a, b = generate_shellcode(spec, 1), generate_shellcode(spec, 2)
    assert a.data != b.data
    assert a.plaintext_payload == b.plaintext_payload
    assert recover_plaintext(a) == recover_plaintext(b) == a.plaintext_payload


def test_hundred_samples_all_distinct():
    spec = GeneratorSpec("fstenv", payload_length=32)
    samples = {generate_shellcode(spec, s).data for s in range(100)}
    assert len(samples) == 100


def test_generation_is_deterministic():
    spec = GeneratorSpec("call_indirect_push", payload_length=40, junk_density=0.3)
    assert generate_shellcode(spec, 11) == generate_shellcode(spec, 11)


def test_expected_verdicts():
    expect = {
        "call_rel_pop": ("shellcode", "shellcode"),
        "fstenv": ("shellcode", "shellcode"),
        "call_indirect_push": ("benign", "shellcode"),
        "none_register_assume": ("benign", "benign"),
    }
    for variant, (baseline, extended) in expect.items():
        s = generate_shellcode(GeneratorSpec(variant, payload_length=64), 0)
        assert (s.expected_baseline_verdict, s.expected_extended_verdict) == (baseline, extended)


@pytest.mark.parametrize("density", [0.0, 0.5, 1.0])
@pytest.mark.parametrize("variant", GETPC_VARIANTS)
def test_junk_density_round_trip(variant, density):
    for seed in range(5):
        s = generate_shellcode(GeneratorSpec(variant, payload_length=48, junk_density=density), seed)
        assert recover_plaintext(s) == s.plaintext_payload


def test_junk_grows_the_decryptor():
    lean = generate_shellcode(GeneratorSpec("call_rel_pop", junk_density=0.0), 4)
    fat = generate_shellcode(GeneratorSpec("call_rel_pop", junk_density=1.0), 4)
    assert len(fat.data) > len(lean.data)


def test_register_permutation_seed():
    a = generate_shellcode(GeneratorSpec(register_permutation_seed=5), 1)
    b = generate_shellcode(GeneratorSpec(register_permutation_seed=5), 2)
    assert a.params["pointer_register"] == b.params["pointer_register"]
    assert a.params["counter_register"] == b.params["counter_register"]


def test_spec_validation():
    with pytest.raises(SpecError):
        GeneratorSpec("seh")
    with pytest.raises(SpecError):
        GeneratorSpec(payload_length=0)
    with pytest.raises(SpecError):
        GeneratorSpec(junk_density=1.5)
    with pytest.raises(SpecError):
        GeneratorSpec(key=0xCC, nul_free=True)  # the payload starts with 0xCC
    GeneratorSpec(key=0xCC, nul_free=False)


@settings(max_examples=40)
@given(st.sampled_from(GETPC_VARIANTS), st.integers(1, 300), st.floats(0, 1), st.integers(0, 2**31))
def test_nul_free_decryptor_and_payload(variant, length, density, seed):
    s = generate_shellcode(GeneratorSpec(variant, payload_length=length, junk_density=density), seed)
    lo, _ = s.spans["decryptor"]
    # The CALL rel32 GetPC has a zero displacement by construction; everything after it is NUL-free.
    assert b"\x00" not in s.data[lo:]
    assert b"\x00" not in s.data[: s.spans["getpc"][0]]


def test_decodes_along_entry_path_for_1000_seeds():
    for seed in range(1000):
        variant = GETPC_VARIANTS[seed % 4]
        spec = GeneratorSpec(variant, payload_length=1 + seed % 97, junk_density=(seed % 7) / 6)
        s = generate_shellcode(spec, seed)
        trace = emulate_sample(s)
        assert trace.termination is not TerminationReason.DECODE_ERROR, (variant, seed)
        # The chain ran the decryptor to completion and into the decrypted payload's INT3.
        assert trace.termination is TerminationReason.UNMODELED_INSTRUCTION, (variant, seed)
        payload = s.spans["payload"][0]
        reads = {e.addr - trace.buffer_base for e in trace.events if e.in_buffer and e.kind.value == "read"}
        assert set(range(payload, payload + spec.payload_length)) <= reads


def test_true_entry_chain_reads_payload():
    s = generate_shellcode(GeneratorSpec("call_rel_pop", payload_length=64), 6)
    trace = emulate_sample(s)
    assert trace.distinct_buffer_reads() >= 64


def test_ground_truth_matches_detector():
    for s in default_corpus(per_variant=3):
        for profile in ("baseline", "extended"):
            got = scan_buffer(DataBuffer(s.data), ScanConfig.for_profile(profile)).verdict.label
            assert got == getattr(s, f"expected_{profile}_verdict"), (s.variant, s.seed, profile)


# -- evasions -----------------------------------------------------------------------

def test_every_evasion_defaults_to_benign_baseline():
    for kind in EVASION_KINDS:
        s = emit_evasion(kind)
        assert s.expected_baseline_verdict == "benign"
        assert s.variant == kind
    assert emit_evasion("stack_scan_fs").expected_extended_verdict == "shellcode"


def test_stack_scan_reads_tib_then_scans_without_getpc():
    s = emit_evasion("stack_scan_fs", {"marker": "4e4c454d"})
    config = ChainConfig(layout=LayoutConfig(buffer_on_stack=True))
    trace = run_chain(DataBuffer(s.data), 0, config)
    fs = trace.fs_base
    first_reads = [e.addr for e in trace.events if e.kind.value == "read"][:2]
    assert sorted(first_reads) == [fs + 4, fs + 8]
    assert trace.controls == []
    # Before the marker is found, no byte of the encoded payload is read.
    payload = trace.buffer_base + s.spans["payload"][0]
    marker = payload - 4
    events = trace.events
    found = next(i for i, e in enumerate(events) if e.addr == marker)
    assert not any(payload <= e.addr for e in events[:found] if e.in_buffer)
    assert recover_plaintext(s) == s.plaintext_payload


def test_stack_scan_marker_validation():
    with pytest.raises(ParamError):
        emit_evasion("stack_scan_fs", {"marker": "00000000"})
    with pytest.raises(ParamError):
        emit_evasion("stack_scan_fs", {"marker": "abcd"})


def test_syscall_copy_first_sysenter_allocates():
    s = emit_evasion("syscall_copy")
    trace = run_chain(DataBuffer(s.data), 0)
    assert trace.termination is TerminationReason.SYSCALL_UNMODELED
    assert trace.final_state.reg("eax") == 0x11


def test_syscall_copy_with_model_decrypts_in_scratch():
    s = emit_evasion("syscall_copy")
    assert s.payload_location[0] == "scratch"
    assert recover_plaintext(s) == s.plaintext_payload
    for modeled in (False, True):
        for profile in ("baseline", "extended"):
            config = ScanConfig.for_profile(profile, syscall_model=modeled)
            assert scan_buffer(DataBuffer(s.data), config).verdict.label == "benign"


def test_time_exhaust_runs_out_before_getpc():
    s = emit_evasion("time_exhaust", {"count": 10**6})
    trace = run_chain(DataBuffer(s.data), 0)
    assert trace.termination is TerminationReason.BUDGET_EXHAUSTED
    assert trace.retired == 8192
    assert trace.controls == []
    assert detect_getpc_events(trace, ScanConfig.extended().getpc_modes) == []


def test_time_exhaust_count_zones():
    short = emit_evasion("time_exhaust", {"count": 100})
    assert short.expected_baseline_verdict == "shellcode"
    assert recover_plaintext(short) == short.plaintext_payload
    for bad in (1500, 0, -3):
        with pytest.raises(ParamError):
            emit_evasion("time_exhaust", {"count": bad})


def test_unemulable_evasions():
    for kind, reason in (("piq_selfmod", TerminationReason.UNMODELED_INSTRUCTION),
                         ("fpu_dependent", TerminationReason.DECODE_ERROR)):
        s = emit_evasion(kind)
        assert not emulable(s)
        assert emulate_sample(s).termination is reason
        assert recover_plaintext(s) != s.plaintext_payload


def test_evasion_param_errors():
    with pytest.raises(ParamError):
        emit_evasion("teleport")
    with pytest.raises(ParamError):
        emit_evasion("piq_selfmod", {"colour": 1})
    with pytest.raises(ParamError):
        emit_evasion("fpu_dependent", {"payload_length": 0})


# -- background -----------------------------------------------------------------------

def test_background_determinism():
    assert generate_background("uniform_random", 16, 0) == generate_background("uniform_random", 16, 0)
    for kind in BACKGROUND_KINDS:
        a = generate_background(kind, 5000, 3)
        assert a == generate_background(kind, 5000, 3)
        assert a != generate_background(kind, 5000, 4)
        assert len(a) == 5000


def test_ascii_text_is_7bit_printable():
    text = generate_background("ascii_text", 20000, 1)
    assert max(text) < 0x80
    assert all(32 <= b < 127 or b in b"\n\r\t" for b in text)


def test_http_like_starts_with_method_line():
    data = generate_background("http_like", 1024, 2)
    first = data.split(b"\r\n", 1)[0]
    method, target, version = first.split(b" ")
    assert method in (b"GET", b"POST", b"HEAD", b"PUT", b"DELETE", b"OPTIONS")
    assert target.startswith(b"/") and version.startswith(b"HTTP/1.")
    assert b"\r\nHost: " in data


def test_background_errors():
    with pytest.raises(ValueError):
        generate_background("ascii_text", 0, 1)
    with pytest.raises(ValueError):
        generate_background("mp3", 10, 1)


# -- sidecars -------------------------------------------------------------------------

def test_sidecar_round_trip(tmp_path):
    samples = [generate_variant(v, 7) for v in VARIANTS]
    for s in samples:
        write_sample(s, tmp_path)
    loaded = read_corpus(tmp_path)
    assert len(loaded) == len(samples)
    by_key = {(s.variant, s.seed): s for s in samples}
    for got in loaded:
        want = by_key[(got.variant, got.seed)]
        assert got.data == want.data
        assert got.plaintext_payload == want.plaintext_payload
        assert got.payload_location == want.payload_location
        assert got.requires == want.requires
        assert got.expected_baseline_verdict == want.expected_baseline_verdict
        assert got.expected_extended_verdict == want.expected_extended_verdict


def test_sidecar_fields(tmp_path):
    s = generate_variant("xor_call_rel", 1)
    _, meta_path = write_sample(s, tmp_path)
    meta = json.loads(meta_path.read_text())
    for name in ("variant", "seed", "entry_offset", "key", "expected_baseline_verdict",
                 "expected_extended_verdict", "payload_digest"):
        assert name in meta
    assert meta["payload_digest"] == s.payload_digest


def test_malformed_sidecars(tmp_path):
    s = generate_variant("xor_fstenv", 2)
    _, meta_path = write_sample(s, tmp_path)
    meta = json.loads(meta_path.read_text())
    for broken in ({**meta, "payload_digest": "0" * 64},
                   {k: v for k, v in meta.items() if k != "variant"},
                   {**meta, "expected_baseline_verdict": "maybe"},
                   {**meta, "sample": "missing.bin"}):
        meta_path.write_text(json.dumps(broken))
        with pytest.raises(SidecarError):
            read_sample(meta_path)
    meta_path.write_text("{not json")
    with pytest.raises(SidecarError):
        read_sample(meta_path)


def test_generate_variant_errors():
    with pytest.raises(ParamError):
        generate_variant("xor_rot13", 0)
    with pytest.raises(ParamError):
        generate_variant("xor_call_rel", 0, colour=3)


def test_default_corpus_shape():
    corpus = default_corpus(per_variant=2)
    assert len(corpus) == 2 * len(VARIANTS)
    assert {s.variant for s in corpus} == set(VARIANTS)
    rng = random.Random(0)
    s = rng.choice(corpus)
    assert default_corpus(per_variant=2)[corpus.index(s)] == s
