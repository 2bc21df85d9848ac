"""Ground-truth shellcode, evasion samples and benign background data."""

from .asm import AsmError
from .background import BACKGROUND_KINDS, generate_background
from .evasion import EVASION_KINDS, emit_evasion
from .roundtrip import chain_config_for, emulable, emulate_sample, recover_plaintext
from .shellcode import (
    BENIGN,
    DEFAULT_THRESHOLD,
    GETPC_ANCHOR,
    GETPC_VARIANTS,
    SHELLCODE,
    CorpusSample,
    GeneratorSpec,
    ParamError,
    SpecError,
    UnsupportedRegister,
    emit_getpc,
    encode_payload_xor,
    generate_shellcode,
    inert_payload,
)
from .store import (
    SHELLCODE_VARIANTS,
    VARIANTS,
    SidecarError,
    default_corpus,
    generate_variant,
    read_corpus,
    read_sample,
    sample_name,
    write_sample,
)

__all__ = [
    "AsmError",
    "BACKGROUND_KINDS",
    "BENIGN",
    "DEFAULT_THRESHOLD",
    "EVASION_KINDS",
    "GETPC_ANCHOR",
    "GETPC_VARIANTS",
    "SHELLCODE",
    "SHELLCODE_VARIANTS",
    "VARIANTS",
    "CorpusSample",
    "GeneratorSpec",
    "ParamError",
    "SidecarError",
    "SpecError",
    "UnsupportedRegister",
    "chain_config_for",
    "default_corpus",
    "emit_evasion",
    "emit_getpc",
    "emulable",
    "emulate_sample",
    "encode_payload_xor",
    "generate_background",
    "generate_shellcode",
    "generate_variant",
    "inert_payload",
    "read_corpus",
    "read_sample",
    "recover_plaintext",
    "sample_name",
    "write_sample",
]
