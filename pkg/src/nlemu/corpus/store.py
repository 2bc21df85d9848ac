"""Variant registry and on-disk samples (raw bytes plus a JSON sidecar)."""

from __future__ import annotations

import json
from pathlib import Path

from .evasion import EVASION_KINDS, emit_evasion
from .shellcode import (
    CorpusSample,
    GeneratorSpec,
    ParamError,
    SpecError,
    generate_shellcode,
    inert_payload,
)

SHELLCODE_VARIANTS = {
    "xor_call_rel": "call_rel_pop",
    "xor_fstenv": "fstenv",
    "xor_call_indirect": "call_indirect_push",
    "xor_none_register": "none_register_assume",
}
VARIANTS = tuple(SHELLCODE_VARIANTS) + EVASION_KINDS

SIDECAR_SUFFIX = ".json"
SAMPLE_SUFFIX = ".bin"
_PAYLOAD_LENGTHS = (16, 64, 256)


class SidecarError(ValueError):
    pass


def generate_variant(variant: str, seed: int, **params) -> CorpusSample:
    """One sample of a named variant.

    Unspecified shellcode parameters vary with ``seed``: payload length
    cycles through 16/64/256 and junk density through 0, 0.25, ... 1.
    """
    if variant in SHELLCODE_VARIANTS:
        params.setdefault("payload_length", _PAYLOAD_LENGTHS[seed % 3])
        params.setdefault("junk_density", (seed % 5) / 4)
        try:
            spec = GeneratorSpec(SHELLCODE_VARIANTS[variant], **params)
        except TypeError as exc:
            raise ParamError(str(exc)) from None
        return generate_shellcode(spec, seed)
    if variant in EVASION_KINDS:
        return emit_evasion(variant, params, seed)
    raise ParamError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


def default_corpus(per_variant: int = 10, seed: int = 0) -> list[CorpusSample]:
    """``per_variant`` samples of every variant, seeds ``seed .. seed+per_variant-1``."""
    return [generate_variant(v, s) for v in VARIANTS for s in range(seed, seed + per_variant)]


def sample_name(sample: CorpusSample) -> str:
    return f"{sample.variant}-{sample.seed:05d}"


def write_sample(sample: CorpusSample, directory: str | Path) -> tuple[Path, Path]:
    """Write ``<name>.bin`` and its ``<name>.json`` sidecar into ``directory``."""
    directory = Path(directory)
    stem = directory / sample_name(sample)
    bin_path = stem.with_suffix(SAMPLE_SUFFIX)
    meta_path = stem.with_suffix(SIDECAR_SUFFIX)
    bin_path.write_bytes(sample.data)
    meta = {"sample": bin_path.name, **sample.metadata()}
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return bin_path, meta_path


_REQUIRED = ("sample", "variant", "seed", "entry_offset", "key", "payload_length", "payload_digest",
             "expected_baseline_verdict", "expected_extended_verdict", "payload_location")


def read_sample(sidecar: str | Path) -> CorpusSample:
    """Load a sample from its sidecar; raises SidecarError when malformed."""
    sidecar = Path(sidecar)
    try:
        meta = json.loads(sidecar.read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SidecarError(f"{sidecar}: {exc}") from None
    if not isinstance(meta, dict):
        raise SidecarError(f"{sidecar}: not an object")
    missing = [k for k in _REQUIRED if k not in meta]
    if missing:
        raise SidecarError(f"{sidecar}: missing {', '.join(missing)}")
    for name in ("expected_baseline_verdict", "expected_extended_verdict"):
        if meta[name] not in ("shellcode", "benign"):
            raise SidecarError(f"{sidecar}: bad {name} {meta[name]!r}")
    try:
        data = (sidecar.parent / meta["sample"]).read_bytes()
        plaintext = inert_payload(int(meta["payload_length"]))
        sample = CorpusSample(
            data=data,
            variant=str(meta["variant"]),
            seed=int(meta["seed"]),
            entry_offset=int(meta["entry_offset"]),
            key=meta["key"],
            plaintext_payload=plaintext,
            expected_baseline_verdict=meta["expected_baseline_verdict"],
            expected_extended_verdict=meta["expected_extended_verdict"],
            payload_location=(str(meta["payload_location"][0]), int(meta["payload_location"][1])),
            spans={k: tuple(v) for k, v in meta.get("spans", {}).items()},
            requires=dict(meta.get("requires", {})),
            params=dict(meta.get("params", {})),
            notes=str(meta.get("notes", "")),
        )
    except (OSError, TypeError, ValueError, IndexError) as exc:
        raise SidecarError(f"{sidecar}: {exc}") from None
    if sample.payload_digest != meta["payload_digest"]:
        raise SidecarError(f"{sidecar}: payload digest mismatch")
    if not 0 <= sample.entry_offset < max(1, len(data)):
        raise SidecarError(f"{sidecar}: entry_offset outside sample")
    return sample


def read_corpus(directory: str | Path) -> list[CorpusSample]:
    """All samples in ``directory``, in sidecar name order."""
    return [read_sample(p) for p in sorted(Path(directory).glob(f"*{SIDECAR_SUFFIX}"))]
