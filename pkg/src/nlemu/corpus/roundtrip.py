"""Emulated decryption of corpus samples (the generator/emulator contract)."""

from __future__ import annotations

from ..cpu import ChainConfig, ExecutionTrace, LayoutConfig, RegionKind, RegisterPolicy, run_chain
from ..ingest import DEFAULT_BASE, DataBuffer
from .shellcode import CorpusSample

# Requirements the emulator cannot meet by design (no prefetch queue, no x87 arithmetic).
UNMET_BY_EMULATOR = ("prefetch_queue", "fpu")


def emulable(sample: CorpusSample) -> bool:
    """True when the emulator can be configured to decrypt ``sample``."""
    return not any(sample.requires.get(k) for k in UNMET_BY_EMULATOR)


def chain_config_for(sample: CorpusSample) -> tuple[ChainConfig, int]:
    """Chain configuration and buffer base meeting the sample's requirements."""
    req = sample.requires
    layout = LayoutConfig(buffer_on_stack=bool(req.get("buffer_on_stack")))
    base = layout.placement(len(sample.data))[0] if layout.buffer_on_stack else DEFAULT_BASE
    policy = RegisterPolicy.zeroed()
    if req.get("registers"):
        policy = RegisterPolicy.fixed(**{name: base + off for name, off in req["registers"].items()})
    config = ChainConfig(
        instruction_budget=max(8192, req.get("instruction_budget", 0)),
        register_policy=policy,
        layout=layout,
        syscall_model=bool(req.get("syscall_model")),
    )
    return config, base


def emulate_sample(sample: CorpusSample) -> ExecutionTrace:
    """Run the sample's true entry chain under the conditions it requires."""
    config, base = chain_config_for(sample)
    return run_chain(DataBuffer(sample.data, base), sample.entry_offset, config)


def recover_plaintext(sample: CorpusSample) -> bytes:
    """Bytes at the payload location after emulating the sample."""
    trace = emulate_sample(sample)
    where, offset = sample.payload_location
    length = len(sample.plaintext_payload)
    if where == "buffer":
        region = trace.memory.buffer
    else:
        scratch = [r for r in trace.memory.regions if r.kind is RegionKind.SCRATCH]
        if not scratch:
            return b""
        region = scratch[0]
    return bytes(region.data[offset:offset + length])
