"""Small IA-32 model: decoder, tracked memory, single stepping and chain runs."""

from .decoder import CONDITIONS, REG_NAMES, DecodeError, Imm, Instruction, Mem, Reg, Rel, decode_instruction
from .loop_guard import LoopGuard, loop_guard
from .machine import (
    DEFAULT_BUFFER_BASE,
    DEFAULT_SCRATCH_BASE,
    DEFAULT_STACK_SIZE,
    DEFAULT_STACK_TOP,
    DEFAULT_TIB_BASE,
    FPU_ENV_IP_OFFSET,
    RETURN_SENTINEL,
    AccessEvent,
    AccessKind,
    ChainConfig,
    ChainRunner,
    ControlEvent,
    CpuState,
    ExecutionTrace,
    LayoutConfig,
    LayoutError,
    Machine,
    MachineFault,
    MemoryImage,
    Region,
    RegionKind,
    RegisterPolicy,
    StepOutcome,
    TerminationReason,
    init_state,
    run_chain,
    step,
)
