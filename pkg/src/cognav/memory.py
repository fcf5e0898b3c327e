"""Step, subgoal and instruction memory with their prompt renderings."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .collision import ContractViolation

EMPTY = "None"


@dataclass(frozen=True)
class StepMemoryEntry:
    step_index: int
    text: str


@dataclass(frozen=True)
class SubgoalMemory:
    subgoal: str
    raw: tuple[StepMemoryEntry, ...] = ()
    consolidated: str | None = None
    completed: bool = False
    # position of this subgoal within its sentence; pairs it with one instruction-memory slot
    ordinal: int = 0

    def to_dict(self) -> dict:
        return {"subgoal": self.subgoal, "ordinal": self.ordinal,
                "raw": [[e.step_index, e.text] for e in self.raw],
                "consolidated": self.consolidated, "completed": self.completed}


@dataclass(frozen=True)
class InstructionEntry:
    subgoal: str
    consolidated: str


@dataclass(frozen=True)
class InstructionMemory:
    entries: tuple[InstructionEntry, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.entries)

    def to_dict(self) -> list:
        return [[e.subgoal, e.consolidated] for e in self.entries]


def append_step(mem: SubgoalMemory, entry: StepMemoryEntry) -> SubgoalMemory:
    if mem.completed:
        raise ContractViolation(f"subgoal {mem.subgoal!r} is already completed")
    if mem.raw and entry.step_index <= mem.raw[-1].step_index:
        raise ContractViolation(
            f"step index {entry.step_index} does not follow {mem.raw[-1].step_index}")
    return replace(mem, raw=mem.raw + (entry,))


def render_subgoal_raw(mem: SubgoalMemory) -> str:
    if not mem.raw:
        return EMPTY
    return "\n".join(f"At step-{k}: {e.text}" for k, e in enumerate(mem.raw, start=1))


def render_instruction_memory(imem: InstructionMemory, active_subgoal: str,
                              active_raw: SubgoalMemory) -> str:
    if not imem.entries and not active_raw.raw:
        return EMPTY
    blocks = [f"For <{e.subgoal}>:\n{e.consolidated}" for e in imem.entries]
    blocks.append(f"For <{active_subgoal}>:\n{render_subgoal_raw(active_raw)}")
    return "\n".join(blocks)


def complete_subgoal(mem: SubgoalMemory, consolidated: str, imem: InstructionMemory,
                     next_subgoal: str = "") -> tuple[SubgoalMemory, InstructionMemory]:
    """Close ``mem`` into ``imem`` and hand back a fresh memory for ``next_subgoal``."""
    if mem.completed or mem.ordinal != len(imem):
        raise ContractViolation(f"subgoal {mem.subgoal!r} completed twice")
    if mem.raw and not consolidated:
        raise ContractViolation("a non-empty subgoal memory needs a consolidated summary")
    done = replace(mem, consolidated=consolidated, completed=True)
    imem = InstructionMemory(imem.entries + (InstructionEntry(done.subgoal, consolidated),))
    return SubgoalMemory(next_subgoal, ordinal=done.ordinal + 1), imem
