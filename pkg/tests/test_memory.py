from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from cognav import orchestrator
from cognav.collision import ContractViolation
from cognav.memory import (
    InstructionMemory, StepMemoryEntry, SubgoalMemory, append_step, complete_subgoal,
    render_instruction_memory, render_subgoal_raw,
)
from random_episodes import memory_violations, run_random, world


def test_renderings():
    m = SubgoalMemory("turn left")
    assert render_subgoal_raw(m) == "None"
    assert render_instruction_memory(InstructionMemory(), "turn left", m) == "None"
    m = append_step(append_step(m, StepMemoryEntry(4, "a")), StepMemoryEntry(5, "b"))
    assert render_subgoal_raw(m) == "At step-1: a\nAt step-2: b"
    nxt, imem = complete_subgoal(m, "summary", InstructionMemory(), "fly on")
    assert render_instruction_memory(imem, "fly on", nxt) == "For <turn left>:\nsummary\nFor <fly on>:\nNone"
    nxt = append_step(nxt, StepMemoryEntry(6, "c"))
    assert render_instruction_memory(imem, "fly on", nxt) == (
        "For <turn left>:\nsummary\nFor <fly on>:\nAt step-1: c")


def test_contracts():
    m = append_step(SubgoalMemory("s"), StepMemoryEntry(3, "a"))
    with pytest.raises(ContractViolation):
        append_step(m, StepMemoryEntry(3, "b"))
    with pytest.raises(ContractViolation):
        complete_subgoal(m, "", InstructionMemory())
    nxt, imem = complete_subgoal(m, "sum", InstructionMemory())
    with pytest.raises(ContractViolation):
        complete_subgoal(m, "sum", imem)
    with pytest.raises(ContractViolation):
        append_step(SubgoalMemory("s", completed=True), StepMemoryEntry(0, "a"))
    # an empty subgoal may close without a summary
    assert complete_subgoal(SubgoalMemory("s"), "", InstructionMemory())[1].entries[0].consolidated == ""


@given(st.lists(st.integers(0, 4), min_size=1, max_size=6))
def test_instruction_memory_tracks_completed_subgoals(steps_per_subgoal):
    mem, imem, step = SubgoalMemory("g0"), InstructionMemory(), 0
    for j, n in enumerate(steps_per_subgoal):
        for _ in range(n):
            mem = append_step(mem, StepMemoryEntry(step, f"g{j} step {step}"))
            step += 1
        assert all(e.text.startswith(f"g{j} ") for e in mem.raw)
        mem, imem = complete_subgoal(mem, f"g{j} summary" if n else "", imem, f"g{j + 1}")
        assert len(imem) == j + 1 == mem.ordinal
        assert mem.raw == ()
    assert [e.subgoal for e in imem.entries] == [f"g{j}" for j in range(len(steps_per_subgoal))]


def test_random_episodes_keep_memory_invariants():
    w = world()
    for seed in range(100, 110):
        log, responder = run_random(seed, w)
        assert log.reason == "all-sentences-complete"
        assert memory_violations(log) == []


def test_missing_reset_trips_the_memory_contract(monkeypatch):
    original = orchestrator._start_sentence

    def leaky(gw, st):
        kept = st.instruction_memory
        original(gw, st)
        st.instruction_memory = kept

    monkeypatch.setattr(orchestrator, "_start_sentence", leaky)
    w = world()
    with pytest.raises(ContractViolation):
        for seed in range(20):
            run_random(seed, w)


def test_checker_catches_raw_memory_leak(monkeypatch):
    def leaky(mem, consolidated, imem, next_subgoal=""):
        nxt, imem = complete_subgoal(mem, consolidated, imem, next_subgoal)
        return replace(nxt, raw=mem.raw), imem

    monkeypatch.setattr(orchestrator, "complete_subgoal", leaky)
    w = world()
    found = [v for seed in range(10) for v in memory_violations(run_random(seed, w)[0])]
    assert any("raw entry" in v for v in found)
