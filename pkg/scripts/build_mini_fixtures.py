"""Regenerate the bundled mini dataset: worlds, episodes, run config and text-role script.

Episodes are authored as a start pose plus per-sentence action lists, so every
reference segment is reachable with the discrete action set by construction.
The script is recorded from a reference-following responder; perception is
left to the geometric oracle at run time.

    python3 scripts/build_mini_fixtures.py [--out DIR]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from cognav.dataset import EpisodeSpec, SentenceSpec, dump_dataset, load_dataset
from cognav.gateway import CallableBackend, Gateway
from cognav.cognition import OracleVisionBackend
from cognav.geometry import Action, Pose, VoxelWorld, WorldObject, apply_action
from cognav.orchestrator import EpisodeConfig, run_episode
from cognav.scripting import RecordingBackend, ReferenceResponder

F, L, R = Action.MOVE_FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT
U, D = Action.ASCEND, Action.DESCEND
ML, MR = Action.MOVE_LEFT, Action.MOVE_RIGHT

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "cognav" / "data" / "mini"

CONFIG = {"step_cap": 40, "render_width": 64, "render_height": 64}


def scene_worlds() -> dict[int, VoxelWorld]:
    s1 = VoxelWorld(1.0, np.zeros((100, 100, 30), bool), (
        WorldObject("red building", (60.0, 42.0, 0.0), (70.0, 55.0, 20.0)),
        WorldObject("yellow truck", (30.0, 64.0, 0.0), (34.0, 66.0, 3.0)),
        WorldObject("tall tower", (80.0, 80.0, 0.0), (84.0, 84.0, 28.0)),
        WorldObject("blue house", (10.0, 10.0, 0.0), (18.0, 18.0, 8.0)),
    ))
    s2 = VoxelWorld(1.0, np.zeros((120, 80, 30), bool), (
        WorldObject("white bridge", (55.0, 34.0, 8.0), (70.0, 46.0, 10.0)),
        WorldObject("green tree", (20.0, 60.0, 0.0), (23.0, 63.0, 9.0)),
        WorldObject("parking sign", (98.0, 70.0, 0.0), (99.0, 71.0, 4.0)),
    ))
    return {1: s1, 2: s2}


# id, scene, start, [(sentence, landmarks, actions)], capabilities
EPISODES = [
    ("mini-001", 1, (20, 40, 10, 0), [
        ("fly forward toward the red building.", ["the red building"], [F] * 6),
        ("turn left and fly past the tall tower.", ["the tall tower"], [L] * 6 + [F] * 4),
    ], ["spatial_relations", "multi_target_planning"]),
    ("mini-002", 1, (15, 50, 12, 270), [
        ("fly along the blue house.", ["the blue house"], [F] * 6),
        ("ascend and stop above the blue house.", ["the blue house"], [U, U, F]),
    ], ["spatial_relations", "trajectory_constraints"]),
    ("mini-003", 1, (40, 85, 10, 0), [
        ("move right toward the yellow truck.", ["the yellow truck"], [MR] * 3),
        ("descend near the yellow truck.", ["the yellow truck"], [D, D]),
        ("turn right and stop.", [], [R] * 6),
    ], ["spatial_relations", "temporal_relations"]),
    ("mini-004", 2, (10, 40, 12, 0), [
        ("fly straight along the white bridge.", ["the white bridge"], [F] * 8),
        ("ascend over the white bridge and keep flying forward.", ["the white bridge"], [U, U] + [F] * 4),
    ], ["spatial_relations", "trajectory_constraints", "ordinal_cardinal"]),
    ("mini-005", 2, (100, 20, 10, 90), [
        ("fly forward past the parking sign.", ["the parking sign"], [F] * 6),
        ("turn left and fly toward the green tree.", ["the green tree"], [L] * 6 + [F] * 12),
        ("stop in front of the green tree.", ["the green tree"], [F] * 3),
    ], ["spatial_relations", "multi_target_planning", "temporal_relations"]),
]

# deliberate mistakes so the suite is not uniformly perfect:
# mini-004 slides left instead of flying forward after climbing,
# mini-005 declares the task finished one sentence early
OVERRIDES = {
    "mini-004": {(1, k): ML for k in range(2, 6)},
    "mini-005": {(2, 0): Action.TASK_FINISH},
}

INSTRUCTION_JOIN = " "


def build_specs() -> list[EpisodeSpec]:
    specs = []
    for ep_id, scene, start, sentences, caps in EPISODES:
        pose = Pose(*map(float, start))
        built = []
        for text, landmarks, actions in sentences:
            seg = [pose]
            for a in actions:
                pose = apply_action(pose, a)
                seg.append(pose)
            built.append(SentenceSpec(text, tuple(landmarks), tuple(seg), len(actions)))
        instruction = INSTRUCTION_JOIN.join(t for t, _, _ in sentences)
        specs.append(EpisodeSpec(ep_id, scene, instruction, built[0].segment[0], pose,
                                 tuple(built), tuple(caps)))
    return specs


def record_script(specs: list[EpisodeSpec], worlds: dict[int, VoxelWorld]) -> dict[str, str]:
    config = EpisodeConfig(**CONFIG)
    recorder_script: dict[str, str] = {}
    for spec in specs:
        responder = ReferenceResponder(spec, OVERRIDES.get(spec.id))
        recorder = RecordingBackend(CallableBackend(responder.respond))
        gw = Gateway(recorder, OracleVisionBackend(), spec.id)
        log = run_episode(worlds[spec.scene_id], spec.start, spec.instruction, spec.destination,
                          config, gw, spec.id)
        print(f"{spec.id}: {log.reason} after {len(log.steps)} steps")
        recorder_script.update(recorder.script)
    return dict(sorted(recorder_script.items()))


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args(argv)
    out: Path = args.out
    (out / "worlds").mkdir(parents=True, exist_ok=True)
    worlds = scene_worlds()
    for sid, world in worlds.items():
        world.save(out / "worlds" / f"scene_{sid}.json")
    specs = build_specs()
    (out / "dataset.json").write_text(dump_dataset(specs), encoding="utf-8")
    check = load_dataset(out / "dataset.json")
    if check.diagnostics:
        raise SystemExit("\n".join(map(str, check.diagnostics)))
    (out / "config.json").write_text(json.dumps(CONFIG, indent=1, sort_keys=True) + "\n")
    script = record_script(specs, worlds)
    (out / "script.json").write_text(json.dumps(script, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(specs)} episodes and {len(script)} scripted replies to {out}")


if __name__ == "__main__":
    main()
