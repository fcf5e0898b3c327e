import json
import math

import pytest

import golden_trace as g
from cognav.cognition import OracleVisionBackend
from cognav.collision import ASCEND_WARNING, DESCEND_WARNING, FORWARD_WARNING
from cognav.gateway import CallableBackend, Gateway, ScriptedBackend, serialize
from cognav.geometry import Action, Pose, empty_world
from cognav.orchestrator import EpisodeConfig, EpisodeLog, replay, run_episode

SMALL = EpisodeConfig(step_cap=20, render_width=16, render_height=16)


@pytest.fixture(scope="module")
def golden_log():
    return g.run()


# -- documented trace ----------------------------------------------------------------

def test_golden_actions_and_ending(golden_log):
    assert [r["action"] for r in golden_log.steps] == [int(a) for a in g.ACTIONS]
    assert golden_log.reason == "cap"
    assert golden_log.sentence_completion_steps == [g.SENTENCE_DONE_STEP]
    assert golden_log.end["gateway_calls"] == g.EXPECTED_CALLS


def roles(rec):
    return [e["role"] for e in rec["transcripts"]]


def test_golden_step_structure(golden_log):
    s0, s13, s14 = golden_log.steps[0], golden_log.steps[13], golden_log.steps[14]
    assert roles(s0) == ["instruction_parser", "attention", "perception", "subgoal_extractor", "imagination",
                         "subgoal_judger", "decision", "step_memory"]
    assert roles(s13) == ["perception", "subgoal_judger", "subgoal_memory", "attention", "subgoal_extractor",
                          "perception", "decision", "step_memory"]
    assert roles(s14) == ["perception", "imagination", "subgoal_judger", "decision", "step_memory"]
    assert s13["sentence_transition"] and len(s13["perceptions"]) == 2
    assert s13["memory"]["instruction_memory"] == []
    assert s13["subgoal"] == "fly over the yellow truck"
    assert s13["subgoals"] == ["turn left", "take the next left at another truck"]
    assert s14["subgoal"] == "turn left" and s14["imagination"] == g.IMAGINE_TURN2
    # imagination is cached between subgoal completions
    with_imagination = [r["step"] for r in golden_log.steps if "imagination" in roles(r)]
    assert with_imagination == [0, g.TURN_DONE_STEP + 1, 14]


def test_new_sentence_feeds_subgoal_extraction(golden_log):
    # the documented step-13 input repeats the finished sentence; the new one is what gets split
    prompt = g.input_section(g.prompts_at(golden_log, 13, "subgoal_extractor")[0])
    assert "take the next left at another truck." in prompt and "fly over the yellow truck" not in prompt


def test_golden_memory_contents(golden_log):
    s2 = golden_log.steps[g.TURN_DONE_STEP]
    assert s2["consolidated"] == g.TURN_SUMMARY
    assert s2["memory"]["instruction_memory"] == [["turn left", g.TURN_SUMMARY]]
    s12 = golden_log.steps[12]
    assert [t for _, t in s12["memory"]["subgoal_memory"]["raw"]] == g.FLY_OVER_MEMORIES
    assert golden_log.steps[13]["consolidated"] == g.FLY_OVER_SUMMARY
    assert golden_log.steps[14]["memory"]["subgoal_memory"]["raw"] == [[13, g.STEP_MEMORY13], [14, g.STEP_MEMORY14]]


def test_golden_warnings(golden_log):
    w = [r["warning"] for r in golden_log.steps]
    assert w[0] == FORWARD_WARNING + DESCEND_WARNING
    assert w[13] == w[14] == FORWARD_WARNING + ASCEND_WARNING + DESCEND_WARNING


def test_golden_is_deterministic(golden_log):
    assert g.run().to_ndjson() == golden_log.to_ndjson()


def test_log_round_trip(golden_log, tmp_path):
    golden_log.save(tmp_path / "log.ndjson")
    back = EpisodeLog.load(tmp_path / "log.ndjson")
    assert back.to_ndjson() == golden_log.to_ndjson()
    lines = (tmp_path / "log.ndjson").read_text().splitlines()
    assert [json.loads(x)["kind"] for x in (lines[0], lines[1], lines[-1])] == ["header", "step", "end"]
    with pytest.raises(ValueError):
        EpisodeLog.from_ndjson(lines[0].replace('"schema_version": 1', '"schema_version": 99'))
    with pytest.raises(ValueError):
        EpisodeLog.from_ndjson(lines[1])


# -- replay --------------------------------------------------------------------------

def test_fresh_log_replays_clean(golden_log):
    report = replay(golden_log, g.world())
    assert report.ok and report.steps_checked == len(golden_log.steps)


def test_tampered_pose_is_reported(golden_log):
    log = EpisodeLog.from_ndjson(golden_log.to_ndjson())
    log.steps[5]["pose_after"][0] += 1.0
    # replay continues from the recomputed pose, so one bad record is one divergence
    assert [(d["step"], d["field"]) for d in replay(log, g.world()).divergences] == [(5, "pose_after")]
    log = EpisodeLog.from_ndjson(golden_log.to_ndjson())
    log.steps[6]["pose_before"][2] -= 2.0
    found = [(d["step"], d["field"]) for d in replay(log, g.world()).divergences]
    assert found[0] == (6, "pose_before") and all(s >= 6 for s, _ in found)


def test_tampered_warning_and_world_are_reported(golden_log):
    log = EpisodeLog.from_ndjson(golden_log.to_ndjson())
    log.steps[0]["warning"] = "None"
    assert [(d["step"], d["field"]) for d in replay(log, g.world()).divergences] == [(0, "warning")]
    other = g.world().with_occupied([(0, 0, 39)])
    assert replay(golden_log, other).divergences[0]["field"] == "world_checksum"


def test_faithful_log_replayed_in_corrected_mode():
    from dataclasses import replace

    cfg = g.config()
    cfg = replace(cfg, collision=replace(cfg.collision, mode="faithful-bug"))
    gw = Gateway(ScriptedBackend(g.script()), None, g.EPISODE_ID)
    log = run_episode(g.world(), g.START, g.INSTRUCTION, None, cfg, gw, g.EPISODE_ID)
    assert all(ASCEND_WARNING not in r["warning"] and DESCEND_WARNING not in r["warning"] for r in log.steps)
    assert replay(log, g.world()).ok
    report = replay(log, g.world(), "corrected")
    assert report.divergences and {d["field"] for d in report.divergences} == {"warning"}


# -- small scripted episodes ---------------------------------------------------------

class Plain:
    """One landmark-free sentence with one subgoal; decisions come from a list."""

    def __init__(self, actions, achieved_on=None):
        self.actions = list(actions)
        self.achieved_on = achieved_on
        self.judged = 0

    def __call__(self, req):
        role = req.role
        if role == "instruction_parser":
            return serialize([{"sub-instruction": "fly ahead.", "landmark": []}])
        if role == "attention":
            return serialize([])
        if role == "subgoal_extractor":
            return serialize(["fly ahead"])
        if role == "imagination":
            return serialize({"state": "open sky"})
        if role == "subgoal_judger":
            self.judged += 1
            return serialize({"subgoal": "fly ahead", "achieved": self.judged == self.achieved_on, "reason": "r"})
        if role == "decision":
            a = int(self.actions.pop(0))
            return serialize({"thought": "t", "probabilities": {str(a): 1.0}, "selected_action": a})
        if role == "step_memory":
            return serialize({"step_memory": "moved"})
        return serialize({"subgoal_memory": "done"})


def plain_run(actions, config=SMALL, achieved_on=None, start=Pose(20, 60, 20, 0)):
    gw = Gateway(CallableBackend(Plain(actions, achieved_on)), OracleVisionBackend(), "plain")
    return run_episode(empty_world((120, 120, 40)), start, "fly ahead.", None, config, gw)


def test_immediate_task_finish():
    log = plain_run([Action.TASK_FINISH])
    assert log.reason == "task-finish" and len(log.steps) == 1
    assert log.steps[0]["action"] == 0 and log.final_pose == log.start
    assert "step_memory" not in log.steps[0]


def test_cap_of_ten_forward_moves_covers_fifty_meters():
    from dataclasses import replace

    log = plain_run([Action.MOVE_FORWARD] * 10, replace(SMALL, step_cap=10))
    assert log.reason == "cap" and len(log.steps) == 10
    assert math.dist(log.start.position, log.final_pose.position) == 50.0


def test_completed_final_sentence_ends_without_action():
    log = plain_run([Action.MOVE_FORWARD] * 3, achieved_on=3)
    assert log.reason == "all-sentences-complete"
    last = log.steps[-1]
    assert last["action"] is None and last["decision"] is None and last["pose_after"] == last["pose_before"]
    assert log.sentence_completion_steps == [2]


def test_missing_script_entry_aborts_with_diagnostic():
    script = {k: v for k, v in g.script().items() if k != f"{g.EPISODE_ID}/decision/3"}
    gw = Gateway(ScriptedBackend(script), None, g.EPISODE_ID)
    log = run_episode(g.world(), g.START, g.INSTRUCTION, None, g.config(), gw, g.EPISODE_ID)
    assert log.reason == "backend-abort" and len(log.steps) == 3
    assert "ScriptExhausted" in log.end["diagnostic"] and "decision/3" in log.end["diagnostic"]
    assert [e["role"] for e in log.end["transcripts"]][-1] == "subgoal_judger"


def test_malformed_replies_abort_after_retries():
    def fn(req):
        return "gibberish" if req.role == "imagination" else Plain([1] * 5)(req)

    gw = Gateway(CallableBackend(fn), OracleVisionBackend(), "bad")
    log = run_episode(empty_world((120, 120, 40)), Pose(20, 60, 20), "fly ahead.", None, SMALL, gw)
    assert log.reason == "backend-abort" and "MalformedOutput" in log.end["diagnostic"]
    assert [e["attempt"] for e in log.end["transcripts"] if e["role"] == "imagination"] == [0, 1, 2]


def test_inputs_are_checked():
    with pytest.raises(ValueError):
        plain_run([1], start=Pose(500, 0, 0))
    gw = Gateway(CallableBackend(Plain([1])))
    with pytest.raises(ValueError):
        run_episode(empty_world((8, 8, 8)), Pose(1, 1, 1), "  ", None, SMALL, gw)


def test_config_round_trip_and_action_offers():
    cfg = EpisodeConfig(render_width=32, render_height=24, fov=80.0, task_finish_offer="never")
    assert cfg.collision.img_width == 32 and cfg.collision.img_height == 24 and cfg.collision.fov == 80.0
    assert EpisodeConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert Action.TASK_FINISH not in cfg.valid_actions(True)
    ff = EpisodeConfig(task_finish_offer="final_sentence")
    assert Action.TASK_FINISH in ff.valid_actions(True) and Action.TASK_FINISH not in ff.valid_actions(False)
    assert EpisodeConfig().valid_actions(False)[0] is Action.TASK_FINISH
    with pytest.raises(ValueError):
        EpisodeConfig(task_finish_offer="sometimes")
    with pytest.raises(ValueError):
        EpisodeConfig(step_cap=0)
