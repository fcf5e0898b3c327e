"""The closed navigation loop, its newline-delimited JSON log, and log replay."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path
from typing import Any

from . import cognition as cog
from .collision import CollisionMode, CollisionParams, collision_warning
from .gateway import Backend, BackendConfig, Gateway, GatewayError, make_backend
from .geometry import DEFAULT_MAX_RANGE, Action, Pose, VoxelWorld, apply_action, render_depth
from .memory import (
    InstructionMemory,
    StepMemoryEntry,
    SubgoalMemory,
    append_step,
    complete_subgoal,
    render_instruction_memory,
    render_subgoal_raw,
)

SCHEMA_VERSION = 1
REASONS = ("task-finish", "all-sentences-complete", "cap", "backend-abort")
TASK_FINISH_OFFERS = ("always", "final_sentence", "never")


@dataclass(frozen=True)
class EpisodeConfig:
    step_cap: int = 150
    judger_first_step: bool = True
    sentence_transition_replan: bool = True
    render_width: int = 672
    render_height: int = 672
    fov: float = 90.0
    max_range: float = DEFAULT_MAX_RANGE
    collision: CollisionParams = field(default_factory=CollisionParams)
    # when the decision model is offered action 0
    task_finish_offer: str = "always"
    malformed_retries: int = 2
    text_backend: BackendConfig | None = None
    vision_backend: BackendConfig | None = None

    def __post_init__(self):
        if self.step_cap < 1:
            raise ValueError("step_cap must be >= 1")
        if self.task_finish_offer not in TASK_FINISH_OFFERS:
            raise ValueError(f"task_finish_offer must be one of {TASK_FINISH_OFFERS}")
        if self.malformed_retries < 0:
            raise ValueError("malformed_retries must be >= 0")
        # the estimator always sees images at the render resolution and fov
        object.__setattr__(self, "collision", dc_replace(
            self.collision, img_width=self.render_width, img_height=self.render_height, fov=self.fov))

    def valid_actions(self, final_sentence: bool) -> list[Action]:
        offer = self.task_finish_offer == "always" or (
            self.task_finish_offer == "final_sentence" and final_sentence)
        return [a for a in Action if offer or a is not Action.TASK_FINISH]

    def to_dict(self) -> dict:
        return {
            "step_cap": self.step_cap,
            "judger_first_step": self.judger_first_step,
            "sentence_transition_replan": self.sentence_transition_replan,
            "render_width": self.render_width,
            "render_height": self.render_height,
            "fov": self.fov,
            "max_range": self.max_range,
            "collision": self.collision.to_dict(),
            "task_finish_offer": self.task_finish_offer,
            "malformed_retries": self.malformed_retries,
            "text_backend": self.text_backend.to_dict() if self.text_backend else None,
            "vision_backend": self.vision_backend.to_dict() if self.vision_backend else None,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EpisodeConfig":
        doc = dict(doc)
        if "collision" in doc:
            doc["collision"] = CollisionParams(**doc["collision"])
        for key in ("text_backend", "vision_backend"):
            if doc.get(key) is not None:
                doc[key] = BackendConfig(**doc[key])
        return cls(**doc)


@dataclass
class EpisodeState:
    pose: Pose
    parsed: cog.ParsedInstruction
    sentence_index: int = 0
    subgoal_index: int = 0
    subgoals: cog.SubgoalList | None = None
    cached_queries: cog.AttentionQueries = field(default_factory=cog.AttentionQueries)
    cached_imagination: cog.ImaginedState | None = None
    subgoal_memory: SubgoalMemory = field(default_factory=lambda: SubgoalMemory(""))
    instruction_memory: InstructionMemory = field(default_factory=InstructionMemory)
    step_count: int = 0
    sentence_completion_steps: list[int] = field(default_factory=list)
    finished: bool = False
    reason: str | None = None

    @property
    def sentence(self) -> cog.Sentence:
        return self.parsed.sentences[self.sentence_index]

    @property
    def next_sentence(self) -> cog.Sentence | None:
        nxt = self.sentence_index + 1
        return self.parsed.sentences[nxt] if nxt < len(self.parsed.sentences) else None

    @property
    def final_sentence(self) -> bool:
        return self.sentence_index == len(self.parsed.sentences) - 1

    @property
    def subgoal(self) -> str:
        return self.subgoals.subgoals[self.subgoal_index]

    @property
    def next_subgoal(self) -> str | None:
        """Next subgoal of this sentence, else the next sentence itself."""
        if self.subgoal_index + 1 < len(self.subgoals.subgoals):
            return self.subgoals.subgoals[self.subgoal_index + 1]
        nxt = self.next_sentence
        return nxt.text if nxt is not None else None

    def memory_snapshot(self) -> dict:
        return {"subgoal_memory": self.subgoal_memory.to_dict(),
                "instruction_memory": self.instruction_memory.to_dict()}


@dataclass
class EpisodeLog:
    header: dict
    steps: list[dict] = field(default_factory=list)
    end: dict = field(default_factory=dict)

    @property
    def reason(self) -> str | None:
        return self.end.get("reason")

    @property
    def start(self) -> Pose:
        return Pose.from_list(self.header["start"])

    @property
    def sentence_completion_steps(self) -> list[int]:
        return list(self.end.get("sentence_completion_steps", []))

    def path(self) -> list[Pose]:
        """Pose before every step followed by the final pose."""
        poses = [self.start]
        for rec in self.steps:
            poses.append(Pose.from_list(rec["pose_after"]))
        return poses

    @property
    def final_pose(self) -> Pose:
        return self.path()[-1]

    def to_ndjson(self) -> str:
        records = [{"kind": "header", **self.header}]
        records += [{"kind": "step", **s} for s in self.steps]
        records.append({"kind": "end", **self.end})
        return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)

    @classmethod
    def from_ndjson(cls, text: str) -> "EpisodeLog":
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not records or records[0].get("kind") != "header":
            raise ValueError("episode log must start with a header record")
        header = {k: v for k, v in records[0].items() if k != "kind"}
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported log schema version {header.get('schema_version')!r}")
        log = cls(header)
        for rec in records[1:]:
            body = {k: v for k, v in rec.items() if k != "kind"}
            if rec.get("kind") == "step":
                log.steps.append(body)
            elif rec.get("kind") == "end":
                log.end = body
            else:
                raise ValueError(f"unknown record kind {rec.get('kind')!r}")
        return log

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ndjson(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EpisodeLog":
        return cls.from_ndjson(Path(path).read_text(encoding="utf-8"))


def make_gateway(config: EpisodeConfig, episode_id: str, text: Backend | None = None,
                 vision: Backend | None = None) -> Gateway:
    """Gateway for one episode; explicit backends win over the configured ones."""
    if text is None:
        if config.text_backend is None:
            raise ValueError("no text backend configured")
        text = make_backend(config.text_backend)
    if vision is None and config.vision_backend is not None:
        vision = make_backend(config.vision_backend)
    return Gateway(text, vision, episode_id, config.malformed_retries)


def _view(world: VoxelWorld, pose: Pose, config: EpisodeConfig) -> cog.View:
    depth = render_depth(world, pose, config.fov, config.render_width, config.render_height,
                         config.max_range)
    return cog.View(world, pose, config.fov, depth)


def _start_sentence(gw: Gateway, st: EpisodeState) -> None:
    st.cached_queries = cog.make_attention_queries(gw, st.sentence, st.next_sentence)
    st.subgoals = None
    st.subgoal_index = 0
    st.cached_imagination = None
    st.instruction_memory = InstructionMemory()
    st.subgoal_memory = SubgoalMemory("")


def _step_landmarks(st: EpisodeState) -> str:
    return cog.joined_landmarks(st.sentence, st.next_sentence)


def run_episode(world: VoxelWorld, start: Pose, instruction: str, destination: Pose | None,
                config: EpisodeConfig, gateway: Gateway, episode_id: str = "") -> EpisodeLog:
    if not instruction.strip():
        raise ValueError("instruction must be non-empty")
    if not world.contains(start.position):
        raise ValueError(f"start pose {start.to_list()} lies outside the world")
    episode_id = episode_id or gateway.episode_id
    log = EpisodeLog({
        "schema_version": SCHEMA_VERSION,
        "episode_id": episode_id,
        "config": config.to_dict(),
        "instruction": instruction,
        "world_checksum": world.checksum(),
        "start": start.to_list(),
        "destination": destination.to_list() if destination is not None else None,
    })
    st: EpisodeState | None = None
    record: dict | None = None
    try:
        gateway.step_index = -1
        parsed = cog.parse_instruction(gateway, instruction)
        st = EpisodeState(start, parsed)
        log.header["sentences"] = [s.to_dict() for s in parsed.sentences]
        _start_sentence(gateway, st)
        while not st.finished and st.step_count < config.step_cap:
            record = _run_step(world, config, gateway, st)
            log.steps.append(record)
            record = None
            st.step_count += 1
        if not st.finished:
            st.finished, st.reason = True, "cap"
        log.end = {"reason": st.reason, "diagnostic": None}
    except GatewayError as exc:
        log.end = {"reason": "backend-abort", "diagnostic": f"{type(exc).__name__}: {exc}",
                   "transcripts": gateway.drain()}
    log.end["steps"] = len(log.steps)
    log.end["sentence_completion_steps"] = list(st.sentence_completion_steps) if st else []
    log.end["decision_divergences"] = gateway.divergences
    log.end["gateway_calls"] = dict(sorted(gateway.calls.items()))
    return log


def _run_step(world: VoxelWorld, config: EpisodeConfig, gw: Gateway, st: EpisodeState) -> dict:
    step = st.step_count
    gw.step_index = step
    pose_before = st.pose
    rec: dict[str, Any] = {"step": step, "pose_before": pose_before.to_list(),
                           "sentence_index": st.sentence_index}

    # (a) look
    view = _view(world, pose_before, config)
    observation = cog.perceive(gw, view, st.cached_queries)
    perceptions = [observation.to_dict()]
    if st.subgoals is None:
        st.subgoals = cog.extract_subgoals(gw, st.sentence.text, observation, st.sentence_index)
        st.subgoal_memory = SubgoalMemory(st.subgoal)
    rec["subgoals"] = list(st.subgoals.subgoals)

    # (b) collision risk from the same depth image
    warning = collision_warning(view.depth, config.collision)
    rec["warning"] = warning
    rec["inside_geometry"] = view.depth.inside_geometry

    # (c) imagination, generated once per subgoal
    if st.cached_imagination is None:
        st.cached_imagination = cog.imagine(gw, st.subgoal, st.sentence.landmarks, st.next_subgoal)
    rec["subgoal"] = st.subgoal
    rec["imagination"] = st.cached_imagination.state

    # (d) judge, then advance subgoal / sentence
    verdict = None
    rec["sentence_transition"] = False
    if step > 0 or config.judger_first_step:
        verdict = cog.judge_subgoal(gw, observation, st.subgoal, render_subgoal_raw(st.subgoal_memory),
                                    st.cached_imagination, st.next_subgoal)
    rec["verdict"] = verdict.to_dict() if verdict else None
    if verdict is not None and verdict.achieved:
        consolidated = ""
        if st.subgoal_memory.raw:
            consolidated = cog.consolidate_subgoal(
                gw, render_subgoal_raw(st.subgoal_memory), _step_landmarks(st))
        last_in_sentence = st.subgoal_index + 1 >= len(st.subgoals.subgoals)
        upcoming = "" if last_in_sentence else st.subgoals.subgoals[st.subgoal_index + 1]
        st.subgoal_memory, st.instruction_memory = complete_subgoal(
            st.subgoal_memory, consolidated, st.instruction_memory, upcoming)
        st.cached_imagination = None
        rec["consolidated"] = consolidated
        if not last_in_sentence:
            st.subgoal_index += 1
        else:
            st.sentence_completion_steps.append(step)
            if st.final_sentence:
                st.finished, st.reason = True, "all-sentences-complete"
                rec.update(perceptions=perceptions, decision=None, action=None,
                           pose_after=pose_before.to_list(), memory=st.memory_snapshot(),
                           transcripts=gw.drain())
                return rec
            st.sentence_index += 1
            rec["sentence_transition"] = True
            _start_sentence(gw, st)
            # subgoals for the new sentence come from what was just seen
            st.subgoals = cog.extract_subgoals(gw, st.sentence.text, observation, st.sentence_index)
            st.subgoal_memory = SubgoalMemory(st.subgoal)
            rec["subgoals"] = list(st.subgoals.subgoals)
            if config.sentence_transition_replan:
                observation = cog.perceive(gw, view, st.cached_queries)
                perceptions.append(observation.to_dict())
    rec["perceptions"] = perceptions
    rec["queries"] = st.cached_queries.to_dict()

    # (e) decide and act
    memory_text = render_instruction_memory(st.instruction_memory, st.subgoal, st.subgoal_memory)
    decision = cog.decide(gw, st.subgoal, st.sentence.text, observation, warning, memory_text,
                          config.valid_actions(st.final_sentence))
    rec["decision"] = decision.to_dict()
    rec["action"] = decision.selected_action
    if decision.action is Action.TASK_FINISH:
        st.finished, st.reason = True, "task-finish"
        # finishing closes whichever sentence is active
        rec["pose_after"] = pose_before.to_list()
    else:
        st.pose = apply_action(pose_before, decision.action)
        rec["pose_after"] = st.pose.to_list()
        text = cog.summarize_step(gw, observation, decision.action, _step_landmarks(st))
        st.subgoal_memory = append_step(st.subgoal_memory, StepMemoryEntry(step, text))
        rec["step_memory"] = text
    rec["memory"] = st.memory_snapshot()
    rec["transcripts"] = gw.drain()
    return rec


# -- replay --------------------------------------------------------------------------

@dataclass
class ReplayReport:
    episode_id: str
    steps_checked: int = 0
    divergences: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.divergences

    def to_dict(self) -> dict:
        return {"episode_id": self.episode_id, "steps_checked": self.steps_checked,
                "ok": self.ok, "divergences": self.divergences}


def _pose_close(a: list[float], b: list[float], tol: float = 1e-9) -> bool:
    if len(a) != 4 or len(b) != 4:
        return False
    dyaw = abs((a[3] - b[3] + 180.0) % 360.0 - 180.0)
    return all(abs(x - y) <= tol for x, y in zip(a[:3], b[:3])) and dyaw <= tol


def replay(log: EpisodeLog, world: VoxelWorld,
           collision_mode: CollisionMode | str | None = None) -> ReplayReport:
    """Re-run kinematics and collision checks from the logged decisions."""
    if log.header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported log schema version {log.header.get('schema_version')!r}")
    config = EpisodeConfig.from_dict(log.header["config"])
    params = config.collision
    if collision_mode is not None:
        params = dc_replace(params, mode=CollisionMode(collision_mode))
    report = ReplayReport(log.header.get("episode_id", ""))
    if world.checksum() != log.header.get("world_checksum"):
        report.divergences.append({"step": None, "field": "world_checksum",
                                   "logged": log.header.get("world_checksum"),
                                   "replayed": world.checksum()})
    expected = log.header["start"]
    for rec in log.steps:
        step = rec["step"]
        if not _pose_close(rec["pose_before"], expected):
            report.divergences.append({"step": step, "field": "pose_before",
                                       "logged": rec["pose_before"], "replayed": expected})
        pose = Pose.from_list(rec["pose_before"])
        depth = render_depth(world, pose, config.fov, config.render_width, config.render_height,
                             config.max_range)
        warning = collision_warning(depth, params)
        if warning != rec["warning"]:
            report.divergences.append({"step": step, "field": "warning",
                                       "logged": rec["warning"], "replayed": warning})
        action = rec.get("action")
        after = pose if action in (None, int(Action.TASK_FINISH)) else apply_action(pose, Action(action))
        if not _pose_close(rec["pose_after"], after.to_list()):
            report.divergences.append({"step": step, "field": "pose_after",
                                       "logged": rec["pose_after"], "replayed": after.to_list()})
        expected = after.to_list()
        report.steps_checked += 1
    return report

