"""The cognitive role operations: fill a template, ask the gateway, return a typed value."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

from .gateway import Gateway, RoleRequest, SchemaMismatch, action_id, serialize
from .geometry import Action, DepthImage, Pose, VoxelWorld, visible_objects
from .prompts import assemble

NONE_MARKER = "None"


@dataclass(frozen=True)
class Sentence:
    text: str
    landmarks: tuple[str, ...] = ()

    @property
    def landmark_free(self) -> bool:
        return not self.landmarks

    def to_dict(self) -> dict:
        return {"text": self.text, "landmarks": list(self.landmarks)}


@dataclass(frozen=True)
class ParsedInstruction:
    sentences: tuple[Sentence, ...]

    def __post_init__(self):
        if not self.sentences:
            raise ValueError("an instruction parses into at least one sentence")


@dataclass(frozen=True)
class SubgoalList:
    subgoals: tuple[str, ...]
    source_sentence_index: int = 0

    def __post_init__(self):
        if not self.subgoals:
            raise ValueError("subgoal list must be non-empty")


@dataclass(frozen=True)
class AttentionQuery:
    landmark: str
    question: str


@dataclass(frozen=True)
class AttentionQueries:
    entries: tuple[AttentionQuery, ...] = ()

    @property
    def suggestion(self) -> str:
        return "\n".join(q.question for q in self.entries)

    def to_dict(self) -> list:
        return [{"landmark": q.landmark, "question": q.question} for q in self.entries]


@dataclass(frozen=True)
class Observation:
    overall: str
    details: str

    @property
    def text(self) -> str:
        return f"{self.overall}\n{self.details}"

    def to_dict(self) -> dict:
        return {"overall": self.overall, "details": self.details}


@dataclass(frozen=True)
class ImaginedState:
    state: str


@dataclass(frozen=True)
class JudgerVerdict:
    subgoal: str
    achieved: bool
    reason: str

    def to_dict(self) -> dict:
        return {"subgoal": self.subgoal, "achieved": self.achieved, "reason": self.reason}


@dataclass(frozen=True)
class Decision:
    thought: str
    probabilities: dict[int, float]
    selected_action: int

    @property
    def argmax_agrees(self) -> bool:
        if not self.probabilities:
            return True
        top = max(self.probabilities.values())
        return self.probabilities.get(self.selected_action) == top

    @property
    def action(self) -> Action:
        return Action(self.selected_action)

    def to_dict(self) -> dict:
        return {"thought": self.thought,
                "probabilities": {str(k): v for k, v in self.probabilities.items()},
                "selected_action": self.selected_action}


@dataclass(frozen=True)
class View:
    """What the perception role looks at: the rendered depth plus the scene it came from."""

    world: VoxelWorld
    pose: Pose
    fov: float
    depth: DepthImage | None = None


# -- text renderings fed to templates ----------------------------------------------

def landmark_text(landmarks: Sequence[str]) -> str:
    return ", ".join(landmarks) if landmarks else NONE_MARKER


def sentence_block(sentence: Sentence | None) -> str:
    if sentence is None:
        return NONE_MARKER
    return f"{sentence.text}\nLandmark: {landmark_text(sentence.landmarks)}"


def joined_landmarks(*sentences: Sentence | None) -> str:
    names = [lm for s in sentences if s is not None for lm in s.landmarks]
    return " | ".join(names) if names else NONE_MARKER


def render_actions(actions: Sequence[Action]) -> str:
    return "\n".join(f"{int(a)}: {Action(a).label}" for a in actions)


# -- role operations ---------------------------------------------------------------

def parse_instruction(gw: Gateway, instruction: str) -> ParsedInstruction:
    if not instruction.strip():
        raise ValueError("instruction must be non-empty")

    def convert(value: list) -> ParsedInstruction:
        return ParsedInstruction(tuple(
            Sentence(item["sub-instruction"], tuple(item["landmark"])) for item in value))

    return gw.ask("instruction_parser",
                  assemble("instruction_parser", navigation_instruction=instruction), convert)


def extract_subgoals(gw: Gateway, sentence: str, observation: Observation,
                     source_sentence_index: int = 0) -> SubgoalList:
    prompt = assemble("subgoal_extractor", instruction=sentence, observation=observation.text)
    return gw.ask("subgoal_extractor", prompt,
                  lambda v: SubgoalList(tuple(v), source_sentence_index))


def make_attention_queries(gw: Gateway, current: Sentence, next_: Sentence | None) -> AttentionQueries:
    allowed = {lm.casefold() for s in (current, next_) if s is not None for lm in s.landmarks}

    def convert(value: list) -> AttentionQueries:
        stray = [q["landmark"] for q in value if q["landmark"].casefold() not in allowed]
        if stray:
            raise SchemaMismatch("attention", [f"landmark {lm!r} is not in either sentence" for lm in stray])
        return AttentionQueries(tuple(AttentionQuery(q["landmark"], q["question"]) for q in value))

    prompt = assemble("attention", current_instruction=sentence_block(current),
                      next_instruction=sentence_block(next_))
    return gw.ask("attention", prompt, convert)


def perceive(gw: Gateway, view: View | None, queries: AttentionQueries) -> Observation:
    def convert(value: dict) -> Observation:
        if not value["overall"].strip() or not value["details"].strip():
            raise SchemaMismatch("perception", ["overall and details must be non-empty"])
        return Observation(value["overall"], value["details"])

    return gw.ask("perception", assemble("perception", suggestion=queries.suggestion), convert, image=view)


def imagine(gw: Gateway, subgoal: str, landmarks: Sequence[str] | str,
            next_subgoal: str | None) -> ImaginedState:
    if not isinstance(landmarks, str):
        landmarks = " | ".join(landmarks) if landmarks else NONE_MARKER
    prompt = assemble("imagination", subgoal=subgoal, landmark=landmarks,
                      next_subgoal=next_subgoal or NONE_MARKER)

    def convert(value: dict) -> ImaginedState:
        if not value["state"].strip():
            raise SchemaMismatch("imagination", ["state must be non-empty"])
        return ImaginedState(value["state"])

    return gw.ask("imagination", prompt, convert)


def judge_subgoal(gw: Gateway, observation: Observation, subgoal: str, history: str,
                  imagined: ImaginedState, next_subgoal: str | None) -> JudgerVerdict:
    prompt = assemble("subgoal_judger", subgoal=subgoal, history=history, scene=observation.text,
                      state=imagined.state, next_subgoal=next_subgoal or NONE_MARKER)
    # the verdict is about the subgoal we asked for, whatever the echo looks like
    return gw.ask("subgoal_judger", prompt,
                  lambda v: JudgerVerdict(subgoal, v["achieved"], v["reason"]))


def decide(gw: Gateway, subgoal: str, sentence: str, observation: Observation, warning: str,
           memory: str, valid_actions: Sequence[Action]) -> Decision:
    valid = {int(a) for a in valid_actions}

    def convert(value: dict) -> Decision:
        probs = {action_id(k): float(w) for k, w in value["probabilities"].items()}
        selected = action_id(value["selected_action"])
        problems = []
        if selected not in valid:
            problems.append(f"selected_action {selected} is not a valid action")
        extra = sorted(set(probs) - valid)
        if extra:
            problems.append(f"probabilities name invalid actions {extra}")
        if problems:
            raise SchemaMismatch("decision", problems)
        return Decision(value["thought"], probs, selected)

    prompt = assemble("decision", memory=memory, observation=observation.text,
                      collisions_warning=warning, current_instruction=sentence,
                      subgoal=subgoal, actions=render_actions(valid_actions))
    decision = gw.ask("decision", prompt, convert)
    if not decision.argmax_agrees:
        gw.divergences += 1
    return decision


def summarize_step(gw: Gateway, observation: Observation, action: Action, landmarks: str) -> str:
    prompt = assemble("step_memory", observation=observation.text, action=Action(action).label,
                      landmarks=landmarks)
    return gw.ask("step_memory", prompt, lambda v: v["step_memory"])


def consolidate_subgoal(gw: Gateway, raw_memory: str, landmarks: str) -> str:
    prompt = assemble("subgoal_memory", raw_memory=raw_memory, landmarks=landmarks)
    return gw.ask("subgoal_memory", prompt, lambda v: v["subgoal_memory"])


# -- offline perception --------------------------------------------------------------

FRONT_HALF_ANGLE = 15.0


def bearing_bucket(bearing: float) -> str:
    if abs(bearing) <= FRONT_HALF_ANGLE:
        return "In Front"
    return "On my Left" if bearing > 0 else "On my Right"


def oracle_observation(world: VoxelWorld, pose: Pose, fov: float) -> dict[str, str]:
    """Scene description built straight from the labeled objects in the frustum."""
    seen = [o for o in visible_objects(world, pose, fov) if not o.occluded]
    if not seen:
        return {"overall": "Overall: I see a scene with no labeled objects in view.",
                "details": "No listed landmarks are visible."}
    buckets: dict[str, list[str]] = {"In Front": [], "On my Left": [], "On my Right": []}
    for o in seen:
        buckets[bearing_bucket(o.bearing)].append(f"the {o.label}, about {round(o.distance)} meters away")
    details = " ".join(f"{name}: {'; '.join(items)}." for name, items in buckets.items() if items)
    noun = "object" if len(seen) == 1 else "objects"
    return {"overall": f"Overall: I see a scene with {len(seen)} labeled {noun} in view.",
            "details": details}


class OracleVisionBackend:
    """Answers perception requests from scene geometry instead of a vision model."""

    def complete(self, request: RoleRequest) -> str:
        view: Any = request.image
        if request.role != "perception" or not isinstance(view, View):
            raise ValueError("the oracle backend only serves perception requests with a View")
        return serialize(oracle_observation(view.world, view.pose, view.fov))
