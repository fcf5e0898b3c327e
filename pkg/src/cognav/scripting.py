"""Offline stand-ins for the text model, and a recorder that turns any run into a script."""

from __future__ import annotations

import threading
from collections import Counter
from typing import Sequence

from .dataset import EpisodeSpec
from .gateway import Backend, RoleRequest, script_key, serialize
from .geometry import Action, Pose


def reference_actions(segment: Sequence[Pose]) -> list[Action]:
    """Recover the discrete actions joining consecutive poses of a segment."""
    from .geometry import apply_action

    out = []
    for a, b in zip(segment, segment[1:]):
        for act in Action:
            if act is Action.TASK_FINISH:
                continue
            c = apply_action(a, act)
            if (abs(c.x - b.x) < 1e-6 and abs(c.y - b.y) < 1e-6 and abs(c.z - b.z) < 1e-6
                    and abs((c.yaw - b.yaw + 180.0) % 360.0 - 180.0) < 1e-6):
                out.append(act)
                break
        else:
            raise ValueError(f"no single action leads from {a.to_list()} to {b.to_list()}")
    return out


class ReferenceResponder:
    """Plays the text roles for one episode by following its reference segments.

    Each sentence becomes one subgoal, judged achieved once as many actions have
    been taken in it as its reference segment holds. ``overrides`` maps
    (sentence index, step within sentence) to a substitute action, which is how
    deliberately imperfect episodes are produced.
    """

    def __init__(self, spec: EpisodeSpec, overrides: dict[tuple[int, int], Action] | None = None):
        self.spec = spec
        self.plan = [reference_actions(s.segment) for s in spec.sentences]
        self.overrides = dict(overrides or {})
        self.sentence = 0
        self.taken = 0
        self.attention_calls = 0
        self.extract_calls = 0

    def _sentence_text(self, k: int) -> str:
        return self.spec.sentences[k].text

    def respond(self, req: RoleRequest) -> str:
        handler = getattr(self, f"_{req.role}")
        return handler(req)

    def _instruction_parser(self, req: RoleRequest) -> str:
        return serialize([{"sub-instruction": s.text, "landmark": list(s.landmarks)}
                          for s in self.spec.sentences])

    def _attention(self, req: RoleRequest) -> str:
        k = self.attention_calls
        self.attention_calls += 1
        names = list(self.spec.sentences[k].landmarks)
        if k + 1 < len(self.spec.sentences):
            names += [lm for lm in self.spec.sentences[k + 1].landmarks if lm not in names]
        return serialize([{"landmark": lm, "question": f"Is {lm} in front of you, on your left or on your right?"}
                          for lm in names])

    def _perception(self, req: RoleRequest) -> str:
        return serialize({"overall": "Overall: I see an open scene.",
                          "details": "No listed landmarks are visible."})

    def _subgoal_extractor(self, req: RoleRequest) -> str:
        k = self.extract_calls
        self.extract_calls += 1
        return serialize([self._sentence_text(k).rstrip(". ")])

    def _imagination(self, req: RoleRequest) -> str:
        lms = self.spec.sentences[self.sentence].landmarks
        target = lms[0] if lms else "the surroundings"
        return serialize({"state": f"When I have finished the subgoal, I might see {target} at the CENTER."})

    def _subgoal_judger(self, req: RoleRequest) -> str:
        done = self.taken >= len(self.plan[self.sentence])
        subgoal = self._sentence_text(self.sentence).rstrip(". ")
        reply = {"subgoal": subgoal, "achieved": done,
                 "reason": f"{self.taken} of {len(self.plan[self.sentence])} planned actions taken."}
        if done:
            self.sentence += 1
            self.taken = 0
        return serialize(reply)

    def _decision(self, req: RoleRequest) -> str:
        plan = self.plan[self.sentence]
        key = (self.sentence, self.taken)
        if key in self.overrides:
            action = self.overrides[key]
        elif self.taken < len(plan):
            action = plan[self.taken]
        else:
            action = Action.TASK_FINISH
        if action is not Action.TASK_FINISH:
            self.taken += 1
        probs = {str(int(a)): 0.02 for a in Action if a is not Action.TASK_FINISH}
        probs[str(int(action))] = 0.86
        return serialize({"thought": f"Following the plan for sentence {self.sentence + 1}.",
                          "probabilities": probs, "selected_action": int(action)})

    def _step_memory(self, req: RoleRequest) -> str:
        return serialize({"step_memory": f"I see the scene; I take action {self.taken} of sentence {self.sentence + 1}."})

    def _subgoal_memory(self, req: RoleRequest) -> str:
        return serialize({"subgoal_memory": f"I completed sentence {self.sentence} of the route."})


class RecordingBackend:
    """Forwards to ``inner`` and keeps every reply under its script key."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.script: dict[str, str] = {}
        self._counters: Counter = Counter()
        self._lock = threading.Lock()

    def complete(self, request: RoleRequest) -> str:
        text = self.inner.complete(request)
        with self._lock:
            index = self._counters[(request.episode_id, request.role)]
            self._counters[(request.episode_id, request.role)] = index + 1
            self.script[script_key(request.episode_id, request.role, index)] = text
        return text
