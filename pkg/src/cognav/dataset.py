"""Episode specs with sentence-aligned reference trajectories: load, validate, summarize."""

from __future__ import annotations

import json
import math
from importlib import resources
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .geometry import Pose

CAPABILITIES = frozenset({
    "spatial_relations",
    "multi_target_planning",
    "trajectory_constraints",
    "temporal_relations",
    "ordinal_cardinal",
})

CHAIN_TOL = 1e-6

# Released benchmark statistics as (value, rounding half-unit). A value passes when
# within STATS_TOLERANCE relative or within the rounding of the published figure.
STATS_TOLERANCE = 0.02
REFERENCE_STATS = {
    "count": (300, 0.0),
    "mean_path_length": (189.0, 0.5),
    "mean_action_count": (76.0, 0.5),
    "mean_sentences": (4.6, 0.05),
    "sentence_count": (1383, 0.0),
    "mean_sentence_length": (41.0, 0.5),
    "mean_sentence_actions": (17.0, 0.5),
}
# scene id -> (trajectories, mean path length, mean actions, mean sentences)
REFERENCE_SCENES = {
    2: (16, 279.19, 92.13, 5.19),
    3: (32, 121.91, 72.47, 4.56),
    5: (10, 315.80, 128.20, 6.20),
    7: (30, 210.83, 71.70, 4.70),
    8: (35, 103.26, 47.40, 4.29),
    9: (30, 255.50, 80.03, 4.20),
    10: (10, 334.60, 115.50, 5.20),
    11: (20, 413.10, 125.45, 4.65),
    12: (20, 167.65, 67.05, 4.95),
    13: (32, 98.69, 62.16, 4.25),
    14: (17, 137.59, 70.06, 4.53),
    17: (30, 96.17, 58.87, 4.07),
    20: (2, 425.50, 143.00, 7.50),
    21: (4, 265.50, 80.00, 3.50),
    24: (12, 138.67, 82.67, 5.58),
}


@dataclass(frozen=True)
class SentenceSpec:
    text: str
    landmarks: tuple[str, ...]
    segment: tuple[Pose, ...]
    action_count: int

    @property
    def path_length(self) -> float:
        return _length(self.segment)

    def to_dict(self) -> dict:
        return {"text": self.text, "landmarks": list(self.landmarks),
                "segment": [p.to_list() for p in self.segment], "action_count": self.action_count}


@dataclass(frozen=True)
class EpisodeSpec:
    id: str
    scene_id: int
    instruction: str
    start: Pose
    destination: Pose
    sentences: tuple[SentenceSpec, ...]
    capabilities: tuple[str, ...] = ()

    def reference_path(self) -> list[Pose]:
        """Segments joined end to start, shared joints kept once."""
        path = list(self.sentences[0].segment)
        for s in self.sentences[1:]:
            path.extend(s.segment[1:])
        return path

    @property
    def path_length(self) -> float:
        return sum(s.path_length for s in self.sentences)

    @property
    def action_count(self) -> int:
        return sum(s.action_count for s in self.sentences)

    def to_dict(self) -> dict:
        return {"id": self.id, "scene_id": self.scene_id, "instruction": self.instruction,
                "start": self.start.to_list(), "destination": self.destination.to_list(),
                "sentences": [s.to_dict() for s in self.sentences],
                "capabilities": list(self.capabilities)}


@dataclass(frozen=True)
class Diagnostic:
    episode_id: str
    message: str
    sentence_index: int | None = None

    def __str__(self) -> str:
        where = f" sentence {self.sentence_index}" if self.sentence_index is not None else ""
        return f"{self.episode_id}{where}: {self.message}"


@dataclass
class LoadResult:
    specs: list[EpisodeSpec] = field(default_factory=list)
    diagnostics: list[Diagnostic] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.diagnostics


class SpecError(ValueError):
    def __init__(self, message: str, sentence_index: int | None = None):
        super().__init__(message)
        self.sentence_index = sentence_index


def _length(poses: Sequence[Pose]) -> float:
    pts = np.array([p.position for p in poses]).reshape(-1, 3)
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1))) if len(pts) > 1 else 0.0


def _same(a: Pose, b: Pose, with_yaw: bool = True) -> bool:
    dyaw = abs((a.yaw - b.yaw + 180.0) % 360.0 - 180.0) if with_yaw else 0.0
    return bool(np.all(np.abs(a.position - b.position) <= CHAIN_TOL)) and dyaw <= CHAIN_TOL


def _pose(value: Any, what: str, sentence_index: int | None = None) -> Pose:
    try:
        if not isinstance(value, (list, tuple)) or len(value) not in (3, 4):
            raise ValueError
        return Pose.from_list([float(v) for v in value])
    except (TypeError, ValueError):
        raise SpecError(f"{what} must be [x, y, z] or [x, y, z, yaw] with finite numbers",
                        sentence_index) from None


def parse_episode(doc: dict) -> EpisodeSpec:
    """Build one spec, raising SpecError on the first violated invariant."""
    for key in ("id", "scene_id", "instruction", "start", "destination", "sentences"):
        if key not in doc:
            raise SpecError(f"missing field {key!r}")
    if not isinstance(doc["instruction"], str) or not doc["instruction"].strip():
        raise SpecError("instruction must be non-empty text")
    if isinstance(doc["scene_id"], bool) or not isinstance(doc["scene_id"], int):
        raise SpecError("scene_id must be an integer")
    start = _pose(doc["start"], "start")
    dest = _pose(doc["destination"], "destination")
    raw_sentences = doc["sentences"]
    if not isinstance(raw_sentences, list) or not raw_sentences:
        raise SpecError("an episode needs at least one sentence")
    sentences = []
    for k, s in enumerate(raw_sentences):
        if not isinstance(s, dict) or not isinstance(s.get("text"), str) or not s["text"].strip():
            raise SpecError("sentence needs non-empty text", k)
        landmarks = s.get("landmarks", [])
        if not isinstance(landmarks, list) or not all(isinstance(x, str) for x in landmarks):
            raise SpecError("landmarks must be a list of text", k)
        seg_raw = s.get("segment")
        if not isinstance(seg_raw, list) or not seg_raw:
            raise SpecError("segment must be a non-empty pose list", k)
        segment = tuple(_pose(p, "segment pose", k) for p in seg_raw)
        # action counts are derived from pose count when the file leaves them out
        count = s.get("action_count", len(segment) - 1)
        if isinstance(count, bool) or not isinstance(count, int) or count < 0:
            raise SpecError("action_count must be a non-negative integer", k)
        sentences.append(SentenceSpec(s["text"], tuple(landmarks), segment, count))
    if not _same(sentences[0].segment[0], start):
        raise SpecError("first segment does not begin at the start pose", 0)
    for k in range(len(sentences) - 1):
        if not _same(sentences[k].segment[-1], sentences[k + 1].segment[0]):
            raise SpecError(f"segment {k} does not end where segment {k + 1} begins", k)
    # a destination is a place; the heading on arrival does not matter
    if not _same(sentences[-1].segment[-1], dest, with_yaw=False):
        raise SpecError("last segment does not end at the destination", len(sentences) - 1)
    caps = doc.get("capabilities", [])
    if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
        raise SpecError("capabilities must be a list of tags")
    unknown = sorted(set(caps) - CAPABILITIES)
    if unknown:
        raise SpecError(f"unknown capability tags {unknown}")
    return EpisodeSpec(str(doc["id"]), doc["scene_id"], doc["instruction"], start, dest,
                       tuple(sentences), tuple(caps))


def parse_dataset(doc: Any) -> LoadResult:
    result = LoadResult()
    if doc is None:
        result.warnings.append("dataset file is empty")
        return result
    if not isinstance(doc, dict) or not isinstance(doc.get("episodes"), list):
        result.diagnostics.append(Diagnostic("<file>", "expected an object with an 'episodes' array"))
        return result
    if not doc["episodes"]:
        result.warnings.append("dataset has no episodes")
    seen: set[str] = set()
    for i, ep in enumerate(doc["episodes"]):
        ep_id = str(ep.get("id", f"#{i}")) if isinstance(ep, dict) else f"#{i}"
        if not isinstance(ep, dict):
            result.diagnostics.append(Diagnostic(ep_id, "episode must be an object"))
            continue
        if ep_id in seen:
            result.diagnostics.append(Diagnostic(ep_id, "duplicate episode id"))
            continue
        seen.add(ep_id)
        try:
            result.specs.append(parse_episode(ep))
        except SpecError as exc:
            result.diagnostics.append(Diagnostic(ep_id, str(exc), exc.sentence_index))
    return result


def mini_data_dir() -> Path:
    """Directory of the bundled mini dataset: dataset.json, worlds/, script.json, config.json."""
    return Path(str(resources.files("cognav") / "data" / "mini"))


def load_dataset(path: str | Path) -> LoadResult:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return parse_dataset(None)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        return LoadResult(diagnostics=[Diagnostic("<file>", f"invalid JSON: {exc}")])
    return parse_dataset(doc)


def dump_dataset(specs: Iterable[EpisodeSpec]) -> str:
    return json.dumps({"episodes": [s.to_dict() for s in specs]}, indent=1) + "\n"


def dataset_stats(specs: Sequence[EpisodeSpec]) -> dict:
    if not specs:
        raise ValueError("statistics need at least one episode")
    # sort first so float summation order, and hence the result, ignores input order
    specs = sorted(specs, key=lambda s: s.id)
    sentences = [s for ep in specs for s in ep.sentences]

    def summary(eps: list[EpisodeSpec]) -> dict:
        return {"count": len(eps),
                "mean_path_length": math.fsum(e.path_length for e in eps) / len(eps),
                "mean_action_count": math.fsum(e.action_count for e in eps) / len(eps),
                "mean_sentences": math.fsum(len(e.sentences) for e in eps) / len(eps)}

    out = summary(specs)
    out["sentence_count"] = len(sentences)
    out["mean_sentence_length"] = math.fsum(s.path_length for s in sentences) / len(sentences)
    out["mean_sentence_actions"] = math.fsum(s.action_count for s in sentences) / len(sentences)
    scenes: dict[int, list[EpisodeSpec]] = {}
    for ep in specs:
        scenes.setdefault(ep.scene_id, []).append(ep)
    out["per_scene"] = {sid: summary(eps) for sid, eps in sorted(scenes.items())}
    capability = {c: sum(c in ep.capabilities for ep in specs) / len(specs) for c in sorted(CAPABILITIES)}
    out["capability_fraction"] = capability
    return out


def compare_to_reference(stats: dict, tolerance: float = STATS_TOLERANCE, rounding_slack: bool = True) -> list[str]:
    """Relative deviations beyond ``tolerance`` from the released benchmark figures.

    With ``rounding_slack`` a value also passes when it rounds to the published
    figure; without it only the relative tolerance applies.
    """
    problems = []

    def check(name: str, got: float, want: float, half_unit: float = 0.005) -> None:
        allowed = tolerance * abs(want)
        if rounding_slack:
            allowed = max(allowed, half_unit)
        if abs(got - want) > allowed:
            problems.append(f"{name}: {got:.3f} vs {want:.3f}")

    for key, (want, half_unit) in REFERENCE_STATS.items():
        check(key, stats[key], want, half_unit)
    for sid, (count, length, actions, sents) in REFERENCE_SCENES.items():
        got = stats["per_scene"].get(sid)
        if got is None:
            problems.append(f"scene {sid}: missing")
            continue
        check(f"scene {sid} count", got["count"], count)
        check(f"scene {sid} path length", got["mean_path_length"], length)
        check(f"scene {sid} actions", got["mean_action_count"], actions)
        check(f"scene {sid} sentences", got["mean_sentences"], sents)
    return problems
