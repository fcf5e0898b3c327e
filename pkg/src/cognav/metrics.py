"""Trajectory metrics (NE, SR, OSR, nDTW, PL) and their per-sentence variants."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .geometry import Pose

if TYPE_CHECKING:
    from .dataset import EpisodeSpec
    from .orchestrator import EpisodeLog

SUCCESS_THRESHOLD = 20.0
MODES = ("2d", "3d")


def _xyz(p: Pose | Sequence[float]) -> np.ndarray:
    if isinstance(p, Pose):
        return p.position
    return np.asarray(p, dtype=float)[:3]


def _points(path: Sequence) -> np.ndarray:
    return np.array([_xyz(p) for p in path], dtype=float).reshape(-1, 3)


def distance(a, b, mode: str = "3d") -> float:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    d = _xyz(a) - _xyz(b)
    if mode == "2d":
        d = d[:2]
    return float(math.sqrt(float(d @ d)))


def navigation_error(final, dest) -> float:
    return distance(final, dest, "3d")


def success(final, dest, threshold: float = SUCCESS_THRESHOLD, mode: str = "3d") -> bool:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    # "within" is read inclusively
    return distance(final, dest, mode) <= threshold


def oracle_success(path: Sequence, dest, threshold: float = SUCCESS_THRESHOLD, mode: str = "2d") -> bool:
    if len(path) == 0:
        raise ValueError("path must be non-empty")
    return any(success(p, dest, threshold, mode) for p in path)


def dtw(path: Sequence, reference: Sequence) -> float:
    """Monotone alignment cost with 3D Euclidean point distances."""
    a, b = _points(path), _points(reference)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both paths must be non-empty")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def ndtw(path: Sequence, reference: Sequence, d_th: float = SUCCESS_THRESHOLD) -> float:
    return math.exp(-dtw(path, reference) / (len(reference) * d_th))


def path_length(path: Sequence) -> float:
    pts = _points(path)
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


@dataclass(frozen=True)
class SentenceReport:
    index: int
    reached: bool
    s_sr: bool
    s_ne: float
    s_ndtw: float
    s_osr: bool


def sentence_slices(log: "EpisodeLog", n_sentences: int) -> list[tuple[int, int] | None]:
    """Index ranges into ``log.path()`` covering each sentence, ``None`` for unreached ones.

    A completion marker at step s closes the sentence at the pose held before
    step s. Finishing the task closes whichever sentence was active.
    """
    markers = log.sentence_completion_steps
    if len(markers) > n_sentences:
        raise ValueError(f"{len(markers)} completion markers for {n_sentences} sentences")
    ends = list(markers)
    last = len(log.path()) - 1
    if log.reason == "task-finish" and len(ends) < n_sentences:
        ends.append(last)
    out: list[tuple[int, int] | None] = []
    begin = 0
    for k in range(n_sentences):
        if k < len(ends):
            out.append((begin, ends[k]))
            begin = ends[k]
        else:
            out.append(None)
    return out


def sentence_metrics(log: "EpisodeLog", spec: "EpisodeSpec", threshold: float = SUCCESS_THRESHOLD,
                     mode: str = "3d", osr_mode: str = "2d") -> list[SentenceReport]:
    path = log.path()
    slices = sentence_slices(log, len(spec.sentences))
    reports = []
    last_reached = path[0]
    for k, (sentence, sl) in enumerate(zip(spec.sentences, slices)):
        target = sentence.segment[-1]
        if sl is None:
            reports.append(SentenceReport(k, False, False, distance(last_reached, target, mode),
                                          0.0, False))
            continue
        sub = path[sl[0]:sl[1] + 1]
        last_reached = sub[-1]
        reports.append(SentenceReport(
            k, True, success(sub[-1], target, threshold, mode), distance(sub[-1], target, mode),
            ndtw(sub, sentence.segment, threshold), oracle_success(sub, target, threshold, osr_mode)))
    return reports


@dataclass(frozen=True)
class EpisodeMetrics:
    episode_id: str
    ne: float
    sr2d: bool
    sr3d: bool
    osr: bool
    ndtw: float
    path_length: float
    steps: int
    reason: str | None
    sentence_level: tuple[SentenceReport, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sentence_level"] = [asdict(s) for s in self.sentence_level]
        return d


def episode_metrics(log: "EpisodeLog", spec: "EpisodeSpec", threshold: float = SUCCESS_THRESHOLD,
                    osr_mode: str = "2d") -> EpisodeMetrics:
    path = log.path()
    final, dest = path[-1], spec.destination
    return EpisodeMetrics(
        episode_id=spec.id,
        ne=navigation_error(final, dest),
        sr2d=success(final, dest, threshold, "2d"),
        sr3d=success(final, dest, threshold, "3d"),
        osr=oracle_success(path, dest, threshold, osr_mode),
        ndtw=ndtw(path, spec.reference_path(), threshold),
        path_length=path_length(path),
        steps=len(log.steps),
        reason=log.reason,
        sentence_level=tuple(sentence_metrics(log, spec, threshold, osr_mode=osr_mode)),
    )


@dataclass
class SuiteReport:
    episodes: list[EpisodeMetrics]
    warnings: list[str] = field(default_factory=list)

    def _ordered(self) -> list[EpisodeMetrics]:
        # total order so repeated ids still serialize the same way
        return sorted(self.episodes, key=lambda e: (e.episode_id, json.dumps(e.to_dict(), sort_keys=True)))

    def aggregate(self) -> dict:
        eps = self._ordered()
        if not eps:
            return {"count": 0}
        mean = lambda xs: float(np.mean(xs))
        sentences = [s for e in eps for s in e.sentence_level]
        agg = {
            "count": len(eps),
            "sr2d": mean([e.sr2d for e in eps]),
            "sr3d": mean([e.sr3d for e in eps]),
            "osr": mean([e.osr for e in eps]),
            "ne": mean([e.ne for e in eps]),
            "ndtw": mean([e.ndtw for e in eps]),
            "path_length": mean([e.path_length for e in eps]),
            "steps": mean([e.steps for e in eps]),
        }
        if sentences:
            agg.update(s_sr=mean([s.s_sr for s in sentences]), s_osr=mean([s.s_osr for s in sentences]),
                       s_ne=mean([s.s_ne for s in sentences]), s_ndtw=mean([s.s_ndtw for s in sentences]))
        return agg

    def to_json(self) -> str:
        doc = {"aggregate": self.aggregate(),
               "episodes": [e.to_dict() for e in self._ordered()],
               "warnings": list(self.warnings)}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        cols = ["Episode", "SR2D", "SR3D", "OSR", "NE", "nDTW", "PL", "Steps"]
        rows = []
        for e in self._ordered():
            rows.append([e.episode_id, _pct(e.sr2d), _pct(e.sr3d), _pct(e.osr), f"{e.ne:.2f}",
                         _pct(e.ndtw), f"{e.path_length:.2f}", str(e.steps)])
        agg = self.aggregate()
        if agg["count"]:
            rows.append(["ALL", _pct(agg["sr2d"]), _pct(agg["sr3d"]), _pct(agg["osr"]), f"{agg['ne']:.2f}",
                         _pct(agg["ndtw"]), f"{agg['path_length']:.2f}", f"{agg['steps']:.2f}"])
        widths = [max(len(r[i]) for r in [cols] + rows) for i in range(len(cols))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        return "\n".join([fmt(cols)] + [fmt(r) for r in rows]) + "\n"


def _pct(x: float) -> str:
    return f"{100.0 * float(x):.2f}"
