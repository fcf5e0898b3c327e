"""Command line entry point: run, eval, validate, stats, replay, plot.

Exit status is 0 when a command finished without errors, 1 when it found
errors (aborted episodes, dataset diagnostics, replay divergences), and 2 when
its inputs could not be read at all. Warnings never change the exit status.
API credentials are read from environment variables only.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from .cognition import OracleVisionBackend
from .collision import CollisionMode
from .dataset import EpisodeSpec, compare_to_reference, dataset_stats, load_dataset
from .gateway import DEFAULT_API_KEY_ENV, Backend, BackendConfig, Gateway, HttpBackend, ScriptedBackend
from .geometry import VoxelWorld
from .metrics import SUCCESS_THRESHOLD, SuiteReport, episode_metrics
from .orchestrator import TASK_FINISH_OFFERS, EpisodeConfig, EpisodeLog, replay, run_episode

EXIT_OK, EXIT_ERRORS, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def world_path(worlds_dir: Path, scene_id: int) -> Path:
    return worlds_dir / f"scene_{scene_id}.json"


def _load_specs(path: Path) -> list[EpisodeSpec]:
    try:
        result = load_dataset(path)
    except OSError as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from exc
    for w in result.warnings:
        _err(f"warning: {w}")
    if result.diagnostics:
        raise InputError("dataset has diagnostics:\n" + "\n".join(f"  {d}" for d in result.diagnostics))
    return result.specs


# -- run -----------------------------------------------------------------------------

def _episode_config(args) -> EpisodeConfig:
    doc: dict = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
    config = EpisodeConfig.from_dict(doc)
    changes = {}
    if args.step_cap is not None:
        changes["step_cap"] = args.step_cap
    if args.resolution is not None:
        changes["render_width"] = changes["render_height"] = args.resolution
    if args.task_finish_offer is not None:
        changes["task_finish_offer"] = args.task_finish_offer
    if args.collision_mode is not None:
        changes["collision"] = replace(config.collision, mode=CollisionMode(args.collision_mode))
    text_cfg, vision_cfg = _backend_configs(args)
    changes["text_backend"] = text_cfg
    changes["vision_backend"] = vision_cfg
    return replace(config, **changes)


def _backend_configs(args) -> tuple[BackendConfig, BackendConfig | None]:
    if args.script:
        text = BackendConfig(kind="scripted", script_path=str(args.script))
    elif args.endpoint:
        text = BackendConfig(kind="http", endpoint=args.endpoint, model_name=args.model or "",
                             timeout=args.timeout, max_retries=args.max_retries,
                             api_key_env=args.api_key_env)
    else:
        raise InputError("choose a text backend with --script or --endpoint")
    if args.vision == "oracle":
        vision = BackendConfig(kind="oracle")
    elif args.vision == "http":
        if not args.vision_endpoint:
            raise InputError("--vision http needs --vision-endpoint")
        vision = BackendConfig(kind="http", endpoint=args.vision_endpoint, model_name=args.vision_model or "",
                               timeout=args.timeout, max_retries=args.max_retries,
                               api_key_env=args.api_key_env)
    else:
        vision = None  # the text backend answers perception too
    for cfg in (text, vision):
        if cfg is not None:
            try:
                cfg.validate()
            except ValueError as exc:
                raise InputError(str(exc)) from exc
    return text, vision


def _build_backend(cfg: BackendConfig | None) -> Backend | None:
    if cfg is None:
        return None
    if cfg.kind == "scripted":
        try:
            return ScriptedBackend.from_file(cfg.script_path)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read script {cfg.script_path}: {exc}") from exc
    if cfg.kind == "http":
        return HttpBackend(cfg)
    return OracleVisionBackend()


def cmd_run(args) -> int:
    specs = _load_specs(Path(args.dataset))
    if args.episodes:
        wanted = set(args.episodes.split(","))
        missing = wanted - {s.id for s in specs}
        if missing:
            raise InputError(f"unknown episode ids: {sorted(missing)}")
        specs = [s for s in specs if s.id in wanted]
    if args.parallelism < 1:
        raise InputError("--parallelism must be >= 1")
    config = _episode_config(args)
    worlds: dict[int, VoxelWorld] = {}
    for sid in sorted({s.scene_id for s in specs}):
        path = world_path(Path(args.worlds), sid)
        try:
            worlds[sid] = VoxelWorld.load(path)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot read world {path}: {exc}") from exc
    text = _build_backend(config.text_backend)
    vision = _build_backend(config.vision_backend)
    out = Path(args.out)
    logs_dir = out / "logs"
    try:
        logs_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {logs_dir}: {exc}") from exc

    def one(spec: EpisodeSpec) -> dict:
        gw = Gateway(text, vision, spec.id, config.malformed_retries)
        log = run_episode(worlds[spec.scene_id], spec.start, spec.instruction, spec.destination,
                          config, gw, spec.id)
        path = logs_dir / f"{spec.id}.ndjson"
        log.save(path)
        return {"id": spec.id, "log": str(path.relative_to(out)), "reason": log.reason,
                "steps": len(log.steps), "diagnostic": log.end.get("diagnostic")}

    with ThreadPoolExecutor(max_workers=args.parallelism) as pool:
        entries = list(pool.map(one, specs))
    entries.sort(key=lambda e: e["id"])
    manifest = {"episodes": entries, "config": config.to_dict()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    aborted = [e for e in entries if e["reason"] == "backend-abort"]
    for e in entries:
        print(f"{e['id']}: {e['reason']} ({e['steps']} steps)")
    for e in aborted:
        _err(f"error: {e['id']} aborted: {e['diagnostic']}")
    return EXIT_ERRORS if aborted else EXIT_OK


# -- eval ----------------------------------------------------------------------------

def cmd_eval(args) -> int:
    specs = {s.id: s for s in _load_specs(Path(args.dataset))}
    logs_dir = Path(args.logs)
    files = sorted(logs_dir.glob("*.ndjson")) if logs_dir.is_dir() else []
    if not files:
        _err(f"error: no episode logs in {logs_dir}")
        return EXIT_ERRORS
    report = SuiteReport([])
    errors = 0
    for f in files:
        try:
            log = EpisodeLog.load(f)
        except (OSError, ValueError) as exc:
            _err(f"error: unreadable log {f}: {exc}")
            errors += 1
            continue
        spec = specs.get(log.header.get("episode_id"))
        if spec is None:
            report.warnings.append(f"orphan log {f.name}: no episode {log.header.get('episode_id')!r}")
            continue
        report.episodes.append(episode_metrics(log, spec, args.threshold,
                                               "3d" if args.osr_3d else "2d"))
    for w in report.warnings:
        _err(f"warning: {w}")
    out = Path(args.out) if args.out else logs_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    table = report.to_table()
    (out / "metrics.txt").write_text(table)
    print(table, end="")
    print(f"{len(report.episodes)} episodes evaluated, {len(report.warnings)} warnings")
    return EXIT_ERRORS if errors or not report.episodes else EXIT_OK


# -- validate / stats ---------------------------------------------------------------

def cmd_validate(args) -> int:
    try:
        result = load_dataset(Path(args.dataset))
    except OSError as exc:
        raise InputError(f"cannot read dataset {args.dataset}: {exc}") from exc
    for w in result.warnings:
        _err(f"warning: {w}")
    for d in result.diagnostics:
        print(f"diagnostic: {d}")
    print(f"{len(result.specs)} valid episodes, {len(result.diagnostics)} diagnostics")
    return EXIT_ERRORS if result.diagnostics else EXIT_OK


def cmd_stats(args) -> int:
    specs = _load_specs(Path(args.dataset))
    if not specs:
        _err("error: no episodes")
        return EXIT_ERRORS
    stats = dataset_stats(specs)
    print(json.dumps(stats, indent=2, sort_keys=True))
    if args.compare_reference:
        problems = compare_to_reference(stats, rounding_slack=not args.strict)
        for p in problems:
            print(f"mismatch: {p}")
        return EXIT_ERRORS if problems else EXIT_OK
    return EXIT_OK


# -- replay --------------------------------------------------------------------------

def _world_for_log(log: EpisodeLog, args) -> VoxelWorld:
    if args.world:
        return VoxelWorld.load(args.world)
    want = log.header.get("world_checksum")
    for path in sorted(Path(args.worlds).glob("*.json")):
        try:
            world = VoxelWorld.load(path)
        except (ValueError, KeyError, json.JSONDecodeError):
            continue
        if world.checksum() == want:
            return world
    raise InputError(f"no world in {args.worlds} matches the log's world checksum")


def cmd_replay(args) -> int:
    try:
        log = EpisodeLog.load(args.log)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read log {args.log}: {exc}") from exc
    world = _world_for_log(log, args)
    report = replay(log, world, args.collision_mode)
    print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK if report.ok else EXIT_ERRORS


# -- plot ----------------------------------------------------------------------------

def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    try:
        log = EpisodeLog.load(args.log)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read log {args.log}: {exc}") from exc
    fig, ax = plt.subplots(figsize=(6, 6))
    path = log.path()
    ax.plot([p.x for p in path], [p.y for p in path], "-o", ms=3, label="executed")
    if args.dataset:
        specs = {s.id: s for s in _load_specs(Path(args.dataset))}
        spec = specs.get(log.header.get("episode_id"))
        if spec is not None:
            ref = spec.reference_path()
            ax.plot([p.x for p in ref], [p.y for p in ref], "--", label="reference")
    ax.plot([path[0].x], [path[0].y], "g^", label="start")
    dest = log.header.get("destination")
    if dest:
        ax.plot([dest[0]], [dest[1]], "r*", ms=12, label="destination")
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title(f"{log.header.get('episode_id')} ({log.reason})")
    ax.legend(loc="best")
    fig.savefig(args.out, dpi=120, bbox_inches="tight")
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cognav", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run episodes and write one log per episode plus a manifest")
    run.add_argument("--dataset", required=True)
    run.add_argument("--worlds", required=True, help="directory of scene_<id>.json world files")
    run.add_argument("--out", required=True)
    run.add_argument("--config", help="episode config JSON (fields of EpisodeConfig)")
    run.add_argument("--script", help="scripted text-role replies (JSON)")
    run.add_argument("--endpoint", help="chat-completion URL for text roles")
    run.add_argument("--model")
    run.add_argument("--vision", choices=("oracle", "text", "http"), default="oracle",
                     help="who answers perception: geometric oracle, the text backend, or an HTTP model")
    run.add_argument("--vision-endpoint")
    run.add_argument("--vision-model")
    run.add_argument("--api-key-env", default=DEFAULT_API_KEY_ENV,
                     help="environment variable holding the API key")
    run.add_argument("--timeout", type=float, default=60.0)
    run.add_argument("--max-retries", type=int, default=2)
    run.add_argument("--episodes", help="comma-separated episode ids")
    run.add_argument("--parallelism", type=int, default=1)
    run.add_argument("--step-cap", type=int)
    run.add_argument("--resolution", type=int, help="square render size in pixels")
    run.add_argument("--task-finish-offer", choices=TASK_FINISH_OFFERS)
    run.add_argument("--collision-mode", choices=[m.value for m in CollisionMode])
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score episode logs against the dataset")
    ev.add_argument("--logs", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", help="where metrics.json/metrics.txt go (default: the logs directory)")
    ev.add_argument("--threshold", type=float, default=SUCCESS_THRESHOLD)
    ev.add_argument("--osr-3d", action="store_true", help="oracle success in 3D instead of 2D")
    ev.set_defaults(func=cmd_eval)

    va = sub.add_parser("validate", help="check a dataset file")
    va.add_argument("--dataset", required=True)
    va.set_defaults(func=cmd_validate)

    st = sub.add_parser("stats", help="dataset statistics")
    st.add_argument("--dataset", required=True)
    st.add_argument("--compare-reference", action="store_true",
                    help="compare against the released benchmark figures")
    st.add_argument("--strict", action="store_true",
                    help="plain relative tolerance, without the rounding allowance of each figure")
    st.set_defaults(func=cmd_stats)

    rp = sub.add_parser("replay", help="re-check poses and collision warnings of a log")
    rp.add_argument("--log", required=True)
    grp = rp.add_mutually_exclusive_group(required=True)
    grp.add_argument("--worlds", help="directory searched for the world matching the log")
    grp.add_argument("--world", help="explicit world file")
    rp.add_argument("--collision-mode", choices=[m.value for m in CollisionMode])
    rp.set_defaults(func=cmd_replay)

    pl = sub.add_parser("plot", help="top-down plot of an episode log")
    pl.add_argument("--log", required=True)
    pl.add_argument("--dataset")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        _err(f"error: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
