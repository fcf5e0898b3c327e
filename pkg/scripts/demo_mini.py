"""Run the bundled mini dataset end to end with scripted replies.

Writes logs, a manifest, metrics and one plot per episode under the output
directory, then replays every log against its world.

    python3 scripts/demo_mini.py [out_dir]
"""

import sys
from pathlib import Path

from cognav.cli import main
from cognav.dataset import mini_data_dir


def demo(out: Path) -> int:
    mini = mini_data_dir()
    dataset, worlds = str(mini / "dataset.json"), str(mini / "worlds")
    steps = [
        ["validate", "--dataset", dataset],
        ["run", "--dataset", dataset, "--worlds", worlds, "--out", str(out), "--config", str(mini / "config.json"),
         "--script", str(mini / "script.json"), "--parallelism", "4"],
        ["eval", "--logs", str(out / "logs"), "--dataset", dataset, "--out", str(out)],
    ]
    for argv in steps:
        print(f"$ cognav {' '.join(argv[:1])}")
        code = main(argv)
        if code:
            return code
    for log in sorted((out / "logs").glob("*.ndjson")):
        print(f"$ cognav replay {log.name}")
        if main(["replay", "--log", str(log), "--worlds", worlds]):
            return 1
        main(["plot", "--log", str(log), "--dataset", dataset, "--out", str(out / f"{log.stem}.png")])
    return 0


if __name__ == "__main__":
    sys.exit(demo(Path(sys.argv[1] if len(sys.argv) > 1 else "mini_run")))
