"""Regenerate the committed golden run and report from the desk fixture (single-threaded)."""

import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from pipeline import run_desk_pipeline  # noqa: E402

GOLDEN = ROOT / "tests" / "golden"


def main() -> None:
    GOLDEN.mkdir(exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        paths = run_desk_pipeline(Path(tmp))
        shutil.copyfile(paths["run.tsv"], GOLDEN / "desk_run.tsv")
        shutil.copyfile(paths["report.json"], GOLDEN / "desk_report.json")
    print(f"wrote {GOLDEN}/desk_run.tsv and desk_report.json")


if __name__ == "__main__":
    main()
