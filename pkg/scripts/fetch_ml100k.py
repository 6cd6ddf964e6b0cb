#!/usr/bin/env python3
"""Fetch the MovieLens 100K ratings into data/ml-100k/u.data.

GroupLens is not reachable from every build box, so the file is pulled out of
the RecBole wheel (which vendors the full interaction table) via ``pip
download``. The output matches the layout of the original ``u.data``:
``user<TAB>item<TAB>rating<TAB>timestamp``.
"""

import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"
DEFAULT_OUT = Path(__file__).resolve().parent.parent / "data" / "ml-100k" / "u.data"


def fetch(out: Path = DEFAULT_OUT, wheel: Path | None = None) -> Path:
    if out.exists():
        return out
    with tempfile.TemporaryDirectory() as tmp:
        if wheel is None:
            subprocess.run(
                [sys.executable, "-m", "pip", "download", "--no-deps", "--quiet",
                 "recbole==1.2.1", "-d", tmp],
                check=True,
            )
            wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            raw = zf.read(MEMBER).decode("utf-8")
    lines = raw.splitlines()
    # first line is RecBole's typed column header
    body = "\n".join(lines[1:]) + "\n"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(body, encoding="utf-8")
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
    parser.add_argument("--wheel", type=Path, default=None,
                        help="use an already downloaded recbole wheel")
    args = parser.parse_args()
    print(fetch(args.out, args.wheel))


if __name__ == "__main__":
    main()
