"""Write MovieLens-100K in the MovieLens-1M ``::`` layout.

The copy bundled with the ``pytorch-widedeep`` wheel is used because it is
reachable through a plain package index. Output: ``<out>/ratings.dat`` and
``<out>/movies.dat``.

    python scripts/fetch_ml100k.py data/ml-100k
"""
from __future__ import annotations

import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import pandas as pd

WHEEL = "pytorch-widedeep==1.7.0"
PREFIX = "pytorch_widedeep/datasets/data/"


def main(out: str = "data/ml-100k") -> None:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, WHEEL],
            check=True,
        )
        wheel = next(Path(tmp).glob("*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            data = pd.read_parquet(io.BytesIO(zf.read(PREFIX + "MovieLens100k_data.parquet.brotli")))
            items = pd.read_parquet(io.BytesIO(zf.read(PREFIX + "MovieLens100k_items.parquet.brotli")))

    genres = list(items.columns[5:])
    with (out_dir / "movies.dat").open("w", encoding="latin-1", errors="replace") as fh:
        for row in items.itertuples(index=False):
            flags = row[5:]
            labels = [g for g, f in zip(genres, flags) if f]
            title = str(row[1]).replace("::", ":")
            fh.write(f"{row[0]}::{title}::{'|'.join(labels)}\n")
    with (out_dir / "ratings.dat").open("w", encoding="latin-1") as fh:
        for u, i, r, t in data[["user_id", "movie_id", "rating", "timestamp"]].itertuples(index=False):
            fh.write(f"{u}::{i}::{r}::{t}\n")
    print(f"wrote {len(data)} ratings and {len(items)} movies to {out_dir}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
