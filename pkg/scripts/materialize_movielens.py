#!/usr/bin/env python3
"""Write MovieLens-100K in its native ``u.data``/``u.item`` layout.

The dataset is taken from the copy bundled in the ``recbole`` wheel
(``recbole/dataset_example/ml-100k``), fetched with ``pip download`` unless
``--wheel`` points at a local file.

    python scripts/materialize_movielens.py data/ml-100k
"""
import argparse
import glob
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

GENRES = ("unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
          "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
          "Romance", "Sci-Fi", "Thriller", "War", "Western")
PREFIX = "recbole/dataset_example/ml-100k/"


def fetch_wheel(workdir):
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", workdir,
                    "recbole==1.2.1"], check=True)
    return glob.glob(f"{workdir}/recbole-*.whl")[0]


def convert(wheel, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        inter = z.read(PREFIX + "ml-100k.inter").decode("utf-8").splitlines()
        items = z.read(PREFIX + "ml-100k.item").decode("utf-8").splitlines()

    rows, users, movies = [], set(), set()
    for line in inter[1:]:
        user, item, rating, ts = line.split("\t")
        users.add(user)
        movies.add(item)
        rows.append(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}")
    # the published ML-100K invariants
    if (len(rows), len(users), len(movies)) != (100000, 943, 1682):
        sys.exit(f"unexpected ML-100K shape: {len(rows)} ratings, {len(users)} users, {len(movies)} movies")
    (out / "u.data").write_text("\n".join(rows) + "\n", encoding="utf-8")

    lines = []
    for line in items[1:]:
        item_id, title, year, classes = (line.split("\t") + ["", "", ""])[:4]
        present = set(classes.split())
        flags = ["1" if g in present else "0" for g in GENRES]
        full_title = f"{title} ({year})" if year else title
        lines.append("|".join([item_id, full_title, "", "", "", *flags]))
    (out / "u.item").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return len(rows), len(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", help="output directory")
    ap.add_argument("--wheel", help="local recbole wheel")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        n_ratings, n_items = convert(wheel, args.out)
    print(f"wrote {n_ratings} ratings and {n_items} items to {args.out}")


if __name__ == "__main__":
    main()
