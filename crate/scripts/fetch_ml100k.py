"""Fetch MovieLens-100K and write it in the interaction/metadata TSV layout.

The GroupLens host is not always reachable, so the copy bundled in the
RecBole wheel (recbole/dataset_example/ml-100k) on PyPI is used instead.
"""
import glob
import os
import subprocess
import sys
import tempfile
import zipfile

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "data", "ml-100k")


def main():
    os.makedirs(OUT, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, "recbole==1.2.1"]
        )
        wheel = zipfile.ZipFile(glob.glob(os.path.join(tmp, "*.whl"))[0])
        prefix = "recbole/dataset_example/ml-100k/ml-100k"
        inter = wheel.read(prefix + ".inter").decode("utf-8").splitlines()
        items = wheel.read(prefix + ".item").decode("latin-1").splitlines()

    with open(os.path.join(OUT, "interactions.tsv"), "w") as f:
        f.write("# user_id\titem_id\trating\ttimestamp\n")
        for line in inter[1:]:
            user, item, rating, ts = line.split("\t")
            f.write(f"{user}\t{item}\t{float(rating):.1f}\t{int(float(ts))}\n")

    with open(os.path.join(OUT, "items.tsv"), "w") as f:
        f.write("# item_id\ttitle\tyear\tgenres\n")
        for line in items[1:]:
            item, title, year, genres = (line.split("\t") + ["", "", ""])[:4]
            f.write(f"{item}\t{title}\t{year}\t{'|'.join(genres.split())}\n")


if __name__ == "__main__":
    main()
