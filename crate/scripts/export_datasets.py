#!/usr/bin/env python3
"""Export the public example datasets into data/external/.

The colon and rotterdam tables ship with R's `survival` package. The
`rdatasets` wheel on PyPI bundles them, so no R installation is needed:

    python3 scripts/export_datasets.py

The psoriatic-arthritis panel (`psor` from R's `msm` package) is not in
that wheel. Export it from R instead:

    Rscript -e 'write.csv(msm::psor, "data/external/psor.csv", row.names = FALSE)'
"""

import glob
import io
import os
import pickle
import subprocess
import sys
import tempfile
import zipfile
import zlib
import bz2
import gzip
import lzma

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUT = os.environ.get("MULTISTATE_DATA_DIR", os.path.join(ROOT, "data", "external"))

TABLES = {"colon": "rdatasets/_data/survival/colon.pkl.compress",
          "rotterdam": "rdatasets/_data/survival/rotterdam.pkl.compress"}


def decompress(blob):
    for dec in (zlib.decompress, bz2.decompress, lzma.decompress, gzip.decompress):
        try:
            return dec(blob)
        except Exception:
            continue
    raise ValueError("unknown compression")


def main():
    os.makedirs(OUT, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call([sys.executable, "-m", "pip", "download", "rdatasets==0.2.10",
                               "--no-deps", "-q", "-d", tmp])
        wheel = zipfile.ZipFile(glob.glob(os.path.join(tmp, "*.whl"))[0])
        for name, member in TABLES.items():
            frame = pickle.loads(decompress(wheel.read(member)))
            if "rownames" in frame.columns:
                frame = frame.drop(columns=["rownames"])
            path = os.path.join(OUT, name + ".csv")
            frame.to_csv(path, index=False)
            print(f"wrote {path} ({len(frame)} rows)")
    if not os.path.exists(os.path.join(OUT, "psor.csv")):
        print("psor.csv not exported: run the msm one-liner in this script's docstring",
              file=sys.stderr)


if __name__ == "__main__":
    main()
