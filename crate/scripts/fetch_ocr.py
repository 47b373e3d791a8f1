#!/usr/bin/env python3
"""Rebuild the OCR letter file (tab-separated, one character per line).

The handwritten-letters corpus ships inside the pystruct source
distribution on PyPI as a pickle. This script downloads that sdist,
extracts the pickle and writes it back out in the original letter-file
layout:

    id  letter  next_id  word_id  position  fold  p_0 ... p_127

next_id is -1 on the last character of a word. Ids, word ids and
positions are 1-based.
"""

import argparse
import io
import pickle
import sys
import tarfile
import urllib.request

SDIST = (
    "https://pypi.org/packages/65/42/"
    "763411d5025534699b84f596df89f79b3f044b362bf299e3f649900710f2/"
    "pystruct-0.3.2.tar.gz"
)
MEMBER = "pystruct-0.3.2/pystruct/datasets/letters.pickle"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", help="output path, e.g. data/letter.data")
    ap.add_argument("--url", default=SDIST)
    args = ap.parse_args()

    raw = urllib.request.urlopen(args.url).read()
    with tarfile.open(fileobj=io.BytesIO(raw), mode="r:gz") as tar:
        blob = tar.extractfile(MEMBER).read()
    d = pickle.loads(blob, encoding="latin1")

    next_id = 1
    frames = 0
    with open(args.out, "w") as f:
        for w, (labels, data, fold) in enumerate(zip(d["labels"], d["data"], d["folds"])):
            n = len(labels)
            for pos in range(n):
                cid = next_id + pos
                nxt = cid + 1 if pos + 1 < n else -1
                letter = chr(ord("a") + int(labels[pos]))
                bits = "\t".join(str(int(b)) for b in data[pos])
                f.write(f"{cid}\t{letter}\t{nxt}\t{w + 1}\t{pos + 1}\t{int(fold)}\t{bits}\n")
            next_id += n
            frames += n
    print(f"wrote {len(d['labels'])} words, {frames} characters to {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
