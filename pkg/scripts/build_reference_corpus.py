"""Rebuild the bundled reference corpus from the public-domain Gutenberg
Shakespeare texts shipped in the ``shakespeare`` sdist on PyPI.

    pip download --no-deps --no-binary :all: shakespeare==0.6
    tar xzf shakespeare-0.6.tar.gz
    python scripts/build_reference_corpus.py shakespeare-0.6/shksprdata/texts

One work per output line, lowercased, punctuation split into its own tokens.
"""
import re
import sys
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "wmlab" / "data" / "reference_corpus.txt"

SPEAKER = re.compile(r"^[A-Za-z][A-Za-z' ]{0,20}\.$")
KEEP = re.compile(r"[a-z']+|[.,;:!?]")


def normalize(raw: str) -> str:
    words = []
    for line in raw.splitlines():
        line = line.strip()
        if not line or SPEAKER.match(line) or line.startswith("["):
            continue
        for tok in KEEP.findall(line.lower()):
            tok = tok.strip("'")
            if tok:
                words.append(tok)
    return " ".join(words)


def main(src_dir: str) -> None:
    files = sorted(p for p in Path(src_dir).glob("*_gut.txt"))
    lines = [normalize(p.read_text(encoding="utf-8", errors="replace")) for p in files]
    OUT.write_text("\n".join(line for line in lines if line) + "\n", encoding="utf-8")
    print(f"wrote {OUT} ({OUT.stat().st_size} bytes, {len(lines)} works)")


if __name__ == "__main__":
    main(sys.argv[1])
