"""Regenerate the count-faithful taxonomy fixtures in src/hse/fixtures/.

The fixtures reproduce the published level sizes of each dataset's hierarchy
with placeholder category names; children are spread evenly over parents.
"""
from pathlib import Path

FIXTURES = {
    "cub": (("order", "family", "genus", "species"), (13, 37, 122, 200)),
    "butterfly200": (("family", "subfamily", "genus", "species"), (5, 23, 116, 200)),
    "vegfru": (("supercategory", "subcategory"), (25, 292)),
}


def rows(level_names, sizes):
    paths = [[i] for i in range(sizes[-1])]
    for up, down in zip(reversed(sizes[:-1]), reversed(sizes)):
        for p in paths:
            p.insert(0, p[0] * up // down)
    for p in paths:
        yield "\t".join(f"{n}_{i + 1:03d}" for n, i in zip(level_names, p))


def main():
    out = Path(__file__).resolve().parents[1] / "src" / "hse" / "fixtures"
    for key, (names, sizes) in FIXTURES.items():
        header = f"# {key}: level sizes {' '.join(map(str, sizes))} (placeholder names)\n"
        (out / f"{key}.tsv").write_text(header + "\n".join(rows(names, sizes)) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
