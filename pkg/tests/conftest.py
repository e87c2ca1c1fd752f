from __future__ import annotations

import numpy as np
import pytest

from parttransfer.features import FULL, OBJECT, CompositeProvider, PrecomputedProvider
from parttransfer.geometry import BoundingBox, ImageSize
from parttransfer.index import AnnotatedImage, build_index


def make_world(specs, stages=("full",)):
    """Records plus a precomputed provider from ``(id, size, object_box, parts, feature)`` tuples.

    The same ``feature`` is stored under every stage listed in ``stages``.
    """
    records, sizes, vectors = [], {}, {}
    for rid, size, obj, parts, feat in specs:
        size = size if isinstance(size, ImageSize) else ImageSize(*size)
        rec = AnnotatedImage(
            id=rid,
            size=size,
            class_label=None,
            object_box=None if obj is None else BoundingBox(*obj),
            part_boxes={k: (None if v is None else BoundingBox(*v)) for k, v in (parts or {}).items()},
        )
        records.append(rec)
        sizes[rid] = size
        for st in stages:
            vectors[(rid, FULL if st == "full" else OBJECT)] = np.asarray(feat, dtype=np.float64)
    provider = CompositeProvider(precomputed=PrecomputedProvider(sizes, vectors), sizes=sizes)
    return records, provider


@pytest.fixture
def tiny_index():
    specs = [
        ("a", (100, 100), (10, 10, 20, 20), {"head": (12, 12, 5, 5)}, [1.0, 0.0]),
        ("b", (200, 100), (40, 20, 80, 40), {"head": None}, [0.9, 0.1]),
        ("c", (100, 100), (50, 50, 40, 40), {}, [0.0, 1.0]),
    ]
    records, provider = make_world(specs)
    return build_index(records, provider), provider


# verdict lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    def report(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
