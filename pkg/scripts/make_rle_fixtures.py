"""Generate cross-language RLE fixtures for the frontend test suite.

Writes frontend/tests/fixtures/rle_cases.json: a list of masks with their
raw grids (flattened, 1 = visible) and the exact RLE payload the service
produces, so the TypeScript codec is pinned to the server's encoding
byte-for-byte rather than to a reimplementation of it.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from plurifill.masks import (
    BUCKETS,
    Mask,
    center_mask,
    free_form_mask,
    full_mask,
    random_rectangle_mask,
    to_rle,
)


def case(name: str, mask: Mask) -> dict:
    return {
        "name": name,
        "h": mask.height,
        "w": mask.width,
        "grid": [int(v) for v in mask.grid.reshape(-1)],
        "payload": to_rle(mask),
    }


def build_cases() -> list:
    cases = [
        case("all_visible_4x5", full_mask(4, 5)),
        case("all_missing_3x3", Mask(np.zeros((3, 3), dtype=np.uint8))),
        case("starts_missing_2x2", Mask(np.array([[0, 1], [1, 1]], dtype=np.uint8))),
        case("starts_visible_2x2", Mask(np.array([[1, 0], [0, 0]], dtype=np.uint8))),
        case("single_row_alternating", Mask(np.array([[0, 1, 0, 1, 0, 1, 0]], dtype=np.uint8))),
        case("single_column", Mask(np.array([[1], [0], [1], [0], [1], [1], [0]], dtype=np.uint8))),
        case("center_16", center_mask(16, 16)),
        case("center_tall_16x8", center_mask(16, 8)),
    ]
    for seed in range(4):
        cases.append(case(f"rect_seed{seed}", random_rectangle_mask(24, 32, seed)))
    for i, bucket in enumerate(BUCKETS[:3]):
        cases.append(case(f"free_form_{bucket.label}", free_form_mask(32, 32, 100 + i, bucket)))
    rng = np.random.default_rng(7)
    for i in range(3):
        noise = (rng.random((12, 12)) < 0.5).astype(np.uint8)
        cases.append(case(f"noise_{i}", Mask(noise)))
    return cases


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    default_out = Path(__file__).resolve().parents[1] / "frontend" / "tests" / "fixtures"
    parser.add_argument("--out", default=str(default_out / "rle_cases.json"))
    args = parser.parse_args()

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cases = build_cases()
    out.write_text(json.dumps(cases, indent=1))
    print(f"wrote {len(cases)} cases to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
