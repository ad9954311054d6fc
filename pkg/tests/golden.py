"""Inputs for the golden PNG; regenerate with ``python tests/golden.py``."""
from pathlib import Path

import numpy as np

from ablate_eval.differencing import RenderConfig, encode_png, render_slice

GOLDEN = Path(__file__).parent / "data" / "golden_slice.png"


def golden_inputs():
    # integer-valued inputs keep the colour arithmetic exactly representable
    r, c = np.mgrid[0:24, 0:32]
    diff = (c - 16) * 40.0 + (r - 12) * 5.0
    fixed = -1000.0 + r * 55.0 + c * 10.0
    tumor = (r - 12) ** 2 + (c - 16) ** 2 <= 16
    treat = (r - 12) ** 2 + (c - 18) ** 2 <= 49
    return diff, fixed, tumor, treat


def golden_png() -> bytes:
    diff, fixed, tumor, treat = golden_inputs()
    return encode_png(render_slice(diff, fixed, tumor, treat, RenderConfig()))


if __name__ == "__main__":
    GOLDEN.parent.mkdir(exist_ok=True)
    GOLDEN.write_bytes(golden_png())
