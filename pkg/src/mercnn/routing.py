"""Shape-category routing of RoIs to the H / S / V experts.

Training assignment overlaps (a box may feed several experts); test
assignment partitions the log-aspect-ratio line so every box goes to
exactly one expert.
"""

from __future__ import annotations

import numpy as np

from .geometry import Box, aspect_log_ratio, aspect_log_ratio_array

EXPERTS = ("H", "S", "V")
MIRROR = {"H": "V", "S": "S", "V": "H"}

TEST_BOUNDARY = 0.5
SQUARE_BAND = 1.0


def train_categories(theta: float) -> frozenset[str]:
    cats = set()
    if theta >= 0:
        cats.add("H")
    if -SQUARE_BAND <= theta <= SQUARE_BAND:
        cats.add("S")
    if theta <= 0:
        cats.add("V")
    return frozenset(cats)


def test_category(theta: float) -> str:
    # ties at +-0.5 fall through to S
    if theta > TEST_BOUNDARY:
        return "H"
    if theta < -TEST_BOUNDARY:
        return "V"
    return "S"




def route_box(box: Box) -> str:
    return test_category(aspect_log_ratio(box))


def train_mask(boxes: np.ndarray) -> np.ndarray:
    """Boolean ``(N, 3)`` eligibility table, columns in :data:`EXPERTS` order."""
    theta = aspect_log_ratio_array(boxes)
    return np.stack(
        [theta >= 0, (theta >= -SQUARE_BAND) & (theta <= SQUARE_BAND), theta <= 0], axis=1
    )


def test_index(boxes: np.ndarray) -> np.ndarray:
    """Index into :data:`EXPERTS` of the test-time expert for each box."""
    theta = aspect_log_ratio_array(boxes)
    out = np.ones(len(theta), dtype=np.int64)
    out[theta > TEST_BOUNDARY] = 0
    out[theta < -TEST_BOUNDARY] = 2
    return out


# keep pytest from collecting these as tests when imported into test modules
test_category.__test__ = False
test_index.__test__ = False
