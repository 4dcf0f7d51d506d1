import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mercnn.geometry import Box
from mercnn.routing import EXPERTS, MIRROR, route_box, test_category, test_index, train_categories, train_mask

SWEEP = np.concatenate([np.round(np.arange(-4000, 4001) / 1000, 3), [-1.0, -0.5, 0.0, 0.5, 1.0]])


@pytest.mark.parametrize(
    "theta,cats", [(1.5, {"H"}), (0.0, {"H", "S", "V"}), (-0.4, {"S", "V"}), (1.0, {"H", "S"}), (-1.0001, {"V"})]
)
def test_train_rules(theta, cats):
    assert train_categories(theta) == frozenset(cats)


@pytest.mark.parametrize("theta,expert", [(0.6, "H"), (0.5, "S"), (-0.5, "S"), (-0.51, "V"), (0.0, "S"), (3.0, "H")])
def test_test_rules(theta, expert):
    assert test_category(theta) == expert


def test_sweep_partition_cover_consistency():
    for t in SWEEP:
        t = float(t)
        train = train_categories(t)
        assert train and train <= set(EXPERTS)
        if -1 <= t <= 1:
            assert len(train) >= 2
        e = test_category(t)
        assert e in EXPERTS
        assert e in train
        assert test_category(-t) == MIRROR[e]


def test_two_to_one_routes_to_h():
    # closer to 2:1 than to 1:1 in log space
    assert route_box(Box(0, 0, 20, 10)) == "H"
    assert route_box(Box(0, 0, 15, 10)) == "H"
    assert route_box(Box(0, 0, 14, 10)) == "S"
    assert route_box(Box(0, 0, 10, 20)) == "V"


@given(st.floats(0.5, 200), st.floats(0.5, 200))
def test_array_forms_agree(w, h):
    boxes = np.array([[0.0, 0.0, w, h]])
    theta = float(np.log2(w / h))
    assert EXPERTS[test_index(boxes)[0]] == test_category(theta)
    mask = train_mask(boxes)[0]
    assert {e for e, ok in zip(EXPERTS, mask) if ok} == train_categories(theta)
