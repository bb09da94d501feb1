import pytest

import oracles


@pytest.mark.parametrize(
    "name, compute",
    [
        ("scale_at_one", oracles.scale_at_one),
        ("exp_moment", oracles.exp_moment),
        ("gaussian_weighted_norm", oracles.gaussian_weighted_norm),
        ("binned_gaussian_tv", oracles.binned_gaussian_tv),
    ],
)
def test_frozen_value_matches_derivation(name, compute):
    assert float(compute()) == pytest.approx(oracles.FROZEN[name], rel=1e-14)


def test_frozen_piece_counts():
    assert oracles.piece_count_hand(0, 0.4, 0.5) == oracles.FROZEN["piece_count_n0"]
    assert oracles.piece_count_hand(3, 0.4, 0.5) == oracles.FROZEN["piece_count_n3"]
