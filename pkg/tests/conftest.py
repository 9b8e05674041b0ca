from __future__ import annotations

import pytest

from coldrec.dataset import SyntheticConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_bundle():
    """Desk-scale planted bundle shared by the read-only integration tests."""
    cfg = SyntheticConfig(
        n_genres=4,
        n_warm=240,
        n_cold=80,
        n_tracks=240,
        dim=12,
        truth_listens_min=15,
        truth_extra_mean=6.0,
        history_mean=50.0,
        seed=101,
    )
    return generate_synthetic(cfg)


@pytest.fixture(scope="session")
def small_bundle_cfg():
    return SyntheticConfig(
        n_genres=4,
        n_warm=240,
        n_cold=80,
        n_tracks=240,
        dim=12,
        truth_listens_min=15,
        truth_extra_mean=6.0,
        history_mean=50.0,
        seed=101,
    )
