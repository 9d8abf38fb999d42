import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from feedlab.data import ImpressionRecord, Post, FEATURE_NAMES


def make_impression(pid="p1", post="post_01", position=1, dwell=2.0, actions=0, adjusted=None):
    return ImpressionRecord(
        participant_id=pid,
        post_id=post,
        position=position,
        dwell_raw=dwell,
        shared=actions >= 1,
        liked=actions >= 2,
        dwell_adjusted=adjusted,
    )


@pytest.fixture
def tiny_posts():
    return [
        Post(f"post_{i:02d}", f"headline {i}", "src", "true_news")
        for i in range(1, 6)
    ]


@pytest.fixture
def pipeline_fixture_10():
    """One participant, feed of 10; exercises every exclusion rule.

    Hand enumeration: positions 1-3 and 8-10 are edge-trimmed (6), position
    5 exceeds the 30s cap (1), position 6 falls below the 0.15s floor after
    (identity) adjustment (1); positions 4 and 7 survive.
    """
    rows = [
        make_impression("p1", f"post_{p:02d}", p, 1.0, 0) for p in (1, 2, 3, 8, 9, 10)
    ]
    rows.append(make_impression("p1", "post_04", 4, 2.0, 0))
    rows.append(make_impression("p1", "post_05", 5, 30.5, 0))
    rows.append(make_impression("p1", "post_06", 6, 0.10, 0))
    rows.append(make_impression("p1", "post_07", 7, 5.0, 2))
    rows.sort(key=lambda i: i.position)
    return rows


def simulate_hierarchical_dwell(
    rng,
    n_participants=200,
    n_per=114,
    mu_alpha=3.0,
    tau_alpha=0.5,
    mu_beta=1.2,
    tau_beta=0.3,
    sigma=1.0,
    p_one=0.08,
    p_two=0.04,
):
    """Draw dwell = alpha_i + beta_i*actions + noise for known parameters."""
    impressions = []
    true_slopes = {}
    for i in range(n_participants):
        pid = f"p{i:04d}"
        alpha = mu_alpha + tau_alpha * rng.standard_normal()
        beta = mu_beta + tau_beta * rng.standard_normal()
        true_slopes[pid] = beta
        u = rng.random(n_per)
        actions = np.where(u < p_two, 2, np.where(u < p_one + p_two, 1, 0))
        y = alpha + beta * actions + sigma * rng.standard_normal(n_per)
        for j in range(n_per):
            impressions.append(
                ImpressionRecord(
                    participant_id=pid,
                    post_id=f"post_{j + 1:03d}",
                    position=j + 1,
                    dwell_raw=float(y[j]),
                    shared=bool(actions[j] >= 1),
                    liked=bool(actions[j] >= 2),
                )
            )
    return impressions, true_slopes


def make_feature_post(post_id, values, category="true_news"):
    return Post(
        post_id,
        f"headline {post_id}",
        "src",
        category,
        features={f: float(v) for f, v in zip(FEATURE_NAMES, values)},
    )
