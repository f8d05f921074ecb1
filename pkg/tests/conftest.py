import numpy as np
import pytest

from dualmem.records import BoundingBox, RegionRecord
from dualmem.stats import BackgroundStats


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / (1.0 + np.linalg.norm(b)))


def make_region(region_id, image_id, feature, score=0.5, box=None, gt_label=None):
    return RegionRecord(
        region_id=region_id,
        image_id=image_id,
        box=box or BoundingBox(0.0, 0.0, 1.0, 1.0),
        score=score,
        feature=np.asarray(feature, dtype=np.float64),
        gt_label=gt_label,
    )


def identity_bg(d, count=1000, mean=None):
    """Background with identity covariance: classifier weights equal the mean gap."""
    mu = np.zeros(d) if mean is None else np.asarray(mean, dtype=np.float64)
    return BackgroundStats.from_moments(mu, np.eye(d), count)


@pytest.fixture
def bg2():
    return identity_bg(2)
