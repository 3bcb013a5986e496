"""Shared fixtures: the six synthetic segmentation scenes and small helpers.

Each scene is a dict with keys
    name      -- short id
    image     -- float64 (h, w, 3) in [0, 1]
    truth     -- int (h, w) ground-truth phase indices {0, 1}
    features  -- feature kind to use
    bins      -- codebook size
    rho       -- TV weight that separates the scene cleanly
    foreign_bins -- present only on the foreign-codebook scene

Exact priors (per-phase histograms of the true regions) are derived from
truth with `exact_priors`, so the data terms vanish at the ground truth by
construction.
"""

from __future__ import annotations

import numpy as np
import pytest

from otseg.features import build_assignment, extract_features, kmeans
from otseg.models import default_bins


def impulse_noise(img: np.ndarray, frac: float, rng) -> np.ndarray:
    out = img.copy()
    hit = rng.random(img.shape[:2]) < frac
    out[hit] = rng.random((int(hit.sum()), img.shape[2]))
    return out


def scene_split() -> dict:
    img = np.zeros((16, 16, 3))
    img[:, :8] = [0.15, 0.3, 0.8]
    img[:, 8:] = [0.85, 0.7, 0.2]
    truth = np.zeros((16, 16), dtype=int)
    truth[:, 8:] = 1
    return dict(name="split", image=img, truth=truth, features="rgb",
                bins=2, rho=0.05)


def scene_square() -> dict:
    img = np.zeros((32, 32, 3))
    img[:] = [0.2, 0.35, 0.75]
    img[8:24, 8:24] = [0.9, 0.75, 0.15]
    truth = np.zeros((32, 32), dtype=int)
    truth[8:24, 8:24] = 1
    return dict(name="square", image=img, truth=truth, features="rgb",
                bins=2, rho=0.05)


def scene_noisy() -> dict:
    rng = np.random.default_rng(11)
    img = np.zeros((48, 48, 3))
    img[:] = [0.2, 0.35, 0.75]
    img[12:36, 12:36] = [0.9, 0.75, 0.15]
    truth = np.zeros((48, 48), dtype=int)
    truth[12:36, 12:36] = 1
    img = impulse_noise(img, 0.02, rng)
    return dict(name="noisy", image=img, truth=truth, features="rgb",
                bins=32, rho=0.15)


def scene_texture() -> dict:
    # same mean color, different stripe frequency; gradients tell them apart
    img = np.zeros((32, 32, 3))
    cols = np.arange(32)
    stripes = 0.5 + 0.35 * np.where(cols % 2 == 0, 1.0, -1.0)
    img[:, :, 0] = stripes[None, :]
    img[:, :, 1] = 0.5
    img[:, :, 2] = 0.5
    img[10:26, 10:26, 0] = 0.5   # flat patch, same mean as the stripes
    truth = np.zeros((32, 32), dtype=int)
    truth[10:26, 10:26] = 1
    return dict(name="texture", image=img, truth=truth, features="gradnorm",
                bins=4, rho=0.05)


def scene_foreign() -> dict:
    base = scene_square()
    base.update(name="foreign", foreign_bins=3)
    return base


def scene_disk() -> dict:
    img = np.zeros((48, 48, 3))
    img[:] = [0.25, 0.3, 0.7]
    yy, xx = np.mgrid[:48, :48]
    disk = (yy - 24.0) ** 2 + (xx - 24.0) ** 2 <= 14.0 ** 2
    img[disk] = [0.85, 0.8, 0.2]
    truth = disk.astype(int)
    return dict(name="disk", image=img, truth=truth, features="rgb",
                bins=2, rho=0.05)


SCENE_BUILDERS = (scene_split, scene_square, scene_noisy, scene_texture,
                  scene_foreign, scene_disk)


def build_scene(builder) -> dict:
    scene = builder()
    feats = extract_features(scene["image"], scene["features"])
    bins = min(scene["bins"], default_bins(feats, feats.dim))
    codebook = kmeans(feats, bins, seed=0)
    assignment = build_assignment(feats, codebook)
    scene.update(feats=feats, codebook=codebook, assignment=assignment)
    return scene


def exact_priors(scene: dict) -> tuple[np.ndarray, np.ndarray]:
    """(foreground, background) histograms of the true regions, normalized."""
    op = scene["assignment"]
    truth = scene["truth"].ravel().astype(float)
    fg = op.histogram(truth)
    bg = op.histogram(1.0 - truth)
    return fg / fg.sum(), bg / bg.sum()


@pytest.fixture(scope="session")
def scenes() -> list[dict]:
    return [build_scene(b) for b in SCENE_BUILDERS]


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0
