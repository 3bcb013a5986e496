"""Per-pixel features, K-means codebooks, and the hard-assignment operator.

The histogram operator H never exists as a matrix: an AssignmentOperator
stores the bin index of every pixel, applies H as a weighted bincount and
H^T as a gather.  Both are exact adjoints of each other by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .solver import grad as _grad_op

__all__ = [
    "FeatureImage",
    "Codebook",
    "AssignmentOperator",
    "ScribbleSet",
    "extract_features",
    "kmeans",
    "build_assignment",
    "histogram_of",
    "apply_Ht",
    "prior_from_scribbles",
]

KMEANS_SUBSAMPLE = 100_000
_ASSIGN_MAGIC = b"OTSGASGN"
_ASSIGN_VERSION = 1


@dataclass(frozen=True)
class FeatureImage:
    """Per-pixel feature vectors on an image grid."""

    values: np.ndarray  # (height, width, dim)
    kind: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[0] * v.shape[1] == 0:
            raise ValueError(f"feature image must be (h, w, dim) with h*w > 0, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.dim)


@dataclass(frozen=True)
class Codebook:
    """M feature-space centroids defining the histogram bins."""

    centroids: np.ndarray  # (M, dim)
    feature_kind: str = "rgb"

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centroids, dtype=float))
        if len(c) < 1:
            raise ValueError("codebook needs at least one centroid")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids must be finite")
        uniq = np.unique(c, axis=0)
        if len(uniq) != len(c):
            raise ValueError("centroids must be pairwise distinct")
        object.__setattr__(self, "centroids", c)

    @property
    def n_bins(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def to_json(self) -> str:
        return json.dumps({"dim": self.dim, "centroids": self.centroids.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Codebook":
        doc = json.loads(text)
        cents = np.asarray(doc["centroids"], dtype=float)
        if cents.ndim != 2 or cents.shape[1] != int(doc["dim"]):
            raise ValueError(
                f"codebook dim field {doc.get('dim')} does not match centroids "
                f"of shape {cents.shape}")
        return cls(centroids=cents)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Codebook":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class AssignmentOperator:
    """Hard pixel-to-bin assignment realizing the histogram operator H."""

    bins: np.ndarray  # (N,) int32 in [0, n_bins)
    n_bins: int
    shape: tuple[int, int] | None = None  # (height, width) when known

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.int32).ravel()
        if len(b) == 0:
            raise ValueError("assignment must cover at least one pixel")
        if b.min() < 0 or b.max() >= self.n_bins:
            raise ValueError(
                f"bin indices must lie in [0, {self.n_bins}), "
                f"got range [{b.min()}, {b.max()}]")
        object.__setattr__(self, "bins", b)

    @property
    def n_pixels(self) -> int:
        return len(self.bins)

    def histogram(self, u) -> np.ndarray:
        """(H u)_i = sum of u over pixels assigned to bin i."""
        u = np.asarray(u, dtype=float).ravel()
        if len(u) != self.n_pixels:
            raise ValueError(f"weight map has {len(u)} entries, expected {self.n_pixels}")
        return np.bincount(self.bins, weights=u, minlength=self.n_bins)

    def adjoint(self, p) -> np.ndarray:
        """(H^T p)_x = p[bin(x)]."""
        p = np.asarray(p, dtype=float).ravel()
        if len(p) != self.n_bins:
            raise ValueError(f"bin vector has {len(p)} entries, expected {self.n_bins}")
        return p[self.bins]

    def bin_counts(self) -> np.ndarray:
        return np.bincount(self.bins, minlength=self.n_bins).astype(float)

    def save(self, path) -> None:
        header = _ASSIGN_MAGIC + struct.pack("<II", _ASSIGN_VERSION, self.n_pixels)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(struct.pack("<I", self.n_bins))
            if self.shape is not None:
                fh.write(struct.pack("<II", self.shape[0], self.shape[1]))
            else:
                fh.write(struct.pack("<II", 0, 0))
            fh.write(self.bins.astype("<i4").tobytes())

    @classmethod
    def load(cls, path) -> "AssignmentOperator":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != _ASSIGN_MAGIC:
            raise ValueError("not an assignment file (bad magic)")
        version, count = struct.unpack("<II", blob[8:16])
        if version != _ASSIGN_VERSION:
            raise ValueError(f"unsupported assignment version {version}")
        n_bins, = struct.unpack("<I", blob[16:20])
        h, w = struct.unpack("<II", blob[20:28])
        bins = np.frombuffer(blob[28:28 + 4 * count], dtype="<i4")
        if len(bins) != count:
            raise ValueError("truncated assignment file")
        shape = (h, w) if h > 0 and w > 0 else None
        return cls(bins=bins.astype(np.int32), n_bins=int(n_bins), shape=shape)


@dataclass(frozen=True)
class ScribbleSet:
    """Per-label binary masks over the pixel grid.

    Built from an indexed mask where 0 = unlabeled and k >= 1 = label k.
    Overlapping labels are representable by constructing masks directly.
    """

    masks: dict[int, np.ndarray]  # label -> bool array (h, w)

    @classmethod
    def from_indexed(cls, mask) -> "ScribbleSet":
        mask = np.asarray(mask)
        if mask.ndim != 2:
            raise ValueError(f"scribble mask must be 2-d, got shape {mask.shape}")
        labels = sorted(int(v) for v in np.unique(mask) if v != 0)
        return cls(masks={k: mask == k for k in labels})

    @property
    def labels(self) -> list[int]:
        return sorted(self.masks)

    @property
    def n_labels(self) -> int:
        return len(self.masks)


def extract_features(image, kind: str = "rgb") -> FeatureImage:
    """Per-pixel descriptors.

    kind="rgb": channel passthrough in the image's own units (grayscale
    becomes dim 1).
    kind="gradient_norm_per_channel": per channel, the Euclidean norm of the
    discrete image gradient, using the same one-sided Dirichlet stencil as
    the TV term (so a constant image has zero feature in the interior and
    its top/left borders see the jump from the implicit zero outside).
    """
    img = np.asarray(image).astype(float)
    if img.size == 0:
        raise ValueError("image is empty")
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected (h, w[, channels]) image, got shape {img.shape}")
    if kind == "rgb":
        return FeatureImage(values=img, kind=kind)
    if kind == "gradnorm":
        kind = "gradient_norm_per_channel"
    if kind == "gradient_norm_per_channel":
        chans = []
        for c in range(img.shape[2]):
            g = _grad_op(img[:, :, c])
            chans.append(np.sqrt(g[0] ** 2 + g[1] ** 2))
        return FeatureImage(values=np.stack(chans, axis=-1), kind=kind)
    raise ValueError(f"unknown feature kind {kind!r}")


def _plusplus_init(points: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2-weighted sampling of M distinct points."""
    n = len(points)
    centroids = np.empty((M, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, M):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid; caller guarantees
            # enough distinct points, so this cannot happen for valid M
            raise ValueError("fewer distinct points than requested clusters")
        idx = rng.choice(n, p=d2 / total)
        centroids[k] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[k]) ** 2).sum(axis=1))
    return centroids


def _nearest(points: np.ndarray, centroids: np.ndarray,
             chunk: int = 1 << 16) -> np.ndarray:
    """Index of the nearest centroid per point, ties to the lowest index."""
    out = np.empty(len(points), dtype=np.int32)
    c2 = (centroids ** 2).sum(axis=1)
    for lo in range(0, len(points), chunk):
        hi = min(lo + chunk, len(points))
        block = points[lo:hi]
        # squared distance up to the constant ||x||^2; argmin is unaffected.
        # Exact ties in true distance stay exact ties here because the
        # expression is identical across centroids for a fixed pixel.
        d = c2[None, :] - 2.0 * (block @ centroids.T)
        out[lo:hi] = np.argmin(d, axis=1)
    return out


def kmeans(features, M: int, seed: int = 0, max_iter: int = 100) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding, deterministic per seed.

    Large inputs are subsampled (seeded, KMEANS_SUBSAMPLE points) before
    clustering; assignment of the full image is a separate, exact step
    (build_assignment).  Empty clusters are re-seeded to the point farthest
    from every current centroid.

    Raises ValueError when M exceeds the number of distinct feature vectors.
    """
    if isinstance(features, FeatureImage):
        pts = features.flat()
        kind = features.kind
    else:
        pts = np.atleast_2d(np.asarray(features, dtype=float))
        kind = "rgb"
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    distinct = np.unique(pts, axis=0)
    if M > len(distinct):
        raise ValueError(
            f"requested {M} clusters but only {len(distinct)} distinct feature vectors")
    rng = np.random.default_rng(seed)
    if len(pts) > KMEANS_SUBSAMPLE:
        keep = rng.choice(len(pts), size=KMEANS_SUBSAMPLE, replace=False)
        work = pts[keep]
        # the subsample must still carry M distinct vectors; top up if not
        if len(np.unique(work, axis=0)) < M:
            work = distinct
    else:
        work = pts
    centroids = _plusplus_init(work, M, rng)
    assign = _nearest(work, centroids)
    for _ in range(max_iter):
        for k in range(M):
            sel = assign == k
            if np.any(sel):
                centroids[k] = work[sel].mean(axis=0)
            else:
                d2 = ((work[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2).min(axis=1) \
                    if M * len(work) <= 4_000_000 else _min_dist2(work, centroids)
                centroids[k] = work[np.argmax(d2)]
        new_assign = _nearest(work, centroids)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    # distinct-centroid contract: collapse is impossible after convergence on
    # distinct data, but guard against pathological floating-point merges
    if len(np.unique(centroids, axis=0)) != M:
        raise ValueError("k-means produced duplicate centroids; reduce M")
    return Codebook(centroids=centroids, feature_kind=kind)


def _min_dist2(points: np.ndarray, centroids: np.ndarray,
               chunk: int = 1 << 14) -> np.ndarray:
    out = np.empty(len(points))
    for lo in range(0, len(points), chunk):
        hi = min(lo + chunk, len(points))
        d2 = ((points[lo:hi, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        out[lo:hi] = d2.min(axis=1)
    return out


def distinct_count(points) -> int:
    """Number of distinct feature vectors (rows)."""
    pts = points.flat() if isinstance(points, FeatureImage) else \
        np.atleast_2d(np.asarray(points, dtype=float))
    return len(np.unique(pts, axis=0))


def kmeans_objective(points: np.ndarray, codebook: Codebook) -> float:
    """Sum of squared distances to the nearest centroid (test hook)."""
    pts = points.flat() if isinstance(points, FeatureImage) else np.atleast_2d(points)
    return float(_min_dist2(np.asarray(pts, dtype=float), codebook.centroids).sum())


def build_assignment(features, codebook: Codebook) -> AssignmentOperator:
    """Nearest-centroid bin per pixel, ties to the lowest index."""
    if isinstance(features, FeatureImage):
        pts = features.flat()
        shape = (features.height, features.width)
    else:
        pts = np.atleast_2d(np.asarray(features, dtype=float))
        shape = None
    if pts.shape[1] != codebook.dim:
        raise ValueError(
            f"feature dim {pts.shape[1]} does not match codebook dim {codebook.dim}")
    return AssignmentOperator(bins=_nearest(pts, codebook.centroids),
                              n_bins=codebook.n_bins, shape=shape)


def histogram_of(op: AssignmentOperator, u) -> np.ndarray:
    """Weighted histogram (H u)."""
    return op.histogram(u)


def apply_Ht(op: AssignmentOperator, p) -> np.ndarray:
    """Adjoint gather (H^T p)."""
    return op.adjoint(p)


def prior_from_scribbles(op: AssignmentOperator,
                         scribbles: ScribbleSet) -> dict[int, np.ndarray]:
    """Normalized prior histogram per label: a_k = H s_k / <s_k, 1>.

    Raises ValueError naming the label whose mask is empty.
    """
    priors: dict[int, np.ndarray] = {}
    for label in scribbles.labels:
        s = scribbles.masks[label].astype(float).ravel()
        if len(s) != op.n_pixels:
            raise ValueError(
                f"scribble mask for label {label} has {len(s)} pixels, "
                f"expected {op.n_pixels}")
        mass = s.sum()
        if mass == 0:
            raise ValueError(f"scribble mask for label {label} is empty")
        priors[label] = op.histogram(s) / mass
    return priors
