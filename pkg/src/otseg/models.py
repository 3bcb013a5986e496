"""Two-phase and multi-phase segmentation models.

Assembles the histogram-comparison energies

    min_{u in [0,1]^N}  rho ||Du||_{1,2} + S(Au, Hu) + S(B(1-u), H(1-u))

(two-phase; A = a*1^T, B = b*1^T rank-1 prior operators) and the K-phase
simplex relaxation with per-phase terms S(A_k u_k, H u_k), for S in
{l1, exact transport, entropic transport via conjugate gradient or prox}.
The domain is enlarged by one pixel on every border with u pinned to 0
there, so regions touching the image border pay their full perimeter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError
from .features import (AssignmentOperator, Codebook, FeatureImage,
                       ScribbleSet, build_assignment, distinct_count,
                       extract_features, kmeans, prior_from_scribbles)
from .solver import SolveReport, build_preconditioner, solve
from .terms import FieldSpec, ModelAssembly, Term, hist_side, prior_side
from .transport import build_cost_matrix

__all__ = [
    "VARIANTS",
    "SegConfig",
    "SegResult",
    "RegionPrior",
    "gamma_default",
    "threshold_labels",
    "near_binarity",
    "segment_two_phase",
    "segment_multi_phase",
    "energy",
]

VARIANTS = ("l1", "mk_exact", "sinkhorn_grad", "sinkhorn_prox")
MK_VARIANT_MAX_BINS = 1024
NEAR_BINARY_BAND = (0.05, 0.95)


@dataclass(frozen=True)
class SegConfig:
    """Segmentation parameters; defaults follow the experimental setup."""

    variant: str = "sinkhorn_prox"
    rho: float = 0.1
    lam: float = 100.0
    cost_kind: str = "exp_concave"
    gamma: float | None = None      # None: 2 / median pairwise centroid distance
    cost_p: float = 1.0             # exponent for cost_kind="euclidean_p"
    M: int | None = None            # None: 8**feature_dim, capped at 512
    feature_kind: str = "rgb"
    r: float = 1.0
    delta: float = 1.0
    tol: float = 1e-6
    max_iter: int = 5000
    threshold: float = 0.5
    seed: int = 0
    track_energy: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.rho < 0:
            raise DomainError(f"rho must be >= 0, got {self.rho}")
        if not self.lam > 0:
            raise DomainError(f"lambda must be > 0 (or inf), got {self.lam}")
        if np.isinf(self.lam) and self.variant in ("sinkhorn_grad", "sinkhorn_prox"):
            raise DomainError(
                "lambda=inf is the exact transport model; use variant='mk_exact' "
                "or a finite lambda")
        if not 0 < self.threshold < 1:
            raise DomainError(f"threshold must lie in (0,1), got {self.threshold}")
        if not 0 < self.delta < 2:
            raise DomainError(f"delta must lie in (0,2), got {self.delta}")
        if self.r <= 0:
            raise DomainError(f"r must be > 0, got {self.r}")


@dataclass(frozen=True)
class RegionPrior:
    """Normalized prior histogram, optionally on its own (foreign) codebook."""

    hist: np.ndarray
    codebook: Codebook | None = None

    def __post_init__(self):
        h = np.asarray(self.hist, dtype=float).ravel()
        if np.any(h < 0) or not np.all(np.isfinite(h)):
            raise DomainError("prior histogram must be finite and nonnegative")
        s = h.sum()
        if s <= 0:
            raise DomainError("prior histogram must have positive mass")
        object.__setattr__(self, "hist", h / s)
        if self.codebook is not None and len(h) != self.codebook.n_bins:
            raise DomainError("prior length does not match its codebook")


@dataclass
class SegResult:
    probabilities: np.ndarray   # (K, h, w) phase probability maps
    labels: np.ndarray          # (h, w) integer phase indices
    energy: float
    report: SolveReport
    near_binarity: float
    codebook: Codebook
    assignment: AssignmentOperator


def gamma_default(centroids: np.ndarray) -> float:
    """2 / median pairwise centroid distance (1.0 if degenerate)."""
    c = np.atleast_2d(np.asarray(centroids, dtype=float))
    if len(c) < 2:
        return 1.0
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(axis=2))
    vals = d[np.triu_indices(len(c), k=1)]
    med = float(np.median(vals))
    return 2.0 / med if med > 0 else 1.0


def threshold_labels(u, t: float = 0.5) -> np.ndarray:
    """Label map from probability maps.

    2-d input or a 2-phase stack: label 1 where the foreground map exceeds t.
    K > 2 phases: argmax over phases, ties resolved to the lowest index.
    """
    if not 0 < t < 1:
        raise DomainError(f"threshold must lie in (0,1), got {t}")
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        return (u > t).astype(np.int32)
    if u.ndim != 3 or u.shape[0] < 2:
        raise DomainError("expected a 2-d map or a (K>=2, h, w) stack")
    if u.shape[0] == 2:
        return (u[1] > t).astype(np.int32)
    return np.argmax(u, axis=0).astype(np.int32)


def near_binarity(u) -> float:
    """Fraction of pixels whose decisive probability sits in (0.05, 0.95)."""
    u = np.asarray(u, dtype=float)
    v = u if u.ndim == 2 else u.max(axis=0)
    lo, hi = NEAR_BINARY_BAND
    return float(np.mean((v > lo) & (v < hi)))


def _as_prior(p) -> RegionPrior:
    return p if isinstance(p, RegionPrior) else RegionPrior(hist=np.asarray(p))


def default_bins(feats: FeatureImage | np.ndarray, dim: int) -> int:
    """8**dim capped at 512 and at the number of distinct features."""
    return max(1, min(8 ** dim, 512, distinct_count(feats)))


def _prepare(image, config: SegConfig, codebook: Codebook | None,
             assignment: AssignmentOperator | None):
    feats = image if isinstance(image, FeatureImage) else \
        extract_features(image, config.feature_kind)
    if codebook is None:
        if assignment is not None:
            raise DomainError("an assignment needs its codebook alongside")
        codebook = kmeans(feats, config.M or default_bins(feats, feats.dim),
                          seed=config.seed)
    if codebook.n_bins < 2:
        raise DomainError("segmentation needs a codebook with at least 2 bins")
    if assignment is None:
        assignment = build_assignment(feats, codebook)
    return feats, codebook, assignment


def _resolve_side_codebook(prior: RegionPrior, image_cb: Codebook,
                           variant: str) -> Codebook:
    if prior.codebook is None:
        if len(prior.hist) != image_cb.n_bins:
            raise DomainError(
                f"prior has {len(prior.hist)} bins but the codebook has "
                f"{image_cb.n_bins}; pass the prior's own codebook")
        return image_cb
    same = prior.codebook.n_bins == image_cb.n_bins and \
        np.array_equal(prior.codebook.centroids, image_cb.centroids)
    if variant == "l1" and not same:
        raise DomainError(
            "the l1 variant requires priors on the image's own codebook "
            "(bin-to-bin comparison); transport variants accept foreign codebooks")
    return prior.codebook


def _term_cost(src_cb: Codebook, dst_cb: Codebook, config: SegConfig) -> np.ndarray:
    gamma = config.gamma
    if config.cost_kind == "exp_concave" and gamma is None:
        gamma = gamma_default(dst_cb.centroids)
    cm = build_cost_matrix(src_cb.centroids, dst_cb.centroids,
                           kind=config.cost_kind, p=config.cost_p,
                           gamma=gamma, normalize=True)
    return cm.entries


def _dist_name(config: SegConfig) -> str:
    if config.variant == "mk_exact" or np.isinf(config.lam):
        return "mk_exact"
    return config.variant


def _check_mk_cap(n_bins: int, config: SegConfig):
    if _dist_name(config) == "mk_exact" and n_bins > MK_VARIANT_MAX_BINS:
        raise DomainError(
            f"exact transport stores M^2 plan variables; M={n_bins} exceeds the "
            f"cap {MK_VARIANT_MAX_BINS}. Use variant='sinkhorn_grad' or "
            f"'sinkhorn_prox' instead.")


def _make_term(prior: RegionPrior, field: str, image_cb: Codebook,
               n_real: int, config: SegConfig, *, complement: bool,
               bin_counts: np.ndarray) -> Term:
    side_cb = _resolve_side_codebook(prior, image_cb, config.variant)
    dist = _dist_name(config)
    _check_mk_cap(max(side_cb.n_bins, image_cb.n_bins), config)
    if complement:
        left = prior_side(field, prior.hist, sign=-1.0,
                          offset=n_real * prior.hist)
        right = hist_side(field, image_cb.n_bins, sign=-1.0, offset=bin_counts)
    else:
        left = prior_side(field, prior.hist)
        right = hist_side(field, image_cb.n_bins)
    if dist == "l1":
        return Term(left=left, right=right, dist="l1")
    cost = _term_cost(side_cb, image_cb, config)
    lam = None if dist == "mk_exact" else config.lam
    return Term(left=left, right=right, dist=dist, cost=cost, lam=lam,
                mass_cap=float(n_real))


def _run(assembly: ModelAssembly, config: SegConfig, init_value,
         callback=None, cancel=None):
    problem = assembly.build_problem(track_energy=config.track_energy)
    precond = build_preconditioner(problem, r=config.r, delta=config.delta)
    x0 = assembly.init_primal(init_value)
    p0 = np.zeros(assembly.n_dual)
    return solve(problem, precond, init=(x0, p0), tol=config.tol,
                 max_iter=config.max_iter, callback=callback, cancel=cancel)


def segment_two_phase(image, priors, config: SegConfig = SegConfig(), *,
                      codebook: Codebook | None = None,
                      assignment: AssignmentOperator | None = None,
                      callback=None, cancel=None) -> SegResult:
    """Foreground/background segmentation from a (foreground, background)
    prior pair.  Returns phase maps (1-u, u): phase 1 is the foreground."""
    a, b = (_as_prior(priors[0]), _as_prior(priors[1]))
    feats, codebook, assignment = _prepare(image, config, codebook, assignment)
    h, w = assignment.shape if assignment.shape else (feats.height, feats.width)
    n_real = h * w
    fld = FieldSpec(name="u", height=h + 2, width=w + 2, rho=config.rho,
                    assignment=assignment)
    counts = assignment.bin_counts()
    terms = [
        _make_term(a, "u", codebook, n_real, config, complement=False,
                   bin_counts=counts),
        _make_term(b, "u", codebook, n_real, config, complement=True,
                   bin_counts=counts),
    ]
    assembly = ModelAssembly([fld], terms)
    x, p, report = _run(assembly, config, 0.5, callback, cancel)
    u = assembly.field_map(x, "u")
    probs = np.stack([1.0 - u, u])
    return SegResult(
        probabilities=probs,
        labels=threshold_labels(probs, config.threshold),
        energy=assembly.energy(x),
        report=report,
        near_binarity=near_binarity(u),
        codebook=codebook,
        assignment=assignment,
    )


def segment_multi_phase(image, priors: Sequence, config: SegConfig = SegConfig(),
                        *, codebook: Codebook | None = None,
                        assignment: AssignmentOperator | None = None,
                        callback=None, cancel=None) -> SegResult:
    """K-phase segmentation; u_k live on the per-pixel probability simplex."""
    priors = [_as_prior(p) for p in priors]
    K = len(priors)
    if K < 2:
        raise DomainError(f"multi-phase needs K >= 2 priors, got {K}")
    feats, codebook, assignment = _prepare(image, config, codebook, assignment)
    h, w = assignment.shape if assignment.shape else (feats.height, feats.width)
    n_real = h * w
    counts = assignment.bin_counts()
    fields, terms = [], []
    for k, pr in enumerate(priors):
        name = f"u:{k}"
        fields.append(FieldSpec(name=name, height=h + 2, width=w + 2,
                                rho=config.rho, assignment=assignment))
        terms.append(_make_term(pr, name, codebook, n_real, config,
                                complement=False, bin_counts=counts))
    assembly = ModelAssembly(fields, terms,
                             simplex_group=[f.name for f in fields])
    x, p, report = _run(assembly, config, 1.0 / K, callback, cancel)
    probs = np.stack([assembly.field_map(x, f"u:{k}") for k in range(K)])
    return SegResult(
        probabilities=probs,
        labels=threshold_labels(probs, config.threshold),
        energy=assembly.energy(x),
        report=report,
        near_binarity=near_binarity(probs),
        codebook=codebook,
        assignment=assignment,
    )


def segment_scribbles(image, scribbles, config: SegConfig = SegConfig(), *,
                      codebook: Codebook | None = None,
                      callback=None, cancel=None) -> SegResult:
    """Scribble-supervised pipeline shared by the CLI and the HTTP service.

    scribbles: indexed mask (0 = unlabeled, k = class k) or a ScribbleSet.
    The labels present are sorted ascending and become phases 0..K-1; for
    K=2 the larger scribble label is the foreground (phase 1). Keeping both
    interfaces on this single entry point is what makes their outputs
    byte-identical for equal config and seed.
    """
    if not isinstance(scribbles, ScribbleSet):
        scribbles = ScribbleSet.from_indexed(scribbles)
    if scribbles.n_labels < 2:
        raise DomainError(
            f"need at least 2 scribbled classes, found {scribbles.n_labels}")
    feats = image if isinstance(image, FeatureImage) else \
        extract_features(image, config.feature_kind)
    feats_mask_shape = (feats.height, feats.width)
    for label, mask in scribbles.masks.items():
        if mask.shape != feats_mask_shape:
            raise DomainError(
                f"scribble mask for label {label} is {mask.shape}, image "
                f"grid is {feats_mask_shape}")
    feats, codebook, assignment = _prepare(feats, config, codebook, None)
    priors = prior_from_scribbles(assignment, scribbles)
    phases = scribbles.labels
    if len(phases) == 2:
        return segment_two_phase(
            feats, (priors[phases[1]], priors[phases[0]]), config,
            codebook=codebook, assignment=assignment,
            callback=callback, cancel=cancel)
    return segment_multi_phase(
        feats, [priors[k] for k in phases], config,
        codebook=codebook, assignment=assignment,
        callback=callback, cancel=cancel)


def energy(image, priors, u, config: SegConfig = SegConfig(), *,
           codebook: Codebook | None = None,
           assignment: AssignmentOperator | None = None) -> float:
    """Primal energy of a given probability map under the model of `config`.

    u: (h, w) for the two-phase model, or (K, h, w) for multi-phase.
    """
    u = np.asarray(u, dtype=float)
    feats, codebook, assignment = _prepare(image, config, codebook, assignment)
    h, w = assignment.shape if assignment.shape else (feats.height, feats.width)
    n_real = h * w
    counts = assignment.bin_counts()
    if u.ndim == 2:
        if u.shape != (h, w):
            raise DomainError(f"u has shape {u.shape}, expected {(h, w)}")
        a, b = (_as_prior(priors[0]), _as_prior(priors[1]))
        fld = FieldSpec(name="u", height=h + 2, width=w + 2, rho=config.rho,
                        assignment=assignment)
        terms = [
            _make_term(a, "u", codebook, n_real, config, complement=False,
                       bin_counts=counts),
            _make_term(b, "u", codebook, n_real, config, complement=True,
                       bin_counts=counts),
        ]
        assembly = ModelAssembly([fld], terms)
        x = np.zeros(assembly.n_primal)
        block = np.zeros(fld.n_total)
        block[fld.real_idx] = u.ravel()
        x[assembly.primal_slices["u"]] = block
        return assembly.energy(x)
    if u.ndim != 3 or u.shape[0] != len(priors):
        raise DomainError("u must be (h,w) or (K,h,w) matching the priors")
    pr = [_as_prior(p) for p in priors]
    fields, terms = [], []
    for k, p_k in enumerate(pr):
        name = f"u:{k}"
        fields.append(FieldSpec(name=name, height=h + 2, width=w + 2,
                                rho=config.rho, assignment=assignment))
        terms.append(_make_term(p_k, name, codebook, n_real, config,
                                complement=False, bin_counts=counts))
    assembly = ModelAssembly(fields, terms,
                             simplex_group=[f.name for f in fields])
    x = np.zeros(assembly.n_primal)
    for k, f in enumerate(fields):
        block = np.zeros(f.n_total)
        block[f.real_idx] = u[k].ravel()
        x[assembly.primal_slices[f.name]] = block
    return assembly.energy(x)
