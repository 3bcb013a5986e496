"""Unsupervised co-segmentation of two or more images.

Pairwise model (one dissimilarity term per image pair):

    min sum_pairs S(H_k u^k, H_l u^l)
        + sum_k rho TV(u^k) - delta ||u^k||_1,   u^k in [0,1]^{N_k}

and the linearly-scaling barycentric model with a joint nonnegative
histogram b:

    min sum_k ||H_k u^k - b||_1 + rho TV(u^k) - delta ||u^k||_1,  b >= 0.

The ballooning reward -delta ||u||_1 is what keeps the empty segmentation
from being optimal.  A single codebook is built from the pooled features of
all images, so bins align across images.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError
from .features import (AssignmentOperator, Codebook, FeatureImage,
                       build_assignment, extract_features, kmeans)
from .models import default_bins, gamma_default, threshold_labels
from .solver import SolveReport, build_preconditioner, solve
from .terms import FieldSpec, ModelAssembly, Side, Term, hist_side, ident_side
from .transport import build_cost_matrix

__all__ = ["CosegConfig", "CosegResult", "coseg_pair", "coseg_multi"]

COSEG_VARIANTS = ("pairwise", "pairwise_multi", "barycentric_l1")
COSEG_DISTS = ("l1", "mk_exact", "sinkhorn_grad", "sinkhorn_prox")
PAIRWISE_MAX_IMAGES = 6
SIZE_RATIO_WARN = 4.0


@dataclass(frozen=True)
class CosegConfig:
    """Co-segmentation parameters.

    delta is the ballooning weight of the model (the preconditioner's dual
    scaling is precond_delta); dist selects the histogram dissimilarity for
    the pairwise variants, while barycentric_l1 is l1 by construction.
    """

    variant: str = "pairwise"
    dist: str = "l1"
    rho: float = 0.05
    delta: float = 0.5
    lam: float = 100.0
    cost_kind: str = "exp_concave"
    gamma: float | None = None
    cost_p: float = 1.0
    M: int | None = None
    feature_kind: str = "rgb"
    r: float = 1.0
    precond_delta: float = 1.0
    tol: float = 1e-6
    max_iter: int = 5000
    threshold: float = 0.5
    seed: int = 0
    track_energy: bool = False

    def __post_init__(self):
        if self.variant not in COSEG_VARIANTS:
            raise DomainError(
                f"unknown coseg variant {self.variant!r}; one of {COSEG_VARIANTS}")
        if self.dist not in COSEG_DISTS:
            raise DomainError(f"unknown distance {self.dist!r}; one of {COSEG_DISTS}")
        if self.variant == "barycentric_l1" and self.dist != "l1":
            raise DomainError(
                "the barycentric model is l1-only: transport costs constrain "
                "each compared pair to equal mass, which the joint barycenter "
                "cannot satisfy in this framework")
        if self.delta < 0:
            raise DomainError(f"delta must be >= 0, got {self.delta}")
        if self.rho < 0:
            raise DomainError(f"rho must be >= 0, got {self.rho}")
        if not self.lam > 0:
            raise DomainError(f"lambda must be > 0, got {self.lam}")
        if np.isinf(self.lam) and self.dist in ("sinkhorn_grad", "sinkhorn_prox"):
            raise DomainError("lambda=inf means dist='mk_exact'")
        if not 0 < self.threshold < 1:
            raise DomainError(f"threshold must lie in (0,1), got {self.threshold}")


@dataclass
class CosegResult:
    maps: list            # per-image probability maps (h_k, w_k)
    masks: list           # per-image binary masks after thresholding
    barycenter: np.ndarray | None
    energy: float
    report: SolveReport
    codebook: Codebook
    assignments: list


def _shared_codebook(images: Sequence, config: CosegConfig):
    feats = [img if isinstance(img, FeatureImage)
             else extract_features(img, config.feature_kind) for img in images]
    dims = {f.dim for f in feats}
    if len(dims) != 1:
        raise DomainError(f"images have mixed feature dimensions {sorted(dims)}")
    pooled = np.concatenate([f.flat() for f in feats], axis=0)
    M = config.M or default_bins(pooled, feats[0].dim)
    codebook = kmeans(pooled, M, seed=config.seed)
    assignments = [build_assignment(f, codebook) for f in feats]
    return feats, codebook, assignments


def _pair_term(name_a: str, name_b: str, codebook: Codebook,
               mass_cap: float, config: CosegConfig) -> Term:
    left = hist_side(name_a, codebook.n_bins)
    right = hist_side(name_b, codebook.n_bins)
    if config.dist == "l1":
        return Term(left=left, right=right, dist="l1")
    gamma = config.gamma
    if config.cost_kind == "exp_concave" and gamma is None:
        gamma = gamma_default(codebook.centroids)
    cost = build_cost_matrix(codebook.centroids, codebook.centroids,
                             kind=config.cost_kind, p=config.cost_p,
                             gamma=gamma, normalize=True).entries
    dist = "mk_exact" if np.isinf(config.lam) else config.dist
    lam = None if dist == "mk_exact" else config.lam
    return Term(left=left, right=right, dist=dist, cost=cost, lam=lam,
                mass_cap=mass_cap)


def _warn_on_size_bias(sizes: Sequence[int], config: CosegConfig):
    if config.dist == "l1":
        return
    ratio = max(sizes) / max(min(sizes), 1)
    if ratio > SIZE_RATIO_WARN:
        warnings.warn(
            f"transport co-segmentation compares regions of equal mass; image "
            f"sizes differ by a factor {ratio:.1f}, which biases the model",
            stacklevel=3)


def _solve_assembly(assembly: ModelAssembly, config: CosegConfig,
                    init_value, callback=None, cancel=None):
    problem = assembly.build_problem(track_energy=config.track_energy)
    precond = build_preconditioner(problem, r=config.r,
                                   delta=config.precond_delta)
    x0 = assembly.init_primal(init_value)
    return solve(problem, precond, init=(x0, np.zeros(assembly.n_dual)),
                 tol=config.tol, max_iter=config.max_iter,
                 callback=callback, cancel=cancel)


def _result(assembly: ModelAssembly, x, report, config: CosegConfig,
            codebook, assignments, n_images: int,
            barycenter=None) -> CosegResult:
    maps = [assembly.field_map(x, f"u:{k}") for k in range(n_images)]
    masks = [threshold_labels(m, config.threshold) for m in maps]
    return CosegResult(maps=maps, masks=masks, barycenter=barycenter,
                       energy=assembly.energy(x), report=report,
                       codebook=codebook, assignments=assignments)


def coseg_pair(images: Sequence, config: CosegConfig = CosegConfig(), *,
               codebook: Codebook | None = None,
               assignments: Sequence[AssignmentOperator] | None = None,
               callback=None, cancel=None) -> CosegResult:
    """Joint segmentation of exactly two images (single pairwise term)."""
    if len(images) != 2:
        raise DomainError(f"coseg_pair needs exactly 2 images, got {len(images)}")
    if config.variant not in ("pairwise",):
        raise DomainError("coseg_pair runs the 'pairwise' variant; "
                          "use coseg_multi for the others")
    return coseg_multi(images, config, codebook=codebook,
                       assignments=assignments, callback=callback,
                       cancel=cancel)


def coseg_multi(images: Sequence, config: CosegConfig = CosegConfig(), *,
                codebook: Codebook | None = None,
                assignments: Sequence[AssignmentOperator] | None = None,
                fixed_masks: Sequence[np.ndarray] | None = None,
                callback=None, cancel=None) -> CosegResult:
    """Co-segmentation of P >= 2 images.

    variant='pairwise'/'pairwise_multi': one dissimilarity term per image
    pair (P capped, quadratic growth).  variant='barycentric_l1': one l1
    term per image against a joint nonnegative barycenter histogram b.

    fixed_masks (barycentric only) freezes the segmentations: the solver
    then estimates b alone against the constant histograms H_k m_k, which
    is the subproblem whose optimum is the entrywise median.
    """
    P = len(images)
    if P < 2:
        raise DomainError(f"co-segmentation needs P >= 2 images, got {P}")
    if config.variant in ("pairwise", "pairwise_multi") and P > PAIRWISE_MAX_IMAGES:
        raise DomainError(
            f"pairwise co-segmentation is capped at P <= {PAIRWISE_MAX_IMAGES} "
            f"(got {P}): the term count grows quadratically. Use "
            f"variant='barycentric_l1'.")
    if config.variant == "pairwise" and P != 2:
        raise DomainError("variant 'pairwise' is the 2-image model; use "
                          "'pairwise_multi' or 'barycentric_l1' for P > 2")
    if fixed_masks is not None and config.variant != "barycentric_l1":
        raise DomainError("fixed_masks only applies to the barycentric variant")

    if codebook is None:
        feats, codebook, assignments = _shared_codebook(images, config)
    elif assignments is None:
        feats = [img if isinstance(img, FeatureImage)
                 else extract_features(img, config.feature_kind)
                 for img in images]
        assignments = [build_assignment(f, codebook) for f in feats]
    assignments = list(assignments)
    shapes = [op.shape for op in assignments]
    if any(s is None for s in shapes):
        raise DomainError("assignments must carry their grid shapes")
    sizes = [h * w for (h, w) in shapes]
    _warn_on_size_bias(sizes, config)

    M = codebook.n_bins
    if config.variant == "barycentric_l1" and fixed_masks is not None:
        if len(fixed_masks) != P:
            raise DomainError("need one fixed mask per image")
        terms = []
        for k, mask in enumerate(fixed_masks):
            mask = np.asarray(mask, dtype=float)
            if mask.shape != shapes[k]:
                raise DomainError(
                    f"fixed mask {k} has shape {mask.shape}, image grid is "
                    f"{shapes[k]}")
            hk = assignments[k].histogram(mask.ravel())
            terms.append(Term(
                left=Side(kind="const", n_bins=M, offset=hk),
                right=ident_side("b", M), dist="l1"))
        assembly = ModelAssembly([], terms)
        x, p, report = _solve_assembly(assembly, config, 0.0,
                                       callback, cancel)
        b = x[assembly.primal_slices["b"]].copy()
        masks = [np.asarray(m) for m in fixed_masks]
        return CosegResult(maps=[m.astype(float) for m in masks],
                           masks=[(m > config.threshold).astype(np.int32)
                                  for m in masks],
                           barycenter=b, energy=assembly.energy(x),
                           report=report, codebook=codebook,
                           assignments=assignments)

    fields = []
    for k, (h, w) in enumerate(shapes):
        fields.append(FieldSpec(name=f"u:{k}", height=h + 2, width=w + 2,
                                rho=config.rho, assignment=assignments[k],
                                balloon=config.delta))
    if config.variant in ("pairwise", "pairwise_multi"):
        terms = []
        for i in range(P):
            for j in range(i + 1, P):
                cap = float(max(sizes[i], sizes[j]))
                terms.append(_pair_term(f"u:{i}", f"u:{j}", codebook, cap,
                                        config))
        assembly = ModelAssembly(fields, terms)
        barycenter = None
    else:
        terms = [Term(left=hist_side(f"u:{k}", M), right=ident_side("b", M),
                      dist="l1") for k in range(P)]
        assembly = ModelAssembly(fields, terms)
        barycenter = True  # placeholder; extracted below
    x, p, report = _solve_assembly(assembly, config, 0.5, callback, cancel)
    b = x[assembly.primal_slices["b"]].copy() if barycenter else None
    return _result(assembly, x, report, config, codebook, assignments, P,
                   barycenter=b)
