"""Convex variational segmentation with transport-based histogram costs.

Library layout:

* :mod:`otseg.transport` -- exact and entropy-regularized transport between
  histograms, cost matrices, the marginal operator;
* :mod:`otseg.entropic`  -- the smoothed conjugate of the capped transport
  cost and its gradient;
* :mod:`otseg.lambertw`  -- Lambert W and the transport-entropy proximal map;
* :mod:`otseg.features`  -- per-pixel features, codebooks, hard assignment,
  scribble priors;
* :mod:`otseg.solver`    -- matrix-free preconditioned primal-dual solver;
* :mod:`otseg.terms`     -- saddle-point assembly of segmentation energies;
* :mod:`otseg.models`    -- two-phase and multi-phase supervised models;
* :mod:`otseg.coseg`     -- unsupervised co-segmentation models;
* :mod:`otseg.pngio`     -- raster/raw I/O shared by the CLI and service;
* :mod:`otseg.cli`       -- batch command line;
* :mod:`otseg.service`   -- interactive HTTP job service.

Submodule attributes are loaded lazily so that entry points can configure
threading before numpy comes in.
"""

from importlib import import_module

__version__ = "1.0.0"

_EXPORTS = {
    # transport
    "Histogram": "transport",
    "CostMatrix": "transport",
    "TransportPlan": "transport",
    "DualPotentials": "transport",
    "build_cost_matrix": "transport",
    "apply_L": "transport",
    "apply_L_transpose": "transport",
    "mk_exact": "transport",
    "sinkhorn": "transport",
    "entropic_cost": "transport",
    "SinkhornResult": "transport",
    # entropic conjugate and its proximal maps
    "mk_conj_value": "entropic",
    "mk_conj_grad": "entropic",
    "prox_g_lambda": "entropic",
    "prox_gstar_lambda": "entropic",
    # lambert
    "lambert_w": "lambertw",
    # features
    "FeatureImage": "features",
    "Codebook": "features",
    "AssignmentOperator": "features",
    "ScribbleSet": "features",
    "extract_features": "features",
    "kmeans": "features",
    "build_assignment": "features",
    "prior_from_scribbles": "features",
    # solver
    "SegProblem": "solver",
    "Preconditioner": "solver",
    "SolveReport": "solver",
    "solve": "solver",
    "build_preconditioner": "solver",
    "check_adjoint": "solver",
    # models
    "SegConfig": "models",
    "SegResult": "models",
    "RegionPrior": "models",
    "segment_two_phase": "models",
    "segment_multi_phase": "models",
    "segment_scribbles": "models",
    "threshold_labels": "models",
    "near_binarity": "models",
    "energy": "models",
    # coseg
    "CosegConfig": "coseg",
    "CosegResult": "coseg",
    "coseg_pair": "coseg",
    "coseg_multi": "coseg",
    # errors
    "OtsegError": "errors",
    "DomainError": "errors",
    "MassMismatch": "errors",
    "NotConverged": "errors",
    "NumericalUnderflow": "errors",
    "Diverged": "errors",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    if name in _EXPORTS:
        module = import_module(f".{_EXPORTS[name]}", __name__)
        value = getattr(module, name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return __all__
