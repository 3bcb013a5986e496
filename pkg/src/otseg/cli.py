"""Batch command line interface.

Subcommands: ``codebook`` (fit a shared feature codebook), ``segment``
(scribble-supervised two- or multi-phase segmentation), ``coseg``
(unsupervised co-segmentation of an image set), ``eval`` (label-map
metrics). Every command is deterministic given its config and seed.

A JSON config supplied with --config overrides the command line flags;
it is schema-validated before any compute and unknown keys are rejected.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error, 3 outputs
written but the solver stopped at max_iter (suppressed by --allow-maxiter).

Label convention on outputs: the scribble labels present in the mask are
sorted ascending and mapped to phase indices 0..K-1; label PNGs contain the
phase index. For two phases the foreground (index 1) is the phase of the
larger scribble label, and --out-prob holds its probability map.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

# NOTE: heavy imports (numpy and the compute modules) are deferred into the
# command bodies so the BLAS thread cap below can still take effect; they
# read their env vars at first import.

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MAXITER = 3

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

_COMMON_KEYS = {
    "config": {"type": "string"},
    "threads": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer", "minimum": 0},
}

_SOLVER_KEYS = {
    "variant": {"enum": ["l1", "mk_exact", "sinkhorn_prox", "sinkhorn_grad"]},
    "rho": {"type": "number", "exclusiveMinimum": 0},
    "lambda": {"type": "number", "exclusiveMinimum": 0},
    "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "bins": {"type": "integer", "minimum": 1},
    "features": {"enum": ["rgb", "gradnorm"]},
    "cost_kind": {"enum": ["euclidean_p", "euclidean", "exp_concave"]},
    "cost_p": {"type": "number", "exclusiveMinimum": 0},
    "gamma": {"type": "number", "exclusiveMinimum": 0},
    "tol": {"type": "number", "exclusiveMinimum": 0},
    "max_iter": {"type": "integer", "minimum": 1},
    "allow_maxiter": {"type": "boolean"},
    "precond_r": {"type": "number", "exclusiveMinimum": 0},
    "precond_delta": {"type": "number", "exclusiveMinimum": 0,
                      "exclusiveMaximum": 2},
}

CONFIG_SCHEMAS = {
    "codebook": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **_COMMON_KEYS,
            "image": {"type": "array", "items": {"type": "string"}},
            "features": {"enum": ["rgb", "gradnorm"]},
            "bins": {"type": "integer", "minimum": 1},
            "out": {"type": "string"},
        },
    },
    "segment": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **_COMMON_KEYS,
            **_SOLVER_KEYS,
            "image": {"type": "string"},
            "scribbles": {"type": "string"},
            "codebook": {"type": "string"},
            "out_prob": {"type": "string"},
            "out_labels": {"type": "string"},
            "out_raw": {"type": "string"},
        },
    },
    "coseg": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **_COMMON_KEYS,
            **{k: v for k, v in _SOLVER_KEYS.items() if k != "variant"},
            "variant": {"enum": ["pairwise", "pairwise_multi", "barycentric_l1"]},
            "dist": {"enum": ["l1", "mk_exact", "sinkhorn_prox", "sinkhorn_grad"]},
            "delta": {"type": "number", "minimum": 0},
            "images": {"type": "array", "items": {"type": "string"}},
            "out_dir": {"type": "string"},
        },
    },
    "eval": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **_COMMON_KEYS,
            "labels": {"type": "string"},
            "truth": {"type": "string"},
        },
    },
}

# config keys whose argparse destination differs from the JSON spelling
_KEY_TO_DEST = {"lambda": "lam"}


def _apply_thread_cap(threads: int | None) -> None:
    n = threads
    if n is None:
        env = os.environ.get("OTSEG_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise SystemExit(
                    f"error: OTSEG_THREADS must be an integer, got {env!r}")
    if n is None:
        return
    if n < 1:
        raise SystemExit("error: --threads must be >= 1")
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(n)


def _load_config(args: argparse.Namespace, command: str) -> None:
    if not getattr(args, "config", None):
        return
    import jsonschema

    with open(args.config, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        jsonschema.validate(doc, CONFIG_SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        raise SystemExit(f"error: invalid --config for {command}: {exc.message}")
    for key, value in doc.items():
        if key == "config":
            continue
        setattr(args, _KEY_TO_DEST.get(key, key), value)


def _json_out(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _suffixed(path: str, tag: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}_{tag}{ext or '.png'}"


# ---------------------------------------------------------------------------
# commands


def cmd_codebook(args: argparse.Namespace) -> int:
    import numpy as np

    from . import pngio
    from .features import extract_features, kmeans
    from .models import default_bins

    kind = args.features
    flats = []
    dim = None
    for path in args.image:
        feats = extract_features(pngio.load_image(path), kind)
        if dim is None:
            dim = feats.dim
        elif feats.dim != dim:
            raise SystemExit(
                f"error: {path} yields dim-{feats.dim} features, first image "
                f"gave dim {dim}")
        flats.append(feats.flat())
    pooled = np.concatenate(flats, axis=0)
    bins = args.bins if args.bins else default_bins(pooled, dim)
    codebook = kmeans(pooled, bins, seed=args.seed)
    codebook.save(args.out)
    _json_out({"bins": codebook.n_bins, "dim": codebook.dim,
               "pixels": int(pooled.shape[0]), "out": args.out})
    return EXIT_OK


def cmd_segment(args: argparse.Namespace) -> int:
    import time

    from . import pngio
    from .features import Codebook, ScribbleSet
    from .models import SegConfig, segment_scribbles

    image = pngio.load_image(args.image)
    scrib = pngio.read_label_png(args.scribbles)
    if scrib.shape != image.shape[:2]:
        raise SystemExit(
            f"error: scribble mask is {scrib.shape}, image is "
            f"{image.shape[:2]}")
    scribbles = ScribbleSet.from_indexed(scrib)
    if scribbles.n_labels < 2:
        raise SystemExit(
            f"error: need at least 2 scribbled classes, found "
            f"{scribbles.n_labels}")
    codebook = Codebook.load(args.codebook) if args.codebook else None
    config = SegConfig(
        variant=args.variant, rho=args.rho, lam=args.lam,
        cost_kind="euclidean_p" if args.cost_kind == "euclidean" else args.cost_kind,
        gamma=args.gamma, cost_p=args.cost_p, M=args.bins,
        feature_kind=args.features, tol=args.tol, max_iter=args.max_iter,
        threshold=args.threshold, seed=args.seed,
        r=args.precond_r, delta=args.precond_delta,
    )
    t0 = time.perf_counter()
    res = segment_scribbles(image, scribbles, config, codebook=codebook)
    wall = time.perf_counter() - t0
    K = res.probabilities.shape[0]

    if args.out_labels:
        pngio.write_label_png(args.out_labels, res.labels)
    if args.out_prob:
        if K == 2:
            pngio.write_prob16_png(args.out_prob, res.probabilities[1])
        else:
            for k in range(K):
                pngio.write_prob16_png(_suffixed(args.out_prob, f"phase{k}"),
                                       res.probabilities[k])
    if args.out_raw:
        if K == 2:
            pngio.write_raw_prob(args.out_raw, res.probabilities[1])
        else:
            for k in range(K):
                pngio.write_raw_prob(_suffixed(args.out_raw, f"phase{k}"),
                                     res.probabilities[k])

    _json_out({
        "energy": res.energy,
        "iterations": res.report.iterations,
        "converged": res.report.converged,
        "near_binarity": res.near_binarity,
        "wall_time": wall,
        "phases": K,
        "bins": res.codebook.n_bins,
    })
    if not res.report.converged and not args.allow_maxiter:
        return EXIT_MAXITER
    return EXIT_OK


def cmd_coseg(args: argparse.Namespace) -> int:
    import time

    from . import pngio
    from .coseg import CosegConfig, coseg_multi

    if len(args.images) < 2:
        raise SystemExit("error: co-segmentation needs at least 2 images")
    arrays = [pngio.load_image(p) for p in args.images]
    config = CosegConfig(
        variant=args.variant, dist=args.dist, rho=args.rho, delta=args.delta,
        lam=args.lam,
        cost_kind="euclidean_p" if args.cost_kind == "euclidean" else args.cost_kind,
        gamma=args.gamma, cost_p=args.cost_p,
        M=args.bins, feature_kind=args.features, tol=args.tol,
        max_iter=args.max_iter, threshold=args.threshold, seed=args.seed,
        r=args.precond_r, precond_delta=args.precond_delta,
    )
    t0 = time.perf_counter()
    res = coseg_multi(arrays, config)
    wall = time.perf_counter() - t0

    os.makedirs(args.out_dir, exist_ok=True)
    mask_paths = []
    for k, (mask, prob) in enumerate(zip(res.masks, res.maps)):
        mp = os.path.join(args.out_dir, f"mask_{k}.png")
        pngio.write_label_png(mp, mask)
        pngio.write_prob16_png(os.path.join(args.out_dir, f"prob_{k}.png"),
                               prob)
        mask_paths.append(mp)
    payload = {
        "energy": res.energy,
        "iterations": res.report.iterations,
        "converged": res.report.converged,
        "wall_time": wall,
        "images": len(arrays),
        "bins": res.codebook.n_bins,
        "masks": mask_paths,
    }
    if res.barycenter is not None:
        bpath = os.path.join(args.out_dir, "barycenter.json")
        with open(bpath, "w", encoding="utf-8") as fh:
            json.dump({"n_bins": res.codebook.n_bins,
                       "histogram": [float(v) for v in res.barycenter]},
                      fh, indent=2)
            fh.write("\n")
        payload["barycenter"] = bpath
    _json_out(payload)
    if not res.report.converged and not args.allow_maxiter:
        return EXIT_MAXITER
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    import numpy as np

    from . import pngio

    labels = pngio.read_label_png(args.labels)
    truth = pngio.read_label_png(args.truth)
    if labels.shape != truth.shape:
        raise SystemExit(
            f"error: label image is {labels.shape}, truth is {truth.shape}")
    classes = sorted(set(np.unique(labels)) | set(np.unique(truth)))
    jaccard = {}
    for c in classes:
        a = labels == c
        b = truth == c
        union = int((a | b).sum())
        inter = int((a & b).sum())
        jaccard[str(int(c))] = (inter / union) if union else 1.0
    _json_out({
        "pixel_accuracy": float((labels == truth).mean()),
        "jaccard": jaccard,
        "mean_jaccard": float(sum(jaccard.values()) / len(jaccard)),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; overrides flags")
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker threads (fallback: OTSEG_THREADS)")
    p.add_argument("--seed", type=int, default=0)


def _add_solver(p: argparse.ArgumentParser, variants, default_variant,
                default_rho) -> None:
    p.add_argument("--variant", choices=variants, default=default_variant)
    p.add_argument("--rho", type=float, default=default_rho,
                   help="perimeter weight")
    p.add_argument("--lambda", dest="lam", type=float, default=100.0,
                   help="entropic regularization strength")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--bins", type=int, default=None,
                   help="codebook size (default: data-driven)")
    p.add_argument("--features", choices=["rgb", "gradnorm"], default="rgb")
    p.add_argument("--cost-kind", choices=["euclidean_p", "euclidean",
                                           "exp_concave"],
                   default="exp_concave")
    p.add_argument("--cost-p", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=5000)
    p.add_argument("--allow-maxiter", action="store_true",
                   help="exit 0 even if the solver stopped at max_iter")
    p.add_argument("--precond-r", type=float, default=1.0,
                   help="primal/dual step balance; < 1 favors larger primal "
                        "steps, which helps the plan-carrying variants")
    p.add_argument("--precond-delta", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otseg",
        description="Convex variational segmentation with transport-based "
                    "histogram fidelity.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("codebook", help="fit a feature codebook")
    p.add_argument("--image", action="append", required=True,
                   help="input image (repeatable; features are pooled)")
    p.add_argument("--features", choices=["rgb", "gradnorm"], default="rgb")
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--out", required=True, help="output codebook JSON")
    _add_common(p)
    p.set_defaults(func=cmd_codebook)

    p = sub.add_parser("segment", help="scribble-supervised segmentation")
    p.add_argument("--image", required=True)
    p.add_argument("--scribbles", required=True,
                   help="indexed PNG, 0 = unlabeled, k = class k")
    p.add_argument("--codebook", default=None,
                   help="codebook JSON (default: fit on this image)")
    p.add_argument("--out-prob", default=None,
                   help="16-bit probability PNG (multi-phase: one per phase)")
    p.add_argument("--out-labels", default=None, help="phase index PNG")
    p.add_argument("--out-raw", default=None,
                   help="raw float64 dump for test oracles")
    _add_solver(p, ["l1", "mk_exact", "sinkhorn_prox", "sinkhorn_grad"],
                "sinkhorn_prox", 0.1)
    _add_common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("coseg", help="unsupervised co-segmentation")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--dist", choices=["l1", "mk_exact", "sinkhorn_prox",
                                      "sinkhorn_grad"], default="l1")
    p.add_argument("--delta", type=float, default=0.5,
                   help="ballooning weight (region size reward)")
    p.add_argument("--out-dir", required=True)
    _add_solver(p, ["pairwise", "pairwise_multi", "barycentric_l1"],
                "pairwise", 0.05)
    _add_common(p)
    p.set_defaults(func=cmd_coseg)

    p = sub.add_parser("eval", help="label map metrics")
    p.add_argument("--labels", required=True)
    p.add_argument("--truth", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _load_config(args, args.command)
        _apply_thread_cap(args.threads)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return EXIT_USAGE
        raise
    except (OSError, ValueError) as exc:
        print(f"error: cannot load --config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return EXIT_FAILURE
        raise
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        from .errors import OtsegError

        if isinstance(exc, (OtsegError, ValueError, OSError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAILURE
        raise


if __name__ == "__main__":
    sys.exit(main())
