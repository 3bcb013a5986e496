"""Assembly of segmentation saddle problems from histogram-comparison terms.

A model is a set of pixel fields (one per phase or per image, each padded by
one Dirichlet pixel) plus transport terms.  Each term compares two affine
histogram expressions h(x) = sign * Op(x_field) + offset, where Op is the
hard-assignment histogram H, the rank-1 prior operator a*1^T, or the
identity on an extra histogram block (the barycenter).  Terms are dualized
per their distance:

  l1            one dual vector q per term, |q| <= 1 entrywise, row h_l - h_r
  mk_exact      plan variables r >= 0 added to the primal, duals beta with
                rows (h_l; h_r) - L r, linear primal cost <c, r>
  sinkhorn_prox same rows as mk_exact, but the entropic cost enters through
                the Lambert-W prox of r instead of a linear term
  sinkhorn_grad no plan variables; duals beta with rows (h_l; h_r) and the
                smooth conjugate gradient in G*

Offsets never enter K; they drive the dual ascent as constants through
grad G*.  Absolute row/column sums of K are assembled in closed form
(overestimating |a_i - H_ix| by a_i + H_ix for combined l1 rows, which only
shrinks the steps and keeps the step condition valid).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .entropic import mk_conj_grad, mk_conj_value, prox_g_lambda
from .errors import DomainError
from .features import AssignmentOperator
from .solver import (SegProblem, grad, div, tv, grad_col_sums, grad_row_sums,
                     project_box, project_linf2_ball, project_linf_ball,
                     project_nonneg, project_simplex_columns)
from .transport import entropic_cost, mk_exact

__all__ = ["FieldSpec", "Side", "Term", "ModelAssembly",
            "hist_side", "prior_side", "ident_side"]

TRANSPORT_DISTS = ("mk_exact", "sinkhorn_prox", "sinkhorn_grad")
ENERGY_MASS_RTOL = 1e-6


@dataclass
class FieldSpec:
    """A pixel field on a padded grid with its regularization weights.

    height/width are the padded dimensions; the outermost 1-pixel frame is
    pinned to 0 by the primal prox so every region boundary pays perimeter.
    """

    name: str
    height: int
    width: int
    rho: float
    assignment: AssignmentOperator | None = None  # on the unpadded grid
    balloon: float = 0.0
    padded: bool = True
    real_idx: np.ndarray = dc_field(init=False, repr=False)

    def __post_init__(self):
        if self.rho < 0:
            raise DomainError(f"rho must be >= 0, got {self.rho}")
        if self.balloon < 0:
            raise DomainError(f"ballooning weight must be >= 0, got {self.balloon}")
        if self.padded and (self.height < 3 or self.width < 3):
            raise DomainError("padded field needs at least a 1x1 interior")
        mask = np.zeros((self.height, self.width), dtype=bool)
        if self.padded:
            mask[1:-1, 1:-1] = True
        else:
            mask[:, :] = True
        self.real_idx = np.flatnonzero(mask.ravel())
        if self.assignment is not None and self.assignment.n_pixels != len(self.real_idx):
            raise DomainError(
                f"assignment covers {self.assignment.n_pixels} pixels but field "
                f"{self.name} has {len(self.real_idx)} interior pixels")

    @property
    def n_total(self) -> int:
        return self.height * self.width

    @property
    def n_real(self) -> int:
        return len(self.real_idx)

    @property
    def inner_shape(self) -> tuple[int, int]:
        if self.padded:
            return (self.height - 2, self.width - 2)
        return (self.height, self.width)


@dataclass(frozen=True)
class Side:
    """Affine histogram expression sign * Op(x_field) + offset."""

    kind: str            # 'hist' | 'prior' | 'ident' | 'const'
    n_bins: int
    field: str | None = None
    vec: np.ndarray | None = None       # prior histogram for kind='prior'
    sign: float = 1.0
    offset: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("hist", "prior", "ident", "const"):
            raise DomainError(f"unknown side kind {self.kind!r}")
        if self.kind == "const" and self.offset is None:
            raise DomainError("constant side needs an offset")
        if self.kind != "const" and self.field is None:
            raise DomainError(f"{self.kind} side needs a field name")
        if self.kind == "prior":
            v = np.asarray(self.vec, dtype=float)
            if v.ndim != 1 or len(v) != self.n_bins:
                raise DomainError("prior vector length must equal n_bins")
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise DomainError("prior vector must be finite and nonnegative")
            object.__setattr__(self, "vec", v)

    def offset_vec(self) -> np.ndarray:
        if self.offset is None:
            return np.zeros(self.n_bins)
        return np.asarray(self.offset, dtype=float)


def hist_side(field: str, n_bins: int, sign: float = 1.0,
              offset=None) -> Side:
    return Side(kind="hist", n_bins=n_bins, field=field, sign=sign, offset=offset)


def prior_side(field: str, vec, sign: float = 1.0, offset=None) -> Side:
    vec = np.asarray(vec, dtype=float)
    return Side(kind="prior", n_bins=len(vec), field=field, vec=vec,
                sign=sign, offset=offset)


def ident_side(field: str, n_bins: int, sign: float = 1.0) -> Side:
    return Side(kind="ident", n_bins=n_bins, field=field, sign=sign)


@dataclass
class Term:
    """One histogram-dissimilarity term S(h_left, h_right)."""

    left: Side
    right: Side
    dist: str                      # 'l1' or one of TRANSPORT_DISTS
    cost: np.ndarray | None = None
    lam: float | None = None
    mass_cap: float | None = None

    def __post_init__(self):
        if self.dist == "l1":
            if self.left.n_bins != self.right.n_bins:
                raise DomainError(
                    "l1 terms need identical bins on both sides "
                    f"({self.left.n_bins} vs {self.right.n_bins})")
        elif self.dist in TRANSPORT_DISTS:
            c = np.asarray(self.cost, dtype=float)
            if c.shape != (self.left.n_bins, self.right.n_bins):
                raise DomainError(
                    f"cost shape {c.shape} does not match bins "
                    f"({self.left.n_bins}, {self.right.n_bins})")
            self.cost = c
            if self.dist != "mk_exact":
                if self.lam is None or not self.lam > 0:
                    raise DomainError("entropic terms need lambda > 0")
            if self.mass_cap is None or not self.mass_cap > 0:
                raise DomainError("transport terms need a positive mass cap")
        else:
            raise DomainError(f"unknown distance {self.dist!r}")

    @property
    def has_plan(self) -> bool:
        return self.dist in ("mk_exact", "sinkhorn_prox")

    @property
    def n_dual(self) -> int:
        if self.dist == "l1":
            return self.left.n_bins
        return self.left.n_bins + self.right.n_bins

    @property
    def n_plan(self) -> int:
        return self.left.n_bins * self.right.n_bins if self.has_plan else 0


class ModelAssembly:
    """Compiles fields + terms into a matrix-free SegProblem."""

    def __init__(self, fields: list[FieldSpec], terms: list[Term],
                 simplex_group: list[str] | None = None):
        if not fields and not terms:
            raise DomainError("assembly needs at least one field or term")
        self.fields = {f.name: f for f in fields}
        if len(self.fields) != len(fields):
            raise DomainError("field names must be unique")
        self.field_order = [f.name for f in fields]
        self.terms = list(terms)
        self.simplex_group = list(simplex_group) if simplex_group else None
        if self.simplex_group:
            shapes = {self.fields[n].inner_shape for n in self.simplex_group}
            if len(shapes) != 1:
                raise DomainError("simplex-coupled fields must share a grid")
        for t in self.terms:
            for side in (t.left, t.right):
                if side.kind in ("hist", "prior") and side.field not in self.fields:
                    raise DomainError(f"term references unknown field {side.field!r}")
                if side.kind == "hist":
                    op = self.fields[side.field].assignment
                    if op is None:
                        raise DomainError(f"field {side.field!r} has no assignment")
                    if op.n_bins != side.n_bins:
                        raise DomainError("side bin count does not match assignment")
        self.extra_blocks = sorted({
            s.field for t in self.terms for s in (t.left, t.right)
            if s.kind == "ident"})
        self.extra_sizes = {}
        for name in self.extra_blocks:
            sizes = {s.n_bins for t in self.terms for s in (t.left, t.right)
                     if s.kind == "ident" and s.field == name}
            if len(sizes) != 1:
                raise DomainError(f"inconsistent sizes for block {name!r}")
            self.extra_sizes[name] = sizes.pop()
        self._layout()

    # ------------------------------------------------------------------
    # block layout

    def _layout(self):
        self.primal_slices: dict[str, slice] = {}
        off = 0
        for name in self.field_order:
            f = self.fields[name]
            self.primal_slices[name] = slice(off, off + f.n_total)
            off += f.n_total
        for idx, t in enumerate(self.terms):
            if t.has_plan:
                self.primal_slices[f"r:{idx}"] = slice(off, off + t.n_plan)
                off += t.n_plan
        for name in self.extra_blocks:
            self.primal_slices[name] = slice(off, off + self.extra_sizes[name])
            off += self.extra_sizes[name]
        self.n_primal = off

        self.dual_slices: dict[str, slice] = {}
        off = 0
        for name in self.field_order:
            f = self.fields[name]
            self.dual_slices[f"v:{name}"] = slice(off, off + 2 * f.n_total)
            off += 2 * f.n_total
        for idx, t in enumerate(self.terms):
            self.dual_slices[f"q:{idx}"] = slice(off, off + t.n_dual)
            off += t.n_dual
        self.n_dual = off

    # ------------------------------------------------------------------
    # side application

    def _side_forward(self, side: Side, x: np.ndarray) -> np.ndarray:
        """Linear part only; offsets are handled as dual-drive constants."""
        if side.kind == "const":
            return np.zeros(side.n_bins)
        if side.kind == "ident":
            return side.sign * x[self.primal_slices[side.field]]
        f = self.fields[side.field]
        u_real = x[self.primal_slices[side.field]][f.real_idx]
        if side.kind == "hist":
            return side.sign * f.assignment.histogram(u_real)
        return side.vec * (side.sign * float(u_real.sum()))

    def _side_adjoint(self, side: Side, w: np.ndarray, out: np.ndarray):
        if side.kind == "const":
            return
        if side.kind == "ident":
            out[self.primal_slices[side.field]] += side.sign * w
            return
        f = self.fields[side.field]
        block = out[self.primal_slices[side.field]]
        if side.kind == "hist":
            contrib = side.sign * f.assignment.adjoint(w)
        else:
            contrib = np.full(f.n_real, side.sign * float(np.dot(side.vec, w)))
        block[f.real_idx] += contrib

    def side_full_value(self, side: Side, x: np.ndarray) -> np.ndarray:
        """Affine histogram value including the offset (for energies)."""
        return self._side_forward(side, x) + side.offset_vec()

    # per-pixel |column| contribution and per-row sums of a side's operator
    def _side_col_weight(self, side: Side) -> float:
        if side.kind == "hist":
            return 1.0
        if side.kind == "prior":
            return float(np.abs(side.vec).sum())
        return abs(side.sign)  # ident

    def _side_row_sums(self, side: Side) -> np.ndarray:
        if side.kind == "hist":
            return self.fields[side.field].assignment.bin_counts()
        if side.kind == "prior":
            return np.abs(side.vec) * self.fields[side.field].n_real
        if side.kind == "ident":
            return np.ones(side.n_bins)
        return np.zeros(side.n_bins)  # const

    # ------------------------------------------------------------------
    # K and K^T

    def apply_K(self, x: np.ndarray) -> np.ndarray:
        y = np.empty(self.n_dual)
        for name in self.field_order:
            f = self.fields[name]
            u = x[self.primal_slices[name]].reshape(f.height, f.width)
            y[self.dual_slices[f"v:{name}"]] = grad(u).ravel()
        for idx, t in enumerate(self.terms):
            sl = self.dual_slices[f"q:{idx}"]
            if t.dist == "l1":
                y[sl] = self._side_forward(t.left, x) - self._side_forward(t.right, x)
            else:
                ml = t.left.n_bins
                y[sl.start:sl.start + ml] = self._side_forward(t.left, x)
                y[sl.start + ml:sl.stop] = self._side_forward(t.right, x)
                if t.has_plan:
                    r = x[self.primal_slices[f"r:{idx}"]].reshape(ml, t.right.n_bins)
                    y[sl.start:sl.start + ml] -= r.sum(axis=1)
                    y[sl.start + ml:sl.stop] -= r.sum(axis=0)
        return y

    def apply_Kt(self, y: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n_primal)
        for name in self.field_order:
            f = self.fields[name]
            v = y[self.dual_slices[f"v:{name}"]].reshape(2, f.height, f.width)
            x[self.primal_slices[name]] -= div(v).ravel()
        for idx, t in enumerate(self.terms):
            sl = self.dual_slices[f"q:{idx}"]
            if t.dist == "l1":
                q = y[sl]
                self._side_adjoint(t.left, q, x)
                self._side_adjoint(t.right, -q, x)
            else:
                ml = t.left.n_bins
                wl = y[sl.start:sl.start + ml]
                wr = y[sl.start + ml:sl.stop]
                self._side_adjoint(t.left, wl, x)
                self._side_adjoint(t.right, wr, x)
                if t.has_plan:
                    x[self.primal_slices[f"r:{idx}"]] -= \
                        (wl[:, None] + wr[None, :]).ravel()
        return x

    # ------------------------------------------------------------------
    # proximal maps and smooth parts

    def prox_primal(self, x: np.ndarray, tau) -> np.ndarray:
        out = x.copy()
        tau_vec = tau if np.ndim(tau) else np.full(self.n_primal, float(tau))
        handled = set()
        if self.simplex_group:
            cols = np.stack([
                out[self.primal_slices[n]][self.fields[n].real_idx]
                for n in self.simplex_group])
            cols = project_simplex_columns(cols, mass=1.0)
            for k, n in enumerate(self.simplex_group):
                f = self.fields[n]
                block = np.zeros(f.n_total)
                block[f.real_idx] = cols[k]
                out[self.primal_slices[n]] = block
                handled.add(n)
        for name in self.field_order:
            if name in handled:
                continue
            f = self.fields[name]
            block = out[self.primal_slices[name]]
            clipped = np.zeros(f.n_total)
            clipped[f.real_idx] = project_box(block[f.real_idx])
            out[self.primal_slices[name]] = clipped
        for idx, t in enumerate(self.terms):
            if not t.has_plan:
                continue
            sl = self.primal_slices[f"r:{idx}"]
            if t.dist == "mk_exact":
                out[sl] = project_nonneg(out[sl])
            else:
                out[sl] = prox_g_lambda(out[sl], tau_vec[sl], t.lam,
                                        t.mass_cap, t.cost.ravel())
        for name in self.extra_blocks:
            sl = self.primal_slices[name]
            out[sl] = project_nonneg(out[sl])
        return out

    def prox_dual(self, y: np.ndarray, sigma) -> np.ndarray:
        out = y.copy()
        for name in self.field_order:
            f = self.fields[name]
            sl = self.dual_slices[f"v:{name}"]
            v = out[sl].reshape(2, f.height, f.width)
            out[sl] = project_linf2_ball(v, f.rho).ravel()
        for idx, t in enumerate(self.terms):
            if t.dist == "l1":
                sl = self.dual_slices[f"q:{idx}"]
                out[sl] = project_linf_ball(out[sl], 1.0)
            # transport duals are unconstrained: identity
        return out

    def grad_T(self, x: np.ndarray) -> np.ndarray:
        g = np.zeros(self.n_primal)
        for name in self.field_order:
            f = self.fields[name]
            if f.balloon:
                block = g[self.primal_slices[name]]
                block[f.real_idx] -= f.balloon
        for idx, t in enumerate(self.terms):
            if t.dist == "mk_exact":
                g[self.primal_slices[f"r:{idx}"]] += t.cost.ravel()
        return g

    def _needs_grad_T(self) -> bool:
        return any(f.balloon for f in self.fields.values()) or \
            any(t.dist == "mk_exact" for t in self.terms)

    def grad_Gstar(self, y: np.ndarray) -> np.ndarray:
        g = np.zeros(self.n_dual)
        for idx, t in enumerate(self.terms):
            sl = self.dual_slices[f"q:{idx}"]
            if t.dist == "l1":
                d = t.left.offset_vec() - t.right.offset_vec()
                if d.any():
                    g[sl] -= d
                continue
            ml = t.left.n_bins
            dl, dr = t.left.offset_vec(), t.right.offset_vec()
            if dl.any():
                g[sl.start:sl.start + ml] -= dl
            if dr.any():
                g[sl.start + ml:sl.stop] -= dr
            if t.dist == "sinkhorn_grad":
                gl, gr = mk_conj_grad(y[sl.start:sl.start + ml],
                                      y[sl.start + ml:sl.stop],
                                      t.cost, t.lam, t.mass_cap)
                g[sl.start:sl.start + ml] += gl
                g[sl.start + ml:sl.stop] += gr
        return g

    def _needs_grad_Gstar(self) -> bool:
        if any(t.dist == "sinkhorn_grad" for t in self.terms):
            return True
        return any(s.offset is not None and s.offset_vec().any()
                   for t in self.terms for s in (t.left, t.right))

    def L_Gstar(self) -> float:
        return float(sum(2.0 * t.lam * t.mass_cap for t in self.terms
                         if t.dist == "sinkhorn_grad"))

    def smooth_dual_rows(self) -> np.ndarray | None:
        if not any(t.dist == "sinkhorn_grad" for t in self.terms):
            return None
        mask = np.zeros(self.n_dual)
        for idx, t in enumerate(self.terms):
            if t.dist == "sinkhorn_grad":
                mask[self.dual_slices[f"q:{idx}"]] = 1.0
        return mask

    # ------------------------------------------------------------------
    # preconditioner sums (closed form)

    def abs_col_sums(self) -> np.ndarray:
        col = np.zeros(self.n_primal)
        for name in self.field_order:
            f = self.fields[name]
            col[self.primal_slices[name]] = grad_col_sums(f.height, f.width).ravel()
        for t in self.terms:
            for side in (t.left, t.right):
                if side.kind in ("hist", "prior"):
                    f = self.fields[side.field]
                    block = col[self.primal_slices[side.field]]
                    block[f.real_idx] += self._side_col_weight(side)
                elif side.kind == "ident":
                    col[self.primal_slices[side.field]] += self._side_col_weight(side)
        for idx, t in enumerate(self.terms):
            if t.has_plan:
                col[self.primal_slices[f"r:{idx}"]] = 2.0
        return col

    def abs_row_sums(self) -> np.ndarray:
        row = np.zeros(self.n_dual)
        for name in self.field_order:
            f = self.fields[name]
            row[self.dual_slices[f"v:{name}"]] = \
                grad_row_sums(f.height, f.width).ravel()
        for idx, t in enumerate(self.terms):
            sl = self.dual_slices[f"q:{idx}"]
            if t.dist == "l1":
                row[sl] = self._side_row_sums(t.left) + self._side_row_sums(t.right)
            else:
                ml = t.left.n_bins
                row[sl.start:sl.start + ml] = self._side_row_sums(t.left)
                row[sl.start + ml:sl.stop] = self._side_row_sums(t.right)
                if t.has_plan:
                    row[sl.start:sl.start + ml] += t.right.n_bins
                    row[sl.start + ml:sl.stop] += t.left.n_bins
        return row

    # ------------------------------------------------------------------
    # energies and initialization

    def term_energy(self, t: Term, x: np.ndarray) -> float:
        hl = np.maximum(self.side_full_value(t.left, x), 0.0)
        hr = np.maximum(self.side_full_value(t.right, x), 0.0)
        if t.dist == "l1":
            return float(np.abs(hl - hr).sum())
        ma, mb = float(hl.sum()), float(hr.sum())
        scale = max(ma, mb)
        if scale <= 0:
            return 0.0
        if abs(ma - mb) > ENERGY_MASS_RTOL * scale:
            return np.inf
        if mb > 0:
            hr = hr * (ma / mb)
        if t.dist == "mk_exact":
            cost, _ = mk_exact(hl, hr, t.cost)
            return float(cost)
        res = entropic_cost(hl, hr, t.cost, t.lam)
        return float(res.reg_cost)

    def energy(self, x: np.ndarray) -> float:
        total = 0.0
        for name in self.field_order:
            f = self.fields[name]
            u = x[self.primal_slices[name]].reshape(f.height, f.width)
            total += f.rho * tv(u)
            if f.balloon:
                total -= f.balloon * float(np.abs(u).sum())
        for t in self.terms:
            total += self.term_energy(t, x)
        return float(total)

    def init_primal(self, field_value: float | dict = 0.5) -> np.ndarray:
        x = np.zeros(self.n_primal)
        for name in self.field_order:
            f = self.fields[name]
            val = field_value.get(name, 0.5) if isinstance(field_value, dict) \
                else field_value
            block = np.zeros(f.n_total)
            block[f.real_idx] = val
            x[self.primal_slices[name]] = block
        return x

    def field_map(self, x: np.ndarray, name: str) -> np.ndarray:
        """The unpadded (interior) 2-d map of one field."""
        f = self.fields[name]
        full = x[self.primal_slices[name]].reshape(f.height, f.width)
        return full[1:-1, 1:-1] if f.padded else full

    def build_problem(self, track_energy: bool = False) -> SegProblem:
        return SegProblem(
            n_primal=self.n_primal,
            n_dual=self.n_dual,
            apply_K=self.apply_K,
            apply_Kt=self.apply_Kt,
            prox_R=self.prox_primal,
            prox_Fstar=self.prox_dual,
            grad_T=self.grad_T if self._needs_grad_T() else None,
            grad_Gstar=self.grad_Gstar if self._needs_grad_Gstar() else None,
            L_T=0.0,
            L_Gstar=self.L_Gstar(),
            abs_row_sums=self.abs_row_sums(),
            abs_col_sums=self.abs_col_sums(),
            smooth_dual_rows=self.smooth_dual_rows(),
            energy=self.energy if track_energy else None,
        )
