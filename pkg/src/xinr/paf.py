"""Probabilistic affine forms and their propagation through the model.

A PAF represents a random vector as center + sum_i coeff_i * Z_i over
standardized independent noise symbols (mean 0, variance 1).  Primary
symbols carry the ranged input axes and are shared across independent
propagations, which is what makes covariance between spatial positions a
plain sum of coefficient products.  Fresh symbols absorb approximation
error (interpolation residual over a range, product remainder, activation
linearization) and are never shared across positions.

Symbols are treated as iid standard Gaussian for every moment computation
past the input layer: intermediate PAFs accumulate many independent terms
and the closed-form ReLU linearization requires a Gaussian input anyway.

Three bookkeeping modes:

* "exact"        - every fresh symbol is an explicit coefficient column;
                   linear layers then preserve mean and covariance exactly.
* "condensed"    - element-local fresh symbols are merged per element into
                   a running variance vector; linear layers propagate its
                   diagonal, dropping fresh-fresh cross-element covariance
                   (primary columns stay exact).  This keeps the per-query
                   state O(width) and is the field-scale fast path.
* "shared_input" - fresh symbols born from input ranges and feature
                   products stay explicit (they are functions of the same
                   parameter draw at every position, so correlation fields
                   must treat them as shared); activation-linearization
                   fresh symbols are genuinely position-local and stay
                   condensed.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import range_stats as rs
from .model import (DomainError, ExplorableModel, PLANE_AXES, _structure_table,
                    fuse_params, fuse_spatial, interpolate, spatial_structures,
                    structure_res)
from .region import POINT, RANGE, QueryRegion, RegionError

__all__ = [
    "NoiseSymbolRegistry", "PAF", "GaussianSummary", "PafError",
    "deterministic_paf", "paf_linear", "paf_hadamard", "paf_add",
    "paf_activation", "paf_concat", "summarize",
    "paf_covariance", "paf_pearson",
    "paf_from_range", "propagate", "propagate_normalized", "propagate_points",
]

EXACT = "exact"
CONDENSED = "condensed"
SHARED_INPUT = "shared_input"
PRUNE_TOL = 1e-12


class PafError(ValueError):
    pass


class NoiseSymbolRegistry:
    """Stable primary symbol ids 1..n_axes plus an atomic fresh-id counter."""

    def __init__(self, n_axes: int):
        self.n_axes = n_axes
        self._next = n_axes + 1
        self._lock = threading.Lock()

    def primary_id(self, axis: int) -> int:
        return axis + 1

    def fresh_ids(self, n: int) -> np.ndarray:
        with self._lock:
            ids = np.arange(self._next, self._next + n, dtype=np.int64)
            self._next += n
        return ids


@dataclass
class GaussianSummary:
    """Gaussian read-out of a scalar output PAF: sigma^2 = sum coeff^2."""

    mu: object
    sigma: object

    def as_floats(self):
        return float(ad.value_of(self.mu)), float(ad.value_of(self.sigma))


@dataclass
class PAF:
    """center [..., k]; primary coefficients [..., k, Mr]; fresh blocks.

    primary_ids maps primary columns to registry symbol ids.  blocks hold
    explicitly tracked fresh symbols (exact mode); local_var holds the
    merged per-element fresh variance (condensed mode).
    """

    center: object
    primary: object = None                 # [..., k, Mr] or None
    primary_ids: np.ndarray | None = None  # [Mr]
    blocks: list = field(default_factory=list)   # (ids [T], coeff [..., k, T])
    local_var: object = None               # [..., k] or None
    registry: NoiseSymbolRegistry | None = None

    @property
    def k(self) -> int:
        return ad.value_of(self.center).shape[-1]

    def var(self):
        """Per-element variance: sum of squared coefficients over all symbols."""
        total = None
        if self.primary is not None:
            total = ad.vsum(ad.square(self.primary), axis=-1)
        for _, coeff in self.blocks:
            t = ad.vsum(ad.square(coeff), axis=-1)
            total = t if total is None else total + t
        if self.local_var is not None:
            total = self.local_var if total is None else total + self.local_var
        if total is None:
            total = np.zeros_like(ad.value_of(self.center))
        return total

    def sigma(self):
        return _safe_sqrt(self.var())

    def is_deterministic(self) -> bool:
        return (self.primary is None and not self.blocks
                and self.local_var is None)


def _safe_sqrt(v):
    """sqrt with zero-safe gradient: exact 0 where v <= 0."""
    raw = ad.value_of(v)
    mask = raw > 0.0
    if not isinstance(v, ad.Var):
        return np.sqrt(np.where(mask, raw, 0.0))
    inner = ad.where(mask, v, np.ones_like(raw))
    return ad.where(mask, ad.sqrt(inner), np.zeros_like(raw))


def deterministic_paf(center, registry=None) -> PAF:
    return PAF(center=center, registry=registry)


def _zeros_like_center(paf: PAF, tail=()):
    base = ad.value_of(paf.center)
    return np.zeros(base.shape + tail, dtype=np.float64)


# ----------------------------------------------------------------------
# affine arithmetic through the network
# ----------------------------------------------------------------------

def _mat_cols(w: np.ndarray, coeff):
    """w [ko, k] applied to every coefficient column: [..., k, T] -> [..., ko, T]."""
    v = ad.value_of(coeff)
    if v.ndim == 2:
        return ad.matmul(w, coeff)
    lead = v.shape[:-2]
    k, t = v.shape[-2:]
    x = ad.moveaxis(coeff, -2, 0)
    x = ad.reshape(x, (k, -1))
    y = ad.matmul(w, x)
    y = ad.reshape(y, (w.shape[0],) + lead + (t,))
    return ad.moveaxis(y, 0, -2)


def paf_linear(w: np.ndarray, b: np.ndarray, paf: PAF, mode: str = EXACT) -> PAF:
    """Affine layer: center -> W center + B, every column -> W column.

    Introduces no new symbols.  Exact mode requires explicit blocks only;
    condensed mode pushes the merged fresh variance through W elementwise
    squared (exact diagonal for one layer, then an approximation).
    """
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.shape[1] != ad.value_of(paf.center).shape[-1]:
        raise PafError(f"weight shape {w.shape} does not match PAF width {paf.k}")
    center = ad.matmul(paf.center, w.T) + b
    primary = _mat_cols(w, paf.primary) if paf.primary is not None else None
    blocks = [(ids, _mat_cols(w, coeff)) for ids, coeff in paf.blocks]
    local_var = None
    if paf.local_var is not None:
        local_var = ad.matmul(paf.local_var, (w * w).T)
    return PAF(center=center, primary=primary, primary_ids=paf.primary_ids,
               blocks=blocks, local_var=local_var, registry=paf.registry)


def _add_fresh(paf: PAF, variance, mode: str, origin: str = "input") -> PAF:
    """Attach per-element fresh symbols with the given variance [..., k].

    origin names the approximation that created the symbols ("input",
    "product", or "activation"); shared_input mode keeps the first two
    explicit and condenses only activation error.
    """
    raw = ad.value_of(variance)
    if np.max(raw) <= PRUNE_TOL ** 2 and not isinstance(variance, ad.Var):
        return paf
    explicit = mode == EXACT or (mode == SHARED_INPUT
                                 and origin in ("input", "product"))
    if not explicit:
        lv = variance if paf.local_var is None else paf.local_var + variance
        return PAF(center=paf.center, primary=paf.primary, primary_ids=paf.primary_ids,
                   blocks=paf.blocks, local_var=lv, registry=paf.registry)
    k = raw.shape[-1]
    ids = paf.registry.fresh_ids(k) if paf.registry is not None else np.arange(k)
    coeff = _diag_embed(_safe_sqrt(variance))
    return PAF(center=paf.center, primary=paf.primary, primary_ids=paf.primary_ids,
               blocks=paf.blocks + [(ids, coeff)], local_var=paf.local_var,
               registry=paf.registry)


def _diag_embed(v):
    """[..., k] -> [..., k, k] with v on the diagonal."""
    if not isinstance(v, ad.Var):
        raw = np.asarray(v)
        out = np.zeros(raw.shape + (raw.shape[-1],), dtype=raw.dtype)
        idx = np.arange(raw.shape[-1])
        out[..., idx, idx] = raw
        return out

    def fwd(values, slot=v.slot):
        raw = values[slot]
        out = np.zeros(raw.shape + (raw.shape[-1],), dtype=raw.dtype)
        idx = np.arange(raw.shape[-1])
        out[..., idx, idx] = raw
        return out

    def bwd(g, values):
        idx = np.arange(g.shape[-1])
        return (g[..., idx, idx],)

    return v.tape._apply("diag_embed", fwd, bwd, (v,))


def _shared_cov(a: PAF, b: PAF):
    """Per-element covariance from shared symbol ids: sum coeff_a * coeff_b."""
    total = None
    if a.primary is not None and b.primary is not None:
        ia = {int(s): i for i, s in enumerate(a.primary_ids)}
        cols_a, cols_b = [], []
        for j, s in enumerate(b.primary_ids):
            if int(s) in ia:
                cols_a.append(ia[int(s)])
                cols_b.append(j)
        if cols_a:
            pa = a.primary[..., :, cols_a]
            pb = b.primary[..., :, cols_b]
            total = ad.vsum(pa * pb, axis=-1)
    for ids_a, ca in a.blocks:
        for ids_b, cb in b.blocks:
            common, ix_a, ix_b = np.intersect1d(ids_a, ids_b, return_indices=True)
            if common.size:
                t = ad.vsum(ca[..., :, ix_a] * cb[..., :, ix_b], axis=-1)
                total = t if total is None else total + t
    return total


def _align_primary(a: PAF, b: PAF):
    """Common primary layout for two PAFs so columns can be added."""
    if a.primary is None and b.primary is None:
        return None, None, None
    ids_list = []
    for p in (a, b):
        if p.primary_ids is not None:
            ids_list.append(np.asarray(p.primary_ids))
    all_ids = np.unique(np.concatenate(ids_list))

    def expand(p: PAF):
        if p.primary is None:
            return None
        cols = {int(s): i for i, s in enumerate(p.primary_ids)}
        if len(all_ids) == len(cols) and all(int(s) in cols for s in all_ids):
            order = [cols[int(s)] for s in all_ids]
            if order == list(range(len(all_ids))):
                return p.primary
            return p.primary[..., :, order]
        parts = []
        zero = None
        for s in all_ids:
            if int(s) in cols:
                parts.append(p.primary[..., :, cols[int(s)]])
            else:
                if zero is None:
                    zero = np.zeros(ad.value_of(p.center).shape, dtype=np.float64)
                parts.append(zero)
        return ad.stack(parts, axis=-1)

    return expand(a), expand(b), all_ids


def paf_add(a: PAF, b: PAF) -> PAF:
    """Exact sum of two PAFs; shared symbols add coefficient-wise."""
    pa, pb, ids = _align_primary(a, b)
    if pa is not None and pb is not None:
        primary = pa + pb
    else:
        primary = pa if pa is not None else pb
    lv = None
    if a.local_var is not None or b.local_var is not None:
        la = a.local_var if a.local_var is not None else 0.0
        lb = b.local_var if b.local_var is not None else 0.0
        lv = la + lb
    return PAF(center=a.center + b.center, primary=primary, primary_ids=ids,
               blocks=list(a.blocks) + list(b.blocks), local_var=lv,
               registry=a.registry or b.registry)


def paf_hadamard(a: PAF, b: PAF, mode: str = EXACT) -> PAF:
    """Element-wise product with exact first two moments under iid N(0,1).

    With A, B the fluctuation parts (variances va, vb, shared covariance c)
    the product has mean a0 b0 + c, linear coefficients a0 b_i + b0 a_i per
    symbol, and a fresh per-element remainder of variance va vb + c^2.
    Deterministic all-ones b returns a unchanged.
    """
    if ad.value_of(a.center).shape[-1] != ad.value_of(b.center).shape[-1]:
        raise PafError("hadamard requires equal PAF widths")
    a0, b0 = a.center, b.center
    c = _shared_cov(a, b)
    center = a0 * b0 if c is None else a0 * b0 + c

    pa, pb, ids = _align_primary(a, b)
    primary = None
    if pa is not None and pb is not None:
        primary = _scale_cols(pa, b0) + _scale_cols(pb, a0)
    elif pa is not None:
        primary = _scale_cols(pa, b0)
    elif pb is not None:
        primary = _scale_cols(pb, a0)

    blocks = [(bids, _scale_cols(coeff, b0)) for bids, coeff in a.blocks]
    blocks += [(bids, _scale_cols(coeff, a0)) for bids, coeff in b.blocks]

    lv = None
    if a.local_var is not None or b.local_var is not None:
        la = a.local_var if a.local_var is not None else 0.0
        lb = b.local_var if b.local_var is not None else 0.0
        lv = ad.square(b0) * la + ad.square(a0) * lb

    va, vb = a.var(), b.var()
    remainder = va * vb if c is None else va * vb + ad.square(c)
    out = PAF(center=center, primary=primary, primary_ids=ids, blocks=blocks,
              local_var=lv, registry=a.registry or b.registry)
    return _add_fresh(out, remainder, mode, origin="product")


def _scale_cols(coeff, s):
    """Scale every coefficient column by the per-element vector s [..., k]."""
    if isinstance(s, ad.Var) or isinstance(coeff, ad.Var):
        s3 = ad.reshape(s, (*ad.value_of(s).shape, 1)) if isinstance(s, ad.Var) else np.asarray(s)[..., None]
        return ad.mul(coeff, s3)
    return coeff * np.asarray(s)[..., None]


def paf_activation(paf: PAF, activation: str, mode: str = EXACT) -> PAF:
    """Least-squares linear fit of the activation under N(mu, sigma^2).

    identity passes through.  relu per element: slope a = Phi(mu/sigma),
    new center E[ReLU] = mu Phi(z) + sigma phi(z), plus one fresh symbol
    of variance Var[ReLU] - a^2 sigma^2 where
    Var[ReLU] = (mu^2 + sigma^2) Phi(z) + mu sigma phi(z) - E^2.
    sigma = 0 elements reduce to a pointwise relu with no fresh symbol.
    """
    if activation == "identity":
        return paf
    if activation != "relu":
        raise PafError(f"unsupported activation '{activation}'")
    mu = paf.center
    var = paf.var()
    raw_var = ad.value_of(var)
    mask = raw_var > 0.0
    sigma = _safe_sqrt(var)

    raw_mu = ad.value_of(mu)
    safe_sigma = ad.where(mask, sigma, np.ones_like(raw_var))
    z = mu / safe_sigma
    big_phi = ad.norm_cdf(z)
    small_phi = ad.norm_pdf(z)
    mean_relu = mu * big_phi + sigma * small_phi
    second_relu = (ad.square(mu) + var) * big_phi + mu * sigma * small_phi
    var_relu = second_relu - ad.square(mean_relu)

    det_slope = (raw_mu > 0.0).astype(np.float64)
    slope = ad.where(mask, big_phi, det_slope)
    center = ad.where(mask, mean_relu, _relu_raw(mu, raw_mu))
    fresh = ad.where(mask, var_relu - ad.square(slope) * var, np.zeros_like(raw_var))
    fresh = ad.vmax(fresh, np.zeros_like(raw_var))

    primary = _scale_cols(paf.primary, slope) if paf.primary is not None else None
    blocks = [(ids, _scale_cols(coeff, slope)) for ids, coeff in paf.blocks]
    lv = ad.square(slope) * paf.local_var if paf.local_var is not None else None
    out = PAF(center=center, primary=primary, primary_ids=paf.primary_ids,
              blocks=blocks, local_var=lv, registry=paf.registry)
    return _add_fresh(out, fresh, mode, origin="activation")


def _relu_raw(mu, raw_mu):
    if isinstance(mu, ad.Var):
        return ad.relu(mu)
    return np.maximum(raw_mu, 0.0)


def paf_concat(a: PAF, b: PAF) -> PAF:
    """Concatenate two PAFs along the element axis (independent halves)."""
    ka = ad.value_of(a.center).shape
    kb = ad.value_of(b.center).shape
    shape = np.broadcast_shapes(ka[:-1], kb[:-1])
    ca = _bcast(a.center, shape + (ka[-1],))
    cb = _bcast(b.center, shape + (kb[-1],))
    center = ad.concat([ca, cb], axis=-1)

    pa, pb, ids = _align_primary(a, b)
    primary = None
    if ids is not None:
        mr = len(ids)
        za = np.zeros(shape + (ka[-1], mr)) if pa is None else _bcast(pa, shape + (ka[-1], mr))
        zb = np.zeros(shape + (kb[-1], mr)) if pb is None else _bcast(pb, shape + (kb[-1], mr))
        primary = ad.concat([za, zb], axis=-2)

    blocks = []
    for ids_blk, coeff in a.blocks:
        t = ad.value_of(coeff).shape[-1]
        pad = np.zeros(shape + (kb[-1], t))
        blocks.append((ids_blk, ad.concat([_bcast(coeff, shape + (ka[-1], t)), pad], axis=-2)))
    for ids_blk, coeff in b.blocks:
        t = ad.value_of(coeff).shape[-1]
        pad = np.zeros(shape + (ka[-1], t))
        blocks.append((ids_blk, ad.concat([pad, _bcast(coeff, shape + (kb[-1], t))], axis=-2)))

    lv = None
    if a.local_var is not None or b.local_var is not None:
        la = a.local_var if a.local_var is not None else np.zeros(ka)
        lb = b.local_var if b.local_var is not None else np.zeros(kb)
        lv = ad.concat([_bcast(la, shape + (ka[-1],)), _bcast(lb, shape + (kb[-1],))], axis=-1)
    return PAF(center=center, primary=primary, primary_ids=ids, blocks=blocks,
               local_var=lv, registry=a.registry or b.registry)


def _bcast(x, shape):
    if isinstance(x, ad.Var):
        if ad.value_of(x).shape == tuple(shape):
            return x
        return x + np.zeros(shape)
    return np.broadcast_to(np.asarray(x), shape)


def summarize(paf: PAF) -> GaussianSummary:
    """Gaussian summary of a scalar output PAF (normalized value space)."""
    if paf.k != 1:
        raise PafError("summary requires a scalar output PAF")
    return GaussianSummary(mu=paf.center[..., 0], sigma=_safe_sqrt(paf.var())[..., 0])


def paf_covariance(a: PAF, b: PAF):
    """Covariance of two scalar output PAFs: sum over shared symbol ids.

    Self-covariance sums every symbol (the variance); distinct
    propagations share only the primary symbols.
    """
    if a.registry is not None and b.registry is not None and a.registry is not b.registry:
        raise PafError("covariance requires PAFs from the same registry")
    if a.k != 1 or b.k != 1:
        raise PafError("covariance requires scalar output PAFs")
    if a is b:
        return a.var()[..., 0]
    cov = _shared_cov(a, b)
    if cov is None:
        shape = np.broadcast_shapes(ad.value_of(a.center).shape, ad.value_of(b.center).shape)
        return np.zeros(shape)[..., 0]
    return cov[..., 0]


def paf_pearson(a: PAF, b: PAF):
    """Pearson correlation cov/(sigma_a sigma_b), clamped to [-1, 1]."""
    sa = ad.value_of(a.sigma())[..., 0]
    sb = ad.value_of(b.sigma())[..., 0]
    if np.any(sa <= 0.0) or np.any(sb <= 0.0):
        raise PafError("correlation undefined for zero-sigma PAF")
    if a is b:
        return np.ones(np.shape(sa)) if np.shape(sa) else 1.0
    rho = ad.value_of(paf_covariance(a, b)) / (sa * sb)
    return np.clip(rho, -1.0, 1.0)


# ----------------------------------------------------------------------
# range query -> input PAFs -> output summary
# ----------------------------------------------------------------------

_WINDOW_THRESHOLD = 24    # window structure axes finer than this


def _locate_point(x, res: int, name: str):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < -1.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise DomainError(name)
    h = 2.0 / (res - 1)
    j = np.minimum(((x + 1.0) / h).astype(np.int64), res - 2)
    t = (x - (-1.0 + j * h)) / h
    return j, t


def _structure_range_paf(table: np.ndarray, res_list: list, axis_specs: list,
                         global_axes: list, names: list,
                         registry: NoiseSymbolRegistry, mode: str) -> PAF:
    """Input PAF of one feature structure over a (possibly ranged) query.

    Per ranged axis: primary coefficient = signed covariance with the
    standardized input; a per-channel fresh symbol carries the residual
    sqrt(var - sum beta^2).  Point axes contribute plain interpolation
    weights.  Exact for the first two moments in every case.
    """
    if all(spec[0] == POINT for spec in axis_specs):
        coords = np.stack([np.asarray(spec[1], dtype=np.float64) for spec in axis_specs], axis=-1)
        feat = interpolate(table, res_list, np.atleast_2d(coords), names)
        if np.ndim(coords) == 1:
            feat = feat[0]
        return deterministic_paf(feat, registry)

    weights, starts, nvs, ranged_local = [], [], [], []
    for a, spec in enumerate(axis_specs):
        res = res_list[a]
        if spec[0] == POINT:
            j, t = _locate_point(spec[1], res, names[a])
            weights.append(rs.axis_point_weights(res, t, j))
            starts.append(j)
            nvs.append(2)
        else:
            lo, hi = spec[1], spec[2]
            lo_raw = float(np.min(ad.value_of(lo)))
            hi_raw = float(np.max(ad.value_of(hi)))
            if lo_raw < -1.0 - 1e-9 or hi_raw > 1.0 + 1e-9:
                raise DomainError(names[a])
            if res > _WINDOW_THRESHOLD:
                start, n = rs.axis_window(res, ad.value_of(lo), ad.value_of(hi))
            else:
                start, n = 0, res
            weights.append(rs.axis_range_weights(res, lo, hi, window=(start, n)))
            starts.append(start)
            nvs.append(n)
            ranged_local.append(a)

    # windowed vertex gather (constant features, constant indices)
    d = len(axis_specs)
    strides = np.cumprod([1] + res_list[::-1][:-1])[::-1].astype(np.int64)
    flat = None
    for a in range(d):
        vidx = np.asarray(starts[a])[..., None] + np.arange(nvs[a], dtype=np.int64)
        shape = [1] * d
        shape[a] = nvs[a]
        vidx = vidx.reshape(vidx.shape[:-1] + tuple(shape))
        part = vidx * strides[a]
        flat = part if flat is None else flat + part
    v = table[flat]                                           # [..., W0..Wd-1, C]

    mean, second, betas = rs.box_moments(v, weights)
    var = second - ad.square(mean)
    cols, ids = [], []
    for a in ranged_local:
        beta = betas[a]
        cols.append(beta)
        ids.append(registry.primary_id(global_axes[a]))
        var = var - ad.square(beta)
    zeros = np.zeros_like(ad.value_of(mean))
    var = ad.vmax(var, zeros)
    # zero out cancellation noise so exactly-affine restrictions carry no
    # fresh symbols (true residual 0, float arithmetic leaves ~1e-19)
    noise = 1e-15 * max(1.0, float(np.max(np.abs(ad.value_of(second)))))
    var = ad.where(ad.value_of(var) > noise, var, zeros)

    primary = ad.stack(cols, axis=-1) if cols else None
    out = PAF(center=mean, primary=primary,
              primary_ids=np.asarray(ids, dtype=np.int64) if ids else None,
              registry=registry)

    # 1-D restrictions (untaped, explicit-fresh modes): the residual has an
    # exact cross-channel covariance; factorizing it instead of assuming
    # per-channel independence removes the variance inflation that channel
    # cancellations would otherwise hide, and lets correlation fields share
    # the residual symbols across positions
    taped = any(isinstance(x, (ad.Var,))
                for spec in axis_specs for x in spec[1:])
    if (d == 1 and len(ranged_local) == 1 and mode != CONDENSED
            and not taped and noise < np.inf):
        ffT = rs.cross_second_moment(v, weights[0])
        mean_r = np.asarray(ad.value_of(mean))
        beta_r = np.asarray(ad.value_of(betas[ranged_local[0]]))
        resid = ffT - np.outer(mean_r, mean_r) - np.outer(beta_r, beta_r)
        resid = 0.5 * (resid + resid.T)
        lam, vecs = np.linalg.eigh(resid)
        keep = lam > max(noise, 1e-14 * max(lam.max(initial=0.0), 1.0))
        if keep.any():
            coeff = vecs[:, keep] * np.sqrt(lam[keep])
            fresh_ids = registry.fresh_ids(int(keep.sum())) \
                if registry is not None else np.arange(int(keep.sum()))
            out = PAF(center=out.center, primary=out.primary,
                      primary_ids=out.primary_ids,
                      blocks=out.blocks + [(fresh_ids, coeff)],
                      local_var=out.local_var, registry=registry)
        return out
    return _add_fresh(out, var, mode)


def _fuse_pafs(pafs: list, fusion: str, mode: str) -> PAF:
    out = None
    for p in pafs:
        if out is None:
            out = p
        elif fusion == "hadamard":
            out = paf_hadamard(out, p, mode)
        else:
            out = paf_add(out, p)
    return out


def input_pafs(model: ExplorableModel, spatial, param_specs: list,
               registry: NoiseSymbolRegistry, mode: str = EXACT) -> dict:
    """Per-structure input PAFs for a normalized query.

    spatial: either ("points", X [B, 3] ndarray) for deterministic spatial
    batches, or a list of 3 normalized axis specs (values may be taped).
    param_specs: m normalized axis specs.
    """
    m64 = model.as_f64()
    out: dict[str, PAF] = {}
    if isinstance(spatial, tuple) and spatial[0] == "points":
        pts = np.asarray(spatial[1], dtype=np.float64)
        for sname, axes in spatial_structures(model):
            coords = pts[..., list(axes)]
            feat = interpolate(_structure_table(m64, sname), structure_res(model, sname),
                               coords, [model.domain.spatial_names[a] for a in axes])
            out[sname] = deterministic_paf(feat, registry)
    else:
        for sname, axes in spatial_structures(model):
            specs = [spatial[a] for a in axes]
            names = [model.domain.spatial_names[a] for a in axes]
            out[sname] = _structure_range_paf(
                _structure_table(m64, sname), structure_res(model, sname),
                specs, list(axes), names, registry, mode)
    for i, spec in enumerate(param_specs):
        sname = f"line_{i}"
        out[sname] = _structure_range_paf(
            _structure_table(m64, sname), structure_res(model, sname),
            [spec], [3 + i], [model.domain.param_names[i]], registry, mode)
    return out


def prepare_param_paf(model: ExplorableModel, param_specs: list,
                      registry: NoiseSymbolRegistry, mode: str = EXACT) -> PAF:
    """Fused parameter-chain PAF, reusable across spatial batches.

    Batched field queries share one parameter region; building this once
    keeps its fresh-symbol ids stable across evaluation chunks, which is
    what lets correlation fields treat input residuals as shared.
    """
    m64 = model.as_f64()
    chain = []
    for i, spec in enumerate(param_specs):
        sname = f"line_{i}"
        chain.append(_structure_range_paf(
            _structure_table(m64, sname), structure_res(model, sname),
            [spec], [3 + i], [model.domain.param_names[i]], registry, mode))
    return _fuse_pafs(chain, model.arch.fusion, mode)


def paf_from_range(model: ExplorableModel, region: QueryRegion,
                   registry: NoiseSymbolRegistry | None = None,
                   mode: str = EXACT) -> dict:
    """Input PAFs per feature structure for a physical-unit region."""
    region.validate(model.domain)
    if registry is None:
        registry = NoiseSymbolRegistry(3 + model.arch.n_params_m)
    nspatial = region.normalized_spatial(model.domain)
    nparams = region.normalized_params(model.domain)
    if nspatial is None:
        nspatial = [(RANGE, -1.0, 1.0)] * 3
    return input_pafs(model, nspatial, nparams, registry, mode)


def _decode_paf(model: ExplorableModel, paf: PAF, mode: str):
    m64 = model.as_f64()
    n = len(m64.decoder.weights)
    for i in range(n):
        paf = paf_linear(m64.decoder.weights[i], m64.decoder.biases[i], paf, mode)
        if i < n - 1:
            paf = paf_activation(paf, model.arch.activation, mode)
    return summarize(paf), paf


def propagate_normalized(model: ExplorableModel, spatial, param_specs: list,
                         registry: NoiseSymbolRegistry | None = None,
                         mode: str = EXACT, param_paf: PAF | None = None):
    """Full pipeline on normalized specs: input PAFs -> fuse -> decoder.

    Returns (GaussianSummary, output PAF) in normalized value space.
    Differentiable w.r.t. any taped range bounds in the specs.  A
    pre-built param_paf (from prepare_param_paf) is reused when given.
    """
    if registry is None:
        registry = NoiseSymbolRegistry(3 + model.arch.n_params_m)
    m64 = model.as_f64()
    if isinstance(spatial, tuple) and spatial[0] == "points":
        pts = np.asarray(spatial[1], dtype=np.float64)
        chain = []
        for sname, axes in spatial_structures(model):
            feat = interpolate(_structure_table(m64, sname), structure_res(model, sname),
                               pts[..., list(axes)],
                               [model.domain.spatial_names[a] for a in axes])
            chain.append(deterministic_paf(feat, registry))
        fs = _fuse_pafs(chain, model.arch.fusion, mode)
    else:
        chain = []
        for sname, axes in spatial_structures(model):
            specs = [spatial[a] for a in axes]
            names = [model.domain.spatial_names[a] for a in axes]
            chain.append(_structure_range_paf(
                _structure_table(m64, sname), structure_res(model, sname),
                specs, list(axes), names, registry, mode))
        fs = _fuse_pafs(chain, model.arch.fusion, mode)
    if param_paf is None:
        param_paf = prepare_param_paf(model, param_specs, registry, mode)
    paf = paf_concat(fs, param_paf)
    return _decode_paf(model, paf, mode)


def propagate(model: ExplorableModel, region: QueryRegion,
              registry: NoiseSymbolRegistry | None = None,
              mode: str = EXACT):
    """Propagate a physical-unit region (spatial part required)."""
    region.validate(model.domain)
    if region.spatial is None:
        raise RegionError("propagate needs a spatial point or box; "
                          "field operations supply the spatial part per voxel")
    nspatial = region.normalized_spatial(model.domain)
    nparams = region.normalized_params(model.domain)
    return propagate_normalized(model, nspatial, nparams, registry, mode)


def propagate_points(model: ExplorableModel, points_norm: np.ndarray,
                     param_specs: list,
                     registry: NoiseSymbolRegistry | None = None,
                     mode: str = CONDENSED, param_paf: PAF | None = None):
    """Batch propagation at fixed spatial points with ranged parameters."""
    return propagate_normalized(model, ("points", np.asarray(points_norm)),
                                param_specs, registry, mode, param_paf=param_paf)


def scalar_coefficients(paf: PAF):
    """All explicit coefficient columns of a scalar-output PAF: [..., T].

    Columns concatenate the primary block and every fresh block in
    construction order; the order is deterministic for a fixed pipeline,
    so rows of one batched propagation share columns symbol-by-symbol.
    """
    if paf.k != 1:
        raise PafError("scalar_coefficients requires a scalar output PAF")
    parts = []
    if paf.primary is not None:
        parts.append(np.asarray(ad.value_of(paf.primary))[..., 0, :])
    for _, coeff in paf.blocks:
        parts.append(np.asarray(ad.value_of(coeff))[..., 0, :])
    if not parts:
        shape = ad.value_of(paf.center).shape[:-1]
        return np.zeros(shape + (0,))
    return np.concatenate(parts, axis=-1)
