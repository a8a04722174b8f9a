"""Inverse search: fit a region so its propagated Gaussian matches a target.

The optimizable box is parametrized by center and scale, x_s = x_sqrt^2 +
beta with a fixed minimum scale beta > 0, and mapped through tanh:
x_min = tanh(x_c - x_s), x_max = tanh(x_c + x_s).  Any real-valued state
therefore yields a valid box strictly inside (-1, 1).

The loop runs plain gradient descent on a KL (or JS) divergence computed
in normalized value space; whenever the divergence drops below the keep
threshold the state is recorded as a candidate and the learning rate is
multiplied by 10 to escape the local minimum.  Restarts run batched
through one tape.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from . import paf as pf
from .region import POINT, RANGE, QueryRegion

__all__ = [
    "TargetDistribution", "SearchOptions", "SearchState", "Candidate",
    "kl_gaussian", "kl_histogram", "js_divergence", "search",
    "divergence_of_region", "SearchAbort",
]

Q_FLOOR = 1e-12
LN2 = float(np.log(2.0))


class SearchAbort(RuntimeError):
    pass


@dataclass
class TargetDistribution:
    """Gaussian {mu, sigma} or histogram {edges, counts}, physical units."""

    mu: float | None = None
    sigma: float | None = None
    edges: np.ndarray | None = None
    counts: np.ndarray | None = None

    def __post_init__(self):
        if self.is_gaussian():
            if self.sigma is None or self.sigma <= 0:
                raise ValueError("gaussian target needs sigma > 0")
        else:
            self.edges = np.asarray(self.edges, dtype=np.float64)
            self.counts = np.asarray(self.counts, dtype=np.float64)
            if self.edges.ndim != 1 or self.edges.size != self.counts.size + 1:
                raise ValueError("histogram needs len(edges) == len(counts) + 1")
            if np.any(np.diff(self.edges) <= 0):
                raise ValueError("histogram edges must be strictly increasing")
            if np.any(self.counts < 0) or self.counts.sum() <= 0:
                raise ValueError("histogram counts must be >= 0 with positive total")

    def is_gaussian(self) -> bool:
        return self.mu is not None

    def normalized(self, domain) -> "TargetDistribution":
        scale = domain.value_scale()
        if self.is_gaussian():
            return TargetDistribution(mu=float(domain.normalize_value(self.mu)),
                                      sigma=float(self.sigma) / scale)
        return TargetDistribution(edges=domain.normalize_value(self.edges),
                                  counts=self.counts.copy())

    @classmethod
    def from_json(cls, doc: dict) -> "TargetDistribution":
        if "gaussian" in doc:
            g = doc["gaussian"]
            return cls(mu=float(g["mu"]), sigma=float(g["sigma"]))
        if "histogram" in doc:
            h = doc["histogram"]
            return cls(edges=np.asarray(h["edges"], dtype=np.float64),
                       counts=np.asarray(h["counts"], dtype=np.float64))
        raise ValueError("target must contain 'gaussian' or 'histogram'")

    def to_json(self) -> dict:
        if self.is_gaussian():
            return {"gaussian": {"mu": self.mu, "sigma": self.sigma}}
        return {"histogram": {"edges": self.edges.tolist(),
                              "counts": self.counts.tolist()}}


# ----------------------------------------------------------------------
# divergences (normalized value space)
# ----------------------------------------------------------------------

def kl_gaussian(mu, sigma, target: TargetDistribution):
    """ln(sigma/sigma_t) + (sigma_t^2 + (mu_t - mu)^2) / (2 sigma^2) - 1/2."""
    if np.any(ad.value_of(sigma) <= 0.0):
        raise ValueError("kl_gaussian needs sigma > 0")
    st, mt = target.sigma, target.mu
    return (ad.log(sigma / st)
            + (st * st + ad.square(mt - mu)) / (2.0 * ad.square(sigma))
            - 0.5)


def _gauss_bin_mass(mu, sigma, edges: np.ndarray):
    """Probability mass per bin via density at the bin center times width."""
    centers = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)
    mu_e = _tail_expand(mu)
    sig_e = _tail_expand(sigma)
    z = (centers - mu_e) / sig_e
    return widths * ad.norm_pdf(z) / sig_e


def _tail_expand(x):
    """Append a broadcast axis so per-restart scalars meet per-bin vectors."""
    shape = np.shape(ad.value_of(x))
    if isinstance(x, ad.Var):
        return ad.reshape(x, shape + (1,))
    return np.reshape(np.asarray(x, dtype=np.float64), shape + (1,))


def kl_histogram(mu, sigma, target: TargetDistribution):
    """Sum over positive-count bins of p ln(p/q), q floored at 1e-12."""
    if np.any(ad.value_of(sigma) <= 0.0):
        raise ValueError("kl_histogram needs sigma > 0")
    p = target.counts / target.counts.sum()
    keep = np.nonzero(p > 0)[0]
    q = _gauss_bin_mass(mu, sigma, target.edges)
    q = ad.vmax(q, np.full(target.counts.shape, Q_FLOOR))
    logq = ad.log(q[..., keep])
    contrib = p[keep] * (np.log(p[keep]) - logq)
    return ad.vsum(contrib, axis=-1)


def js_divergence(mu, sigma, target: TargetDistribution, bins: int = 256):
    """Jensen-Shannon divergence on a shared bin grid, in [0, ln 2].

    Gaussian targets are discretized to `bins` bins over a grid covering
    both distributions (target's +-6 sigma union output's) so the measure
    is symmetric under argument swap; mass falling outside the grid enters
    each KL term at its limiting value ln 2 per unit mass.
    """
    mu_raw = float(np.mean(ad.value_of(mu)))
    sig_raw = float(np.mean(ad.value_of(sigma)))
    if target.is_gaussian():
        lo = min(target.mu - 6 * target.sigma, mu_raw - 6 * sig_raw)
        hi = max(target.mu + 6 * target.sigma, mu_raw + 6 * sig_raw)
        edges = np.linspace(lo, hi, bins + 1)
        centers = 0.5 * (edges[:-1] + edges[1:])
        widths = np.diff(edges)
        zt = (centers - target.mu) / target.sigma
        p = widths * np.exp(-0.5 * zt * zt) / (target.sigma * np.sqrt(2 * np.pi))
    else:
        edges = target.edges
        p = target.counts / target.counts.sum()
    q = _gauss_bin_mass(mu, sigma, edges)

    p_missing = max(1.0 - float(p.sum()), 0.0)
    q_tot = ad.vsum(q, axis=-1)
    q_missing = ad.vmax(1.0 - q_tot, np.zeros(np.shape(ad.value_of(q_tot))))

    pq = p + q
    safe_pq = ad.vmax(pq, np.full(p.shape, Q_FLOOR))
    p_pos = p > 0
    p_term = np.zeros(())
    if np.any(p_pos):
        sel = p[p_pos] * (np.log(2.0 * p[p_pos]) - ad.log(safe_pq[..., p_pos]))
        p_term = ad.vsum(sel, axis=-1)
    q_safe = ad.vmax(q, np.full(p.shape, Q_FLOOR))
    q_term = ad.vsum(q * (LN2 + ad.log(q_safe) - ad.log(safe_pq)), axis=-1)
    return 0.5 * (p_term + p_missing * LN2) + 0.5 * (q_term + q_missing * LN2)


def divergence(mu, sigma, target: TargetDistribution, loss: str = "kl"):
    if loss == "js":
        return js_divergence(mu, sigma, target)
    if target.is_gaussian():
        return kl_gaussian(mu, sigma, target)
    return kl_histogram(mu, sigma, target)


# ----------------------------------------------------------------------
# search loop
# ----------------------------------------------------------------------

@dataclass
class SearchOptions:
    mode: str = "joint"                 # param | spatial | joint
    iterations: int = 1000
    keep_threshold: float = 1e-5
    lr: float = 1e-2
    beta: float = 0.02                  # minimum scale, pre-tanh units
    restarts: int = 16
    seed: int = 0
    loss: str = "kl"                    # kl | js
    init_scale: float = 0.08            # pre-tanh initial scale
    freeze_scale: bool = False
    fixed_spatial: list | None = None   # normalized axis specs when not optimized
    fixed_params: list | None = None
    stop_on_candidates: int | None = None
    max_seconds: float | None = None
    max_nan_retries: int = 5


_CENTER_CLIP = 5.0   # pre-tanh center bound
_SCALE_CAP = 10.0    # pre-tanh scale cap; args stay within +-15, |tanh| < 1


def derive_bounds(x_c, x_sqrt, beta: float):
    """Box bounds from an unconstrained state: valid for any real input.

    x_s = x_sqrt^2 + beta > 0; bounds tanh(c -+ x_s).  The center is
    clamped to +-5 and the scale capped at 10 before tanh, so
    x_min < x_max holds strictly inside (-1, 1) even where float64 tanh
    would saturate to exactly +-1.
    """
    xs = ad.square(x_sqrt) + beta
    raw = ad.value_of(xs)
    xs = ad.vmin(xs, np.full_like(raw, _SCALE_CAP))
    c = ad.vmin(ad.vmax(x_c, np.full_like(raw, -_CENTER_CLIP)),
                np.full_like(raw, _CENTER_CLIP))
    return ad.tanh(c - xs), ad.tanh(c + xs)


@dataclass
class SearchState:
    """Batched optimizer state over restarts."""

    x_c: np.ndarray                     # [B, D]
    x_sqrt: np.ndarray                  # [B, D]
    beta: float
    lr: np.ndarray                      # [B]
    frozen_scale: bool
    iteration: int = 0

    def scale(self) -> np.ndarray:
        return self.x_sqrt ** 2 + self.beta

    def bounds(self):
        return derive_bounds(self.x_c, self.x_sqrt, self.beta)


@dataclass
class Candidate:
    box_normalized: dict                # {spatial: [[lo,hi]*3]?, param: [[lo,hi]*m]?}
    divergence: float
    mu: float                           # physical
    sigma: float                        # physical
    iteration: int
    restart: int


def _axis_dims(mode: str, m: int):
    if mode == "param":
        return [], list(range(m))
    if mode == "spatial":
        return [0, 1, 2], []
    if mode == "joint":
        return [0, 1, 2], list(range(m))
    raise ValueError(f"unknown search mode '{mode}'")


def _build_specs(model, opts: SearchOptions, lo, hi, spatial_dims, param_dims):
    """Axis specs for propagate_normalized from taped bounds [B, D]."""
    col = 0
    spatial = [None] * 3
    for a in range(3):
        if a in spatial_dims:
            spatial[a] = (RANGE, lo[:, col], hi[:, col])
            col += 1
        else:
            spatial[a] = opts.fixed_spatial[a]
    params = [None] * model.arch.n_params_m
    for i in range(model.arch.n_params_m):
        if i in param_dims:
            params[i] = (RANGE, lo[:, col], hi[:, col])
            col += 1
        else:
            params[i] = opts.fixed_params[i]
    return spatial, params


def search(model: M.ExplorableModel, target: TargetDistribution,
           options: SearchOptions | None = None, on_candidate=None) -> list:
    """Run the escape-and-collect loop; returns candidates sorted by divergence.

    on_candidate, when given, is called with each candidate as it is found
    (drives partial results for polling clients).
    """
    opts = options or SearchOptions()
    m = model.arch.n_params_m
    spatial_dims, param_dims = _axis_dims(opts.mode, m)
    d = len(spatial_dims) + len(param_dims)
    if opts.mode == "param" and opts.fixed_spatial is None:
        raise ValueError("param mode needs fixed_spatial axis specs")
    if opts.mode == "spatial" and opts.fixed_params is None:
        raise ValueError("spatial mode needs fixed_params axis specs")
    if opts.fixed_spatial is None:
        opts.fixed_spatial = [(POINT, 0.0)] * 3
    if opts.fixed_params is None:
        opts.fixed_params = [(POINT, 0.0)] * m

    ntarget = target.normalized(model.domain)
    rng = np.random.default_rng(opts.seed)
    b = opts.restarts
    state = SearchState(
        x_c=rng.uniform(-1.0, 1.0, size=(b, d)),
        x_sqrt=np.full((b, d), np.sqrt(max(opts.init_scale - opts.beta, 0.0))),
        beta=opts.beta,
        lr=np.full(b, opts.lr),
        frozen_scale=opts.freeze_scale,
    )
    registry = pf.NoiseSymbolRegistry(3 + m)
    candidates: list[Candidate] = []
    nan_strikes = np.zeros(b, dtype=int)
    prev_div = np.full(b, np.inf)        # backtracking reference
    t0 = time.perf_counter()

    prev = None
    for it in range(opts.iterations):
        state.iteration = it
        tape = ad.Tape()
        vc = tape.leaf(state.x_c, "x_c")
        vq = tape.leaf(state.x_sqrt, "x_sqrt")
        lo, hi = derive_bounds(vc, vq, opts.beta)
        spatial, params = _build_specs(model, opts, lo, hi, spatial_dims, param_dims)
        with np.errstate(all="ignore"):
            summ, _ = pf.propagate_normalized(model, spatial, params,
                                              registry=registry, mode=pf.CONDENSED)
            sigma_raw = np.atleast_1d(np.asarray(ad.value_of(summ.sigma)))
            # floor keeps the loss finite where a region decays to zero variance
            sigma_safe = ad.vmax(summ.sigma, np.full_like(sigma_raw, 1e-12))
            div = divergence(summ.mu, sigma_safe, ntarget, opts.loss)
            div_raw = np.atleast_1d(np.asarray(ad.value_of(div), dtype=np.float64))
        good = np.isfinite(div_raw)

        if not np.all(good):
            bad = ~good
            nan_strikes[bad] += 1
            if np.any(nan_strikes >= opts.max_nan_retries):
                r = int(np.argmax(nan_strikes))
                raise SearchAbort(
                    f"restart {r} produced a non-finite loss "
                    f"{opts.max_nan_retries} times (lr={state.lr[r]:.3g}, "
                    f"iteration {it})")
            if prev is None:
                state.x_c[bad] = rng.uniform(-1.0, 1.0, size=(int(bad.sum()), d))
                continue
            state.x_c[bad] = prev[0][bad]
            state.x_sqrt[bad] = prev[1][bad]
            state.lr[bad] *= 0.5
        nan_strikes[good] = 0

        # backtracking: a step that made things worse is undone at half the
        # rate, and improving restarts regrow toward their base rate; plain
        # fixed-rate descent oscillates in the stiff sigma direction of the
        # KL and never settles below the keep threshold otherwise
        if prev is not None:
            worse = good & (div_raw > prev_div)
            if np.any(worse):
                state.x_c[worse] = prev[0][worse]
                state.x_sqrt[worse] = prev[1][worse]
                state.lr[worse] = np.maximum(state.lr[worse] * 0.5, 1e-7)
                good = good & ~worse
            better = good & (div_raw <= prev_div)
            state.lr[better] *= 1.3     # bold-driver growth; backtracking undoes
        prev_div = np.where(good, div_raw, prev_div)

        hits = good & (sigma_raw > 1e-12) & (div_raw < opts.keep_threshold)
        if np.any(hits):
            lo_raw = np.atleast_2d(ad.value_of(lo))
            hi_raw = np.atleast_2d(ad.value_of(hi))
            mu_raw = np.atleast_1d(ad.value_of(summ.mu))
            sg_raw = np.atleast_1d(ad.value_of(summ.sigma))
            for r in np.nonzero(hits)[0]:
                cand = _make_candidate(
                    model, opts, spatial_dims, param_dims,
                    lo_raw[r], hi_raw[r], float(div_raw[r]),
                    float(mu_raw[r]), float(sg_raw[r]), it, int(r))
                candidates.append(cand)
                if on_candidate is not None:
                    on_candidate(cand)
            state.lr[hits] *= 10.0
            prev_div[hits] = np.inf      # allow the escape move uphill
            if (opts.stop_on_candidates is not None
                    and len(candidates) >= opts.stop_on_candidates):
                break

        loss = ad.vsum(ad.where(good, div, np.zeros_like(div_raw)))
        try:
            report = tape.backward(loss)
        except ad.GradientNaNError:
            if prev is None:
                state.x_c = rng.uniform(-1.0, 1.0, size=(b, d))
                continue
            nan_strikes += 1
            if np.any(nan_strikes >= opts.max_nan_retries):
                raise SearchAbort(f"non-finite gradients persisted at iteration {it}")
            state.x_c, state.x_sqrt = prev[0].copy(), prev[1].copy()
            state.lr *= 0.5
            continue
        g_c = _clip_rows(report.grads["x_c"])
        g_q = _clip_rows(report.grads["x_sqrt"])
        prev = (state.x_c.copy(), state.x_sqrt.copy())
        step = (state.lr * good)[:, None]
        state.x_c = np.clip(state.x_c - step * g_c, -_STATE_CLIP, _STATE_CLIP)
        if not state.frozen_scale:
            state.x_sqrt = np.clip(state.x_sqrt - step * g_q,
                                   -_STATE_CLIP, _STATE_CLIP)
        if opts.max_seconds is not None and time.perf_counter() - t0 > opts.max_seconds:
            break

    candidates.sort(key=lambda c: c.divergence)
    return candidates


_GRAD_CAP = 10.0     # per-restart norm: base steps <= 10 lr, escapes scale x10
_STATE_CLIP = 2.5    # pre-tanh; inside the live (nonzero-gradient) region


def _clip_rows(g: np.ndarray) -> np.ndarray:
    """Per-restart gradient norm cap; keeps single steps bounded."""
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    scale = np.minimum(1.0, _GRAD_CAP / np.maximum(norms, 1e-30))
    return g * scale


def _make_candidate(model, opts, spatial_dims, param_dims, lo, hi, div,
                    mu_norm, sigma_norm, iteration, restart) -> Candidate:
    box = {"spatial": None, "param": [None] * model.arch.n_params_m}
    col = 0
    sp = [None] * 3
    for a in range(3):
        if a in spatial_dims:
            sp[a] = [float(lo[col]), float(hi[col])]
            col += 1
        else:
            spec = opts.fixed_spatial[a]
            sp[a] = float(spec[1]) if spec[0] == POINT else [float(spec[1]), float(spec[2])]
    box["spatial"] = sp
    for i in range(model.arch.n_params_m):
        if i in param_dims:
            box["param"][i] = [float(lo[col]), float(hi[col])]
            col += 1
        else:
            spec = opts.fixed_params[i]
            box["param"][i] = float(spec[1]) if spec[0] == POINT else [float(spec[1]), float(spec[2])]
    domain = model.domain
    return Candidate(
        box_normalized=box,
        divergence=div,
        mu=float(domain.denormalize_value(mu_norm)),
        sigma=float(sigma_norm * domain.value_scale()),
        iteration=iteration,
        restart=restart,
    )


def candidate_region(model: M.ExplorableModel, cand: Candidate) -> QueryRegion:
    """Physical QueryRegion for a recorded candidate box."""
    domain = model.domain

    def to_spec(v, bounds):
        lo_b, hi_b = bounds
        if isinstance(v, list):
            return (RANGE,
                    lo_b + (v[0] + 1) * 0.5 * (hi_b - lo_b),
                    lo_b + (v[1] + 1) * 0.5 * (hi_b - lo_b))
        return (POINT, lo_b + (v + 1) * 0.5 * (hi_b - lo_b))

    spatial = [to_spec(v, domain.spatial_bounds[a])
               for a, v in enumerate(cand.box_normalized["spatial"])]
    params = [to_spec(v, domain.param_bounds[i])
              for i, v in enumerate(cand.box_normalized["param"])]
    return QueryRegion(params=params, spatial=spatial)


def divergence_of_region(model: M.ExplorableModel, region: QueryRegion,
                         target: TargetDistribution, loss: str = "kl") -> float:
    """Replay: propagate a region and measure its divergence to the target."""
    summ, _ = pf.propagate(model, region, mode=pf.CONDENSED)
    ntarget = target.normalized(model.domain)
    return float(ad.value_of(divergence(summ.mu, summ.sigma, ntarget, loss)))


def candidate_to_json(model: M.ExplorableModel, cand: Candidate) -> dict:
    domain = model.domain
    region = candidate_region(model, cand)
    params_phys, center_phys, scale_phys = [], [], []
    for spec in region.params:
        if spec[0] == RANGE:
            params_phys.append(0.5 * (spec[1] + spec[2]))
        else:
            params_phys.append(spec[1])
    for spec in region.spatial:
        if spec[0] == RANGE:
            center_phys.append(0.5 * (spec[1] + spec[2]))
            scale_phys.append(0.5 * (spec[2] - spec[1]))
        else:
            center_phys.append(spec[1])
            scale_phys.append(0.0)
    return {
        "params_physical": params_phys,
        "center_physical": center_phys,
        "scale_physical": scale_phys,
        "divergence": cand.divergence,
        "mu": cand.mu,
        "sigma": cand.sigma,
        "box": region.to_json(domain),
        "iteration": cand.iteration,
        "restart": cand.restart,
    }
