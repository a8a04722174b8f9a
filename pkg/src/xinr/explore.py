"""Field-level exploration: UP and sampling (SPL) statistics, correlation.

Every evaluation pads its batch to a fixed chunk size before hitting BLAS.
Row results then do not depend on how many points a caller asked for,
which is what makes CLI and HTTP answers for the same coordinate exactly
equal (the kernels are batch-size dependent but row-independent).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from . import paf as pf
from .data import VolumeGrid, voxel_centers
from .metrics import psnr
from .region import POINT, RANGE, QueryRegion, RegionError

__all__ = [
    "EVAL_CHUNK", "predict_points", "predict_volume",
    "up_points", "up_field", "spl_field", "correlation_field",
    "pick_reference", "compare_up_spl", "FieldResult",
]

EVAL_CHUNK = 4096


@dataclass
class FieldResult:
    mean: VolumeGrid
    std: VolumeGrid
    seconds: float


def _padded_chunks(n: int):
    for s in range(0, n, EVAL_CHUNK):
        yield s, min(n, s + EVAL_CHUNK)


def predict_points(model: M.ExplorableModel, x_norm: np.ndarray,
                   p_norm: np.ndarray) -> np.ndarray:
    """Forward pass at [N, 3] x [N, m] normalized inputs, fixed-chunk padded.

    Returns normalized values, float64.
    """
    x_norm = np.asarray(x_norm, dtype=np.float64)
    p_norm = np.asarray(p_norm, dtype=np.float64)
    n = x_norm.shape[0]
    m64 = model.as_f64()
    out = np.empty(n, dtype=np.float64)
    for s, e in _padded_chunks(n):
        xs = _pad_rows(x_norm[s:e])
        ps = _pad_rows(p_norm[s:e])
        out[s:e] = M.forward(xs, ps, m64)[: e - s]
    return out


def _pad_rows(a: np.ndarray) -> np.ndarray:
    if a.shape[0] == EVAL_CHUNK:
        return a
    pad = np.repeat(a[-1:], EVAL_CHUNK - a.shape[0], axis=0)
    return np.concatenate([a, pad], axis=0)


def _grid_coords(domain, dims):
    centers = voxel_centers(dims, domain.spatial_bounds)
    axes_norm = [domain._norm(c, domain.spatial_bounds[a]) for a, c in enumerate(centers)]
    gx, gy, gz = np.meshgrid(*axes_norm, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def predict_volume(model: M.ExplorableModel, params_phys, dims) -> VolumeGrid:
    """Arbitrary-resolution prediction at one parameter setting (physical values)."""
    domain = model.domain
    coords = _grid_coords(domain, dims)
    p = domain.normalize_params(np.asarray(params_phys, dtype=np.float64))
    pn = np.broadcast_to(p, (coords.shape[0], p.shape[-1]))
    vals = predict_points(model, coords, pn)
    phys = domain.denormalize_value(vals).reshape(dims)
    return VolumeGrid(values=phys, bounds=list(domain.spatial_bounds))


def up_points(model: M.ExplorableModel, x_norm: np.ndarray, param_specs: list,
              mode: str = pf.CONDENSED):
    """Chunked UP propagation at fixed points: (mu, sigma, primary [N, Mr]).

    The parameter-chain PAF is built once and reused across chunks, so its
    symbol ids stay stable over the whole batch.
    """
    mu, sigma, coeffs, n_primary = _up_points_full(model, x_norm, param_specs, mode)
    primary = coeffs[:, :n_primary] if n_primary else None
    return mu, sigma, primary


def _up_points_full(model: M.ExplorableModel, x_norm: np.ndarray,
                    param_specs: list, mode: str):
    """(mu, sigma, all explicit coefficient columns [N, T], n_primary)."""
    x_norm = np.asarray(x_norm, dtype=np.float64)
    n = x_norm.shape[0]
    registry = pf.NoiseSymbolRegistry(3 + model.arch.n_params_m)
    param_paf = pf.prepare_param_paf(model, param_specs, registry, mode)
    mu = np.empty(n)
    sigma = np.empty(n)
    coeffs = None
    n_primary = 0
    for s, e in _padded_chunks(n):
        xs = _pad_rows(x_norm[s:e])
        summ, paf = pf.propagate_points(model, xs, param_specs,
                                        registry=registry, mode=mode,
                                        param_paf=param_paf)
        mu[s:e] = np.asarray(summ.mu)[: e - s]
        sigma[s:e] = np.asarray(summ.sigma)[: e - s]
        cols = pf.scalar_coefficients(paf)
        if coeffs is None:
            coeffs = np.empty((n, cols.shape[-1]))
            n_primary = 0 if paf.primary is None else ad.value_of(paf.primary).shape[-1]
        coeffs[s:e] = cols[: e - s]
    return mu, sigma, coeffs, n_primary


def up_field(model: M.ExplorableModel, region: QueryRegion, out_dims,
             mode: str = pf.CONDENSED) -> FieldResult:
    """Per-voxel Gaussian summaries for ranged parameters, physical units."""
    region.validate(model.domain)
    if region.spatial is not None:
        raise RegionError("up_field ranges parameters; spatial part is the voxel grid")
    t0 = time.perf_counter()
    specs = region.normalized_params(model.domain)
    coords = _grid_coords(model.domain, out_dims)
    mu, sigma, _ = up_points(model, coords, specs, mode=mode)
    scale = model.domain.value_scale()
    mean = model.domain.denormalize_value(mu).reshape(out_dims)
    std = (sigma * scale).reshape(out_dims)
    seconds = time.perf_counter() - t0
    bounds = list(model.domain.spatial_bounds)
    return FieldResult(mean=VolumeGrid(mean, bounds), std=VolumeGrid(std, bounds),
                       seconds=seconds)


def spl_field(model: M.ExplorableModel, region: QueryRegion, n_samples: int,
              out_dims, seed: int = 0) -> FieldResult:
    """Monte Carlo baseline: n iid parameter draws, empirical mean/std (ddof=1)."""
    region.validate(model.domain)
    if n_samples < 2:
        raise ValueError("need n_samples >= 2 for a standard deviation")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    draws = _draw_params(region, rng, n_samples, model.domain)
    coords = _grid_coords(model.domain, out_dims)
    nvox = coords.shape[0]
    acc = np.zeros(nvox)
    acc2 = np.zeros(nvox)
    # chunk over the flattened (draw, voxel) space so small fields do not
    # pay the fixed-chunk padding once per draw
    total = n_samples * nvox
    m64 = model.as_f64()
    for s in range(0, total, EVAL_CHUNK):
        idx = np.arange(s, min(total, s + EVAL_CHUNK))
        di, vi = np.divmod(idx, nvox)
        vals = M.forward(_pad_rows(coords[vi]), _pad_rows(draws[di]), m64)[: idx.size]
        np.add.at(acc, vi, vals)
        np.add.at(acc2, vi, vals * vals)
    mean_n = acc / n_samples
    var_n = np.maximum(acc2 - n_samples * mean_n ** 2, 0.0) / (n_samples - 1)
    scale = model.domain.value_scale()
    mean = model.domain.denormalize_value(mean_n).reshape(out_dims)
    std = (np.sqrt(var_n) * scale).reshape(out_dims)
    seconds = time.perf_counter() - t0
    bounds = list(model.domain.spatial_bounds)
    return FieldResult(mean=VolumeGrid(mean, bounds), std=VolumeGrid(std, bounds),
                       seconds=seconds)


def _draw_params(region: QueryRegion, rng, n: int, domain) -> np.ndarray:
    cols = []
    for spec in region.normalized_params(domain):
        if spec[0] == POINT:
            cols.append(np.full(n, spec[1]))
        else:
            cols.append(rng.uniform(spec[1], spec[2], n))
    return np.stack(cols, axis=-1)


def pick_reference(mean_field: VolumeGrid):
    """Voxel-center coordinate of the maximum mean value (ties: lowest linear index)."""
    vals = np.asarray(mean_field.values)
    idx = int(np.argmax(vals))
    ix, iy, iz = np.unravel_index(idx, vals.shape)
    centers = voxel_centers(vals.shape, mean_field.bounds)
    return np.array([centers[0][ix], centers[1][iy], centers[2][iz]])


def correlation_points(model: M.ExplorableModel, coords_norm: np.ndarray,
                       param_specs: list, ref_norm: np.ndarray):
    """Pearson correlation of each point with a reference point.

    Propagates the reference inside the same batch so every shared symbol
    (ranged parameters plus input/product residuals, shared_input mode)
    lines up column-by-column.  Points coinciding with the reference get
    exactly 1 (self-correlation sums every symbol).
    """
    coords_norm = np.asarray(coords_norm, dtype=np.float64)
    ref_norm = np.asarray(ref_norm, dtype=np.float64).reshape(3)
    stacked = np.concatenate([coords_norm, ref_norm[None, :]], axis=0)
    mu, sigma, coeffs, _ = _up_points_full(model, stacked, param_specs,
                                           mode=pf.SHARED_INPUT)
    ref_sigma = float(sigma[-1])
    if ref_sigma <= 0.0:
        raise pf.PafError("reference point has zero variance")
    sig = sigma[:-1]
    if np.any(sig <= 0.0):
        raise pf.PafError("zero-sigma point in correlation query")
    cov = coeffs[:-1] @ coeffs[-1]
    rho = np.clip(cov / (sig * ref_sigma), -1.0, 1.0)
    # self-covariance counts the local activation terms too: exactly 1
    same = np.all(coords_norm == ref_norm, axis=1)
    rho[same] = 1.0
    return rho, sig, ref_sigma


def correlation_field(model: M.ExplorableModel, region: QueryRegion,
                      reference_phys, out_dims):
    """Pearson correlation of every voxel with a reference point.

    The reference snaps to the nearest voxel center of the output grid;
    its own voxel holds exactly 1 (self-correlation).  Returns
    (VolumeGrid in [-1, 1], snapped reference coordinate, seconds).
    """
    region.validate(model.domain)
    t0 = time.perf_counter()
    specs = region.normalized_params(model.domain)
    domain = model.domain
    dims = tuple(out_dims)
    centers = voxel_centers(dims, domain.spatial_bounds)
    ref = np.asarray(reference_phys, dtype=np.float64)
    ref_idx = []
    for a in range(3):
        lo, hi = domain.spatial_bounds[a]
        if not (lo <= ref[a] <= hi):
            raise RegionError(f"reference outside spatial bounds on axis "
                              f"'{domain.spatial_names[a]}'")
        ref_idx.append(int(np.argmin(np.abs(centers[a] - ref[a]))))
    ref_snapped = np.array([centers[a][ref_idx[a]] for a in range(3)])

    coords = _grid_coords(domain, dims)
    ref_norm = domain.normalize_spatial(ref_snapped)
    rho, _, _ = correlation_points(model, coords, specs, ref_norm)
    rho = rho.reshape(dims)
    rho[ref_idx[0], ref_idx[1], ref_idx[2]] = 1.0
    seconds = time.perf_counter() - t0
    return VolumeGrid(rho, list(domain.spatial_bounds)), ref_snapped, seconds


def compare_up_spl(model: M.ExplorableModel, region: QueryRegion,
                   oracle_mean: VolumeGrid, oracle_std: VolumeGrid,
                   budgets=(10, 30), seed: int = 0, mode: str = pf.CONDENSED):
    """UP-vs-SPL accuracy/timing table against oracle fields.

    Rows: {method, n, seconds, psnr_mean, psnr_std}.  PSNR data range is
    the oracle field's physical value range.
    """
    dims = oracle_mean.dims
    if oracle_std.dims != dims:
        raise ValueError("oracle field dims mismatch")
    range_mean = float(oracle_mean.values.max() - oracle_mean.values.min()) or 1.0
    range_std = float(oracle_std.values.max() - oracle_std.values.min()) or 1.0
    rows = []
    upr = up_field(model, region, dims, mode=mode)
    rows.append({
        "method": "UP", "n": 0, "seconds": upr.seconds,
        "psnr_mean": psnr(upr.mean.values, oracle_mean.values, range_mean),
        "psnr_std": psnr(upr.std.values, oracle_std.values, range_std),
    })
    for n in budgets:
        res = spl_field(model, region, n, dims, seed=seed)
        rows.append({
            "method": "SPL", "n": n, "seconds": res.seconds,
            "psnr_mean": psnr(res.mean.values, oracle_mean.values, range_mean),
            "psnr_std": psnr(res.std.values, oracle_std.values, range_std),
        })
    return rows


def report_to_csv(rows: list) -> str:
    lines = ["method,n,seconds,psnr_mean,psnr_std"]
    for r in rows:
        lines.append(f"{r['method']},{r['n']},{r['seconds']:.6f},"
                     f"{r['psnr_mean']:.4f},{r['psnr_std']:.4f}")
    return "\n".join(lines) + "\n"
