"""HTTP/JSON service exposing the engine to the web UI and scripts.

All numbers cross the wire in physical units; normalization is internal.
CLI and HTTP share the same engine functions, so identical inputs yield
identical numbers through either interface.  The model is read-only; the
only mutable state is the search-job table.
"""

from __future__ import annotations

import itertools
import threading
import time
import uuid

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import explore, search as S
from .data import EnsembleManifest, voxel_centers
from .model import DomainError, ExplorableModel
from .paf import PafError
from .region import QueryRegion, RegionError

__all__ = ["create_app"]

AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


class ServiceError(Exception):
    def __init__(self, detail, status=400, axis=None):
        self.detail = detail
        self.status = status
        self.axis = axis
        super().__init__(detail)


def _error_response(status, detail, axis=None):
    body = {"error": detail}
    if axis is not None:
        body["axis"] = axis
    return JSONResponse(status_code=status, content=body)


def create_app(model: ExplorableModel | None,
               manifest: EnsembleManifest | None = None) -> FastAPI:
    app = FastAPI(title="xinr", docs_url=None, redoc_url=None)
    state = {"model": model, "manifest": manifest}
    jobs: dict = {}
    jobs_lock = threading.Lock()

    def need_model() -> ExplorableModel:
        if state["model"] is None:
            raise ServiceError("model not loaded", status=409)
        return state["model"]

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return _error_response(exc.status, exc.detail, exc.axis)

    @app.exception_handler(RegionError)
    async def _region_error(request: Request, exc: RegionError):
        return _error_response(400, str(exc), getattr(exc, "axis", None))

    @app.exception_handler(DomainError)
    async def _domain_error(request: Request, exc: DomainError):
        return _error_response(400, str(exc), exc.axis)

    @app.exception_handler(PafError)
    async def _paf_error(request: Request, exc: PafError):
        return _error_response(400, str(exc))

    @app.get("/model/info")
    def model_info():
        m = need_model()
        d = m.domain
        return {
            "arch": m.arch.to_dict(),
            "domain": d.to_dict(),
            "value_range": [d.v_min, d.v_max],
        }

    def _point_value(m, body):
        x = _require_point(body, m)
        params = body.get("params")
        if params is None or len(params) != len(m.domain.param_bounds):
            raise ServiceError("params must list every parameter axis")
        xn = m.domain.normalize_spatial(np.asarray(x, dtype=np.float64))[None, :]
        pn = m.domain.normalize_params(np.asarray(params, dtype=np.float64))[None, :]
        val = explore.predict_points(m, xn, pn)[0]
        return float(m.domain.denormalize_value(val))

    @app.post("/query/point")
    def query_point(body: dict):
        m = need_model()
        return {"value": _point_value(m, body)}

    @app.post("/query/dist")
    def query_dist(body: dict):
        m = need_model()
        x = _require_point(body, m)
        box = body.get("param_box")
        if box is None:
            raise ServiceError("param_box required")
        region = QueryRegion.from_json({"param": box}, m.domain)
        t0 = time.perf_counter()
        if region.is_degenerate():
            params = [spec[1] for spec in region.params]
            mu = _point_value(m, {**body, "params": params})
            sigma = 0.0
        else:
            xn = m.domain.normalize_spatial(np.asarray(x, dtype=np.float64))[None, :]
            mu_n, sigma_n, _ = explore.up_points(
                m, xn, region.normalized_params(m.domain))
            mu = float(m.domain.denormalize_value(mu_n[0]))
            sigma = float(sigma_n[0] * m.domain.value_scale())
        out = {"mu": mu, "sigma": sigma, "seconds": time.perf_counter() - t0}
        n = body.get("n")
        if n:
            out["mc"] = _mc_at_point(m, x, region, int(n), int(body.get("seed", 0)))
        return out

    def _mc_at_point(m, x, region, n, seed):
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        draws = explore._draw_params(region, rng, n, m.domain)
        xn = m.domain.normalize_spatial(np.asarray(x, dtype=np.float64))
        coords = np.broadcast_to(xn, (n, 3))
        vals = explore.predict_points(m, coords, draws)
        phys = m.domain.denormalize_value(vals)
        counts, edges = np.histogram(phys, bins=32)
        return {
            "mean": float(phys.mean()),
            "std": float(phys.std(ddof=1)) if n > 1 else 0.0,
            "n": n,
            "seconds": time.perf_counter() - t0,
            "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
        }

    @app.post("/field/slice")
    def field_slice(body: dict):
        m = need_model()
        return _slice(m, body)

    def _slice(m, body):
        domain = m.domain
        axis_name = str(body.get("axis", "z")).lower()
        if axis_name not in AXIS_INDEX:
            raise ServiceError(f"unknown axis '{axis_name}'", axis=axis_name)
        axis = AXIS_INDEX[axis_name]
        n = int(body.get("dims", 64))
        dims = (n, n, n)
        centers = voxel_centers(dims, domain.spatial_bounds)
        if "index" in body:
            index = int(body["index"])
            if not 0 <= index < n:
                raise ServiceError(f"index {index} outside [0, {n})", axis=axis_name)
        elif "coord" in body:
            index = int(np.argmin(np.abs(centers[axis] - float(body["coord"]))))
        else:
            index = n // 2

        other = [a for a in range(3) if a != axis]
        gu, gv = np.meshgrid(centers[other[0]], centers[other[1]], indexing="ij")
        coords_phys = np.empty((n * n, 3))
        coords_phys[:, axis] = centers[axis][index]
        coords_phys[:, other[0]] = gu.ravel()
        coords_phys[:, other[1]] = gv.ravel()
        coords = domain.normalize_spatial(coords_phys)

        stat = body.get("stat", "value")
        t0 = time.perf_counter()
        if stat == "value":
            params = body.get("params")
            if params is None:
                raise ServiceError("stat=value needs params")
            pn = domain.normalize_params(np.asarray(params, dtype=np.float64))
            vals = explore.predict_points(m, coords, np.broadcast_to(pn, (n * n, pn.shape[-1])))
            grid = domain.denormalize_value(vals).reshape(n, n)
            ref_out = None
        elif stat in ("mean", "std"):
            region = _region_from(body, domain)
            specs = region.normalized_params(domain)
            mu, sigma, _ = explore.up_points(m, coords, specs)
            if stat == "mean":
                grid = domain.denormalize_value(mu).reshape(n, n)
            else:
                grid = (sigma * domain.value_scale()).reshape(n, n)
            ref_out = None
        elif stat == "corr":
            region = _region_from(body, domain)
            ref = body.get("ref", "auto")
            if ref == "auto":
                coarse = explore.up_field(m, region, (16, 16, 16))
                ref = explore.pick_reference(coarse.mean)
            ref = np.asarray(ref, dtype=np.float64)
            grid, ref_snapped = _corr_slice(m, region, ref, coords, dims, axis, index)
            grid = grid.reshape(n, n)
            ref_out = [float(v) for v in ref_snapped]
        else:
            raise ServiceError(f"unknown stat '{stat}'")
        seconds = time.perf_counter() - t0
        out = {
            "axis": axis_name,
            "index": index,
            "coord": float(centers[axis][index]),
            "dims": [n, n],
            "u_axis": domain.spatial_names[other[0]],
            "v_axis": domain.spatial_names[other[1]],
            "u_extent": [float(centers[other[0]][0]), float(centers[other[0]][-1])],
            "v_extent": [float(centers[other[1]][0]), float(centers[other[1]][-1])],
            "values": np.asarray(grid, dtype=np.float64).tolist(),
            "value_range": [float(np.min(grid)), float(np.max(grid))],
            "seconds": seconds,
        }
        if ref_out is not None:
            out["reference"] = ref_out
        return out

    def _corr_slice(m, region, ref_phys, coords, dims, axis, index):
        domain = m.domain
        centers = voxel_centers(dims, domain.spatial_bounds)
        ref_idx = [int(np.argmin(np.abs(centers[a] - ref_phys[a]))) for a in range(3)]
        ref_snapped = np.array([centers[a][ref_idx[a]] for a in range(3)])
        specs = region.normalized_params(domain)
        ref_norm = domain.normalize_spatial(ref_snapped)
        rho, _, _ = explore.correlation_points(m, coords, specs, ref_norm)
        return rho, ref_snapped

    def _region_from(body, domain) -> QueryRegion:
        box = body.get("param_box")
        if box is None:
            raise ServiceError("param_box required for this stat")
        return QueryRegion.from_json({"param": box}, domain)

    @app.post("/search")
    def start_search(body: dict):
        m = need_model()
        if "target" not in body:
            raise ServiceError("target required")
        target = S.TargetDistribution.from_json(body["target"])
        fixed_spatial = fixed_params = None
        if body.get("fixed"):
            fixed = QueryRegion.from_json(body["fixed"], m.domain)
            fixed_params = fixed.normalized_params(m.domain)
            fixed_spatial = fixed.normalized_spatial(m.domain)
        opts = S.SearchOptions(
            mode=body.get("mode", "joint"),
            iterations=int(body.get("iters", 1000)),
            restarts=int(body.get("restarts", 16)),
            seed=int(body.get("seed", 0)),
            lr=float(body.get("lr", 1e-2)),
            beta=float(body.get("beta", 0.02)),
            init_scale=float(body.get("init_scale", 0.08)),
            keep_threshold=float(body.get("keep_threshold", 1e-5)),
            loss=body.get("loss", "kl"),
            freeze_scale=bool(body.get("freeze_scale", False)),
            fixed_spatial=fixed_spatial,
            fixed_params=fixed_params,
            stop_on_candidates=body.get("stop_on"),
        )
        job_id = uuid.uuid4().hex[:12]
        job = {"status": "running", "candidates": [], "error": None}
        with jobs_lock:
            jobs[job_id] = job

        def runner():
            try:
                def on_candidate(c):
                    with jobs_lock:
                        job["candidates"].append(S.candidate_to_json(m, c))

                cands = S.search(m, target, opts, on_candidate=on_candidate)
                with jobs_lock:
                    job["candidates"] = [S.candidate_to_json(m, c) for c in cands]
                    job["status"] = "done"
            except Exception as e:  # noqa: BLE001 - job surface
                with jobs_lock:
                    job["status"] = "failed"
                    job["error"] = f"{type(e).__name__}: {e}"

        threading.Thread(target=runner, daemon=True).start()
        return {"job_id": job_id, "status_url": f"/search/{job_id}"}

    @app.get("/search/{job_id}")
    def search_status(job_id: str):
        with jobs_lock:
            job = jobs.get(job_id)
            if job is None:
                raise ServiceError(f"unknown job '{job_id}'", status=404)
            out = {"status": job["status"],
                   "candidates": list(job["candidates"])}
            if job["error"]:
                out["error"] = job["error"]
        return out

    def _require_point(body, m):
        try:
            x = [float(body["x"]), float(body["y"]), float(body["z"])]
        except (KeyError, TypeError, ValueError):
            raise ServiceError("x, y, z coordinates required")
        for a, v in enumerate(x):
            lo, hi = m.domain.spatial_bounds[a]
            if not lo <= v <= hi:
                raise ServiceError(
                    f"coordinate {v} outside [{lo}, {hi}]",
                    axis=m.domain.spatial_names[a])
        return x

    return app
