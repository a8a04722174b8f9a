"""Synthetic ensemble generation, volume I/O, dataset manifest.

The analytic family stands in for a real simulation: a sum of Gaussian
blobs whose centers and amplitudes move smoothly with the simulation
parameters, plus a constant background.  Because the field is closed-form,
regional statistics (mean/variance/covariance over a parameter box) have
an independent quadrature oracle at any accuracy.

Volume files: raw little-endian float32 (`<name>.f32`, x-fastest) plus a
sidecar JSON header `<name>.json` {dims, bounds, dtype, order}.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DomainSpec
from .region import POINT, RANGE

__all__ = [
    "VolumeGrid", "AnalyticFamily", "EnsembleManifest", "VolumeFormatError",
    "save_volume", "load_volume", "generate", "oracle_stats", "oracle_cov",
    "default_desk_family", "nyx_like_family", "voxel_centers",
]


class VolumeFormatError(Exception):
    pass


@dataclass
class VolumeGrid:
    """Regular scalar volume; values indexed [ix, iy, iz], x-fastest on disk."""

    values: np.ndarray
    bounds: list                    # 3 pairs (lo, hi), physical units

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise VolumeFormatError("volume values must be a 3-D array")

    @property
    def dims(self):
        return tuple(self.values.shape)


def voxel_centers(dims, bounds) -> list:
    """Per-axis physical voxel-center coordinates."""
    out = []
    for n, (lo, hi) in zip(dims, bounds):
        out.append(lo + (np.arange(n) + 0.5) * (hi - lo) / n)
    return out


def _paths(path):
    p = Path(path)
    if p.suffix in (".f32", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".f32"), p.with_suffix(".json")


def save_volume(grid: VolumeGrid, path) -> None:
    raw_path, hdr_path = _paths(path)
    header = {
        "dims": list(grid.dims),
        "bounds": [list(map(float, b)) for b in grid.bounds],
        "dtype": "f32le",
        "order": "x-fastest",
    }
    hdr_path.write_text(json.dumps(header))
    data = np.asarray(grid.values, dtype="<f4").ravel(order="F")
    raw_path.write_bytes(data.tobytes())


def load_volume(path, mmap: bool = False) -> VolumeGrid:
    raw_path, hdr_path = _paths(path)
    try:
        header = json.loads(hdr_path.read_text())
    except FileNotFoundError:
        raise VolumeFormatError(f"missing header {hdr_path}")
    dims = tuple(header["dims"])
    count = int(np.prod(dims))
    if header.get("dtype") != "f32le" or header.get("order") != "x-fastest":
        raise VolumeFormatError(f"unsupported volume encoding in {hdr_path}")
    size = raw_path.stat().st_size
    if size != count * 4:
        raise VolumeFormatError(
            f"{raw_path} holds {size // 4} floats, header says {count}")
    if mmap:
        flat = np.memmap(raw_path, dtype="<f4", mode="r")
    else:
        flat = np.fromfile(raw_path, dtype="<f4")
    values = flat.reshape(dims, order="F")
    return VolumeGrid(values=values, bounds=[tuple(b) for b in header["bounds"]])


# ----------------------------------------------------------------------
# analytic family
# ----------------------------------------------------------------------

@dataclass
class AnalyticFamily:
    """Sum of Gaussian blobs with parameter-driven centers and amplitudes.

    For normalized parameters q in [-1, 1]^m:
        f(x, p) = background
                + sum_b amp_b (1 + amp_coef_b . q) exp(-sum_a (x_a - c_ba(q))^2 / (2 w_ba^2))
        c_b(q) = center_b + center_shift_b^T q
    Evaluable at arbitrary coordinates, so it provides exact ground truth
    at any resolution and quadrature-friendly parameter moments.
    """

    spatial_bounds: list
    param_bounds: list
    blobs: list
    background: float = 0.0
    param_names: list | None = None

    def __post_init__(self):
        if self.param_names is None:
            self.param_names = [f"p{i}" for i in range(len(self.param_bounds))]

    @property
    def m(self) -> int:
        return len(self.param_bounds)

    def _norm_params(self, p):
        p = np.asarray(p, dtype=np.float64)
        out = np.empty_like(p)
        for i, (lo, hi) in enumerate(self.param_bounds):
            out[..., i] = 2.0 * (p[..., i] - lo) / (hi - lo) - 1.0
        return out

    def evaluate(self, x, p) -> np.ndarray:
        """f at physical x [..., 3] and physical p [..., m] (broadcastable)."""
        x = np.asarray(x, dtype=np.float64)
        q = self._norm_params(p)
        total = np.full(np.broadcast_shapes(x.shape[:-1], q.shape[:-1]),
                        float(self.background))
        for blob in self.blobs:
            center = np.asarray(blob["center"], dtype=np.float64)
            shift = np.asarray(blob.get("center_shift",
                                        np.zeros((self.m, 3))), dtype=np.float64)
            width = np.broadcast_to(np.asarray(blob["width"], dtype=np.float64), (3,))
            amp = float(blob["amplitude"])
            acoef = np.asarray(blob.get("amplitude_coef", np.zeros(self.m)),
                               dtype=np.float64)
            c = center + q @ shift
            d2 = ((x - c) / width) ** 2
            total = total + amp * (1.0 + q @ acoef) * np.exp(-0.5 * d2.sum(axis=-1))
        return total

    def domain_spec(self, v_min: float, v_max: float) -> DomainSpec:
        return DomainSpec(
            spatial_bounds=[tuple(b) for b in self.spatial_bounds],
            param_bounds=[tuple(b) for b in self.param_bounds],
            v_min=v_min, v_max=v_max,
            param_names=list(self.param_names),
        )

    def to_dict(self) -> dict:
        return {
            "spatial_bounds": [list(b) for b in self.spatial_bounds],
            "param_bounds": [list(b) for b in self.param_bounds],
            "param_names": list(self.param_names),
            "background": float(self.background),
            "blobs": [
                {
                    "center": list(map(float, b["center"])),
                    "center_shift": np.asarray(
                        b.get("center_shift", np.zeros((self.m, 3)))).tolist(),
                    "width": (list(map(float, np.atleast_1d(b["width"])))
                              if np.ndim(b["width"]) else float(b["width"])),
                    "amplitude": float(b["amplitude"]),
                    "amplitude_coef": list(map(float, b.get("amplitude_coef",
                                                            np.zeros(self.m)))),
                }
                for b in self.blobs
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticFamily":
        return cls(
            spatial_bounds=[tuple(b) for b in d["spatial_bounds"]],
            param_bounds=[tuple(b) for b in d["param_bounds"]],
            blobs=list(d["blobs"]),
            background=float(d.get("background", 0.0)),
            param_names=list(d["param_names"]) if d.get("param_names") else None,
        )


def default_desk_family() -> AnalyticFamily:
    """Desk-scale family: 3 blobs, m=2.

    p0 translates the first blob along x (the planted, parameter-localized
    feature for inverse search); p1 scales the second blob's amplitude.
    The moving blob is anisotropic so that regional value distributions
    pin its orientation: a spherical blob leaves a whole sphere of box
    placements with identical summaries, which no distribution-matching
    search could disambiguate.
    """
    return AnalyticFamily(
        spatial_bounds=[(0.0, 1.0)] * 3,
        param_bounds=[(-1.0, 1.0), (0.5, 2.0)],
        param_names=["shift", "amp"],
        background=0.05,
        blobs=[
            {"center": [0.30, 0.50, 0.50], "width": [0.07, 0.11, 0.17],
             "amplitude": 1.0,
             "center_shift": [[0.22, 0.0, 0.0], [0.0, 0.0, 0.0]]},
            {"center": [0.70, 0.30, 0.40], "width": 0.14, "amplitude": 0.8,
             "amplitude_coef": [0.0, 0.45]},
            {"center": [0.55, 0.75, 0.65], "width": 0.18, "amplitude": 0.6},
        ],
    )


def nyx_like_family() -> AnalyticFamily:
    """m=3 family on cosmology-style parameter bounds (for range tests)."""
    return AnalyticFamily(
        spatial_bounds=[(0.0, 1.0)] * 3,
        param_bounds=[(0.12, 0.155), (0.0215, 0.0235), (0.55, 0.85)],
        param_names=["OmM", "OmB", "h"],
        background=0.1,
        blobs=[
            {"center": [0.4, 0.5, 0.5], "width": 0.15, "amplitude": 1.0,
             "center_shift": [[0.1, 0.0, 0.0], [0.0, 0.05, 0.0], [0.0, 0.0, 0.08]]},
            {"center": [0.65, 0.4, 0.6], "width": 0.2, "amplitude": 0.7,
             "amplitude_coef": [0.3, 0.1, 0.2]},
        ],
    )


# ----------------------------------------------------------------------
# ensemble generation and manifest
# ----------------------------------------------------------------------

@dataclass
class EnsembleManifest:
    members: list                   # {params: [m], path: str, split: str}
    domain: DomainSpec
    generator: dict = field(default_factory=dict)
    root: str = "."

    def member_params(self, split: str | None = None) -> np.ndarray:
        rows = [m["params"] for m in self.members
                if split is None or m["split"] == split]
        return np.asarray(rows, dtype=np.float64)

    def member_indices(self, split: str) -> list:
        return [i for i, m in enumerate(self.members) if m["split"] == split]

    def load_member(self, i: int, mmap: bool = False) -> VolumeGrid:
        return load_volume(os.path.join(self.root, self.members[i]["path"]), mmap=mmap)

    def save(self, path) -> None:
        doc = {
            "members": self.members,
            "domain": self.domain.to_dict(),
            "generator": self.generator,
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path, check: bool = True) -> "EnsembleManifest":
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.json"
        doc = json.loads(p.read_text())
        man = cls(members=doc["members"],
                  domain=DomainSpec.from_dict(doc["domain"]),
                  generator=doc.get("generator", {}),
                  root=str(p.parent))
        if check:
            man.check_integrity()
        return man

    def check_integrity(self) -> None:
        dims = None
        for i, m in enumerate(self.members):
            raw, hdr = _paths(os.path.join(self.root, m["path"]))
            if not raw.exists() or not hdr.exists():
                raise VolumeFormatError(f"member {i} volume missing: {raw}")
            d = tuple(json.loads(hdr.read_text())["dims"])
            if dims is None:
                dims = d
            elif d != dims:
                raise VolumeFormatError(
                    f"member {i} dims {d} differ from {dims}")
            if len(m["params"]) != len(self.domain.param_bounds):
                raise VolumeFormatError(f"member {i} parameter vector length")


def generate(family: AnalyticFamily, dims, n_train: int, n_test: int,
             out_dir, seed: int = 0) -> EnsembleManifest:
    """Sample parameters, synthesize volumes, write manifest + files.

    Deterministic under seed.  Value normalization (v_min/v_max) is taken
    from the training split.
    """
    if min(dims) < 8:
        raise ValueError("dims must be >= 8 per axis")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    m = family.m
    n = n_train + n_test
    lo = np.array([b[0] for b in family.param_bounds])
    hi = np.array([b[1] for b in family.param_bounds])
    params = rng.uniform(lo, hi, size=(n, m))

    centers = voxel_centers(dims, family.spatial_bounds)
    gx, gy, gz = np.meshgrid(*centers, indexing="ij")
    coords = np.stack([gx, gy, gz], axis=-1)

    members = []
    v_min, v_max = np.inf, -np.inf
    for i in range(n):
        vals = family.evaluate(coords, params[i]).astype(np.float32)
        split = "train" if i < n_train else "test"
        name = f"member_{i:04d}"
        save_volume(VolumeGrid(values=vals, bounds=family.spatial_bounds),
                    out_dir / name)
        members.append({"params": [float(v) for v in params[i]],
                        "path": name, "split": split})
        if split == "train":
            v_min = min(v_min, float(vals.min()))
            v_max = max(v_max, float(vals.max()))
    if v_max - v_min < 1e-12:
        # constant ensemble: widen artificially so normalization stays invertible
        v_min, v_max = v_min - 0.5, v_min + 0.5

    domain = family.domain_spec(v_min=v_min, v_max=v_max)
    manifest = EnsembleManifest(
        members=members, domain=domain,
        generator={"family": family.to_dict(), "seed": seed, "dims": list(dims)},
        root=str(out_dir),
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


# ----------------------------------------------------------------------
# quadrature / MC oracles
# ----------------------------------------------------------------------

def _gl_nodes(specs, order: int):
    """Tensor Gauss-Legendre nodes/weights over the ranged parameter axes."""
    nodes_1d, weights_1d = np.polynomial.legendre.leggauss(order)
    axes_nodes, axes_weights = [], []
    for spec in specs:
        if spec[0] == POINT:
            axes_nodes.append(np.array([spec[1]]))
            axes_weights.append(np.array([1.0]))
        else:
            lo, hi = spec[1], spec[2]
            axes_nodes.append(0.5 * (hi - lo) * nodes_1d + 0.5 * (hi + lo))
            axes_weights.append(weights_1d * 0.5)   # normalized: weights sum to 1
    grids = np.meshgrid(*axes_nodes, indexing="ij")
    p = np.stack([g.ravel() for g in grids], axis=-1)
    wgrid = np.ones_like(grids[0])
    for i, aw in enumerate(axes_weights):
        shape = [1] * len(axes_weights)
        shape[i] = len(aw)
        wgrid = wgrid * aw.reshape(shape)
    return p, wgrid.ravel()


def oracle_stats(family: AnalyticFamily, x, param_specs: list,
                 order: int = 32, mc: int | None = None, seed: int = 0):
    """Ground-truth regional mean/variance at physical points x [..., 3].

    Gauss-Legendre tensor quadrature (order per ranged axis) by default;
    mc=N switches to Monte Carlo and also returns the standard error of
    the mean.
    """
    x = np.asarray(x, dtype=np.float64)
    if mc is not None:
        rng = np.random.default_rng(seed)
        draws = []
        for spec in param_specs:
            if spec[0] == POINT:
                draws.append(np.full(mc, spec[1]))
            else:
                draws.append(rng.uniform(spec[1], spec[2], mc))
        p = np.stack(draws, axis=-1)
        vals = family.evaluate(x[..., None, :], p)
        mean = vals.mean(axis=-1)
        var = vals.var(axis=-1, ddof=1)
        se = np.sqrt(var / mc)
        return mean, var, se
    p, w = _gl_nodes(param_specs, order)
    vals = family.evaluate(x[..., None, :], p)
    mean = vals @ w
    second = (vals * vals) @ w
    return mean, np.maximum(second - mean ** 2, 0.0)


def oracle_cov(family: AnalyticFamily, x0, x1, param_specs: list, order: int = 32):
    """Ground-truth covariance between two physical points over a box."""
    p, w = _gl_nodes(param_specs, order)
    v0 = family.evaluate(np.asarray(x0, dtype=np.float64)[..., None, :], p)
    v1 = family.evaluate(np.asarray(x1, dtype=np.float64)[..., None, :], p)
    return (v0 * v1) @ w - (v0 @ w) * (v1 @ w)
