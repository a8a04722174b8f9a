"""Hybrid feature-grid model: learnable tensors, interpolation, forward pass.

The function F(X, P) -> Y is built from a low-resolution 3D feature grid,
three high-resolution 2D feature planes (XY, YZ, XZ), one 1D feature line
per simulation parameter, and a small MLP decoder.  Spatial features are
fused with a Hadamard product (grid * XY * YZ * XZ), parameter features
likewise across lines, and the concatenated ensemble feature is decoded
to a single normalized scalar.

Coordinates are normalized: spatial and parameter axes live in [-1, 1],
training values in [0, 1].  Out-of-range queries raise DomainError rather
than clamping, since silent clamping would corrupt range statistics.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

__all__ = [
    "ArchConfig", "DomainSpec", "FeatureStore", "MLPDecoder",
    "ExplorableModel", "DomainError", "ConfigError",
    "PLANE_AXES", "interpolate", "corner_weights",
    "fuse_spatial", "fuse_params", "forward",
]

# plane name -> spatial axes it spans
PLANE_AXES = (("xy", (0, 1)), ("yz", (1, 2)), ("xz", (0, 2)))

SPATIAL_VARIANTS = ("hybrid", "grid_only", "planes_only")
FUSIONS = ("hadamard", "addition")
ACTIVATIONS = ("relu", "identity")


class DomainError(ValueError):
    """Coordinate outside the normalized domain; carries the axis name."""

    def __init__(self, axis: str, detail: str = ""):
        self.axis = axis
        super().__init__(f"coordinate out of range on axis '{axis}'" +
                         (f": {detail}" if detail else ""))


class ConfigError(ValueError):
    pass


@dataclass
class ArchConfig:
    spatial_grid_res: int = 64
    plane_res: int = 256
    line_res: int = 16
    spatial_dim_C: int = 64
    param_dim_Cp: int = 16
    decoder_hidden: int = 128
    decoder_layers: int = 3
    activation: str = "relu"
    fusion: str = "hadamard"
    spatial_variant: str = "hybrid"
    n_params_m: int = 1

    def validate(self) -> "ArchConfig":
        for name in ("spatial_grid_res", "plane_res", "line_res"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be >= 2")
        for name in ("spatial_dim_C", "param_dim_Cp", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.decoder_layers < 1:
            raise ConfigError("decoder_layers must be >= 1")
        if self.n_params_m < 1:
            raise ConfigError("n_params_m must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion '{self.fusion}'")
        if self.spatial_variant not in SPATIAL_VARIANTS:
            raise ConfigError(f"unknown spatial_variant '{self.spatial_variant}'")
        return self

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d).validate()


@dataclass
class DomainSpec:
    """Physical bounds and the physical<->normalized coordinate maps.

    Spatial and parameter axes map [min, max] -> [-1, 1]; values map
    [v_min, v_max] -> [0, 1].
    """

    spatial_bounds: list            # 3 pairs (lo, hi), physical units
    param_bounds: list              # m pairs (lo, hi)
    v_min: float
    v_max: float
    spatial_names: list = field(default_factory=lambda: ["x", "y", "z"])
    param_names: list | None = None

    def __post_init__(self):
        if self.param_names is None:
            self.param_names = [f"p{i}" for i in range(len(self.param_bounds))]
        for name, (lo, hi) in zip(self.axis_names(), list(self.spatial_bounds) + list(self.param_bounds)):
            if not lo < hi:
                raise ConfigError(f"bounds on axis '{name}' must satisfy min < max")
        if not self.v_min < self.v_max:
            raise ConfigError("value range must satisfy v_min < v_max")

    def axis_names(self) -> list:
        return list(self.spatial_names) + list(self.param_names)

    @staticmethod
    def _norm(x, bounds):
        lo, hi = bounds
        return 2.0 * (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) - 1.0

    @staticmethod
    def _denorm(u, bounds):
        lo, hi = bounds
        return lo + (np.asarray(u, dtype=np.float64) + 1.0) * 0.5 * (hi - lo)

    def normalize_spatial(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64)
        return np.stack([self._norm(xyz[..., i], self.spatial_bounds[i]) for i in range(3)], axis=-1)

    def denormalize_spatial(self, u):
        u = np.asarray(u, dtype=np.float64)
        return np.stack([self._denorm(u[..., i], self.spatial_bounds[i]) for i in range(3)], axis=-1)

    def normalize_params(self, p):
        p = np.asarray(p, dtype=np.float64)
        return np.stack([self._norm(p[..., i], self.param_bounds[i]) for i in range(len(self.param_bounds))], axis=-1)

    def denormalize_params(self, u):
        u = np.asarray(u, dtype=np.float64)
        return np.stack([self._denorm(u[..., i], self.param_bounds[i]) for i in range(len(self.param_bounds))], axis=-1)

    def normalize_value(self, v):
        return (np.asarray(v, dtype=np.float64) - self.v_min) / (self.v_max - self.v_min)

    def denormalize_value(self, y):
        return self.v_min + np.asarray(y, dtype=np.float64) * (self.v_max - self.v_min)

    def value_scale(self) -> float:
        return self.v_max - self.v_min

    def to_dict(self) -> dict:
        return {
            "spatial_bounds": [list(map(float, b)) for b in self.spatial_bounds],
            "param_bounds": [list(map(float, b)) for b in self.param_bounds],
            "v_min": float(self.v_min),
            "v_max": float(self.v_max),
            "spatial_names": list(self.spatial_names),
            "param_names": list(self.param_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(
            spatial_bounds=[tuple(b) for b in d["spatial_bounds"]],
            param_bounds=[tuple(b) for b in d["param_bounds"]],
            v_min=d["v_min"], v_max=d["v_max"],
            spatial_names=list(d.get("spatial_names", ["x", "y", "z"])),
            param_names=list(d["param_names"]) if d.get("param_names") else None,
        )


@dataclass
class FeatureStore:
    """Dense learnable feature tensors.

    grid3d: [R, R, R, C]; planes: dict of [Rp, Rp, C]; lines: m of [Rl, Cp].
    """

    grid3d: np.ndarray
    planes: dict
    lines: list

    @classmethod
    def initialize(cls, arch: ArchConfig, rng: np.random.Generator, dtype=np.float32):
        r, rp, rl = arch.spatial_grid_res, arch.plane_res, arch.line_res
        c, cp = arch.spatial_dim_C, arch.param_dim_Cp
        grid = rng.uniform(-1e-4, 1e-4, size=(r, r, r, c)).astype(dtype)
        planes = {name: rng.uniform(0.999, 1.001, size=(rp, rp, c)).astype(dtype)
                  for name, _ in PLANE_AXES}
        lines = [rng.uniform(0.01, 0.25, size=(rl, cp)).astype(dtype)
                 for _ in range(arch.n_params_m)]
        return cls(grid3d=grid, planes=planes, lines=lines)

    def tensors(self) -> dict:
        out = {"grid3d": self.grid3d}
        for name, _ in PLANE_AXES:
            out[f"plane_{name}"] = self.planes[name]
        for i, line in enumerate(self.lines):
            out[f"line_{i}"] = line
        return out


@dataclass
class MLPDecoder:
    """Affine layers [out, in] with biases; hidden activations, affine output."""

    weights: list
    biases: list

    @classmethod
    def initialize(cls, arch: ArchConfig, rng: np.random.Generator, dtype=np.float32):
        widths = ([arch.spatial_dim_C + arch.param_dim_Cp]
                  + [arch.decoder_hidden] * arch.decoder_layers + [1])
        weights, biases = [], []
        for i in range(len(widths) - 1):
            fan_in, fan_out = widths[i], widths[i + 1]
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights=weights, biases=biases)

    def tensors(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"decoder_w{i}"] = w
            out[f"decoder_b{i}"] = b
        return out


@dataclass
class ExplorableModel:
    """All learnable tensors plus architecture and domain metadata.

    Immutable by convention after construction or loading; training builds
    its own instance and mutates through a single writer.
    """

    arch: ArchConfig
    features: FeatureStore
    decoder: MLPDecoder
    domain: DomainSpec

    _f64_cache: "ExplorableModel | None" = field(default=None, repr=False, compare=False)

    @classmethod
    def initialize(cls, arch: ArchConfig, domain: DomainSpec, seed: int = 0,
                   dtype=np.float32) -> "ExplorableModel":
        arch.validate()
        if len(domain.param_bounds) != arch.n_params_m:
            raise ConfigError("domain parameter count does not match arch.n_params_m")
        rng = np.random.default_rng(seed)
        return cls(
            arch=arch,
            features=FeatureStore.initialize(arch, rng, dtype=dtype),
            decoder=MLPDecoder.initialize(arch, rng, dtype=dtype),
            domain=domain,
        )

    def tensors(self) -> dict:
        out = self.features.tensors()
        out.update(self.decoder.tensors())
        return out

    def astype(self, dtype) -> "ExplorableModel":
        feats = FeatureStore(
            grid3d=self.features.grid3d.astype(dtype),
            planes={k: v.astype(dtype) for k, v in self.features.planes.items()},
            lines=[l.astype(dtype) for l in self.features.lines],
        )
        dec = MLPDecoder(
            weights=[w.astype(dtype) for w in self.decoder.weights],
            biases=[b.astype(dtype) for b in self.decoder.biases],
        )
        return ExplorableModel(arch=self.arch, features=feats, decoder=dec, domain=self.domain)

    def as_f64(self) -> "ExplorableModel":
        """Cached float64 view used by the evaluation and propagation paths."""
        if self._f64_cache is None:
            object.__setattr__(self, "_f64_cache", self.astype(np.float64))
        return self._f64_cache

    def equals(self, other: "ExplorableModel") -> bool:
        if self.arch != other.arch or self.domain.to_dict() != other.domain.to_dict():
            return False
        a, b = self.tensors(), other.tensors()
        return all(np.array_equal(a[k], b[k]) and a[k].dtype == b[k].dtype for k in a)


# ----------------------------------------------------------------------
# interpolation
# ----------------------------------------------------------------------

def axis_vertices(res: int) -> np.ndarray:
    """Vertex coordinates along one axis: `res` vertices spanning [-1, 1]."""
    return np.linspace(-1.0, 1.0, res)


def _locate(x: np.ndarray, res: int, axis_name: str):
    """Cell index and the cell's left-vertex coordinate for x in [-1, 1]."""
    if not np.all(np.isfinite(x)):
        raise DomainError(axis_name, "non-finite coordinate")
    if np.any(x < -1.0) or np.any(x > 1.0):
        bad = x[(x < -1.0) | (x > 1.0)]
        raise DomainError(axis_name, f"value {bad.flat[0]:.6g} outside [-1, 1]")
    h = 2.0 / (res - 1)
    j = np.minimum(((x + 1.0) / h).astype(np.int64), res - 2)
    return j, -1.0 + j * h, h


def corner_weights(coords, res: list, axis_names: list):
    """Corner flat indices and multilinear weights for a batch of points.

    coords: [B, D] Var or ndarray in [-1, 1].  Returns (idx [B, 2^D] int,
    w [B, 2^D] matching coords' taped-ness).  Corner order: axis-major bit
    enumeration, last axis fastest; flat index uses C-order strides.
    """
    raw = ad.value_of(coords)
    dtype = raw.dtype
    raw64 = raw.astype(np.float64, copy=False)
    d = raw.shape[-1]
    cells, lefts, steps = [], [], []
    for a in range(d):
        j, left, h = _locate(raw64[..., a], res[a], axis_names[a])
        cells.append(j)
        lefts.append(left.astype(dtype))
        steps.append(h)

    # local coordinates t in [0, 1]; taped when coords is a Var
    ts = []
    for a in range(d):
        xa = coords[..., a] if isinstance(coords, ad.Var) else raw[..., a]
        ts.append((xa - lefts[a]) * dtype.type(1.0 / steps[a]))

    strides = np.cumprod([1] + res[::-1][:-1])[::-1]  # C-order strides
    idx_parts, w_parts = [], []
    for bits in itertools.product((0, 1), repeat=d):
        idx = sum((cells[a] + bits[a]) * int(strides[a]) for a in range(d))
        w = None
        for a in range(d):
            f = ts[a] if bits[a] else (1.0 - ts[a])
            w = f if w is None else w * f
        idx_parts.append(idx)
        w_parts.append(w)
    idx = np.stack(idx_parts, axis=-1)
    w = ad.stack(w_parts, axis=-1) if isinstance(coords, ad.Var) else np.stack(w_parts, axis=-1)
    return idx, w


def interpolate(table, res: list, coords, axis_names: list):
    """Exact multilinear interpolation of vertex features.

    table: [prod(res), C] flat vertex features (Var or ndarray);
    coords: [B, D]; returns [B, C].  Exact on vertices, affine along each
    axis with the others held fixed, continuous across cell boundaries.
    """
    idx, w = corner_weights(coords, res, axis_names)
    if isinstance(table, ad.Var):
        gathered = ad.take_rows(table, idx)                 # [B, 2^D, C]
    else:
        gathered = np.asarray(table)[idx]
    if isinstance(w, ad.Var):
        w3 = ad.reshape(w, (*ad.value_of(w).shape, 1))
    else:
        w3 = w[..., None]
    return ad.vsum(ad.mul(gathered, w3), axis=-2)


def _flat(table):
    v = ad.value_of(table)
    return v.reshape(-1, v.shape[-1])


# ----------------------------------------------------------------------
# model evaluation
# ----------------------------------------------------------------------

def spatial_structures(model_or_arch):
    """Names and axis tuples of the spatial structures the variant uses."""
    arch = model_or_arch.arch if isinstance(model_or_arch, ExplorableModel) else model_or_arch
    if arch.spatial_variant == "grid_only":
        return [("grid3d", (0, 1, 2))]
    planes = [(f"plane_{name}", axes) for name, axes in PLANE_AXES]
    if arch.spatial_variant == "planes_only":
        return planes
    return [("grid3d", (0, 1, 2))] + planes


def _structure_table(model: ExplorableModel, name: str, tables: dict | None = None):
    if tables is not None and name in tables:
        return tables[name]
    if name == "grid3d":
        return _flat(model.features.grid3d)
    if name.startswith("plane_"):
        return _flat(model.features.planes[name[len("plane_"):]])
    if name.startswith("line_"):
        return _flat(model.features.lines[int(name[len("line_"):])])
    raise KeyError(name)


def structure_res(model: ExplorableModel, name: str) -> list:
    if name == "grid3d":
        return [model.arch.spatial_grid_res] * 3
    if name.startswith("plane_"):
        return [model.arch.plane_res] * 2
    return [model.arch.line_res]


def _fuse(parts, fusion: str):
    out = None
    for p in parts:
        if out is None:
            out = p
        elif fusion == "hadamard":
            out = out * p
        else:
            out = out + p
    return out


def fuse_spatial(x, model: ExplorableModel, tables: dict | None = None):
    """Fused spatial feature at normalized coords x [B, 3] -> [B, C]."""
    names = model.domain.spatial_names
    parts = []
    for sname, axes in spatial_structures(model):
        table = _structure_table(model, sname, tables)
        coords = x[..., list(axes)]
        parts.append(interpolate(table, structure_res(model, sname), coords,
                                 [names[a] for a in axes]))
    return _fuse(parts, model.arch.fusion)


def fuse_params(p, model: ExplorableModel, tables: dict | None = None):
    """Fused parameter feature at normalized params p [B, m] -> [B, Cp].

    m = 1 returns the single line's interpolation unchanged.
    """
    names = model.domain.param_names
    parts = []
    for i in range(model.arch.n_params_m):
        table = _structure_table(model, f"line_{i}", tables)
        coords = p[..., i:i + 1]
        parts.append(interpolate(table, [model.arch.line_res], coords, [names[i]]))
    return _fuse(parts, model.arch.fusion)


def transpose(w):
    """Matrix transpose, taped when given a Var."""
    if not isinstance(w, ad.Var):
        return np.asarray(w).T

    def fwd(values, slot=w.slot):
        return np.swapaxes(values[slot], -1, -2)

    def bwd(g, values):
        return (np.swapaxes(g, -1, -2),)

    return w.tape._apply("transpose", fwd, bwd, (w,))


def decode(feat, model: ExplorableModel, tables: dict | None = None):
    """Run the MLP decoder on ensemble features [B, C+Cp] -> [B]."""
    h = feat
    n = len(model.decoder.weights)
    for i in range(n):
        w = (tables or {}).get(f"decoder_w{i}", model.decoder.weights[i])
        b = (tables or {}).get(f"decoder_b{i}", model.decoder.biases[i])
        h = ad.add(ad.matmul(h, transpose(w)), b)
        if i < n - 1 and model.arch.activation == "relu":
            h = ad.relu(h)
    return h[..., 0]


def forward(x, p, model: ExplorableModel, tables: dict | None = None):
    """Deterministic forward pass F(x, p) on normalized inputs.

    x: [B, 3]; p: [B, m]; returns [B] normalized scalar values.
    Differentiable w.r.t. inputs and all learnables when given Vars.
    """
    fs = fuse_spatial(x, model, tables)
    fp = fuse_params(p, model, tables)
    if isinstance(fs, ad.Var) or isinstance(fp, ad.Var):
        feat = ad.concat([fs, fp], axis=-1)
    else:
        feat = np.concatenate([fs, fp], axis=-1)
    return decode(feat, model, tables)
