"""Axis-aligned query regions in physical units.

Each axis is flagged point-vs-range.  The spatial part is optional: field
queries range only the parameters and evaluate the spatial part per voxel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DomainSpec

__all__ = ["QueryRegion", "RegionError", "POINT", "RANGE"]

POINT = "point"
RANGE = "range"

_MIN_WIDTH = 1e-12


class RegionError(ValueError):
    def __init__(self, detail: str, axis: str | None = None):
        self.axis = axis
        super().__init__(detail)


def _check_spec(spec, name):
    if spec[0] == POINT:
        if len(spec) != 2:
            raise RegionError(f"point spec on axis '{name}' must be (point, value)", name)
    elif spec[0] == RANGE:
        if len(spec) != 3:
            raise RegionError(f"range spec on axis '{name}' must be (range, lo, hi)", name)
        _, lo, hi = spec
        if not np.isfinite(lo) or not np.isfinite(hi):
            raise RegionError(f"non-finite bounds on axis '{name}'", name)
        if hi < lo:
            raise RegionError(f"inverted bounds on axis '{name}': [{lo}, {hi}]", name)
        if hi - lo < _MIN_WIDTH:
            raise RegionError(
                f"degenerate range on axis '{name}'; use a point spec", name)
    else:
        raise RegionError(f"unknown spec kind '{spec[0]}' on axis '{name}'", name)


@dataclass
class QueryRegion:
    """spatial: 3 axis specs or None; params: m axis specs.

    A spec is ("point", value) or ("range", lo, hi), physical units.
    """

    params: list
    spatial: list | None = None

    def validate(self, domain: DomainSpec) -> "QueryRegion":
        if len(self.params) != len(domain.param_bounds):
            raise RegionError(
                f"expected {len(domain.param_bounds)} parameter axes, got {len(self.params)}")
        if not self.params and self.spatial is None:
            raise RegionError("empty region")
        for spec, name in zip(self.params, domain.param_names):
            _check_spec(spec, name)
        if self.spatial is not None:
            if len(self.spatial) != 3:
                raise RegionError("spatial part must have 3 axes")
            for spec, name in zip(self.spatial, domain.spatial_names):
                _check_spec(spec, name)
        return self

    def normalized_params(self, domain: DomainSpec) -> list:
        return [_normalize_spec(s, domain.param_bounds[i], domain.param_names[i])
                for i, s in enumerate(self.params)]

    def normalized_spatial(self, domain: DomainSpec) -> list | None:
        if self.spatial is None:
            return None
        return [_normalize_spec(s, domain.spatial_bounds[i], domain.spatial_names[i])
                for i, s in enumerate(self.spatial)]

    def is_degenerate(self) -> bool:
        axes = list(self.params) + list(self.spatial or [])
        return all(s[0] == POINT for s in axes)

    @classmethod
    def from_json(cls, box: dict, domain: DomainSpec) -> "QueryRegion":
        """Parse {param: {name: [lo, hi] | value}, spatial?: {...}}."""
        def parse(section, names, kind):
            specs = []
            for name in names:
                if name not in section:
                    raise RegionError(f"missing {kind} axis '{name}' in box", name)
                v = section[name]
                if isinstance(v, (list, tuple)):
                    if len(v) != 2:
                        raise RegionError(f"axis '{name}' range must be [lo, hi]", name)
                    specs.append((RANGE, float(v[0]), float(v[1])))
                else:
                    specs.append((POINT, float(v)))
            return specs

        params = parse(box.get("param", {}), domain.param_names, "param")
        spatial = None
        if "spatial" in box and box["spatial"]:
            spatial = parse(box["spatial"], domain.spatial_names, "spatial")
        return cls(params=params, spatial=spatial).validate(domain)

    def to_json(self, domain: DomainSpec) -> dict:
        def unparse(specs, names):
            out = {}
            for spec, name in zip(specs, names):
                out[name] = spec[1] if spec[0] == POINT else [spec[1], spec[2]]
            return out

        box = {"param": unparse(self.params, domain.param_names)}
        if self.spatial is not None:
            box["spatial"] = unparse(self.spatial, domain.spatial_names)
        return box


def _normalize_spec(spec, bounds, name):
    lo_b, hi_b = bounds
    scale = 2.0 / (hi_b - lo_b)

    def norm(v):
        u = (v - lo_b) * scale - 1.0
        if u < -1.0 - 1e-9 or u > 1.0 + 1e-9:
            raise RegionError(f"value {v} outside bounds [{lo_b}, {hi_b}] on axis '{name}'", name)
        return float(np.clip(u, -1.0, 1.0))

    if spec[0] == POINT:
        return (POINT, norm(spec[1]))
    return (RANGE, norm(spec[1]), norm(spec[2]))
