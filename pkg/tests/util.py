"""Shared test helpers: independent reference forward pass, finite differences."""

from __future__ import annotations

import numpy as np

from xinr.model import ExplorableModel


def reference_forward(x: np.ndarray, p: np.ndarray, model: ExplorableModel) -> np.ndarray:
    """Straight-line reimplementation of the forward pass.

    Written directly from the architecture definition with no shared code
    paths (no tape, no generic interpolation).  Formula order mirrors the
    engine so outputs are comparable bit-for-bit.
    """
    x = np.asarray(x)
    p = np.asarray(p)
    arch = model.arch

    def interp_1d(table, coords):
        r = table.shape[0]
        h = 2.0 / (r - 1)
        j = np.minimum(((np.asarray(coords, dtype=np.float64) + 1.0) / h).astype(np.int64), r - 2)
        left = (-1.0 + j * h).astype(coords.dtype)
        t = (coords - left) * coords.dtype.type(1.0 / h)
        parts = np.stack([table[j] * (1.0 - t)[:, None],
                          table[j + 1] * t[:, None]], axis=-2)
        return parts.sum(axis=-2)

    def interp_2d(table, coords):
        r = table.shape[0]
        h = 2.0 / (r - 1)
        c64 = np.asarray(coords, dtype=np.float64)
        ju = np.minimum(((c64[:, 0] + 1.0) / h).astype(np.int64), r - 2)
        jv = np.minimum(((c64[:, 1] + 1.0) / h).astype(np.int64), r - 2)
        tu = (coords[:, 0] - (-1.0 + ju * h).astype(coords.dtype)) * coords.dtype.type(1.0 / h)
        tv = (coords[:, 1] - (-1.0 + jv * h).astype(coords.dtype)) * coords.dtype.type(1.0 / h)
        flat = table.reshape(-1, table.shape[-1])
        parts = np.stack([
            flat[ju * r + jv] * ((1.0 - tu) * (1.0 - tv))[:, None],
            flat[ju * r + jv + 1] * ((1.0 - tu) * tv)[:, None],
            flat[(ju + 1) * r + jv] * (tu * (1.0 - tv))[:, None],
            flat[(ju + 1) * r + jv + 1] * (tu * tv)[:, None],
        ], axis=-2)
        return parts.sum(axis=-2)

    def interp_3d(table, coords):
        r = table.shape[0]
        h = 2.0 / (r - 1)
        c64 = np.asarray(coords, dtype=np.float64)
        jx = np.minimum(((c64[:, 0] + 1.0) / h).astype(np.int64), r - 2)
        jy = np.minimum(((c64[:, 1] + 1.0) / h).astype(np.int64), r - 2)
        jz = np.minimum(((c64[:, 2] + 1.0) / h).astype(np.int64), r - 2)
        tx = (coords[:, 0] - (-1.0 + jx * h).astype(coords.dtype)) * coords.dtype.type(1.0 / h)
        ty = (coords[:, 1] - (-1.0 + jy * h).astype(coords.dtype)) * coords.dtype.type(1.0 / h)
        tz = (coords[:, 2] - (-1.0 + jz * h).astype(coords.dtype)) * coords.dtype.type(1.0 / h)
        flat = table.reshape(-1, table.shape[-1])
        parts = []
        for bx, wx in ((0, 1.0 - tx), (1, tx)):
            for by, wy in ((0, 1.0 - ty), (1, ty)):
                for bz, wz in ((0, 1.0 - tz), (1, tz)):
                    idx = (jx + bx) * r * r + (jy + by) * r + (jz + bz)
                    parts.append(flat[idx] * (wx * wy * wz)[:, None])
        return np.stack(parts, axis=-2).sum(axis=-2)

    feats = model.features
    if arch.spatial_variant == "grid_only":
        fs = interp_3d(feats.grid3d, x)
    elif arch.spatial_variant == "planes_only":
        fs = interp_2d(feats.planes["xy"], x[:, [0, 1]])
        for name, cols in (("yz", [1, 2]), ("xz", [0, 2])):
            nxt = interp_2d(feats.planes[name], x[:, cols])
            fs = fs * nxt if arch.fusion == "hadamard" else fs + nxt
    else:
        fs = interp_3d(feats.grid3d, x)
        for name, cols in (("xy", [0, 1]), ("yz", [1, 2]), ("xz", [0, 2])):
            nxt = interp_2d(feats.planes[name], x[:, cols])
            fs = fs * nxt if arch.fusion == "hadamard" else fs + nxt

    fp = interp_1d(feats.lines[0], p[:, 0])
    for i in range(1, arch.n_params_m):
        nxt = interp_1d(feats.lines[i], p[:, i])
        fp = fp * nxt if arch.fusion == "hadamard" else fp + nxt

    h = np.concatenate([fs, fp], axis=-1)
    n = len(model.decoder.weights)
    for i in range(n):
        h = h @ model.decoder.weights[i].T + model.decoder.biases[i]
        if i < n - 1 and arch.activation == "relu":
            h = np.maximum(h, 0.0)
    return h[..., 0]


def central_diff(f, x0: float, h: float = 1e-4) -> float:
    return (f(x0 + h) - f(x0 - h)) / (2.0 * h)


def rel_err(a, b, floor: float = 1e-12) -> float:
    a, b = float(a), float(b)
    return abs(a - b) / max(abs(a), abs(b), floor)
