"""Minibatch Adam training of the model against an ensemble dataset.

Loss is fixed MSE on normalized values.  Quantities that feed the PAF
pipeline later run in float64; the bulk training tensors stay float32.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .data import EnsembleManifest, voxel_centers

__all__ = ["TrainConfig", "EnsembleDataset", "Adam", "train", "sample_batch",
           "TrainingDivergedError"]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4096
    steps_per_epoch: int | None = None
    lr_features: float = 5e-3
    lr_decoder: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    seed: int = 0
    val_members: list | None = None     # member indices; None -> test split
    cosine_decay: bool = False
    history_path: str | None = None

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_features <= 0 or self.lr_decoder <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        return self


class EnsembleDataset:
    """Training-ready view of a manifest: normalized values and parameters."""

    def __init__(self, manifest: EnsembleManifest, val_members: list | None = None):
        self.manifest = manifest
        self.domain = manifest.domain
        train_idx = manifest.member_indices("train")
        if not train_idx:
            raise ValueError("dataset has no training members")
        if val_members is None:
            val_members = manifest.member_indices("test")
        self.train_idx = train_idx
        self.val_idx = list(val_members)

        def load(indices):
            vols, params = [], []
            for i in indices:
                grid = manifest.load_member(i)
                vols.append(self.domain.normalize_value(grid.values).astype(np.float32))
                params.append(manifest.members[i]["params"])
            vals = np.stack(vols) if vols else np.zeros((0,))
            pn = self.domain.normalize_params(np.asarray(params, dtype=np.float64)) \
                if params else np.zeros((0, len(self.domain.param_bounds)))
            return vals, pn.astype(np.float32)

        self.train_values, self.train_params = load(train_idx)
        self.val_values, self.val_params = load(self.val_idx)
        self.dims = self.train_values.shape[1:]
        bounds = self.domain.spatial_bounds
        centers = voxel_centers(self.dims, bounds)
        self.axis_coords = [
            self.domain._norm(c, bounds[a]).astype(np.float32)
            for a, c in enumerate(centers)
        ]

    @property
    def n_train(self) -> int:
        return self.train_values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.n_train * int(np.prod(self.dims))


def sample_batch(dataset: EnsembleDataset, rng: np.random.Generator,
                 batch_size: int):
    """Uniform draw over (member, voxel) pairs; voxel centers, normalized.

    Deterministic under a seeded generator.
    """
    if dataset.n_train == 0:
        raise ValueError("empty dataset")
    nx, ny, nz = dataset.dims
    mid = rng.integers(0, dataset.n_train, size=batch_size)
    vox = rng.integers(0, nx * ny * nz, size=batch_size)
    ix, rem = np.divmod(vox, ny * nz)
    iy, iz = np.divmod(rem, nz)
    x = np.stack([dataset.axis_coords[0][ix],
                  dataset.axis_coords[1][iy],
                  dataset.axis_coords[2][iz]], axis=-1)
    p = dataset.train_params[mid]
    y = dataset.train_values[mid, ix, iy, iz]
    return x, p, y


class Adam:
    def __init__(self, params: dict, lr: dict, beta1=0.9, beta2=0.99, eps=1e-15):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr_scale: float = 1.0):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            p -= (lr_scale * self.lr[k]) * m_hat / (np.sqrt(v_hat) + self.eps)


def _flat_tables(model: M.ExplorableModel) -> dict:
    """Mutable float32 copies of every learnable, feature tables flattened."""
    out = {}
    for name, arr in model.features.tensors().items():
        out[name] = np.ascontiguousarray(arr, dtype=np.float32).reshape(-1, arr.shape[-1])
    for name, arr in model.decoder.tensors().items():
        out[name] = np.ascontiguousarray(arr, dtype=np.float32)
    return out


def _rebuild(model: M.ExplorableModel, tables: dict) -> M.ExplorableModel:
    feats = M.FeatureStore(
        grid3d=tables["grid3d"].reshape(model.features.grid3d.shape),
        planes={k: tables[f"plane_{k}"].reshape(v.shape)
                for k, v in model.features.planes.items()},
        lines=[tables[f"line_{i}"].reshape(l.shape)
               for i, l in enumerate(model.features.lines)],
    )
    n = len(model.decoder.weights)
    dec = M.MLPDecoder(weights=[tables[f"decoder_w{i}"] for i in range(n)],
                       biases=[tables[f"decoder_b{i}"] for i in range(n)])
    return M.ExplorableModel(arch=model.arch, features=feats, decoder=dec,
                             domain=model.domain)


def _val_mse(model_tables: dict, model: M.ExplorableModel,
             dataset: EnsembleDataset, chunk: int = 8192) -> float:
    if len(dataset.val_idx) == 0:
        return float("nan")
    nx, ny, nz = dataset.dims
    gx, gy, gz = np.meshgrid(dataset.axis_coords[0], dataset.axis_coords[1],
                             dataset.axis_coords[2], indexing="ij")
    coords = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    total, count = 0.0, 0
    tmp = _rebuild(model, model_tables)
    for vi in range(dataset.val_values.shape[0]):
        p = np.broadcast_to(dataset.val_params[vi], (coords.shape[0], dataset.val_params.shape[1]))
        truth = dataset.val_values[vi].reshape(-1)
        for s in range(0, coords.shape[0], chunk):
            pred = M.forward(coords[s:s + chunk], p[s:s + chunk], tmp)
            d = pred - truth[s:s + chunk]
            total += float(np.dot(d, d))
            count += d.size
    return total / count


def train(model: M.ExplorableModel, dataset: EnsembleDataset, cfg: TrainConfig):
    """Fit by minibatch Adam on MSE; returns (trained model, history).

    History records one dict per epoch: {epoch, train_mse, val_mse, seconds}.
    NaN loss aborts with the offending learning rate and batch index.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    tables = _flat_tables(model)
    lr = {k: (cfg.lr_decoder if k.startswith("decoder") else cfg.lr_features)
          for k in tables}
    opt = Adam(tables, lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    steps = cfg.steps_per_epoch or max(1, dataset.n_samples // cfg.batch_size)

    history = []
    hist_file = open(cfg.history_path, "w") if cfg.history_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr_scale = 1.0
            if cfg.cosine_decay:
                lr_scale = 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
            running = 0.0
            for step in range(steps):
                x, p, y = sample_batch(dataset, rng, cfg.batch_size)
                tape = ad.Tape()
                leaves = {k: tape.leaf(v, k) for k, v in tables.items()}
                pred = M.forward(x, p, model, tables=leaves)
                diff = pred - y
                loss = ad.vsum(ad.square(diff)) * np.float32(1.0 / y.size)
                loss_val = float(ad.value_of(loss))
                if not np.isfinite(loss_val):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} batch {step} "
                        f"(lr_features={cfg.lr_features * lr_scale}, "
                        f"lr_decoder={cfg.lr_decoder * lr_scale})")
                report = tape.backward(loss)
                opt.step(report.grads, lr_scale)
                running += loss_val
            rec = {
                "epoch": epoch,
                "train_mse": running / steps,
                "val_mse": _val_mse(tables, model, dataset),
                "seconds": time.perf_counter() - t0,
            }
            history.append(rec)
            if hist_file:
                hist_file.write(json.dumps(rec) + "\n")
                hist_file.flush()
    finally:
        if hist_file:
            hist_file.close()
    return _rebuild(model, tables), history
