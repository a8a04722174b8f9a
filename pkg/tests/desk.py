"""Desk-scale fixtures: the trained model every acceptance criterion shares.

Artifacts are cached under tests/_artifacts keyed by configuration hash, so
repeated runs skip the ~5 minute training; the recorded wall time of the
original run travels with the checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from xinr import data as D
from xinr import model as M
from xinr import training as T
from xinr.checkpoint import load_checkpoint, save_checkpoint

ARTIFACTS = Path(__file__).resolve().parent / "_artifacts"

DESK = {
    "data_seed": 20240801,
    "dims": 32,
    "n_train": 40,
    "n_test": 10,
    "train_seed": 1,
    "epochs": 14,
    "batch_size": 4096,
    "steps_per_epoch": 320,
    "arch": {
        "spatial_grid_res": 32, "plane_res": 64, "line_res": 16,
        "spatial_dim_C": 32, "param_dim_Cp": 16,
        "decoder_hidden": 128, "decoder_layers": 3, "n_params_m": 2,
    },
}


def _key() -> str:
    doc = {"config": DESK, "family": D.default_desk_family().to_dict()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def desk_paths():
    root = ARTIFACTS / _key()
    return SimpleNamespace(
        root=root,
        data=root / "data",
        model=root / "model.xinr",
        meta=root / "meta.json",
    )


def build_desk(force: bool = False) -> SimpleNamespace:
    """Generate + train the desk model, or load it from the cache."""
    p = desk_paths()
    if not force and p.model.exists() and p.meta.exists():
        manifest = D.EnsembleManifest.load(p.data)
        model = load_checkpoint(p.model)
        meta = json.loads(p.meta.read_text())
        return SimpleNamespace(model=model, manifest=manifest, meta=meta, paths=p)

    p.root.mkdir(parents=True, exist_ok=True)
    fam = D.default_desk_family()
    manifest = D.generate(fam, (DESK["dims"],) * 3, DESK["n_train"], DESK["n_test"],
                          p.data, seed=DESK["data_seed"])
    ds = T.EnsembleDataset(manifest)
    arch = M.ArchConfig(**DESK["arch"])
    model = M.ExplorableModel.initialize(arch, manifest.domain, seed=DESK["train_seed"])
    cfg = T.TrainConfig(epochs=DESK["epochs"], batch_size=DESK["batch_size"],
                        steps_per_epoch=DESK["steps_per_epoch"],
                        seed=DESK["train_seed"],
                        history_path=str(p.root / "history.jsonl"))
    t0 = time.perf_counter()
    trained, history = T.train(model, ds, cfg)
    seconds = time.perf_counter() - t0
    save_checkpoint(trained, p.model)
    meta = {"train_seconds": seconds, "history": history, "config": DESK}
    p.meta.write_text(json.dumps(meta))
    return SimpleNamespace(model=trained, manifest=manifest, meta=meta, paths=p)


def held_out_scores(model, manifest):
    """Per-member (psnr, md) on the test split, normalized values."""
    from xinr import explore as E
    from xinr import metrics
    rows = []
    for i in manifest.member_indices("test"):
        grid = manifest.load_member(i)
        pred = E.predict_volume(model, manifest.members[i]["params"], grid.dims)
        tn = manifest.domain.normalize_value(grid.values)
        pn = manifest.domain.normalize_value(pred.values)
        rows.append((metrics.psnr(pn, tn, 1.0), metrics.max_difference(pn, tn)))
    return rows
