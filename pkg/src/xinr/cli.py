"""Command-line entry points.

All failures exit nonzero with a machine-readable JSON line on stderr:
{"error": <kind>, "detail": <message>}.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import explore, metrics, search as S
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (AnalyticFamily, EnsembleManifest, default_desk_family,
                   load_volume, save_volume)
from .model import ArchConfig, ExplorableModel
from .region import QueryRegion
from .training import EnsembleDataset, TrainConfig, train


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xinr",
                                description="ensemble surrogate engine")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic ensemble")
    g.add_argument("--family", help="family spec JSON (default: desk family)")
    g.add_argument("--dims", type=int, default=32)
    g.add_argument("--train", type=int, default=40)
    g.add_argument("--test", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on an ensemble")
    t.add_argument("--data", required=True)
    t.add_argument("--arch", help="arch config JSON")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=4096)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--lr-features", type=float, default=5e-3)
    t.add_argument("--lr-decoder", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    pr = sub.add_parser("predict", help="predict a volume at one parameter setting")
    pr.add_argument("--model", required=True)
    pr.add_argument("--params", required=True, help="comma-separated physical values")
    pr.add_argument("--dims", type=int, default=64)
    pr.add_argument("--out", required=True)

    st = sub.add_parser("stats", help="UP mean/std fields for a parameter box")
    st.add_argument("--model", required=True)
    st.add_argument("--param-box", required=True)
    st.add_argument("--dims", type=int, default=64)
    st.add_argument("--out-prefix", required=True)

    bl = sub.add_parser("baseline", help="SPL sampling fields + timing row")
    bl.add_argument("--model", required=True)
    bl.add_argument("--param-box", required=True)
    bl.add_argument("--n", type=int, default=30)
    bl.add_argument("--seed", type=int, default=0)
    bl.add_argument("--dims", type=int, default=64)
    bl.add_argument("--out-prefix")

    co = sub.add_parser("corr", help="correlation volume against a reference point")
    co.add_argument("--model", required=True)
    co.add_argument("--param-box", required=True)
    co.add_argument("--ref", required=True, help='"x,y,z" or "auto"')
    co.add_argument("--dims", type=int, default=64)
    co.add_argument("--out", required=True)

    se = sub.add_parser("search", help="inverse search for a target distribution")
    se.add_argument("--model", required=True)
    se.add_argument("--target", required=True)
    se.add_argument("--mode", choices=["joint", "param", "spatial"], default="joint")
    se.add_argument("--iters", type=int, default=1000)
    se.add_argument("--restarts", type=int, default=16)
    se.add_argument("--seed", type=int, default=0)
    se.add_argument("--lr", type=float, default=1e-2)
    se.add_argument("--beta", type=float, default=0.02)
    se.add_argument("--init-scale", type=float, default=0.08)
    se.add_argument("--keep-threshold", type=float, default=1e-5)
    se.add_argument("--loss", choices=["kl", "js"], default="kl")
    se.add_argument("--freeze-scale", action="store_true")
    se.add_argument("--fixed", help="box JSON with specs for non-optimized axes")
    se.add_argument("--stop-on", type=int)
    se.add_argument("--out")

    ev = sub.add_parser("eval", help="PSNR/MD table against ensemble members")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--out")

    sv = sub.add_parser("serve", help="HTTP service")
    sv.add_argument("--model", required=True)
    sv.add_argument("--port", type=int, default=8080)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--data")
    return p


def _load_family(path) -> AnalyticFamily:
    if not path:
        return default_desk_family()
    return AnalyticFamily.from_dict(json.loads(Path(path).read_text()))


def _load_box(path, domain) -> QueryRegion:
    return QueryRegion.from_json(json.loads(Path(path).read_text()), domain)


def _parse_params(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")], dtype=np.float64)


def cmd_gen_data(args):
    from .data import generate
    family = _load_family(args.family)
    man = generate(family, (args.dims,) * 3, args.train, args.test,
                   args.out, seed=args.seed)
    print(json.dumps({"members": len(man.members),
                      "manifest": str(Path(args.out) / "manifest.json")}))


def cmd_train(args):
    man = EnsembleManifest.load(args.data)
    arch_dict = json.loads(Path(args.arch).read_text()) if args.arch else {}
    arch_dict.setdefault("n_params_m", len(man.domain.param_bounds))
    arch = ArchConfig.from_dict(arch_dict)
    model = ExplorableModel.initialize(arch, man.domain, seed=args.seed)
    ds = EnsembleDataset(man)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      steps_per_epoch=args.steps_per_epoch,
                      lr_features=args.lr_features, lr_decoder=args.lr_decoder,
                      seed=args.seed,
                      history_path=str(out.parent / "history.jsonl"))
    trained, history = train(model, ds, cfg)
    save_checkpoint(trained, out)
    print(json.dumps({"model": str(out), "final": history[-1]}))


def cmd_predict(args):
    model = load_checkpoint(args.model)
    params = _parse_params(args.params)
    vol = explore.predict_volume(model, params, (args.dims,) * 3)
    save_volume(vol, args.out)
    print(json.dumps({"out": args.out, "dims": [args.dims] * 3,
                      "min": float(vol.values.min()), "max": float(vol.values.max())}))


def cmd_stats(args):
    model = load_checkpoint(args.model)
    region = _load_box(args.param_box, model.domain)
    res = explore.up_field(model, region, (args.dims,) * 3)
    save_volume(res.mean, args.out_prefix + "_mean")
    save_volume(res.std, args.out_prefix + "_std")
    print(json.dumps({"mean": args.out_prefix + "_mean.f32",
                      "std": args.out_prefix + "_std.f32",
                      "seconds": res.seconds}))


def cmd_baseline(args):
    model = load_checkpoint(args.model)
    region = _load_box(args.param_box, model.domain)
    res = explore.spl_field(model, region, args.n, (args.dims,) * 3, seed=args.seed)
    out = {"method": "SPL", "n": args.n, "seconds": res.seconds}
    if args.out_prefix:
        save_volume(res.mean, args.out_prefix + "_mean")
        save_volume(res.std, args.out_prefix + "_std")
        out["mean"] = args.out_prefix + "_mean.f32"
        out["std"] = args.out_prefix + "_std.f32"
    print(json.dumps(out))


def cmd_corr(args):
    model = load_checkpoint(args.model)
    region = _load_box(args.param_box, model.domain)
    dims = (args.dims,) * 3
    if args.ref == "auto":
        coarse = explore.up_field(model, region, (16, 16, 16))
        ref = explore.pick_reference(coarse.mean)
    else:
        ref = _parse_params(args.ref)
    vol, ref_snapped, seconds = explore.correlation_field(model, region, ref, dims)
    save_volume(vol, args.out)
    print(json.dumps({"out": args.out, "reference": [float(v) for v in ref_snapped],
                      "seconds": seconds}))


def cmd_search(args):
    model = load_checkpoint(args.model)
    target = S.TargetDistribution.from_json(json.loads(Path(args.target).read_text()))
    fixed_spatial = fixed_params = None
    if args.fixed:
        fixed_region = _load_box(args.fixed, model.domain)
        fixed_params = fixed_region.normalized_params(model.domain)
        fixed_spatial = fixed_region.normalized_spatial(model.domain)
    opts = S.SearchOptions(
        mode=args.mode, iterations=args.iters, restarts=args.restarts,
        seed=args.seed, lr=args.lr, beta=args.beta, init_scale=args.init_scale,
        keep_threshold=args.keep_threshold, loss=args.loss,
        freeze_scale=args.freeze_scale, fixed_spatial=fixed_spatial,
        fixed_params=fixed_params, stop_on_candidates=args.stop_on,
    )
    cands = S.search(model, target, opts)
    doc = [S.candidate_to_json(model, c) for c in cands]
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1))
    print(json.dumps({"candidates": len(doc),
                      "best": doc[0]["divergence"] if doc else None,
                      "out": args.out}))


def cmd_eval(args):
    model = load_checkpoint(args.model)
    man = EnsembleManifest.load(args.data)
    rows = []
    for i in man.member_indices(args.split):
        grid = man.load_member(i)
        pred = explore.predict_volume(model, man.members[i]["params"], grid.dims)
        truth_n = model.domain.normalize_value(grid.values)
        pred_n = model.domain.normalize_value(pred.values)
        rows.append({
            "member": i,
            "params": man.members[i]["params"],
            "psnr": metrics.psnr(pred_n, truth_n, 1.0),
            "md": metrics.max_difference(pred_n, truth_n),
        })
    summary = {
        "split": args.split,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])) if rows else None,
        "max_md": float(np.max([r["md"] for r in rows])) if rows else None,
        "members": rows,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=1))
    print(f"{'member':>7} {'psnr_db':>9} {'md':>8}")
    for r in rows:
        print(f"{r['member']:>7} {r['psnr']:>9.3f} {r['md']:>8.4f}")
    print(json.dumps({"mean_psnr": summary["mean_psnr"], "max_md": summary["max_md"]}))


def cmd_serve(args):
    import uvicorn

    from .service import create_app
    model = load_checkpoint(args.model)
    manifest = EnsembleManifest.load(args.data) if args.data else None
    app = create_app(model, manifest=manifest)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "stats": cmd_stats,
    "baseline": cmd_baseline,
    "corr": cmd_corr,
    "search": cmd_search,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - uniform machine-readable failure
        sys.stderr.write(json.dumps({"error": type(e).__name__,
                                     "detail": str(e)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
