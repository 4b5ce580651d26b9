"""``ccl`` command line: ingest, synth, pretrain, train, eval, ablate, viz.

Every subcommand writes into ``--out`` (created if needed) and leaves a
``summary.json`` there; training commands also dump the fully resolved
config as ``resolved_config.toml``.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, desk_config, load_config, parse_override
from .data import (
    DatasetManifest,
    ManifestError,
    SceneError,
    SceneSpec,
    generate_scenes,
    load_image,
    load_manifest,
    save_image,
    write_scenes,
)
from .evaluation import AnnotationFile, annotate_synthetic_pairs, evaluate
from .model import CheckpointError, load_checkpoint, normalize_image, read_checkpoint

log = logging.getLogger("cycle_corr")

EXIT_USAGE = 2


class UsageError(Exception):
    pass


# --- helpers --------------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _guard_checkpoints(out: Path, force: bool) -> None:
    existing = sorted(out.glob("*.ckpt"))
    if existing and not force:
        raise UsageError(f"{out} already holds checkpoints ({existing[0].name}, ...); pass --force to overwrite")


def _write_summary(out: Path, summary: dict) -> None:
    (out / "summary.json").write_text(json.dumps(summary, indent=1, default=_json_default))
    print(json.dumps(summary, default=_json_default))


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _resolve_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else desk_config()
    overrides = list(getattr(args, "overrides", None) or [])
    return config.with_overrides(overrides) if overrides else config


def _manifest(data) -> DatasetManifest:
    path = Path(data)
    if path.is_file():
        return DatasetManifest.load_json(path)
    return load_manifest(path)


def _finite(x):
    return x if isinstance(x, (int, float)) and math.isfinite(x) else None


# --- subcommands -------------------------------------------------------------------


def cmd_ingest(args) -> dict:
    out = _out_dir(args)
    manifest = load_manifest(args.data)
    manifest.save(out / "manifest.json")
    (out / "rejects.json").write_text(json.dumps([{"file": f, "error": e} for f, e in manifest.rejects], indent=1))
    return {"images": len(manifest), "rejects": len(manifest.rejects), "manifest": out / "manifest.json"}


def cmd_synth(args) -> dict:
    out = _out_dir(args)
    if args.spec:
        spec = SceneSpec.from_json(json.loads(Path(args.spec).read_text()))
    else:
        spec = SceneSpec.default(args.shapes)
    scenes = generate_scenes(spec, args.n, args.seed, p_absent=args.p_absent, max_rotation_deg=args.max_rotation)
    oracle = write_scenes(scenes, out)
    names = [e["file"] for e in json.loads(oracle.read_text())["scenes"]]
    by_name = dict(zip(names, scenes))
    pairs = [(names[2 * i], names[2 * i + 1]) for i in range(len(names) // 2)]
    ann = annotate_synthetic_pairs(by_name, pairs, args.keypoints, args.seed)
    ann.save(out / "annotations.json")
    return {"images": len(scenes), "oracle": oracle, "annotations": out / "annotations.json",
            "pairs": len(ann.pairs), "spec": spec.to_json()}


def _train_common(args, mode: str) -> dict:
    from .training import Trainer

    out = _out_dir(args)
    _guard_checkpoints(out, args.force)
    config = _resolve_config(args)
    if mode == "ccl":
        if args.init:
            config = config.with_overrides({"init_checkpoint": str(args.init)})
        if args.from_scratch:
            config = config.with_overrides({"from_scratch": True})
        if config.init_checkpoint is None and not config.from_scratch:
            raise UsageError("train needs --init CHECKPOINT (or init_checkpoint in the config) or --from-scratch")
    config.dump_toml(out / "resolved_config.toml")
    manifest = _manifest(args.data)
    trainer = Trainer(config, manifest=manifest, out_dir=out)
    if mode == "ccl" and config.init_checkpoint is not None:
        trainer.load_weights(config.init_checkpoint)
    epochs = config.pretrain_epochs if mode == "pretrain" else config.epochs
    t0 = time.perf_counter()
    means = trainer.run(mode, epochs)
    return {
        "mode": mode,
        "epochs": epochs,
        "epoch_mean_loss": [_finite(m) for m in means],
        "skipped_pairs": trainer.state.skipped_pairs,
        "checkpoint": out / f"{mode}_last.ckpt",
        "metrics_csv": out / f"{mode}_metrics.csv",
        "resolved_config": out / "resolved_config.toml",
        "data": str(args.data),
        "seconds": round(time.perf_counter() - t0, 3),
    }


def cmd_pretrain(args) -> dict:
    return _train_common(args, "pretrain")


def cmd_train(args) -> dict:
    return _train_common(args, "ccl")


def _image_size(args, checkpoint_payload=None):
    if args.size:
        return tuple(args.size)
    cfg = (checkpoint_payload or {}).get("train_config")
    return tuple(cfg["image_size"]) if cfg else None


def cmd_eval(args) -> dict:
    model, payload = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    ann = AnnotationFile.load(args.annotations)
    images = Path(args.images) if args.images else Path(args.annotations).parent
    report = evaluate(model, ann, images, _image_size(args, payload))
    jpath, cpath = report.write(out)
    return {"pck": {str(k): v for k, v in report.pck.items()}, "auc": report.auc,
            "norm_mean_pixel_error": report.norm_mean_pixel_error, "keypoints": report.num_keypoints,
            "pairs": report.num_pairs, "skipped_pairs": len(report.skipped_pairs),
            "report": jpath, "per_pair_csv": cpath}


def parse_grid(items) -> tuple[list[float], list[bool], list[str]]:
    """Split ``q=...`` / ``scaling=...`` grid axes from ordinary dotted overrides."""
    qs, scaling, rest = [0.35, 0.65, 1.0], [True, False], []
    for item in items or []:
        key, _, raw = item.partition("=")
        if key == "q":
            qs = [float(v) for v in raw.split(",") if v]
        elif key == "scaling":
            scaling = [_on_off(v) for v in raw.split(",") if v]
        else:
            rest.append(item)
    if not qs or not scaling:
        raise UsageError("empty ablation grid")
    return qs, scaling, rest


def _on_off(v: str) -> bool:
    v = v.strip().lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise UsageError(f"scaling must be on/off, got {v!r}")


def cmd_ablate(args) -> dict:
    from .experiment import synthetic_ablation
    from .training import run_ablation_grid

    out = _out_dir(args)
    _guard_checkpoints(out, args.force)
    qs, scaling, extra = parse_grid(args.grid)
    args.overrides = list(args.overrides or []) + extra
    config = _resolve_config(args)
    config.dump_toml(out / "resolved_config.toml")
    seeds = args.seeds if args.seeds else [config.seed]
    if args.data:
        if not args.annotations:
            raise UsageError("ablate --data needs --annotations for scoring")
        ann = AnnotationFile.load(args.annotations)
        images = Path(args.images) if args.images else Path(args.annotations).parent

        def score(model):
            r = evaluate(model, ann, images, config.image_size)
            return {"auc": r.auc, "pck3": r.pck[3], "norm_mean_pixel_error": r.norm_mean_pixel_error}

        rows = run_ablation_grid(config, _manifest(args.data), score, qs, scaling, seeds, out)
    else:
        rows = synthetic_ablation(config, seeds, qs, scaling, out, n_train=args.n_train, n_pairs=args.n_pairs)
    return {"rows": len(rows), "csv": out / "ablation.csv", "q": qs, "scaling": scaling, "seeds": seeds,
            "failed_cells": sum(1 for r in rows if not math.isfinite(r.get("auc", float("nan"))))}


def cmd_viz(args) -> dict:
    from .correspondence import heatmap_to_distribution, interpolate_descriptors, similarity_heatmap

    config, payload = read_checkpoint(args.checkpoint)
    model, _ = load_checkpoint(args.checkpoint)
    size = _image_size(args, payload)
    img_a, img_b = load_image(args.image_a, size), load_image(args.image_b, size)
    H, W = img_a.shape[-2:]
    r, c = args.point
    if not (0 <= r <= H - 1 and 0 <= c <= W - 1):
        raise UsageError(f"point ({r}, {c}) outside image_a of size {H}x{W}")
    tau = args.temperature
    if tau is None:
        tau = (payload.get("train_config") or {}).get("loss", {}).get("temperature", 0.03)
    s = config.stride
    with torch.no_grad():
        fa, fb = model(normalize_image(img_a)), model(normalize_image(img_b))
        p = torch.tensor([[(r + 0.5) / s - 0.5, (c + 0.5) / s - 0.5]], dtype=fa.dtype)
        d = interpolate_descriptors(fa, p)
        dist = heatmap_to_distribution(similarity_heatmap(d, fb), tau)
    mu_cells = dist.mean[0].tolist()
    mu_px = [(m + 0.5) * s - 0.5 for m in mu_cells]
    var = [float(dist.var_row[0]), float(dist.var_col[0])]
    X = float(dist.summed_variance[0])
    out = _out_dir(args)
    heat = torch.nn.functional.interpolate(dist.probs[0][None, None], size=(H, W), mode="bilinear",
                                           align_corners=False)[0, 0]
    pa, pb = _viz_images(img_a, img_b, (r, c), heat, mu_px, out)
    summary = {"mu_px": mu_px, "mu_cells": mu_cells, "var_cells": var, "X": X, "temperature": tau,
               "image_a_png": pa, "image_b_png": pb}
    print(f"mu = ({mu_px[0]:.3f}, {mu_px[1]:.3f}) px   sigma^2 = ({var[0]:.4f}, {var[1]:.4f}) cells^2   X = {X:.4f}")
    return summary


def _viz_images(img_a, img_b, point, heat, mu_px, out: Path):
    import matplotlib

    matplotlib.use("Agg")

    a = img_a.clone()
    r, c = (int(round(v)) for v in point)
    H, W = a.shape[-2:]
    for dr in range(-2, 3):
        for dc in range(-2, 3):
            if abs(dr) == 2 or abs(dc) == 2:
                rr, cc = min(max(r + dr, 0), H - 1), min(max(c + dc, 0), W - 1)
                a[:, rr, cc] = torch.tensor([1.0, 0.0, 0.0])
    h = (heat / heat.max().clamp_min(1e-12)).numpy()
    color = torch.from_numpy(matplotlib.colormaps["jet"](h)[..., :3].astype(np.float32)).permute(2, 0, 1)
    alpha = 0.6 * torch.from_numpy(h.astype(np.float32))
    b = img_b * (1 - alpha) + color * alpha
    pa, pb = out / "viz_image_a.png", out / "viz_image_b_heatmap.png"
    save_image(a, pa)
    save_image(b, pb)
    return pa, pb


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccl", description="Cycle-correspondence descriptor training toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, overrides=True):
        sp.add_argument("--out", required=True, help="output directory (created if absent)")
        sp.add_argument("--force", action="store_true", help="overwrite existing checkpoints in --out")
        if config:
            sp.add_argument("--config", help="TOML config file (default: the desk-scale config)")
        if overrides:
            sp.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted-key config overrides")

    sp = sub.add_parser("ingest", help="scan an image folder into a manifest")
    sp.add_argument("--data", required=True)
    common(sp, config=False, overrides=False)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("synth", help="render synthetic scenes with an exact correspondence oracle")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--spec", help="scene spec JSON {shapes:[{kind,color,size}],canvas:[h,w]}")
    sp.add_argument("--shapes", type=int, default=3)
    sp.add_argument("--p-absent", type=float, default=0.0)
    sp.add_argument("--max-rotation", type=float, default=30.0)
    sp.add_argument("--keypoints", type=int, default=10, help="annotated keypoints per consecutive pair")
    common(sp, config=False, overrides=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain", help="identical-view pretraining")
    sp.add_argument("--data", required=True, help="image folder or manifest.json")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="cycle-correspondence training")
    sp.add_argument("--data", required=True, help="image folder or manifest.json")
    sp.add_argument("--init", help="checkpoint to initialize from (normally the pretraining result)")
    sp.add_argument("--from-scratch", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="PCK / AUC / normalized error on annotated pairs")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--images", help="image folder (default: next to the annotation file)")
    sp.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    common(sp, config=False, overrides=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="q x variance-scaling grid (synthetic scenes unless --data)")
    sp.add_argument("--grid", nargs="+", default=[], metavar="AXIS=V1,V2",
                    help="q=0.35,0.65,1.0 scaling=on,off; other KEY=VALUE items are config overrides")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--data")
    sp.add_argument("--annotations")
    sp.add_argument("--images")
    sp.add_argument("--n-train", type=int, default=200)
    sp.add_argument("--n-pairs", type=int, default=50)
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("viz", help="match heatmap of one keypoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image-a", required=True)
    sp.add_argument("--image-b", required=True)
    sp.add_argument("--point", type=float, nargs=2, required=True, metavar=("ROW", "COL"))
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    common(sp, config=False, overrides=False)
    sp.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for o in getattr(args, "overrides", None) or []:
        try:
            parse_override(o)
        except ValueError as e:
            parser.error(str(e))
    try:
        summary = args.func(args)
    except (UsageError, CheckpointError, ManifestError, SceneError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"ccl {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    summary = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv), **summary}
    _write_summary(Path(args.out), summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
