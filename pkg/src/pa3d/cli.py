"""Command-line pipeline: synth-gen, cache-lift, train, segment, eval,
gradcheck, pca-colors, replay.

Every output-producing run writes a RunManifest recording the argv, the
resolved configuration, the seed, and a sha256 per output file; `replay`
re-executes a manifest and fails if any output hash changes. Exit codes:
0 success, 1 runtime error, 2 usage error. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import subprocess
import sys
import time

import numpy as np

from . import dataio
from .dataio import DataFormatError
from .geometry import AugmentConfig, PointCloud, build_patches, \
    farthest_point_sampling, normalize_unit_sphere
from .inference import segment
from .liftproj import lift_shape_cache, make_view_rig
from .metrics import aggregate_miou_ciou, pca_colorize, shape_score
from .model import (EncoderConfig, FREEZE_POLICIES, encode_tokens, init_model,
                    project, set_trainable, transformer_forward)
from .tensor import Tensor, check_gradients
from .training import (StageConfig, TrainingSet, compute_fractional_labels,
                       match_patches, run_stage, stage1_loss, stage2_loss)

DEFAULT_ELEVATIONS = "0,35"


class UsageError(Exception):
    """Argument-level mistakes surfaced with exit code 2."""


# ---------------------------------------------------------------------------
# config files: flat key=value, CLI flags take precedence


def read_config_file(path: str) -> dict[str, str]:
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _encoder_config(conf: dict[str, str]) -> EncoderConfig:
    base = EncoderConfig().to_dict()
    for key in base:
        if key in conf:
            base[key] = int(conf[key])
    return EncoderConfig.from_dict(base)


# ---------------------------------------------------------------------------
# run manifests


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_describe() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty"],
                           capture_output=True, text=True, timeout=5)
        if r.returncode == 0:
            return r.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def write_run_manifest(path: str, argv: list[str], config: dict, seed: int,
                       outputs: list[str], started: float) -> None:
    manifest = {
        "format_version": dataio.FORMAT_VERSION,
        "kind": "run-manifest",
        "command": list(argv),
        "config": config,
        "seed": int(seed),
        "git_describe": _git_describe(),
        "started_unix": started,
        "finished_unix": time.time(),
        "outputs": [{"path": os.path.abspath(p), "sha256": _sha256(p)}
                    for p in sorted(outputs)],
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _walk_files(root: str) -> list[str]:
    out = []
    for dirpath, _dirs, files in os.walk(root):
        for name in files:
            # run manifests are metadata, not reproducible outputs
            if name == "run_manifest.json" or name.endswith(".manifest.json"):
                continue
            out.append(os.path.join(dirpath, name))
    return sorted(out)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


# ---------------------------------------------------------------------------
# shared loaders


def _load_cloud_any(path: str) -> tuple[PointCloud, list[str], str]:
    """Accept a dataio shape directory or a labeled ASCII PLY."""
    if os.path.isdir(path):
        return dataio.read_shape(path)
    if path.endswith(".ply"):
        pts, labels = dataio.read_labeled_ply(path)
        cloud = PointCloud(points=pts, labels=[[int(x)] for x in labels],
                           shape_id=os.path.splitext(os.path.basename(path))[0])
        return cloud, [], ""
    raise DataFormatError(f"{path}: expected a shape directory or .ply file")


def _load_model(path: str):
    params, meta = dataio.load_checkpoint(path)
    return params, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(args, argv) -> int:
    started = time.time()
    spec = dataio.SynthSpec.from_dict(
        dataio.read_json(args.spec, DataFormatError))
    ds = dataio.synth_generate(spec)
    dataio.write_synth_dataset(ds, args.out)
    outputs = _walk_files(args.out)
    write_run_manifest(os.path.join(args.out, "run_manifest.json"), argv,
                       spec.to_dict(), spec.seed, outputs, started)
    print(f"wrote {len(ds.clouds)} shapes to {args.out}", file=sys.stderr)
    return 0


def _rig_from_args(args):
    elevations = [math.radians(float(e))
                  for e in str(args.elevations).split(",") if e.strip()]
    return make_view_rig(args.views, radius=args.radius,
                         elevations=elevations,
                         fov=math.radians(args.fov),
                         resolution=args.resolution)


def cmd_cache_lift(args, argv) -> int:
    started = time.time()
    cams = _rig_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    painter = None
    fields_root = None
    if os.path.isfile(args.fields):
        painter = dataio.read_fields_spec(args.fields)
    elif os.path.isdir(args.fields):
        fields_root = args.fields
    else:
        raise DataFormatError(f"--fields {args.fields}: no such file or directory")

    shapes_root = os.path.join(args.cloud, "shapes")
    if os.path.isdir(shapes_root):
        ids = dataio.dataset_shape_ids(args.cloud)
        shape_dirs = [os.path.join(shapes_root, sid) for sid in ids]
    else:
        shape_dirs = [args.cloud]

    for index, sdir in enumerate(shape_dirs):
        cloud, part_ids, category = dataio.read_shape(sdir)
        norm = normalize_unit_sphere(cloud)
        if painter is not None:
            fields = painter.paint(index, norm.points, norm.labels, part_ids,
                                   cams)
            provenance = "synthetic"
        else:
            fdir = os.path.join(fields_root, cloud.shape_id)
            fields = dataio.read_fields(
                fdir if os.path.isdir(fdir) else fields_root)
            provenance = "fields-dir"
        cache = lift_shape_cache(
            norm.points, norm.labels, part_ids, cams, fields,
            num_patches=args.num_patches, patch_size=args.patch_size,
            seed_index=int(rng.integers(norm.n)), shape_id=cloud.shape_id,
            provenance=provenance, category=category, seed=args.seed)
        dataio.write_cache(cache, os.path.join(args.out, cloud.shape_id))

    outputs = _walk_files(args.out)
    config = {k: getattr(args, k) for k in
              ("cloud", "fields", "views", "resolution", "radius", "fov",
               "elevations", "num_patches", "patch_size", "seed")}
    write_run_manifest(os.path.join(args.out, "run_manifest.json"), argv,
                       config, args.seed, outputs, started)
    print(f"lifted {len(shape_dirs)} shapes into {args.out}", file=sys.stderr)
    return 0


def _aug_from_args(args, conf) -> AugmentConfig | None:
    mode = args.aug
    if mode == "none":
        return None
    return AugmentConfig(
        rotation=mode,
        translation=float(conf.get("aug_translation", 0.1)),
        scale_lo=float(conf.get("aug_scale_lo", 0.8)),
        scale_hi=float(conf.get("aug_scale_hi", 1.2)),
        jitter_sigma=float(conf.get("aug_jitter_sigma", 0.005)),
        jitter_clip=float(conf.get("aug_jitter_clip", 0.02)))


def cmd_train(args, argv) -> int:
    started = time.time()
    conf = read_config_file(args.config) if args.config else {}

    if args.stage == "2" and not args.ckpt_in and not args.allow_scratch:
        raise UsageError(
            "stage 2 initializes from a stage-1 checkpoint: pass --ckpt-in, "
            "or --allow-scratch for the stage-2-only ablation")

    if args.ckpt_in:
        params, _meta = _load_model(args.ckpt_in)
    else:
        enc_cfg = _encoder_config(conf)
        params = init_model(enc_cfg, np.random.default_rng(args.seed))

    cache_dirs = dataio.list_cache_dirs(args.data)
    if not cache_dirs:
        raise DataFormatError(f"no cache directories found under {args.data}")
    samples = [dataio.read_cache(d) for d in cache_dirs]
    for s in samples:
        if s.feature_dim != params.cfg.head_2d_out and args.stage in ("1", "joint"):
            raise DataFormatError(
                f"cache {s.shape_id} feature_dim {s.feature_dim} != "
                f"head_2d_out {params.cfg.head_2d_out}")

    table = None
    if args.stage in ("2", "joint"):
        if not args.text_table:
            raise UsageError(f"--text-table is required for stage {args.stage}")
        table = dataio.read_text_table(args.text_table)
        if table.dim != params.cfg.head_text_out:
            raise DataFormatError(
                f"text table dim {table.dim} != head_text_out "
                f"{params.cfg.head_text_out}")

    cfg = StageConfig(
        stage=args.stage, epochs=args.epochs, batch_size=args.batch,
        learning_rate=args.lr, weight_decay=args.wd,
        freeze_policy=args.freeze, aug=_aug_from_args(args, conf),
        seed=args.seed)
    _ensure_parent(args.ckpt_out)
    log_path = args.log or (args.ckpt_out + ".log.jsonl")
    _ensure_parent(log_path)
    records = run_stage(TrainingSet(samples=samples, text_table=table),
                        params, cfg, log_path=log_path)

    tmp = args.ckpt_out + ".tmp"
    dataio.save_checkpoint(params, tmp, meta={
        "stage": args.stage, "epochs": args.epochs, "seed": args.seed,
        "freeze_policy": cfg.effective_policy(),
        "resumed_from": os.path.basename(args.ckpt_in) if args.ckpt_in else ""})
    os.replace(tmp, args.ckpt_out)

    config = {k: getattr(args, k) for k in
              ("stage", "data", "ckpt_in", "ckpt_out", "freeze", "epochs",
               "batch", "lr", "wd", "seed", "aug", "allow_scratch",
               "text_table")}
    write_run_manifest(args.ckpt_out + ".manifest.json", argv, config,
                       args.seed, [args.ckpt_out, log_path], started)
    final = records[-1]["loss"] if records else float("nan")
    print(f"stage {args.stage}: {len(records)} steps, final loss {final:.6f}",
          file=sys.stderr)
    return 0


def cmd_segment(args, argv) -> int:
    started = time.time()
    params, _ = _load_model(args.ckpt)
    table = dataio.read_text_table(args.text_table)
    cloud, _parts, _cat = _load_cloud_any(args.cloud)
    norm = normalize_unit_sphere(cloud)
    seg = segment(params, norm, table, seed_index=args.seed_index)

    _ensure_parent(args.out)
    dataio.write_labeled_ply(args.out, norm.points, seg.point_labels)
    scores_path = args.out + ".scores.f32"
    chk = dataio.write_blob(scores_path, seg.patch_scores, "f4")
    meta_path = args.out + ".meta.json"
    dataio.write_json(meta_path, {
        "format_version": dataio.FORMAT_VERSION,
        "kind": "segmentation-scores",
        "parts": table.names,
        "patch_labels": [int(x) for x in seg.patch_labels],
        "num_patches": int(seg.patch_scores.shape[0]),
        "num_parts": int(seg.patch_scores.shape[1]),
        "checksums": {"scores.f32": chk},
    })
    config = {"ckpt": args.ckpt, "cloud": args.cloud,
              "text_table": args.text_table, "out": args.out,
              "seed_index": args.seed_index}
    write_run_manifest(args.out + ".manifest.json", argv, config,
                       args.seed_index, [args.out, scores_path, meta_path],
                       started)
    print(f"segmented {cloud.shape_id or args.cloud} -> {args.out}",
          file=sys.stderr)
    return 0


def _collect_labeled(path: str) -> dict[str, tuple]:
    """shape_id -> (labels per point, part names, category). Accepts a
    dataset root, a dir of shape dirs, or a dir of labeled PLY files."""
    root = os.path.join(path, "shapes") if os.path.isdir(
        os.path.join(path, "shapes")) else path
    out: dict[str, tuple] = {}
    for name in sorted(os.listdir(root)):
        full = os.path.join(root, name)
        if os.path.isdir(full) and os.path.isfile(
                os.path.join(full, "manifest.json")):
            man = dataio.read_json(os.path.join(full, "manifest.json"),
                                    DataFormatError)
            if man.get("kind") == "shape":
                cloud, parts, cat = dataio.read_shape(full)
                out[cloud.shape_id or name] = (cloud.labels, parts, cat)
            elif man.get("kind") == "feature-cache":
                cache = dataio.read_cache(full)
                out[cache.shape_id or name] = (cache.labels, cache.part_ids,
                                               cache.category)
        elif name.endswith(".ply"):
            _pts, labels = dataio.read_labeled_ply(full)
            sid = os.path.splitext(name)[0]
            meta_path = full + ".meta.json"
            parts = []
            if os.path.isfile(meta_path):
                meta = dataio.read_json(meta_path, DataFormatError)
                parts = list(meta.get("parts", []))
            out[sid] = ([[int(x)] for x in labels], parts, "")
    return out


def cmd_eval(args, argv) -> int:
    started = time.time()
    preds = _collect_labeled(args.pred)
    gts = _collect_labeled(args.gt)
    common = sorted(set(preds) & set(gts))
    if not common:
        raise DataFormatError(
            f"no shape ids shared between {args.pred} and {args.gt}")

    scores = []
    for sid in common:
        plabels, pparts, _ = preds[sid]
        glabels, gparts, cat = gts[sid]
        if len(plabels) != len(glabels):
            raise DataFormatError(
                f"{sid}: prediction has {len(plabels)} points, gt has "
                f"{len(glabels)}")
        # score over the gt vocabulary plus any extra predicted names;
        # parts the gt never carries simply earn IoU 0
        vocab = list(gparts)
        pred_ids = np.empty(len(plabels), dtype=np.int64)
        for i, lab in enumerate(plabels):
            if len(lab) != 1:
                raise DataFormatError(
                    f"{sid}: prediction point {i} must carry exactly one label")
            pid = lab[0]
            if pparts:  # map through names when the prediction carries them
                name = pparts[pid]
                if name not in vocab:
                    vocab.append(name)
                pid = vocab.index(name)
            pred_ids[i] = pid
        scores.append(shape_score(sid, cat or "uncategorized", pred_ids,
                                  glabels, vocab,
                                  average_over=args.average_over))

    miou, ciou = aggregate_miou_ciou(scores)
    _ensure_parent(args.report)
    report = {
        "format_version": dataio.FORMAT_VERSION,
        "kind": "eval-report",
        "miou": miou,
        "ciou": ciou,
        "average_over": args.average_over,
        "shapes": [{"shape_id": s.shape_id, "category": s.category,
                    "miou": s.miou, "per_part_iou": s.per_part_iou}
                   for s in scores],
    }
    dataio.write_json(args.report, report)

    width = max(len(s.shape_id) for s in scores)
    print(f"{'shape':<{width}}  {'category':<12}  mIoU")
    for s in scores:
        print(f"{s.shape_id:<{width}}  {s.category:<12}  {s.miou:.4f}")
    print(f"{'mIoU':<{width}}  {'':<12}  {miou:.4f}")
    print(f"{'cIoU':<{width}}  {'':<12}  {ciou:.4f}")

    config = {"pred": args.pred, "gt": args.gt, "report": args.report,
              "average_over": args.average_over}
    write_run_manifest(args.report + ".manifest.json", argv, config, 0,
                       [args.report], started)
    return 0


GRADCHECK_DEFAULTS = {
    "d_model": 16, "n_layers": 2, "n_heads": 2, "mlp_ratio": 2,
    "pointnet_hidden": 12, "head_2d_out": 6, "head_text_out": 6,
    "num_patches": 4, "patch_size": 4,
    "n_points": 48, "seed": 0, "step": 1e-5, "tolerance": 1e-4,
}


def gradcheck_losses(conf: dict) -> dict[str, float]:
    """Max relative error of both training losses against central
    differences, over every trainable coordinate of a toy model."""
    merged = dict(GRADCHECK_DEFAULTS)
    for k, v in conf.items():
        if k in merged:
            merged[k] = type(GRADCHECK_DEFAULTS[k])(
                float(v) if isinstance(GRADCHECK_DEFAULTS[k], float) else int(v))
    cfg = EncoderConfig.from_dict(
        {k: merged[k] for k in EncoderConfig().to_dict()})
    rng = np.random.default_rng(merged["seed"])
    params = init_model(cfg, rng)
    set_trainable(params, "all")

    pts = rng.uniform(-1, 1, (merged["n_points"], 3))
    centers = farthest_point_sampling(pts, cfg.num_patches, 0)
    patches = build_patches(pts, centers, cfg.patch_size)
    targets = rng.uniform(-1, 1, (cfg.num_patches, cfg.head_2d_out))
    matched = match_patches(patches.centers, patches.centers)
    part_ids = ["a", "b"]
    labels = [[int(rng.integers(0, 2))] for _ in range(merged["n_points"])]
    y = compute_fractional_labels(patches, labels, part_ids).y
    rows = dataio.make_prototypes(part_ids, cfg.head_text_out, merged["seed"])

    def f_stage1(_):
        toks = encode_tokens(params, patches, pts)
        z = transformer_forward(params, toks)
        return stage1_loss(project(params, "h2d", z), Tensor(targets[matched]))

    def f_stage2(_):
        toks = encode_tokens(params, patches, pts)
        z = transformer_forward(params, toks)
        return stage2_loss(project(params, "htext", z), rows, y,
                           params["tau_bias/log_tau"],
                           params["tau_bias/bias"])

    tensors = list(params.tensors.values())
    step = merged["step"]
    return {
        "stage1_max_rel_err": float(check_gradients(f_stage1, tensors, step=step)),
        "stage2_max_rel_err": float(check_gradients(f_stage2, tensors, step=step)),
        "tolerance": float(merged["tolerance"]),
    }


def cmd_gradcheck(args, argv) -> int:
    started = time.time()
    conf = read_config_file(args.config) if args.config else {}
    res = gradcheck_losses(conf)
    worst = max(res["stage1_max_rel_err"], res["stage2_max_rel_err"])
    ok = worst < res["tolerance"]
    print(f"stage1 max rel err: {res['stage1_max_rel_err']:.3e}")
    print(f"stage2 max rel err: {res['stage2_max_rel_err']:.3e}")
    print(f"max: {worst:.3e}  tolerance: {res['tolerance']:.1e}  "
          f"{'PASS' if ok else 'FAIL'}")
    if args.report:
        dataio.write_json(args.report, {
            "format_version": dataio.FORMAT_VERSION,
            "kind": "gradcheck-report", **res, "passed": ok})
        write_run_manifest(args.report + ".manifest.json", argv, conf,
                           int(conf.get("seed", GRADCHECK_DEFAULTS["seed"])),
                           [args.report], started)
    return 0 if ok else 1


def cmd_pca_colors(args, argv) -> int:
    started = time.time()
    if args.layer == "dinocache":
        cache = dataio.read_cache(args.cloud)
        if cache.point_features is None:
            raise DataFormatError(
                f"cache {args.cloud} stores no per-point features")
        points, feats = cache.points, cache.point_features
    else:
        if not args.ckpt:
            raise UsageError(f"--ckpt is required for layer {args.layer}")
        params, _ = _load_model(args.ckpt)
        cloud, _p, _c = _load_cloud_any(args.cloud)
        norm = normalize_unit_sphere(cloud)
        centers = farthest_point_sampling(norm.points, params.cfg.num_patches,
                                          args.seed_index)
        patches = build_patches(norm.points, centers, params.cfg.patch_size)
        toks = encode_tokens(params, patches, norm.points)
        z = transformer_forward(params, toks)
        head = "h2d" if args.layer == "stage1" else "htext"
        patch_feats = project(params, head, z).data
        assign = np.empty(norm.n, dtype=np.int64)
        for i, pt in enumerate(norm.points):
            d = ((patches.centers - pt) ** 2).sum(axis=1)
            assign[i] = int(np.argmin(d))
        points, feats = norm.points, patch_feats[assign]
    colors = pca_colorize(feats)
    _ensure_parent(args.out)
    dataio.write_color_ply(args.out, points, colors)
    config = {"ckpt": args.ckpt, "cloud": args.cloud, "layer": args.layer,
              "out": args.out, "seed_index": args.seed_index}
    write_run_manifest(args.out + ".manifest.json", argv, config,
                       args.seed_index, [args.out], started)
    print(f"wrote PCA colors ({args.layer}) -> {args.out}", file=sys.stderr)
    return 0


def cmd_replay(args, argv) -> int:
    man = dataio.read_json(args.manifest, DataFormatError)
    if man.get("kind") != "run-manifest":
        raise DataFormatError(f"{args.manifest}: not a run manifest")
    recorded = man.get("command", [])
    if recorded and recorded[0] == "replay":
        raise UsageError("refusing to replay a replay")
    code = run_cli(recorded)
    if code != 0:
        print(f"replay: command exited {code}", file=sys.stderr)
        return 1
    bad = []
    for entry in man.get("outputs", []):
        path, want = entry["path"], entry["sha256"]
        if not os.path.isfile(path):
            bad.append(f"{path}: missing")
        elif _sha256(path) != want:
            bad.append(f"{path}: hash changed")
    if bad:
        for b in bad:
            print(f"replay mismatch: {b}", file=sys.stderr)
        return 1
    print(f"replay: {len(man.get('outputs', []))} outputs reproduced "
          f"bit-exactly", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pa3d",
        description="Patch-token point-cloud transformer: caching, two-stage "
                    "training, zero-shot segmentation, evaluation.")
    sub = p.add_subparsers(dest="cmd", required=True)

    sg = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    sg.add_argument("--spec", required=True, help="SynthSpec JSON file")
    sg.add_argument("--out", required=True)

    cl = sub.add_parser("cache-lift", help="lift 2D fields to patch caches")
    cl.add_argument("--cloud", required=True, help="dataset root or shape dir")
    cl.add_argument("--fields", required=True,
                    help="fields_spec.json (synthetic) or fields directory")
    cl.add_argument("--views", type=int, default=10)
    cl.add_argument("--resolution", type=int, default=128)
    cl.add_argument("--radius", type=float, default=2.2)
    cl.add_argument("--fov", type=float, default=50.0, help="degrees")
    cl.add_argument("--elevations", default=DEFAULT_ELEVATIONS,
                    help="comma-separated degrees")
    cl.add_argument("--num-patches", type=int, default=32)
    cl.add_argument("--patch-size", type=int, default=16)
    cl.add_argument("--seed", type=int, default=0)
    cl.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="run one training stage")
    tr.add_argument("--stage", required=True, choices=["1", "2", "joint"])
    tr.add_argument("--data", required=True, help="cache directory root")
    tr.add_argument("--ckpt-in", default=None)
    tr.add_argument("--ckpt-out", required=True)
    tr.add_argument("--freeze", default=None, choices=list(FREEZE_POLICIES))
    tr.add_argument("--epochs", type=int, default=10)
    tr.add_argument("--batch", type=int, default=8)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--wd", type=float, default=0.01)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--aug", default="none", choices=["none", "so3", "z"])
    tr.add_argument("--allow-scratch", action="store_true",
                    help="permit stage 2 without a stage-1 checkpoint")
    tr.add_argument("--text-table", default=None)
    tr.add_argument("--config", default=None, help="flat key=value file")
    tr.add_argument("--log", default=None, help="JSONL step log path")

    se = sub.add_parser("segment", help="zero-shot part segmentation")
    se.add_argument("--ckpt", required=True)
    se.add_argument("--cloud", required=True, help="shape dir or .ply")
    se.add_argument("--text-table", required=True)
    se.add_argument("--out", required=True, help="output PLY path")
    se.add_argument("--seed-index", type=int, default=0,
                    help="FPS starting point index")

    ev = sub.add_parser("eval", help="mIoU/cIoU of predictions vs ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--report", required=True, help="JSON report path")
    ev.add_argument("--average-over", default="present",
                    choices=["present", "all"])

    gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    gc.add_argument("--config", default=None, help="flat key=value file")
    gc.add_argument("--report", default=None, help="optional JSON report path")

    pc = sub.add_parser("pca-colors", help="PCA feature colorization PLY")
    pc.add_argument("--ckpt", default=None)
    pc.add_argument("--cloud", required=True,
                    help="shape dir or .ply; cache dir for --layer dinocache")
    pc.add_argument("--layer", required=True,
                    choices=["dinocache", "stage1", "stage2"])
    pc.add_argument("--out", required=True)
    pc.add_argument("--seed-index", type=int, default=0)

    rp = sub.add_parser("replay", help="re-run a manifest and verify hashes")
    rp.add_argument("--manifest", required=True)

    return p


_COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "cache-lift": cmd_cache_lift,
    "train": cmd_train,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "pca-colors": cmd_pca_colors,
    "replay": cmd_replay,
}


def run_cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.cmd](args, argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataFormatError, ValueError, KeyError, OSError,
            FloatingPointError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
