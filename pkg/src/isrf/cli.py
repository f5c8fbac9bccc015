"""Batch command-line entry points wiring the pipeline end to end.

Exit codes: 0 ok, 2 usage, 3 validation (bad inputs/files), 4 runtime.
Partial outputs of a failed subcommand are deleted.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .errors import IsrfError
from .grow import BilateralParams, load_replay, replay_session
from .io import (
    SynthSpec,
    ingest_dataset,
    load_scene,
    read_bitmap,
    read_image,
    save_scene,
    synth_generate,
    write_f32_with_sidecar,
    write_image,
)
from .metrics import accuracy, average_precision, iou
from .render import Camera, render_image
from .train import TrainConfig, train

log = logging.getLogger("isrf.cli")

# paper-constant defaults shared by segmentation-facing subcommands
DEFAULTS = {"k": 10, "tau": 0.2, "sigma": 5.0, "lam": 0.001, "feature_dim": 64}


class _Outputs:
    """Tracks paths a subcommand creates so failures clean up after themselves."""

    def __init__(self):
        self.paths: list[Path] = []

    def claim(self, path) -> Path:
        p = Path(path)
        self.paths.append(p)
        return p

    def discard_all(self):
        for p in self.paths:
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink(missing_ok=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isrf", description=__doc__)
    ap.add_argument("--seed", type=int, default=0, help="global RNG seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--spec", required=True, help="SynthSpec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train a scene from a posed dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output scene archive directory")
    p.add_argument("--iters", type=int, default=250)
    p.add_argument("--distill-iters", type=int, default=100)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULTS["lam"])
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--batch", type=int, default=4096)
    p.add_argument("--feature-dim", type=int, default=DEFAULTS["feature_dim"],
                   help="PCA target for teacher features wider than this")

    p = sub.add_parser("segment", help="replay a stroke log headlessly")
    p.add_argument("--scene", required=True)
    p.add_argument("--strokes", required=True, help="replay JSON file")
    p.add_argument("--out", required=True, help="output .bits mask file")
    p.add_argument("--k", type=int, default=DEFAULTS["k"])
    p.add_argument("--tau", type=float, default=DEFAULTS["tau"])
    p.add_argument("--sigma", type=float, default=DEFAULTS["sigma"])

    p = sub.add_parser("edit", help="apply an edit script and render views")
    p.add_argument("--scene", required=True)
    p.add_argument("--script", required=True, help="JSON edit script")
    p.add_argument("--render", required=True, help="JSON list of cameras (or {camera, mode} records)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="compare predicted masks against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted masks (.bits/.png)")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks")
    p.add_argument("--report", required=True, help="output table path")
    p.add_argument("--scene-name", default="scene")
    p.add_argument("--method", default="stroke")

    p = sub.add_parser("render", help="render one view of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--cam", required=True, help="camera JSON file")
    p.add_argument("--mode", default="rgb", choices=["rgb", "feature", "depth", "alpha", "mask"])
    p.add_argument("--mask", help="scene mask name for mask mode")
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="run the HTTP session service")
    p.add_argument("--listen", default="127.0.0.1:7860")

    return ap


def cmd_synth(args, out: _Outputs) -> int:
    spec = SynthSpec.from_json(json.loads(Path(args.spec).read_text()))
    if args.seed:
        spec.seed = args.seed
    synth_generate(spec, out_dir=out.claim(args.out))
    print(f"wrote dataset with {spec.n_train} train / {spec.n_test} test views to {args.out}")
    return 0


def cmd_train(args, out: _Outputs) -> int:
    dataset = ingest_dataset(args.data, target_dim=args.feature_dim)
    train_view = _split_view(dataset, "train")
    config = TrainConfig(
        resolution=(args.res, args.res, args.res),
        pretrain_iters=args.iters,
        distill_iters=args.distill_iters,
        lam=args.lam,
        batch_rays=args.batch,
        seed=args.seed,
    )
    log_rows = []
    handler = _LogCapture(log_rows)
    tlog = logging.getLogger("isrf.train")
    old_level = tlog.level
    tlog.addHandler(handler)
    tlog.setLevel(logging.INFO)
    try:
        field, decoder = train(train_view, config)
    finally:
        tlog.removeHandler(handler)
        tlog.setLevel(old_level)
    scene_dir = out.claim(args.out)
    save_scene(scene_dir, field, decoder, pca_basis=dataset.pca_basis)
    _write_train_log(scene_dir, log_rows)
    print(f"saved trained scene to {args.out}")
    return 0


class _LogCapture(logging.Handler):
    def __init__(self, rows):
        super().__init__()
        self.rows = rows

    def emit(self, record):
        self.rows.append(record.getMessage())


def _write_train_log(scene_dir: Path, rows):
    (scene_dir / "train_log.txt").write_text("\n".join(rows) + "\n" if rows else "")
    parsed = []
    for line in rows:
        kv = dict(part.split("=", 1) for part in line.split() if "=" in part)
        try:
            parsed.append((float(kv["iter"]), float(kv["loss_rgb"]),
                           float(kv["loss_feat"]), float(kv["psnr"])))
        except (KeyError, ValueError):
            continue
    if parsed:
        from .report import write_training_curve

        write_training_curve(parsed, scene_dir / "train_log.png")


def _split_view(dataset, split):
    idx = dataset.split_indices(split) or list(range(len(dataset.cameras)))

    class View:
        cameras = [dataset.cameras[i] for i in idx]
        images = [dataset.images[i] for i in idx]
        features = [dataset.features[i] for i in idx] if dataset.features else None
        scene_bbox = dataset.scene_bbox

    return View()


def cmd_segment(args, out: _Outputs) -> int:
    archive = load_scene(args.scene)
    strokes = load_replay(args.strokes)
    defaults = BilateralParams(k=args.k, tau=args.tau, sigma_phi=args.sigma, sigma_s=args.sigma)
    session = replay_session(archive.field, archive.decoder, strokes, defaults)
    path = out.claim(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(session.current_mask.pack())
    print(f"mask {session.current_mask.popcount()} voxels -> {args.out}")
    return 0


def cmd_edit(args, out: _Outputs) -> int:
    from .edit import apply_edits, load_edit_script

    archive = load_scene(args.scene)
    ops = load_edit_script(args.script, archive.field.geometry, scene_dir=args.scene)
    source = apply_edits(archive.field, archive.decoder, ops)
    out_dir = out.claim(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = json.loads(Path(args.render).read_text())
    if not records:
        raise IsrfError("render camera list is empty")
    for i, rec in enumerate(records):
        cam_json = rec["camera"] if isinstance(rec, dict) and "camera" in rec else rec
        mode = rec.get("mode", "rgb") if isinstance(rec, dict) else "rgb"
        camera = Camera.from_json(cam_json)
        img = render_image(None, None, camera, mode, source=source)
        if mode in ("depth", "alpha"):
            write_f32_with_sidecar(out_dir / f"{i:03d}.{mode}.f32", img.astype(np.float32))
        else:
            write_image(out_dir / f"{i:03d}.{mode}.png", img)
    print(f"rendered {i + 1} edited views to {args.out}")
    return 0


def _load_mask_any(path: Path):
    if path.suffix == ".png":
        return read_image(path)[..., 0] > 0.5
    return np.unpackbits(np.frombuffer(path.read_bytes(), dtype=np.uint8), bitorder="little").astype(bool)


def cmd_eval(args, out: _Outputs) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in pred_dir.iterdir() if p.suffix in (".bits", ".png"))
    if not names:
        raise IsrfError("no prediction masks found")
    ious, accs, aps = [], [], []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.exists():
            raise IsrfError(f"no ground-truth counterpart for {name}")
        pred = _load_mask_any(pred_dir / name)
        gt = _load_mask_any(gt_path)
        if pred.shape != gt.shape:
            pred = pred.reshape(gt.shape)
        ious.append(iou(pred, gt))
        accs.append(accuracy(pred, gt))
        alpha_path = pred_dir / (Path(name).stem + ".alpha.f32")
        if alpha_path.exists():
            scores = np.fromfile(alpha_path, dtype="<f4").astype(np.float64)
            aps.append(average_precision(np.clip(scores, 0, 1), gt.reshape(-1)))
        else:
            aps.append(average_precision(pred.astype(np.float64).reshape(-1), gt.reshape(-1)))
    row = {
        "scene": args.scene_name,
        "method": args.method,
        "mean_iou": float(np.mean(ious)),
        "accuracy": float(np.mean(accs)),
        "map": float(np.mean(aps)),
    }
    from .report import write_report

    write_report([row], out.claim(args.report))
    print(f"mean IoU {row['mean_iou']:.3f}  accuracy {row['accuracy']:.3f}  mAP {row['map']:.3f}")
    return 0


def cmd_render(args, out: _Outputs) -> int:
    archive = load_scene(args.scene)
    camera = Camera.from_json(json.loads(Path(args.cam).read_text()))
    mask = None
    if args.mode == "mask":
        if not args.mask or args.mask not in archive.masks:
            raise IsrfError(f"mask mode needs --mask naming one of {sorted(archive.masks)}")
        mask = (archive.masks[args.mask], "fg")
    img = render_image(archive.field, archive.decoder, camera, args.mode, mask=mask)
    path = out.claim(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    if args.mode in ("depth", "alpha"):
        write_f32_with_sidecar(path, img.astype(np.float32))
    else:
        write_image(path, img.astype(np.float64))
    print(f"wrote {args.mode} render to {args.out}")
    return 0


def cmd_serve(args, out: _Outputs) -> int:
    from .service import serve

    serve(args.listen)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "segment": cmd_segment,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "render": cmd_render,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
        stream=sys.stdout,
    )
    if args.verbose:
        logging.getLogger("isrf.train").setLevel(logging.INFO)
    np.random.seed(args.seed)
    outputs = _Outputs()
    try:
        return COMMANDS[args.cmd](args, outputs)
    except IsrfError as e:
        outputs.discard_all()
        print(f"error[{e.kind}]: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001
        outputs.discard_all()
        print(f"error[runtime]: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
