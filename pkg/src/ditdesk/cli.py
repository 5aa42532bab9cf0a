"""Command-line entry point covering the full workflow.

Subcommands: synth-data, train-tokenizer, pretrain, finetune-classify,
finetune-detect, evaluate, reconstruct, grad-check.  Exit codes: 0 success,
1 usage/config errors, 2 missing checkpoints.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import detect as det
from . import dvae as dv
from . import metrics, mim, synthdoc, vit
from .config import ConfigError, MissingCheckpointError, load_config, make_run_dir, require_checkpoint
from .imaging import Image, adaptive_binarize, load_image, resize, save_image
from .nn import checkpoint as ckpt
from .nn import grad_check, ops
from .nn.optim import LrSchedule
from .nn.tensor import Tensor

logger = logging.getLogger("ditdesk")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# -- corpus loading -----------------------------------------------------------


def _load_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no manifest.json under {data_dir}; run synth-data first")
    return json.loads(path.read_text())


def load_corpus(data_dir: str | Path, workers: int = 1) -> tuple[list[Image], np.ndarray]:
    """Images plus class labels, in deterministic manifest order."""
    data_dir = Path(data_dir)
    manifest = _load_manifest(data_dir)
    names = [d["file_name"] for d in manifest["documents"]]
    labels = np.array([d["class_id"] for d in manifest["documents"]], dtype=np.int64)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            images = list(pool.map(lambda n: load_image(data_dir / n), names))
    else:
        images = [load_image(data_dir / n) for n in names]
    return images, labels


def load_detection_corpus(
    data_dir: str | Path,
    image_size: int,
    binarize: bool = False,
    binarize_window: int = 31,
    binarize_offset: float = 10.0,
    workers: int = 1,
) -> tuple[list[Image], list[list[synthdoc.LayoutElement]], dict]:
    """Images resized to ``image_size`` with bboxes rescaled to match."""
    data_dir = Path(data_dir)
    ann_path = data_dir / "annotations.json"
    if not ann_path.exists():
        raise ConfigError(f"no annotations.json under {data_dir}")
    coco = json.loads(ann_path.read_text())
    id_to_name = {c["id"]: c["name"] for c in coco["categories"]}
    by_image: dict[int, list] = {im["id"]: [] for im in coco["images"]}
    for a in coco["annotations"]:
        by_image[a["image_id"]].append(a)

    images, elements = [], []
    raw, _ = load_corpus(data_dir, workers=workers)
    for im_meta, img in zip(coco["images"], raw):
        if binarize:
            img = adaptive_binarize(img, binarize_window, binarize_offset)
        sx = image_size / im_meta["width"]
        sy = image_size / im_meta["height"]
        images.append(resize(img, image_size, image_size))
        els = []
        for a in by_image[im_meta["id"]]:
            x, y, w, h = a["bbox"]
            els.append(
                synthdoc.LayoutElement(
                    category=id_to_name[a["category_id"]],
                    bbox=(x * sx, y * sy, max(w * sx, 1e-3), max(h * sy, 1e-3)),
                )
            )
        elements.append(els)
    return images, elements, coco


# -- model construction ------------------------------------------------------------


def _vit_config(cfg: dict) -> vit.VitConfig:
    overrides = {}
    if cfg["model"]["drop_path"] is not None:
        overrides["drop_path"] = cfg["model"]["drop_path"]
    return vit.config_from_preset(cfg["model"]["preset"], **overrides)


def _dvae_config(cfg: dict) -> dv.DvaeConfig:
    d = cfg["model"]["dvae"]
    return dv.DvaeConfig(
        codebook_size=d["codebook_size"],
        code_dim=d["code_dim"],
        hidden=d["hidden"],
        perplexity_weight=d["perplexity_weight"],
        temperature_floor=d["temperature_floor"],
    )


def _save_sidecar(path: Path, payload: dict) -> None:
    Path(str(path) + ".json").write_text(json.dumps(payload, indent=1))


def _load_sidecar(path: Path) -> dict:
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise ConfigError(f"missing config sidecar {sidecar}")
    return json.loads(sidecar.read_text())


def load_tokenizer(path: str | Path) -> dv.Dvae:
    path = require_checkpoint(path)
    meta = _load_sidecar(path)
    model = dv.Dvae(dv.DvaeConfig(**meta["dvae"]), np.random.default_rng(0))
    model.load_state_dict(ckpt.load_namespace(ckpt.load_checkpoint(path), "dvae"))
    return model


# -- subcommands ---------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = load_config(args.config, args.set)
    n = args.n if args.n is not None else cfg["data"]["n"]
    seed = args.seed if args.seed is not None else cfg["data"]["seed"]
    out = Path(args.out) if args.out else Path(cfg["data"]["dir"])
    weights = cfg["data"]["mix_weights"]
    if args.templates:
        weights = [0.0] * synthdoc.NUM_TEMPLATES
        for t in args.templates.split(","):
            weights[int(t)] = 1.0
    page = (cfg["data"]["page"], cfg["data"]["page"])
    manifest = synthdoc.generate_corpus(n, seed, out, mix_weights=weights, page=page)
    print(f"wrote {manifest['count']} documents to {out}")
    return 0


def cmd_train_tokenizer(args) -> int:
    cfg = load_config(args.config, args.set)
    task = cfg["task"]
    images, _ = load_corpus(args.data or cfg["data"]["dir"], workers=task["workers"])
    size = task["dvae_image_size"]
    images = [resize(im, size, size) for im in images]
    dcfg = _dvae_config(cfg)
    epochs = args.epochs if args.epochs is not None else task["dvae_epochs"]
    seed = args.seed if args.seed is not None else task["seed"]
    model, log = dv.train_tokenizer(
        images, dcfg, epochs=epochs, batch_size=task["dvae_batch"], lr=task["dvae_lr"], seed=seed
    )
    out = Path(args.out) if args.out else make_run_dir(cfg) / "tokenizer.ditc"
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_modules(out, {"dvae": model})
    _save_sidecar(out, {"dvae": asdict(dcfg), "epoch_mse": log.epoch_mse, "epoch_perplexity": log.epoch_perplexity})
    print(f"tokenizer checkpoint: {out}")
    if log.epoch_mse:
        print(f"final epoch mse={log.epoch_mse[-1]:.5f} perplexity={log.epoch_perplexity[-1]:.1f}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, args.set)
    task = cfg["task"]
    tokenizer = load_tokenizer(args.tokenizer)
    images, _ = load_corpus(args.data or cfg["data"]["dir"], workers=task["workers"])
    vcfg = _vit_config(cfg)
    seed = args.seed if args.seed is not None else task["seed"]
    rng = np.random.default_rng(seed)
    encoder = vit.VitEncoder(vcfg, rng)
    head = mim.MimHead(rng, vcfg.hidden, tokenizer.cfg.codebook_size)
    pcfg = mim.PretrainConfig(
        steps=args.steps if args.steps is not None else task["steps"],
        batch=task["batch"],
        mask_ratio=task["mask_ratio"],
        min_block=task["min_block"],
        peak_lr=cfg["optimizer"]["lr"],
        warmup_steps=cfg["schedule"]["warmup_steps"],
        weight_decay=cfg["optimizer"]["weight_decay"],
        image_size=cfg["data"]["image_size"],
        seed=seed,
        checkpoint_every=task["checkpoint_every"],
        augment=task["augment"],
    )
    out_dir = Path(args.out_dir) if args.out_dir else make_run_dir(cfg)
    result = mim.pretrain(images, tokenizer, encoder, head, pcfg, out_dir)
    _save_sidecar(result.checkpoint_path, {"vit": asdict(vcfg), "codebook_size": tokenizer.cfg.codebook_size})
    final = float(np.mean(result.losses[-20:])) if result.losses else float("nan")
    print(f"pretrain checkpoint: {result.checkpoint_path}")
    print(f"loss log: {result.log_path} (smoothed final loss {final:.4f})")
    return 0


def _load_backbone(path: str | Path, vcfg: vit.VitConfig) -> vit.VitEncoder:
    path = require_checkpoint(path)
    encoder = vit.VitEncoder(vcfg, np.random.default_rng(0))
    encoder.load_state_dict(ckpt.load_namespace(ckpt.load_checkpoint(path), "vit"))
    return encoder


def cmd_finetune_classify(args) -> int:
    cfg = load_config(args.config, args.set)
    task = cfg["task"]
    images, labels = load_corpus(args.data or cfg["data"]["dir"], workers=task["workers"])
    vcfg = _vit_config(cfg)
    seed = args.seed if args.seed is not None else task["seed"]
    rng = np.random.default_rng(seed)
    encoder = _load_backbone(args.init, vcfg) if args.init else vit.VitEncoder(vcfg, rng)
    head = vit.ClassifierHead(rng, vcfg.hidden, cfg["model"]["num_classes"])
    epochs = args.epochs if args.epochs is not None else task["classify_epochs"]
    n_steps = max(1, epochs * ((len(images) + task["classify_batch"] - 1) // task["classify_batch"]))
    schedule = LrSchedule(task["classify_lr"], min(cfg["schedule"]["warmup_steps"], n_steps // 10), n_steps)
    log = vit.train_classifier(
        images,
        labels,
        encoder,
        head,
        epochs=epochs,
        batch_size=task["classify_batch"],
        schedule=schedule,
        weight_decay=cfg["optimizer"]["weight_decay"],
        seed=seed,
        image_size=cfg["data"]["image_size"],
        augment=task["augment"],
    )
    out = Path(args.out) if args.out else make_run_dir(cfg) / "classifier.ditc"
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_modules(out, {"vit": encoder, "classifier": head})
    _save_sidecar(out, {"vit": asdict(vcfg), "num_classes": cfg["model"]["num_classes"]})
    print(f"classifier checkpoint: {out}")
    print(f"train accuracy: {log.train_accuracy:.4f}")
    return 0


def cmd_finetune_detect(args) -> int:
    cfg = load_config(args.config, args.set)
    task = cfg["task"]
    anchors_name = args.anchors or task["anchors"]
    if anchors_name not in det.ANCHOR_PRESETS:
        raise ConfigError(f"unknown anchor preset {anchors_name!r}")
    binarize = args.binarize or task["binarize"]
    images, elements, coco = load_detection_corpus(
        args.data or cfg["data"]["dir"],
        image_size=cfg["data"]["image_size"],
        binarize=binarize,
        binarize_window=task["binarize_window"],
        binarize_offset=task["binarize_offset"],
        workers=task["workers"],
    )
    vcfg = _vit_config(cfg)
    seed = args.seed if args.seed is not None else task["seed"]
    rng = np.random.default_rng(seed)
    encoder = _load_backbone(args.init, vcfg) if args.init else vit.VitEncoder(vcfg, rng)
    dcfg = det.DetectConfig(
        num_classes=len(synthdoc.CATEGORIES),
        fpn_channels=cfg["model"]["fpn_channels"],
        anchor_sizes=det.ANCHOR_PRESETS[anchors_name],
        score_thr=task["score_thr"],
        nms_iou=task["nms_iou"],
    )
    adapter = det.FpnAdapter(rng, vcfg.hidden, dcfg.fpn_channels)
    head = det.DetHead(rng, dcfg.fpn_channels, dcfg.num_classes, len(dcfg.aspect_ratios))
    detector = det.Detector(encoder, adapter, head, dcfg)
    epochs = args.epochs if args.epochs is not None else task["detect_epochs"]
    n_steps = max(1, epochs * ((len(images) + task["detect_batch"] - 1) // task["detect_batch"]))
    schedule = LrSchedule(task["detect_lr"], min(cfg["schedule"]["warmup_steps"], n_steps // 10), n_steps)
    det.train_detector(
        images,
        elements,
        detector,
        epochs=epochs,
        batch_size=task["detect_batch"],
        schedule=schedule,
        weight_decay=cfg["optimizer"]["weight_decay"],
        seed=seed,
    )
    run_dir = Path(args.out).parent if args.out else make_run_dir(cfg)
    out = Path(args.out) if args.out else run_dir / "detector.ditc"
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_modules(out, {"vit": encoder, "fpn": adapter, "det_head": head})
    _save_sidecar(out, {"vit": asdict(vcfg), "detect": {"anchors": anchors_name, "fpn_channels": dcfg.fpn_channels}})

    dets_per_image = {i: det.detect(img, detector) for i, img in enumerate(images)}
    preds_path = out.with_name("predictions.json")
    det.detections_to_json(dets_per_image, preds_path)
    scale = cfg["data"]["image_size"]
    gts = [
        {"image_id": i, "category_id": synthdoc.CATEGORY_IDS[el.category], "bbox": list(el.bbox)}
        for i, els in enumerate(elements)
        for el in els
    ]
    preds = json.loads(preds_path.read_text())
    report = metrics.prf1_report(preds, gts, iou_thr=task["eval_iou"])
    print(f"detector checkpoint: {out}")
    print(f"train-set F1@{task['eval_iou']}: {report['f1']:.4f} (p={report['precision']:.3f} r={report['recall']:.3f})")
    return 0


def cmd_evaluate(args) -> int:
    preds = json.loads(Path(args.preds).read_text())
    gts_doc = json.loads(Path(args.gts).read_text())
    annotations = gts_doc["annotations"] if isinstance(gts_doc, dict) else gts_doc
    if args.task == "wf1":
        report = metrics.wf1_report(preds, annotations, category_id=args.category)
    elif args.task == "map":
        images = gts_doc.get("images", []) if isinstance(gts_doc, dict) else []
        report = metrics.map_range(preds, images, annotations)
        report["per_category"] = {str(k): v for k, v in report["per_category"].items()}
        for v in report["per_category"].values():
            v["by_thr"] = {str(t): ap for t, ap in v["by_thr"].items()}
    elif args.task == "prf1":
        report = metrics.prf1_report(preds, annotations, iou_thr=args.iou, category_id=args.category)
    elif args.task == "accuracy":
        pred_labels = [p["class_id"] for p in preds]
        true_labels = {im["id"]: im["class_id"] for im in gts_doc["images"]}
        truth = [true_labels[p["image_id"]] for p in preds]
        report = {"accuracy": metrics.accuracy(pred_labels, truth)}
    else:
        raise ConfigError(f"unknown evaluate task {args.task!r}")
    text = json.dumps(report, indent=1)
    print(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_reconstruct(args) -> int:
    model = load_tokenizer(args.tokenizer)
    img = load_image(args.image)
    size = args.size - args.size % dv.DOWNSAMPLE_FACTOR
    img = resize(img, size, size)
    logits = dv.encode(img, model)
    weights, _ = dv.quantize_gumbel(Tensor(logits), temperature=1.0, rng=None, hard=True)
    recon = dv.decode(weights, model)
    recon8 = np.clip(np.rint(recon * 255.0), 0, 255).astype(np.uint8)
    side = np.concatenate([img.data, recon8], axis=1)
    out = Path(args.out)
    save_image(Image(side), out)
    print(f"wrote original|reconstruction pair: {out}")
    return 0


def cmd_grad_check(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    rows = []
    ok = True

    def check(name, fn, x, eps=1e-3):
        nonlocal ok
        err = grad_check(fn, x, eps=eps)
        passed = err < args.tol
        ok = ok and passed
        rows.append((name, err, passed))

    def rand(*shape, scale=1.0):
        return (rng.standard_normal(shape) * scale).astype(np.float32)

    mm = Tensor(rand(6, 4))
    check("matmul", lambda t: (t @ mm).sum(), rand(3, 6))
    addend = Tensor(rand(5, 5))
    check("add", lambda t: (t + addend).sum(), rand(5, 5))
    factor = Tensor(rand(5, 5))
    check("mul", lambda t: (t * factor).sum(), rand(5, 5))
    check("gelu", lambda t: ops.gelu(t).sum(), rand(16))
    r_sm = Tensor(rand(4, 6))
    check("softmax", lambda t: (ops.softmax(t) * r_sm).sum(), rand(4, 6))
    g, b = Tensor(rand(8, scale=0.5) + 1.0), Tensor(rand(8, scale=0.1))
    r_ln = Tensor(rand(3, 8))
    check("layer_norm", lambda t: (ops.layer_norm(t, g, b) * r_ln).sum(), rand(3, 8))
    idx = rng.integers(0, 7, size=6)
    r_emb = Tensor(rand(6, 5))
    check("embedding", lambda t: (ops.embedding(t, idx) * r_emb).sum(), rand(7, 5))
    cw = Tensor(rand(4, 2, 3, 3, scale=0.4))
    check("conv2d", lambda t: ops.conv2d(t, cw, stride=2, pad=1).sum(), rand(1, 6, 6, 2), eps=3e-3)
    tw = Tensor(rand(2, 3, 2, 2, scale=0.4))
    check("transposed_conv2d", lambda t: ops.transposed_conv2d(t, tw).sum(), rand(1, 4, 4, 2), eps=3e-3)
    check("maxpool2d", lambda t: ops.maxpool2d(t).sum(), np.float32(np.arange(32).reshape(1, 4, 4, 2) * 0.37))
    qkvw, qkvb = Tensor(rand(8, 24, scale=0.3)), Tensor(rand(24, scale=0.1))
    pw, pb = Tensor(rand(8, 8, scale=0.3)), Tensor(rand(8, scale=0.1))
    check("attention", lambda t: ops.multi_head_attention(t, qkvw, qkvb, pw, pb, 2).sum(), rand(1, 4, 8))

    width = max(len(r[0]) for r in rows)
    for name, err, passed in rows:
        print(f"{name:<{width}}  {err:10.3e}  {'PASS' if passed else 'FAIL'}")
    print(f"{'all ops' if ok else 'FAILURES'}: {'PASS' if ok else 'FAIL'} (tolerance {args.tol})")
    return 0 if ok else 1


# -- argument wiring -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ditdesk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config; defaults apply when omitted")
        p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL", help="override a config value")
        p.add_argument("--seed", type=int, help="override the task seed")

    p = sub.add_parser("synth-data", help="generate a synthetic document corpus")
    common(p)
    p.add_argument("--n", type=int, help="number of documents")
    p.add_argument("--out", help="output directory")
    p.add_argument("--templates", help="comma-separated template ids to draw uniformly from")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train-tokenizer", help="train the dVAE image tokenizer")
    common(p)
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(fn=cmd_train_tokenizer)

    p = sub.add_parser("pretrain", help="masked image modeling pre-training")
    common(p)
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--tokenizer", required=True, help="dVAE checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--out-dir", help="run directory for checkpoint + loss CSV")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune-classify", help="fine-tune for 16-way page classification")
    common(p)
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--init", help="pretrained backbone checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(fn=cmd_finetune_classify)

    p = sub.add_parser("finetune-detect", help="fine-tune the layout detector")
    common(p)
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--init", help="pretrained backbone checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--anchors", choices=sorted(det.ANCHOR_PRESETS), help="anchor size preset")
    p.add_argument("--binarize", action="store_true", help="adaptive binarization preprocessing")
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(fn=cmd_finetune_detect)

    p = sub.add_parser("evaluate", help="compute metrics from prediction/annotation JSON")
    p.add_argument("--task", required=True, choices=["wf1", "map", "prf1", "accuracy"])
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--category", type=int, help="restrict to one category id")
    p.add_argument("--out", help="write the report JSON here as well")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("reconstruct", help="tokenize + decode an image, save side-by-side PNG")
    p.add_argument("--tokenizer", required=True, help="dVAE checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("grad-check", help="finite-difference check over the op set")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(fn=cmd_grad_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except MissingCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
