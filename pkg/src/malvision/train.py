"""Three-stage training pipeline and evaluation.

Stage 1 (``ar_pretrain``) trains embedding, encoder, and decoder on the
unit-regression objective under the block-causal content mask.  Stage 2
(``multitask_pretrain``) continues from a stage-1 checkpoint, alternating
depth-task and segmentation-task batches, each blended with the
autoregressive objective.  Stage 3 (``finetune``) drops the mask and the
decoder entirely and trains encoder plus the linear classification head.

Every run is deterministic given (config, seed): data order, masking, and
augmentation draw from dedicated seeded generators.  Metrics are emitted
per step as newline-delimited JSON records.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import (check_fingerprint, load_checkpoint,
                         restore_params, save_checkpoint)
from .config import RunConfig, StageConfig, check_config
from .data import load_batch, load_manifest
from .errors import ConfigError, DataError, GeometryError
from .masking import cluster_block_mask, full_visibility, ratio_selection
from .model import (ModelParams, classify_head, decoder_forward, depth_head,
                    embed_tokens, encoder_forward, init_model, seg_head,
                    serialized_positions)
from .objectives import (ar_loss, cross_entropy, depth_loss, multitask_loss,
                         prediction_slots, seg_loss)
from .optim import (EmaState, OptimState, Schedule, adamw_step,
                    base_lr_for_batch, clip_grads, ema_update, lr_at)
from .serialize import normalize_patches
from .tensor import GradTape, index_select

TRAINABLE_PREFIXES = {
    "ar_pretrain": ("embed.", "enc.", "dec."),
    "multitask_pretrain": ("embed.", "enc.", "dec.", "head.depth", "head.seg"),
    "finetune": ("embed.", "enc.", "head.cls"),
}


# -- augmentation ---------------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a (C, H, W) image; exact copy when sizes match."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def augment(img: np.ndarray, rng: np.random.Generator, out_size: int,
            scale_range: tuple[float, float] = (0.6, 1.0),
            ratio_range: tuple[float, float] = (0.75, 4.0 / 3.0),
            hflip: float = 0.5,
            crop: tuple[int, int, int, int] | None = None) -> np.ndarray:
    """Random resized crop to ``out_size`` plus horizontal flip.

    Deterministic under the generator.  ``crop`` (top, left, h, w) bypasses
    the random geometry; an explicit crop outside the image is an error.
    """
    c, h, w = img.shape
    if crop is None:
        scale = rng.uniform(*scale_range)
        log_r = rng.uniform(math.log(ratio_range[0]), math.log(ratio_range[1]))
        aspect = math.exp(log_r)
        ch = min(h, max(1, int(round(math.sqrt(scale * h * w / aspect)))))
        cw = min(w, max(1, int(round(math.sqrt(scale * h * w * aspect)))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
    else:
        top, left, ch, cw = crop
        if top < 0 or left < 0 or top + ch > h or left + cw > w or ch < 1 or cw < 1:
            raise GeometryError(
                f"crop {crop} exceeds image extents {h}x{w}")
    patch = img[:, top:top + ch, left:left + cw]
    out = resize_bilinear(patch, out_size, out_size)
    if hflip > 0 and rng.random() < hflip:
        out = out[:, :, ::-1].copy()
    return out


def patchify_batch(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, P*P*C) flattened patches in raster order."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise GeometryError(f"batch extents {h}x{w} not divisible by {patch}")
    gh, gw = h // patch, w // patch
    blocks = images.reshape(b, c, gh, patch, gw, patch)
    return np.ascontiguousarray(
        blocks.transpose(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, patch * patch * c))


# -- metrics --------------------------------------------------------------------


def write_metrics(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        for rec in records:
            fp.write(json.dumps(rec, sort_keys=True))
            fp.write("\n")


def read_metrics(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fp:
        return [json.loads(line) for line in fp if line.strip()]


def strip_timing(records: list[dict]) -> list[dict]:
    """Records without wall-clock fields, for bit-level stream comparison."""
    return [{k: v for k, v in rec.items() if k != "wall_ms"} for rec in records]


# -- stage running ---------------------------------------------------------------


@dataclass
class StageResult:
    checkpoint: Path
    metrics_path: Path
    metrics: list[dict]
    model: ModelParams
    final_loss: float


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _augment_batch(images: np.ndarray, stage: StageConfig, out_size: int,
                   rng: np.random.Generator) -> np.ndarray:
    if not stage.augment:
        return images
    return np.stack([augment(img, rng, out_size) for img in images])


def _ar_forward(model: ModelParams, patches: np.ndarray, mask, selection,
                mode: str, target_norm: str):
    """Shared AR pipeline; returns (ar loss tensor, decoder hidden)."""
    plan = model.plan
    vis = selection.visible()
    tokens = embed_tokens(model, patches,
                          visible=None if vis.all() else vis)
    enc_out = encoder_forward(tokens, model.encoder)
    pos_serial = serialized_positions(model)
    preds, hidden = decoder_forward(enc_out, pos_serial, mask, selection,
                                    model.decoder)
    positions, unit_ids = prediction_slots(plan, selection, mode)
    slot_preds = index_select(preds, 1, positions)
    norm = normalize_patches(patches, target_norm)
    unit_targets = norm[:, plan.perm, :].reshape(
        patches.shape[0], plan.num_clusters, -1)
    targets = unit_targets[:, unit_ids, :]
    return ar_loss(slot_preds, targets,
                   np.ones(positions.size, dtype=bool)), hidden


def _depth_token_targets(model: ModelParams, depths: np.ndarray) -> np.ndarray:
    """(B, H, W) depth maps -> (B, N, P*P) per-token pixels, serialized."""
    toks = patchify_batch(depths[:, None, :, :], model.config.patch)
    return toks[:, model.plan.perm, :]


def _seg_token_targets(model: ModelParams, segs: np.ndarray) -> np.ndarray:
    toks = patchify_batch(segs[:, None, :, :].astype(np.float64),
                          model.config.patch)
    return toks[:, model.plan.perm, :].astype(np.int64)


def run_stage(run: RunConfig, stage_name: str, ckpt_in=None, out_dir=None,
              log_every: int = 0) -> StageResult:
    """Train one pipeline stage and persist checkpoint plus metrics.

    ``ckpt_in`` must satisfy the stage-order contract: the multitask stage
    continues from a stage-1 checkpoint, fine-tuning adopts the encoder of
    a stage-1 or stage-2 checkpoint, and a missing checkpoint means
    training from random initialization.
    """
    check_config(run)
    if stage_name not in run.stages:
        raise ConfigError([f"no stage named {stage_name!r} in config"])
    stage = run.stages[stage_name]
    out_dir = Path(out_dir if out_dir is not None else run.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    root = np.random.default_rng(run.seed)
    seeds = root.integers(0, 2 ** 62, size=4)
    init_rng = np.random.default_rng(int(seeds[0]))
    data_rng = np.random.default_rng(int(seeds[1]))
    mask_rng = np.random.default_rng(int(seeds[2]))
    aug_rng = np.random.default_rng(int(seeds[3]))

    model = init_model(run.model, init_rng, np.float32)
    if ckpt_in is not None:
        ckpt = load_checkpoint(ckpt_in)
        check_fingerprint(ckpt, run.model)
        if stage.kind == "finetune":
            restore_params(model, ckpt, prefixes=("embed.", "enc."))
        else:
            restore_params(model, ckpt)

    trainable = model.subset(TRAINABLE_PREFIXES[stage.kind])
    opt = OptimState.for_params(
        trainable, beta1=run.optim.beta1, beta2=run.optim.beta2,
        eps=run.optim.eps, weight_decay=run.optim.weight_decay)
    ema = EmaState.from_params(trainable, run.optim.ema_decay)

    plan = model.plan
    attn_mask = cluster_block_mask(plan)
    weights = run.loss.weights()
    size = run.model.image_size

    if stage.kind == "multitask_pretrain":
        depth_manifest = load_manifest(stage.depth_dataset)
        seg_manifest = load_manifest(stage.seg_dataset)
        n_depth = depth_manifest.split_size("train")
        n_seg = seg_manifest.split_size("train")
        if n_depth == 0 or n_seg == 0:
            raise DataError("multitask stage needs non-empty depth and seg splits")
        steps_per_epoch = (math.ceil(n_depth / stage.batch_size)
                           + math.ceil(n_seg / stage.batch_size))
    else:
        manifest = load_manifest(stage.dataset)
        n_train = manifest.split_size("train")
        if n_train == 0:
            raise DataError(f"dataset {stage.dataset} has an empty train split")
        steps_per_epoch = math.ceil(n_train / stage.batch_size)

    schedule = Schedule.from_epochs(
        base_lr_for_batch(stage.batch_size, run.optim.base_lr_ref),
        run.optim.warmup_epochs, stage.epochs, steps_per_epoch)

    def make_selection():
        if run.mask.mode == "next_unit":
            return full_visibility(plan.n)
        return ratio_selection(plan, run.mask.ratio, run.mask.granularity,
                               int(mask_rng.integers(0, 2 ** 62)))

    records: list[dict] = []
    step = 0
    for epoch in range(stage.epochs):
        if stage.kind == "multitask_pretrain":
            tasks = []
            for kind, mani, count in (("depth", depth_manifest, n_depth),
                                      ("seg", seg_manifest, n_seg)):
                tasks.extend((kind, mani, idx) for idx in
                             _batches(count, stage.batch_size, data_rng))
            # round-robin: depth batch, seg batch, depth batch, ...
            depth_part = [t for t in tasks if t[0] == "depth"]
            seg_part = [t for t in tasks if t[0] == "seg"]
            interleaved = []
            for i in range(max(len(depth_part), len(seg_part))):
                if i < len(depth_part):
                    interleaved.append(depth_part[i])
                if i < len(seg_part):
                    interleaved.append(seg_part[i])
            plan_epoch = interleaved
        else:
            plan_epoch = [(stage.kind, manifest, idx) for idx in
                          _batches(n_train, stage.batch_size, data_rng)]

        for kind, mani, idx in plan_epoch:
            t0 = time.perf_counter()
            images, targets = load_batch(mani, idx, "train")
            images = _augment_batch(images, stage, size, aug_rng)
            patches = patchify_batch(images, run.model.patch)

            with GradTape() as tape:
                if stage.kind == "finetune":
                    tokens = embed_tokens(model, patches)
                    enc_out = encoder_forward(tokens, model.encoder)
                    logits = classify_head(enc_out, model.heads)
                    labels = np.asarray([t["label"] for t in targets])
                    loss = cross_entropy(logits, labels)
                    components = {"ce": float(loss.data)}
                elif stage.kind == "ar_pretrain":
                    selection = make_selection()
                    loss, _ = _ar_forward(model, patches, attn_mask, selection,
                                          run.mask.mode, run.loss.target_norm)
                    components = {"ar": float(loss.data)}
                else:
                    selection = make_selection()
                    ar, hidden = _ar_forward(model, patches, attn_mask,
                                             selection, run.mask.mode,
                                             run.loss.target_norm)
                    if kind == "depth":
                        dmaps = np.stack([t["depth"] for t in targets])
                        pred = depth_head(hidden, model.heads)
                        task = depth_loss(pred, _depth_token_targets(model, dmaps))
                    else:
                        smaps = np.stack([t["seg"] for t in targets])
                        logits = seg_head(hidden, model.heads,
                                          run.model.seg_classes)
                        task = seg_loss(logits, _seg_token_targets(model, smaps))
                    loss, report = multitask_loss(task, ar, weights,
                                                  task_name=kind)
                    components = dict(report.components)
                    components["total"] = report.total
                grads = tape.gradients(loss, trainable)

            clip_grads(grads, run.optim.grad_clip)
            lr = lr_at(step, schedule)
            adamw_step(trainable, grads, opt, lr)
            ema_update(ema, trainable)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            records.append({"step": step, "epoch": epoch, "stage": stage.kind,
                            "loss": components, "lr": lr,
                            "wall_ms": round(wall_ms, 3)})
            if log_every and step % log_every == 0:
                main = components.get("total", next(iter(components.values())))
                print(f"[{stage.kind}] step {step} epoch {epoch} "
                      f"loss {main:.5f} lr {lr:.2e}")
            step += 1

    ckpt_path = out_dir / f"ckpt_{stage_name}.malckpt"
    save_checkpoint(ckpt_path, model, opt, ema)
    metrics_path = out_dir / f"metrics_{stage_name}.ndjson"
    write_metrics(metrics_path, records)
    main_key = "total" if stage.kind == "multitask_pretrain" else (
        "ce" if stage.kind == "finetune" else "ar")
    return StageResult(checkpoint=ckpt_path, metrics_path=metrics_path,
                       metrics=records, model=model,
                       final_loss=records[-1]["loss"][main_key])


# -- evaluation -------------------------------------------------------------------


def _load_model_for_eval(run: RunConfig, ckpt_path, use_ema: bool) -> ModelParams:
    model = init_model(run.model, np.random.default_rng(0), np.float32)
    ckpt = load_checkpoint(ckpt_path)
    check_fingerprint(ckpt, run.model)
    restore_params(model, ckpt)
    if use_ema:
        named = model.named_parameters()
        missing = [n for n in named if f"ema/{n}" not in ckpt.entries]
        for name, p in named.items():
            shadow = ckpt.entries.get(f"ema/{name}")
            if shadow is not None:
                p.data = shadow.astype(p.data.dtype)
        if len(missing) == len(named):
            raise DataError("checkpoint holds no EMA shadow parameters")
    return model


def evaluate(run: RunConfig, ckpt_path, manifest_path, split: str = "test",
             batch_size: int = 64, use_ema: bool = False) -> dict:
    """Task metrics on a split: accuracy, depth RMSE, seg mean-IoU.

    Metrics are reported only where the split carries the matching targets.
    Runs without a tape (inference only).
    """
    check_config(run)
    model = _load_model_for_eval(run, ckpt_path, use_ema)
    manifest = load_manifest(manifest_path)
    n = manifest.split_size(split)
    if n == 0:
        raise DataError(f"split {split!r} is empty")
    plan = model.plan
    attn_mask = cluster_block_mask(plan)
    size = run.model.image_size

    correct = 0
    labelled = 0
    sq_err = 0.0
    px = 0
    inter = np.zeros(run.model.seg_classes, dtype=np.int64)
    union = np.zeros(run.model.seg_classes, dtype=np.int64)

    for start in range(0, n, batch_size):
        idx = list(range(start, min(n, start + batch_size)))
        images, targets = load_batch(manifest, idx, split)
        if images.shape[-1] != size:
            raise DataError(
                f"eval images are {images.shape[-1]}px, model expects {size}px")
        patches = patchify_batch(images, run.model.patch)
        tokens = embed_tokens(model, patches)
        enc_out = encoder_forward(tokens, model.encoder)

        if any("label" in t for t in targets):
            logits = classify_head(enc_out, model.heads)
            pred = logits.data.argmax(axis=-1)
            for i, t in enumerate(targets):
                if "label" in t:
                    labelled += 1
                    correct += int(pred[i] == t["label"])

        needs_decoder = any(("depth" in t) or ("seg" in t) for t in targets)
        if needs_decoder:
            selection = full_visibility(plan.n)
            _, hidden = decoder_forward(enc_out, serialized_positions(model),
                                        attn_mask, selection, model.decoder)
            if any("depth" in t for t in targets):
                dmaps = np.stack([t["depth"] for t in targets])
                pred = depth_head(hidden, model.heads).data
                tgt = _depth_token_targets(model, dmaps)
                sq_err += float(((pred - tgt) ** 2).sum())
                px += tgt.size
            if any("seg" in t for t in targets):
                smaps = np.stack([t["seg"] for t in targets])
                logits = seg_head(hidden, model.heads, run.model.seg_classes)
                pred = logits.data.argmax(axis=-1)
                tgt = _seg_token_targets(model, smaps)
                for c in range(run.model.seg_classes):
                    p = pred == c
                    g = tgt == c
                    inter[c] += int((p & g).sum())
                    union[c] += int((p | g).sum())

    out: dict = {"samples": n}
    if labelled:
        out["accuracy"] = correct / labelled
    if px:
        out["depth_rmse"] = math.sqrt(sq_err / px)
    if union.sum():
        present = union > 0
        out["seg_miou"] = float((inter[present] / union[present]).mean())
    return out
