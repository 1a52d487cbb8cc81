"""Two-stage training: encoder + mask decoder first, then the waypoint/velocity decoder on a frozen encoder."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import augment as aug
from .autograd import Adam, Tensor, load_into, no_grad, read_checkpoint, save_checkpoint
from .autograd import functional as F
from .autograd.checkpoint import CheckpointError
from .evaluate import batch_iou, offline_rmse
from .network import NetworkBundle, NetworkConfig, mse_loss, triplet_loss, wbce_loss
from .rng import stable_hash, substream

log = logging.getLogger(__name__)

# parameters stage 1 never updates; stage-1 checkpoints leave them out so they are head-agnostic
HEAD_PARAMS = ("waypoint.fc1.", "waypoint.fc2.", "waypoint.scaling.")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class RunConfig:
    name: str = "run"
    dataset: str = "data"
    backgrounds: str = "none"
    brightness: float = 0.0
    hue: float = 0.0
    blur: bool = False
    deep_supervision: bool = False
    triplet: bool = False
    tl_weight: float = 1.0
    tl_batch: int = 4
    head: str = "waypoint"
    epochs1: int = 30
    epochs2: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    resolution: int = 64
    base_channels: int = 16
    pool_size: int = 256
    beta: float = 0.9
    checkpoint_every: int = 0

    @property
    def augment(self) -> aug.AugmentConfig:
        return aug.AugmentConfig(backgrounds=self.backgrounds, brightness=self.brightness, hue=self.hue,
                                 blur=self.blur, pool_size=self.pool_size)

    @property
    def tl_active(self) -> bool:
        return self.triplet and self.tl_weight > 0

    def network(self) -> NetworkConfig:
        return NetworkConfig(resolution=self.resolution, base_channels=self.base_channels,
                             deep_supervision=self.deep_supervision, head=self.head)

    def stage1_key(self) -> dict:
        """Fields that determine the stage-1 result."""
        skip = {"name", "head", "epochs2", "checkpoint_every"}
        return {k: v for k, v in asdict(self).items() if k not in skip}

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown run config keys: {unknown}")
        return cls(**d)


# ---------------------------------------------------------------------------
# data

@dataclass
class LineDataset:
    images: np.ndarray      # (N, H, W, 3) float32 in [0, 1]
    masks: np.ndarray       # (N, H, W) uint8 in {0, 1}
    w: np.ndarray           # (N, 3)
    v: np.ndarray           # (N, 4)
    index: np.ndarray       # (N,) sample ids from labels.jsonl
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> LineDataset:
        idx = np.asarray(idx, dtype=int)
        return LineDataset(self.images[idx], self.masks[idx], self.w[idx], self.v[idx], self.index[idx], self.meta)

    def targets(self, head: str) -> np.ndarray:
        return self.w if head == "waypoint" else self.v

    @classmethod
    def load(cls, path) -> LineDataset:
        from PIL import Image
        root = Path(path)
        if not (root / "labels.jsonl").exists():
            raise FileNotFoundError(f"no dataset at {root} (missing labels.jsonl)")
        records = [json.loads(line) for line in (root / "labels.jsonl").read_text().splitlines() if line.strip()]
        images, masks = [], []
        for rec in records:
            name = f"{rec['index']:06d}.png"
            images.append(np.asarray(Image.open(root / "images" / name).convert("RGB"), dtype=np.float32) / 255.0)
            masks.append((np.asarray(Image.open(root / "masks" / name)) > 127).astype(np.uint8))
        meta = json.loads((root / "dataset.json").read_text()) if (root / "dataset.json").exists() else {}
        return cls(np.stack(images), np.stack(masks), np.array([r["w"] for r in records], dtype=np.float32),
                   np.array([r["v"] for r in records], dtype=np.float32),
                   np.array([r["index"] for r in records]), meta)


def is_validation(index: int) -> bool:
    """10% validation split by a hash of the sample index (stable across seeds and runs)."""
    return stable_hash("split", int(index)) % 10 == 0


def split_dataset(ds: LineDataset) -> tuple[LineDataset, LineDataset]:
    val = np.array([is_validation(i) for i in ds.index], dtype=bool)
    return ds.subset(np.flatnonzero(~val)), ds.subset(np.flatnonzero(val))


def to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2))


def make_pool(cfg: RunConfig, for_triplets: bool = False) -> aug.BackgroundPool | None:
    source = cfg.backgrounds
    if source == "none":
        if not for_triplets:
            return None
        # triplets need backgrounds even when the supervised batches stay white
        source = "texture+scene"
    return aug.BackgroundPool(source, resolution=cfg.resolution, size=cfg.pool_size,
                              seed=int(substream(cfg.seed, "background-pool").integers(2 ** 31)))


def augmented_batch(ds: LineDataset, idx, cfg: RunConfig, pool, stream: tuple) -> np.ndarray:
    """Images for ``idx`` with per-sample randomness drawn from (seed, *stream, sample index)."""
    acfg = cfg.augment
    if not acfg.enabled:
        return ds.images[idx]
    out = np.empty((len(idx),) + ds.images.shape[1:], dtype=np.float32)
    for k, i in enumerate(idx):
        rng = substream(cfg.seed, "augment", *stream, int(ds.index[i]))
        out[k] = aug.augment_sample(ds.images[i], ds.masks[i], acfg, pool, rng)
    return out


def validation_images(ds: LineDataset, cfg: RunConfig, pool) -> np.ndarray:
    """Validation inputs use the run's augmentation with fixed per-sample draws."""
    return augmented_batch(ds, np.arange(len(ds)), cfg, pool, ("validation",))


def triplet_batch(ds: LineDataset, pool, cfg: RunConfig, stream: tuple) -> np.ndarray:
    """Stacked (anchors, positives, negatives) as one NCHW batch of 3*tl_batch images."""
    a, p, n = [], [], []
    for k in range(cfg.tl_batch):
        rng = substream(cfg.seed, "triplet", *stream, k)
        t = aug.sample_triplet(ds.images, ds.masks, pool, rng, cfg.augment)
        a.append(t.anchor)
        p.append(t.positive)
        n.append(t.negative)
    return to_nchw(np.stack(a + p + n))


# ---------------------------------------------------------------------------
# helpers

def build_bundle(cfg: RunConfig) -> NetworkBundle:
    return NetworkBundle(cfg.network(), seed=int(substream(cfg.seed, "init").integers(2 ** 31)))


def _check_finite(loss: Tensor, stage: int, epoch: int, step: int, seed: int) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss in stage {stage}, epoch {epoch}, step {step} "
                               f"(batch seed: root {seed}, stream stage{stage}/epoch{epoch}/step{step})")
    return value


def mask_losses(bundle: NetworkBundle, feats, masks: np.ndarray, beta: float) -> tuple[Tensor, Tensor]:
    """(total loss, final-mask probabilities); DS adds one equally weighted term per level."""
    final, levels = bundle.mask(feats)
    lab = masks[:, None].astype(final.dtype)
    loss = wbce_loss(final, lab, beta)
    for lvl in levels:
        loss = F.add(loss, wbce_loss(lvl, lab, beta))
    return loss, final


def stage1_parameters(bundle: NetworkBundle, cfg: RunConfig) -> list:
    params = bundle.encoder.parameters() + bundle.mask.parameters()
    if cfg.tl_active:
        params += bundle.waypoint.block5.parameters() + bundle.waypoint.block6.parameters()
    return params


def stage2_parameters(bundle: NetworkBundle) -> list:
    return bundle.waypoint.parameters()


def stage1_arrays(bundle: NetworkBundle) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in bundle.named_parameters() if not k.startswith(HEAD_PARAMS)}


def all_arrays(bundle: NetworkBundle) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in bundle.named_parameters()}


@dataclass
class Curves:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def write(self, path) -> None:
        cols = ["stage", "epoch", "train_loss", "val_loss", "val_iou", "val_rmse"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([_fmt(r.get(c)) for c in cols])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


# ---------------------------------------------------------------------------
# stage 1

def evaluate_masks(bundle: NetworkBundle, images: np.ndarray, masks: np.ndarray, beta: float,
                   batch_size: int = 32) -> tuple[float, float, np.ndarray]:
    """(mean WBCE, mean IoU at 0.5, probabilities) over a split."""
    losses, probs = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = to_nchw(images[i:i + batch_size])
            m = masks[i:i + batch_size]
            loss, final = mask_losses(bundle, bundle.encode(x), m, beta)
            losses.append(float(loss.data) * len(x))
            probs.append(final.data[:, 0])
    if not probs:
        return float("nan"), float("nan"), np.zeros((0,) + masks.shape[1:], np.float32)
    p = np.concatenate(probs)
    return sum(losses) / len(images), float(np.mean(batch_iou(p, masks))), p


def train_stage1(cfg: RunConfig, out_dir, dataset: LineDataset | None = None,
                 bundle: NetworkBundle | None = None) -> dict:
    """Train encoder and mask decoder (plus Res blocks 5-6 under the triplet loss).

    Writes ``stage1.ckpt``, ``config.json`` and ``curves.csv`` and returns a summary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset if dataset is not None else LineDataset.load(cfg.dataset)
    train, val = split_dataset(ds)
    if len(train) == 0:
        raise ValueError("training split is empty")
    bundle = bundle or build_bundle(cfg)
    pool = make_pool(cfg)
    tl_pool = make_pool(cfg, for_triplets=True) if cfg.tl_active else None
    params = stage1_parameters(bundle, cfg)
    opt = Adam(params, lr=cfg.lr)
    val_images = validation_images(val, cfg, pool)
    curves = Curves()
    started = time.process_time()
    for epoch in range(1, cfg.epochs1 + 1):
        order = substream(cfg.seed, "order", 1, epoch).permutation(len(train))
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = to_nchw(augmented_batch(train, idx, cfg, pool, (1, epoch)))
            feats = bundle.encode(x)
            loss, _ = mask_losses(bundle, feats, train.masks[idx], cfg.beta)
            if cfg.tl_active:
                trip = triplet_batch(train, tl_pool, cfg, (1, epoch, step))
                f = bundle.waypoint.features(bundle.encode(trip)[-1])
                n = cfg.tl_batch
                tl = triplet_loss(F.slice_rows(f, 0, n), F.slice_rows(f, n, 2 * n), F.slice_rows(f, 2 * n, 3 * n))
                loss = F.add(loss, F.mul(tl, cfg.tl_weight))
            value = _check_finite(loss, 1, epoch, step, cfg.seed)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        val_loss, val_iou, _ = evaluate_masks(bundle, val_images, val.masks, cfg.beta)
        curves.add(stage=1, epoch=epoch, train_loss=total / count, val_loss=val_loss, val_iou=val_iou)
        log.info("%s stage1 epoch %d: train %.4f val %.4f iou %.4f", cfg.name, epoch, total / count, val_loss, val_iou)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"stage1_epoch{epoch:03d}.ckpt", stage1_arrays(bundle), _meta(cfg, 1, epoch))
    save_checkpoint(out / "stage1.ckpt", stage1_arrays(bundle), _meta(cfg, 1, cfg.epochs1))
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    curves.write(out / "curves_stage1.csv")
    seconds = time.process_time() - started
    (out / "timing_stage1.json").write_text(json.dumps({"cpu_seconds": seconds}))
    final = curves.rows[-1] if curves.rows else {}
    return {"bundle": bundle, "curves": curves, "val_iou": final.get("val_iou"), "cpu_seconds": seconds}


def _meta(cfg: RunConfig, stage: int, epoch: int) -> dict:
    meta = {"stage": stage, "epoch": epoch, "deep_supervision": cfg.deep_supervision,
            "network": asdict(cfg.network()), "config": asdict(cfg)}
    if stage == 2:
        meta["head"] = cfg.head
    return meta


# ---------------------------------------------------------------------------
# stage 2

def load_stage1(cfg: RunConfig, checkpoint) -> NetworkBundle:
    arrays, meta = read_checkpoint(checkpoint)
    if meta.get("stage") == 2 and meta.get("head") != cfg.head:
        raise CheckpointError(f"checkpoint head {meta.get('head')!r} does not match config head {cfg.head!r}")
    if bool(meta.get("deep_supervision", cfg.deep_supervision)) != cfg.deep_supervision:
        raise CheckpointError("checkpoint deep-supervision flag does not match config")
    bundle = build_bundle(cfg)
    load_into(bundle.named_params(), arrays)
    return bundle


def load_bundle(run_dir, stage: int = 2) -> tuple[NetworkBundle, RunConfig]:
    run = Path(run_dir)
    cfg = RunConfig.from_dict(json.loads((run / "config.json").read_text()))
    bundle = load_stage1(cfg, run / f"stage{stage}.ckpt")
    return bundle, cfg


def evaluate_head(bundle: NetworkBundle, images: np.ndarray, targets: np.ndarray,
                  batch_size: int = 32) -> tuple[float, float, np.ndarray]:
    """(MSE, RMSE, predictions) of the waypoint/velocity head over a split."""
    preds = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            preds.append(bundle.predict_head(to_nchw(images[i:i + batch_size])).data)
    if not preds:
        return float("nan"), float("nan"), np.zeros((0, targets.shape[1]))
    p = np.concatenate(preds)
    return float(np.mean((p - targets) ** 2)), offline_rmse(p, targets), p


def calibrate_head(bundle: NetworkBundle, ds: LineDataset, targets: np.ndarray, cfg: RunConfig, pool,
                   n: int = 256) -> None:
    """Fix the head's input/output standardisation from a sample of augmented training images."""
    idx = np.sort(substream(cfg.seed, "calibrate").permutation(len(ds))[:n])
    feats = []
    with no_grad():
        for start in range(0, len(idx), 32):
            x = to_nchw(augmented_batch(ds, idx[start:start + 32], cfg, pool, ("calibrate",)))
            feats.append(bundle.waypoint.features(bundle.encode(x)[-1]).data)
    bundle.waypoint.scaling.calibrate(np.concatenate(feats).astype(np.float64), targets[idx].astype(np.float64))


def train_stage2(cfg: RunConfig, stage1_checkpoint, out_dir, dataset: LineDataset | None = None) -> dict:
    """Train the waypoint (or velocity) decoder with the encoder frozen; MSE plus optional triplet loss."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset if dataset is not None else LineDataset.load(cfg.dataset)
    train, val = split_dataset(ds)
    bundle = load_stage1(cfg, stage1_checkpoint)
    bundle.encoder.freeze()
    bundle.mask.freeze()
    pool = make_pool(cfg)
    tl_pool = make_pool(cfg, for_triplets=True) if cfg.tl_active else None
    val_images = validation_images(val, cfg, pool)
    val_targets = val.targets(cfg.head)
    train_targets = train.targets(cfg.head)
    calibrate_head(bundle, train, train_targets, cfg, pool)
    opt = Adam(stage2_parameters(bundle), lr=cfg.lr)
    curves = Curves()
    started = time.process_time()
    for epoch in range(1, cfg.epochs2 + 1):
        order = substream(cfg.seed, "order", 2, epoch).permutation(len(train))
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = to_nchw(augmented_batch(train, idx, cfg, pool, (2, epoch)))
            deepest = bundle.encode(x)[-1]
            pred, _ = bundle.waypoint(deepest)
            loss = mse_loss(pred, train_targets[idx])
            if cfg.tl_active:
                trip = triplet_batch(train, tl_pool, cfg, (2, epoch, step))
                f = bundle.waypoint.features(bundle.encode(trip)[-1])
                n = cfg.tl_batch
                tl = triplet_loss(F.slice_rows(f, 0, n), F.slice_rows(f, n, 2 * n), F.slice_rows(f, 2 * n, 3 * n))
                loss = F.add(loss, F.mul(tl, cfg.tl_weight))
            value = _check_finite(loss, 2, epoch, step, cfg.seed)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        val_mse, val_rmse, _ = evaluate_head(bundle, val_images, val_targets)
        curves.add(stage=2, epoch=epoch, train_loss=total / count, val_loss=val_mse, val_rmse=val_rmse)
        log.info("%s stage2 epoch %d: train %.5f val %.5f rmse %.4f", cfg.name, epoch, total / count, val_mse, val_rmse)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"stage2_epoch{epoch:03d}.ckpt", all_arrays(bundle), _meta(cfg, 2, epoch))
    save_checkpoint(out / "stage2.ckpt", all_arrays(bundle), _meta(cfg, 2, cfg.epochs2))
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    curves.write(out / "curves_stage2.csv")
    seconds = time.process_time() - started
    (out / "timing_stage2.json").write_text(json.dumps({"cpu_seconds": seconds}))
    final = curves.rows[-1] if curves.rows else {}
    return {"bundle": bundle, "curves": curves, "val_rmse": final.get("val_rmse"), "cpu_seconds": seconds}


def merge_curves(run_dir) -> None:
    """Concatenate the stage curves into ``curves.csv``."""
    run = Path(run_dir)
    lines = []
    for stage in (1, 2):
        p = run / f"curves_stage{stage}.csv"
        if p.exists():
            rows = p.read_text().splitlines()
            lines = lines or rows[:1]
            lines += rows[1:]
    if lines:
        (run / "curves.csv").write_text("\n".join(lines) + "\n")
