"""Encoder, mask decoders, waypoint/velocity decoder and the training losses.

Layout of the bundle::

    image (B,3,H,W)
      └─ encoder: block1..block4, each halves H,W and doubles channels
           ├─ mask decoder: 1x1 head on the deepest map, upsampled x16
           │    or, with deep supervision, one 1x1 head per level whose
           │    logits are mixed by learned per-level weights
           └─ waypoint decoder: block5 -> block6 -> global avg pool (1024-d)
                -> standardise -> fc1 -> relu -> fc2 -> rescale
                -> 3 (waypoint) or 4 (velocity)
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autograd import Buffer, Module, Parameter, Tensor, he_normal
from .autograd import functional as F

WBCE_EPS = 1e-7
HEAD_OUTPUTS = {"waypoint": 3, "velocity": 4}
# mask heads start near the foreground prior (~12% of pixels) with small weights
MASK_PRIOR_LOGIT = -2.0
MASK_HEAD_SCALE = 0.1


class ConvLayer(Module):
    def __init__(self, rng, cin: int, cout: int, kernel: int, stride: int = 1,
                 scale: float = 1.0, bias: float = 0.0):
        self.stride = stride
        self.padding = kernel // 2
        self.weight = Parameter(he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel) * scale)
        self.bias = Parameter(np.full(cout, bias))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, fan_in: int, fan_out: int, scale: float = 1.0):
        self.weight = Parameter(he_normal(rng, (fan_out, fan_in), fan_in) * scale)
        self.bias = Parameter(np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return F.fully_connected(x, self.weight, self.bias)


class ResBlock(Module):
    """Two conv+ReLU stages summed with a 1x1 convolutional skip path."""

    def __init__(self, rng, cin: int, cout: int, downsample: bool = True, kernel: int = 3):
        stride = 2 if downsample else 1
        self.cin, self.cout, self.downsample = cin, cout, downsample
        self.conv1 = ConvLayer(rng, cin, cout, kernel, stride)
        self.conv2 = ConvLayer(rng, cout, cout, kernel, 1)
        self.skip = ConvLayer(rng, cin, cout, 1, stride)
        # keep activation scale roughly constant across stacked blocks
        self.conv2.weight.data *= 0.5
        self.skip.weight.data *= np.sqrt(0.5)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ValueError(f"res block expects {self.cin} input channels, got {x.shape[1]}")
        main = F.relu(self.conv2(F.relu(self.conv1(x))))
        return F.add(main, self.skip(x))


def res_block(x: Tensor, block: ResBlock) -> Tensor:
    return block(x)


@dataclass
class NetworkConfig:
    resolution: int = 64
    base_channels: int = 16
    n_blocks: int = 4
    deep_supervision: bool = False
    head: str = "waypoint"
    feature_dim: int = 1024
    fc_hidden: int = 128

    def __post_init__(self):
        if self.head not in HEAD_OUTPUTS:
            raise ValueError(f"unknown head type {self.head!r}")
        if self.resolution % (2 ** (self.n_blocks + 1)):
            raise ValueError(f"resolution {self.resolution} must be divisible by {2 ** (self.n_blocks + 1)}")

    def level_channels(self) -> list[int]:
        return [self.base_channels * 2 ** (k + 1) for k in range(self.n_blocks)]


class Encoder(Module):
    def __init__(self, rng, cfg: NetworkConfig):
        chans = cfg.level_channels()
        cins = [3] + chans[:-1]
        self.blocks = [ResBlock(rng, ci, co, downsample=True) for ci, co in zip(cins, chans)]

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class PlainMaskDecoder(Module):
    def __init__(self, rng, cfg: NetworkConfig):
        self.factor = 2 ** cfg.n_blocks
        self.head = ConvLayer(rng, cfg.level_channels()[-1], 1, 1, scale=MASK_HEAD_SCALE, bias=MASK_PRIOR_LOGIT)

    def __call__(self, feats: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
        logits = F.upsample_bilinear(self.head(feats[-1]), self.factor)
        return F.sigmoid(logits), []


class DeepSupervisionMaskDecoder(Module):
    """One 1x1 head per encoder level; logits mixed with learned per-level weights.

    Returns the final mask and the per-level masks, all at input resolution.
    """

    def __init__(self, rng, cfg: NetworkConfig):
        chans = cfg.level_channels()
        self.heads = [ConvLayer(rng, c, 1, 1, scale=MASK_HEAD_SCALE, bias=MASK_PRIOR_LOGIT) for c in chans]
        self.combine = Parameter(np.full(len(chans), 1.0 / len(chans)))

    def level_logits(self, feats: list[Tensor]) -> list[Tensor]:
        return [F.upsample_bilinear(head(f), 2 ** (k + 1)) for k, (head, f) in enumerate(zip(self.heads, feats))]

    def __call__(self, feats: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
        logits = self.level_logits(feats)
        stacked = F.concat_channels(logits)
        # weights are normalised by their sum, so identical level maps pass through unchanged
        mixed = F.div(F.sum(F.scale_by_learned_weights(stacked, self.combine), axis=1), F.sum(self.combine))
        final = F.sigmoid(F.reshape(mixed, (mixed.shape[0], 1) + mixed.shape[1:]))
        return final, [F.sigmoid(z) for z in logits]


class HeadScaling(Module):
    """Fixed affine maps around the FC head.

    Pooled features are standardised on the way in and outputs mapped back to
    label units on the way out. Calibrated once from training data before the
    head is trained; identity until then.
    """

    def __init__(self, feature_dim: int, n_out: int):
        self.feat_shift = Buffer(np.zeros(feature_dim))
        self.feat_scale = Buffer(np.ones(feature_dim))
        self.out_shift = Buffer(np.zeros(n_out))
        self.out_scale = Buffer(np.ones(n_out))

    def calibrate(self, features: np.ndarray, targets: np.ndarray) -> None:
        sd = features.std(axis=0)
        # dead (constant) channels keep unit scale instead of blowing up
        self.feat_shift.data[...] = features.mean(axis=0)
        self.feat_scale.data[...] = np.where(sd > 1e-6, 1.0 / np.maximum(sd, 1e-6), 1.0)
        self.out_shift.data[...] = targets.mean(axis=0)
        self.out_scale.data[...] = np.maximum(targets.std(axis=0), 1e-3)

    def inward(self, f: Tensor) -> Tensor:
        return F.mul(F.sub(f, self.feat_shift), self.feat_scale)

    def outward(self, y: Tensor) -> Tensor:
        return F.add(F.mul(y, self.out_scale), self.out_shift)


class WaypointDecoder(Module):
    """Res block 5 (3x3, stride 2) -> Res block 6 (1x1 kernels) -> avg pool -> fc -> fc."""

    def __init__(self, rng, cfg: NetworkConfig):
        c = cfg.level_channels()[-1]
        self.block5 = ResBlock(rng, c, 2 * c, downsample=True)
        self.block6 = ResBlock(rng, 2 * c, cfg.feature_dim, downsample=False, kernel=1)
        self.fc1 = Linear(rng, cfg.feature_dim, cfg.fc_hidden)
        self.fc2 = Linear(rng, cfg.fc_hidden, HEAD_OUTPUTS[cfg.head], scale=0.1)
        self.scaling = HeadScaling(cfg.feature_dim, HEAD_OUTPUTS[cfg.head])

    def features(self, deepest: Tensor) -> Tensor:
        return F.avg_pool_global(self.block6(self.block5(deepest)))

    def head(self, f: Tensor) -> Tensor:
        z = self.fc2(F.relu(self.fc1(self.scaling.inward(f))))
        return self.scaling.outward(z)

    def __call__(self, deepest: Tensor) -> tuple[Tensor, Tensor]:
        f = self.features(deepest)
        return self.head(f), f


def standardize(images) -> Tensor:
    """Map [0,1] images (B,3,H,W) to roughly zero-mean inputs."""
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    return Tensor(((data - 0.5) * 4.0).astype(data.dtype if data.dtype.kind == "f" else np.float32))


class NetworkBundle(Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(rng, cfg)
        if cfg.deep_supervision:
            self.mask = DeepSupervisionMaskDecoder(rng, cfg)
        else:
            self.mask = PlainMaskDecoder(rng, cfg)
        self.waypoint = WaypointDecoder(rng, cfg)

    @property
    def head_type(self) -> str:
        return self.cfg.head

    def encode(self, images) -> list[Tensor]:
        return self.encoder(standardize(images))

    def predict_mask(self, images) -> Tensor:
        final, _ = self.mask(self.encode(images))
        return final

    def predict_head(self, images) -> Tensor:
        out, _ = self.waypoint(self.encode(images)[-1])
        return out

    def named_params(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def meta(self) -> dict:
        return {"network": asdict(self.cfg)}


def decode_mask_plain(decoder: PlainMaskDecoder, feats: list[Tensor]) -> Tensor:
    return decoder(feats)[0]


def decode_mask_deep_supervision(decoder: DeepSupervisionMaskDecoder, feats: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
    return decoder(feats)


def decode_waypoint(decoder: WaypointDecoder, deepest: Tensor) -> tuple[Tensor, Tensor]:
    """Return (prediction, 1024-d pooled feature)."""
    return decoder(deepest)


# losses ------------------------------------------------------------------------

def wbce_loss(pred: Tensor, label, beta: float = 0.9) -> Tensor:
    """Weighted BCE summed over pixels, averaged over the batch axis.

    ``pred`` holds probabilities. A bare (H, W) mask counts as a batch of one.
    """
    lab = np.asarray(label.data if isinstance(label, Tensor) else label)
    if lab.shape != pred.shape:
        raise ValueError(f"wbce_loss: prediction shape {pred.shape} != label shape {lab.shape}")
    if not np.all((lab == 0) | (lab == 1)):
        raise ValueError("wbce_loss: label mask must be binary")
    lab = lab.astype(pred.dtype)
    p = F.clamp(pred, WBCE_EPS, 1.0 - WBCE_EPS)
    log_fg = F.log(p)
    log_bg = F.log(F.sub(1.0, p))
    weighted = F.add(F.mul(log_fg, beta * lab), F.mul(log_bg, (1.0 - beta) * (1.0 - lab)))
    n = pred.shape[0] if pred.ndim >= 3 else 1
    return F.mul(F.sum(weighted), -1.0 / n)


def mse_loss(pred: Tensor, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"mse_loss: prediction shape {pred.shape} != target shape {t.shape}")
    return F.mean(F.square(F.sub(pred, t)))


def _distance(a: Tensor, b: Tensor) -> Tensor:
    # the tiny offset keeps the gradient finite at zero distance
    return F.sqrt(F.add(F.sum(F.square(F.sub(a, b)), axis=-1), 1e-12))


def triplet_loss(f_a: Tensor, f_p: Tensor, f_n: Tensor, margin: float = 1.0) -> Tensor:
    """max(d(a,p) - d(a,n) + margin, 0), averaged over the leading batch axis."""
    if not (f_a.shape == f_p.shape == f_n.shape):
        raise ValueError(f"triplet_loss: feature shapes differ {f_a.shape}, {f_p.shape}, {f_n.shape}")
    per = F.relu(F.add(F.sub(_distance(f_a, f_p), _distance(f_a, f_n)), margin))
    return F.mean(per)
