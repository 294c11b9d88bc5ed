"""Network builders: 3D segmentation U-Net, translation generators
(Pix2Pix, SPADE, cycleGAN pairs), the PatchGAN discriminator, and the 3D
lesion-mask GAN, plus receptive-field and parameter-count introspection
and checkpoint persistence.

Tensor layout is channel-first: 2D inputs are (B, C, X, Y), 3D inputs are
(B, C, X, Y, Z).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

CONV_KINDS = {"conv2d", "conv3d"}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    stride: int = 0
    filters: int = 0

    def __post_init__(self):
        if self.kind in CONV_KINDS and (self.kernel <= 0 or self.stride <= 0):
            raise ValueError(f"conv layer needs positive kernel/stride, got {self}")


def receptive_field(stack: list[LayerSpec]) -> int:
    """Input extent seen by one output unit of a conv stack.

    Backward recursion from a single output pixel: r_in = r_out * s + (k - s).
    """
    r = 1
    for layer in reversed(stack):
        if layer.kind not in CONV_KINDS:
            raise ValueError(f"receptive_field only supports conv layers, got {layer.kind!r}")
        r = r * layer.stride + (layer.kernel - layer.stride)
    return r


@dataclass
class ModelHandle:
    """A built network plus its builder configuration.

    ``input_channels`` is the channel count of the primary input; calling
    the handle shape-checks against it before forwarding.
    """

    architecture_id: str
    module: nn.Module
    config: dict
    input_channels: int
    conv_stack: list[LayerSpec] = field(default_factory=list)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters() if p.requires_grad)

    def __call__(self, x: torch.Tensor, *args, **kwargs) -> torch.Tensor:
        if x.shape[1] != self.input_channels:
            raise ValueError(
                f"{self.architecture_id} expects {self.input_channels} input channels, "
                f"got {x.shape[1]}"
            )
        return self.module(x, *args, **kwargs)

    def eval(self):
        self.module.eval()
        return self

    def train(self):
        self.module.train()
        return self


def _init_weights(module: nn.Module) -> None:
    # GAN convention: truncated normal, std 0.02, cut at 2 sigma
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# 3D segmentation U-Net


class _UnetDown(nn.Module):
    def __init__(self, c_in, c_out, dropout):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv3d(c_in, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Conv3d(c_out, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
        )
        self.pool = nn.MaxPool3d(2)

    def forward(self, x):
        skip = self.convs(x)
        return self.pool(skip), skip


class _UnetUp(nn.Module):
    def __init__(self, c_in, c_out, dropout):
        super().__init__()
        self.up = nn.ConvTranspose3d(c_in, c_out, kernel_size=2, stride=2)
        self.norm = nn.BatchNorm3d(c_out)
        self.convs = nn.Sequential(
            nn.Conv3d(2 * c_out, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Conv3d(c_out, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
        )

    def forward(self, x, skip):
        x = F.relu(self.norm(self.up(x)))
        return self.convs(torch.cat([skip, x], dim=1))


class Unet3d(nn.Module):
    """Four-level 3D U-Net with per-voxel softmax output."""

    def __init__(self, n_labels=2, dropout=0.02, base_filters=16):
        super().__init__()
        widths = [base_filters * m for m in (1, 2, 4, 8)]
        downs, c = [], 1
        for w in widths:
            downs.append(_UnetDown(c, w, dropout))
            c = w
        self.downs = nn.ModuleList(downs)
        self.bottleneck = nn.Sequential(
            nn.Conv3d(c, 2 * c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Conv3d(2 * c, 2 * c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
        )
        ups, c = [], 2 * c
        for w in reversed(widths):
            ups.append(_UnetUp(c, w, dropout))
            c = w
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv3d(c, n_labels, 3, padding=1)

    def forward(self, x):
        if any(s % 16 != 0 for s in x.shape[2:]):
            raise ValueError(f"input spatial dims must be divisible by 16, got {tuple(x.shape[2:])}")
        skips = []
        for down in self.downs:
            x, skip = down(x)
            skips.append(skip)
        x = self.bottleneck(x)
        for up, skip in zip(self.ups, reversed(skips)):
            x = up(x, skip)
        return torch.softmax(self.head(x), dim=1)


def build_unet3d(n_labels: int = 2, dropout: float = 0.02, base_filters: int = 16) -> ModelHandle:
    if n_labels < 2:
        raise ValueError("n_labels must be >= 2")
    net = Unet3d(n_labels=n_labels, dropout=dropout, base_filters=base_filters)
    _init_weights(net)
    return ModelHandle(
        architecture_id="unet3d",
        module=net,
        config={"n_labels": n_labels, "dropout": dropout, "base_filters": base_filters},
        input_channels=1,
    )


# ---------------------------------------------------------------------------
# Pix2Pix generator


class _P2PDown(nn.Module):
    def __init__(self, c_in, c_out, size_in):
        super().__init__()
        if size_in > 1:
            self.conv = nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)
            self.size_out = size_in // 2
        else:
            # innermost blocks run at 1x1: kernel clamped to the feature size
            self.conv = nn.Conv2d(c_in, c_out, 1, stride=1)
            self.size_out = 1
        # instance variance is undefined on 1x1 maps
        self.norm = nn.InstanceNorm2d(c_out, affine=True) if self.size_out > 1 else nn.Identity()
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class _P2PUp(nn.Module):
    def __init__(self, c_in, c_out, dropout=0.5):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = nn.Conv2d(c_in, c_out, 4, stride=1, padding="same")
        self.act1 = nn.LeakyReLU(0.2)
        self.drop = nn.Dropout(dropout)
        self.norm = nn.InstanceNorm2d(c_out, affine=True)
        self.act2 = nn.LeakyReLU(0.2)

    def forward(self, x, skip):
        x = self.norm(self.drop(self.act1(self.conv(self.up(x)))))
        return self.act2(torch.cat([x, skip], dim=1))


class Pix2PixGenerator(nn.Module):
    """U-Net translation generator: eight 4x4 stride-2 down blocks and a
    mirrored nearest-neighbor-upsampling decoder with skip connections."""

    def __init__(self, in_channels, out_channels=1, base_filters=64, input_size=128,
                 final_activation="tanh"):
        super().__init__()
        if input_size & (input_size - 1):
            raise ValueError("input_size must be a power of two")
        self.input_size = input_size
        self.final_activation = final_activation
        mults = (1, 2, 4, 8, 8, 8, 8, 8)
        downs, c, size = [], in_channels, input_size
        self.skip_idx = []
        for i, m in enumerate(mults):
            blk = _P2PDown(c, base_filters * m, size)
            downs.append(blk)
            c, size = base_filters * m, blk.size_out
            if size >= 2:
                self.skip_idx.append(i)
        self.downs = nn.ModuleList(downs)

        skip_channels = [base_filters * mults[i] for i in self.skip_idx]
        ups = []
        for w in reversed(skip_channels):
            ups.append(_P2PUp(c, w))
            c = 2 * w
        self.ups = nn.ModuleList(ups)
        self.final_up = nn.Upsample(scale_factor=2, mode="nearest")
        self.final_conv = nn.Conv2d(c, out_channels, 4, stride=1, padding="same")

    def forward(self, x):
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            raise ValueError(f"expected {self.input_size}x{self.input_size} input, got {tuple(x.shape[-2:])}")
        skips = []
        for i, down in enumerate(self.downs):
            x = down(x)
            if i in self.skip_idx:
                skips.append(x)
        for up, skip in zip(self.ups, reversed(skips)):
            x = up(x, skip)
        x = self.final_conv(self.final_up(x))
        if self.final_activation == "tanh":
            return torch.tanh(x)
        return torch.softmax(x, dim=1)


def build_pix2pix_generator(
    n_label_channels: int,
    base_filters: int = 64,
    input_size: int = 128,
    out_channels: int = 1,
    final_activation: str = "tanh",
) -> ModelHandle:
    net = Pix2PixGenerator(
        in_channels=n_label_channels,
        out_channels=out_channels,
        base_filters=base_filters,
        input_size=input_size,
        final_activation=final_activation,
    )
    _init_weights(net)
    return ModelHandle(
        architecture_id="pix2pix_gen",
        module=net,
        config={
            "n_label_channels": n_label_channels,
            "base_filters": base_filters,
            "input_size": input_size,
            "out_channels": out_channels,
            "final_activation": final_activation,
        },
        input_channels=n_label_channels,
    )


# ---------------------------------------------------------------------------
# SPADE generator


class SpadeNorm(nn.Module):
    """Spatially-adaptive normalization: a parameter-free instance norm whose
    scale and bias are predicted per pixel from the (resized) label map."""

    def __init__(self, channels, label_channels, hidden=128):
        super().__init__()
        self.param_free = nn.InstanceNorm2d(channels, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(label_channels, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x, seg):
        seg = F.interpolate(seg, size=x.shape[2:], mode="nearest")
        h = self.shared(seg)
        return self.param_free(x) * (1 + self.gamma(h)) + self.beta(h)


class _SpadeResBlock(nn.Module):
    def __init__(self, c_in, c_out, label_channels, hidden):
        super().__init__()
        self.norm1 = SpadeNorm(c_in, label_channels, hidden)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = SpadeNorm(c_out, label_channels, hidden)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        if c_in != c_out:
            self.norm_s = SpadeNorm(c_in, label_channels, hidden)
            self.conv_s = nn.Conv2d(c_in, c_out, 1, bias=False)
        else:
            self.norm_s = self.conv_s = None

    def forward(self, x, seg):
        h = self.conv1(F.leaky_relu(self.norm1(x, seg), 0.2))
        h = self.conv2(F.leaky_relu(self.norm2(h, seg), 0.2))
        s = x if self.conv_s is None else self.conv_s(self.norm_s(x, seg))
        return h + s


class SpadeGenerator(nn.Module):
    """Latent-driven generator with label maps injected through SPADE norms."""

    def __init__(self, latent_dim=128, label_channels=8, out_size=128, hidden=128):
        super().__init__()
        n_blocks = int(math.log2(out_size / 4))
        if 4 * 2**n_blocks != out_size:
            raise ValueError(f"out_size must be 4 * 2^k, got {out_size}")
        filters = [128, 64, 32, 16, 8][:n_blocks]
        self.latent_dim = latent_dim
        self.fc = nn.Linear(latent_dim, 4 * 4 * 128)
        blocks, c = [], 128
        for w in filters:
            blocks.append(_SpadeResBlock(c, w, label_channels, hidden))
            c = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, z, seg):
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent dimension mismatch: expected {self.latent_dim}, got {z.shape[-1]}")
        x = self.fc(z).view(z.shape[0], 128, 4, 4)
        for block in self.blocks:
            x = block(x, seg)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.tanh(self.head(x))


class _SpadeWrapper(nn.Module):
    # presents (seg, z) through the handle's (primary-input-first) call shape
    def __init__(self, gen):
        super().__init__()
        self.gen = gen

    def forward(self, seg, z):
        return self.gen(z, seg)


def build_spade_generator(
    latent_dim: int = 128,
    n_label_channels: int = 8,
    out_size: int = 128,
    hidden: int = 128,
) -> ModelHandle:
    net = SpadeGenerator(latent_dim, n_label_channels, out_size, hidden)
    _init_weights(net)
    return ModelHandle(
        architecture_id="spade_gen",
        module=_SpadeWrapper(net),
        config={
            "latent_dim": latent_dim,
            "n_label_channels": n_label_channels,
            "out_size": out_size,
            "hidden": hidden,
        },
        input_channels=n_label_channels,
    )


# ---------------------------------------------------------------------------
# PatchGAN discriminator


class PatchGan(nn.Module):
    """Convolutional discriminator emitting a grid of per-patch logits."""

    def __init__(self, in_channels, base_filters=32, penultimate_stride=1):
        super().__init__()
        widths = [base_filters, base_filters * 2, base_filters * 4]
        strides = [2, 2, penultimate_stride]
        layers, c = [], in_channels
        for w, s in zip(widths, strides):
            layers += [
                nn.Conv2d(c, w, 4, stride=s, padding=1 if s == 2 else "same"),
                nn.InstanceNorm2d(w, affine=True),
                nn.LeakyReLU(0.2),
            ]
            c = w
        layers.append(nn.Conv2d(c, 1, 4, stride=1, padding="same"))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def build_patchgan(
    n_input_channels: int, base_filters: int = 32, penultimate_stride: int = 1
) -> ModelHandle:
    net = PatchGan(n_input_channels, base_filters, penultimate_stride)
    _init_weights(net)
    stack = [
        LayerSpec("conv2d", 4, 2, base_filters),
        LayerSpec("conv2d", 4, 2, base_filters * 2),
        LayerSpec("conv2d", 4, penultimate_stride, base_filters * 4),
        LayerSpec("conv2d", 4, 1, 1),
    ]
    return ModelHandle(
        architecture_id="patchgan",
        module=net,
        config={
            "n_input_channels": n_input_channels,
            "base_filters": base_filters,
            "penultimate_stride": penultimate_stride,
        },
        input_channels=n_input_channels,
        conv_stack=stack,
    )


def patch_grid_size(input_size: int, stack: list[LayerSpec], same_padding: bool = True) -> int:
    """Output grid extent of a conv stack (convolution arithmetic)."""
    n = input_size
    for layer in stack:
        if same_padding:
            n = math.ceil(n / layer.stride)
        else:
            n = (n - layer.kernel) // layer.stride + 1
    return n


# ---------------------------------------------------------------------------
# 3D lesion-mask GAN (trained with a Wasserstein objective)


def _lesion_stages(out_shape: tuple[int, int, int]) -> tuple[int, tuple[int, int, int]]:
    x, y, z = out_shape
    if x != y:
        raise ValueError("lesion GAN expects square in-plane shape")
    k = int(math.log2(x / 4))
    if 4 * 2**k != x:
        raise ValueError(f"in-plane size must be 4 * 2^k, got {x}")
    if z % 2**k != 0 or z // 2**k < 1:
        raise ValueError(f"Z={z} incompatible with {k} upsampling stages")
    return k, (4, 4, z // 2**k)


class LesionGenerator(nn.Module):
    """Latent to 3D two-channel softmax (background, lesion)."""

    def __init__(self, latent_dim=128, out_shape=(128, 128, 32), base_filters=16):
        super().__init__()
        k, start = _lesion_stages(out_shape)
        self.latent_dim = latent_dim
        self.start = start
        filters = [base_filters * 2**i for i in reversed(range(k))]
        self.c0 = filters[0] * 2 if k > 1 else base_filters * 2
        self.fc = nn.Linear(latent_dim, self.c0 * start[0] * start[1] * start[2])
        stages, c = [], self.c0
        for w in filters:
            stages.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv3d(c, w, 3, padding=1),
                    nn.InstanceNorm3d(w, affine=True),
                    nn.LeakyReLU(0.2),
                )
            )
            c = w
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv3d(c, 2, 3, padding=1)

    def forward(self, z):
        x = self.fc(z).view(z.shape[0], self.c0, *self.start)
        for stage in self.stages:
            x = stage(x)
        return torch.softmax(self.head(x), dim=1)


class LesionCritic(nn.Module):
    """Wasserstein critic on (background, lesion) mask stacks; no output
    nonlinearity and no normalization (gradient-penalty convention)."""

    def __init__(self, in_shape=(128, 128, 32), base_filters=16):
        super().__init__()
        k, start = _lesion_stages(in_shape)
        filters = [base_filters * 2**i for i in range(k)]
        layers, c = [], 2
        for w in filters:
            layers += [nn.Conv3d(c, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c = w
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(c * start[0] * start[1] * start[2], 1)

    def forward(self, x):
        h = self.features(x)
        return self.fc(h.flatten(1))


def build_lesion_gan(
    latent_dim: int = 128,
    out_shape: tuple[int, int, int] = (128, 128, 32),
    base_filters: int = 16,
) -> tuple[ModelHandle, ModelHandle]:
    out_shape = tuple(out_shape)
    gen = LesionGenerator(latent_dim, out_shape, base_filters)
    critic = LesionCritic(out_shape, base_filters)
    _init_weights(gen)
    _init_weights(critic)
    cfg = {"latent_dim": latent_dim, "out_shape": list(out_shape), "base_filters": base_filters}
    gen_handle = ModelHandle("lesion_gen", gen, dict(cfg), input_channels=latent_dim)
    critic_handle = ModelHandle("lesion_critic", critic, dict(cfg), input_channels=2)
    return gen_handle, critic_handle


# ---------------------------------------------------------------------------
# cycleGAN pair


class CycleGanPair(nn.Module):
    """Two generator-discriminator pairs: labels->image and image->labels.

    The discriminators judge single-domain samples (unconditional), and the
    image->labels generator closes the cycle with a softmax over label
    channels. Trained without an identity loss.
    """

    def __init__(self, n_label_channels, base_filters=64, input_size=128):
        super().__init__()
        self.g_ab = Pix2PixGenerator(
            n_label_channels, 1, base_filters, input_size, final_activation="tanh"
        )
        self.g_ba = Pix2PixGenerator(
            1, n_label_channels, base_filters, input_size, final_activation="softmax"
        )
        self.d_a = PatchGan(n_label_channels, base_filters=max(base_filters // 2, 4))
        self.d_b = PatchGan(1, base_filters=max(base_filters // 2, 4))

    def forward(self, labels):
        return self.g_ab(labels)

    def pair_parameter_counts(self) -> dict[str, int]:
        count = lambda m: sum(p.numel() for p in m.parameters() if p.requires_grad)
        return {
            "pair_ab": count(self.g_ab) + count(self.d_b),
            "pair_ba": count(self.g_ba) + count(self.d_a),
        }


def build_cyclegan(
    n_label_channels: int, base_filters: int = 64, input_size: int = 128
) -> ModelHandle:
    net = CycleGanPair(n_label_channels, base_filters, input_size)
    _init_weights(net)
    return ModelHandle(
        architecture_id="cyclegan_pair",
        module=net,
        config={
            "n_label_channels": n_label_channels,
            "base_filters": base_filters,
            "input_size": input_size,
        },
        input_channels=n_label_channels,
    )


# ---------------------------------------------------------------------------
# Checkpoints

_BUILDERS = {
    "unet3d": build_unet3d,
    "pix2pix_gen": build_pix2pix_generator,
    "spade_gen": build_spade_generator,
    "patchgan": build_patchgan,
    "cyclegan_pair": build_cyclegan,
    "lesion_gen": lambda **cfg: build_lesion_gan(**cfg)[0],
    "lesion_critic": lambda **cfg: build_lesion_gan(**cfg)[1],
}


def save_checkpoint(
    handle: ModelHandle,
    ckpt_dir: str | Path,
    seed: int = 0,
    epoch: int = 0,
    extra_state: dict | None = None,
) -> Path:
    """Persist weights plus the builder config needed to reconstruct."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "architecture_id": handle.architecture_id,
        "builder_args": handle.config,
        "seed": seed,
        "epoch": epoch,
    }
    (ckpt_dir / "config.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    blob = {"state_dict": handle.module.state_dict()}
    if extra_state:
        blob.update(extra_state)
    torch.save(blob, ckpt_dir / "weights.pt")
    return ckpt_dir


def load_checkpoint(ckpt_dir: str | Path) -> tuple[ModelHandle, dict]:
    """Rebuild the architecture from config.json and load its weights.

    Returns (handle, meta) where meta carries seed/epoch plus any extra
    training state stored alongside the weights.
    """
    ckpt_dir = Path(ckpt_dir)
    cfg_path = ckpt_dir / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"not a checkpoint directory (missing config.json): {ckpt_dir}")
    meta = json.loads(cfg_path.read_text())
    arch = meta["architecture_id"]
    if arch not in _BUILDERS:
        raise ValueError(f"unknown architecture_id {arch!r}")
    builder_args = dict(meta["builder_args"])
    if "out_shape" in builder_args:
        builder_args["out_shape"] = tuple(builder_args["out_shape"])
    handle = _BUILDERS[arch](**builder_args)
    blob = torch.load(ckpt_dir / "weights.pt", map_location="cpu", weights_only=True)
    handle.module.load_state_dict(blob.pop("state_dict"))
    meta["extra_state"] = blob
    return handle, meta
