"""Shared-encoder, dual-decoder network with task-consistency fusion blocks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file
from torch import Tensor, nn

MODES = ("multitask_tcl", "multitask_hard", "yield_only", "class_only")
NORMS = ("batch", "group", "none")
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    in_channels: int = 4
    num_classes: int = 6
    encoder_widths: tuple[int, ...] = (32, 64, 128, 256, 512)
    decoder_widths: tuple[int, ...] = (256, 128, 64, 32, 16)
    scse_reduction: int = 16
    mode: str = "multitask_tcl"
    norm: str = "group"

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if len(self.encoder_widths) != 5 or len(self.decoder_widths) != 5:
            raise ValueError("encoder_widths and decoder_widths need exactly 5 entries")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.num_classes != 6:
            raise ValueError("num_classes is fixed at 6 (five classes plus unlabeled)")

    @property
    def has_yield(self) -> bool:
        return self.mode != "class_only"

    @property
    def has_class(self) -> bool:
        return self.mode != "yield_only"

    @property
    def has_tcl(self) -> bool:
        return self.mode == "multitask_tcl"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d


@dataclass
class StageFeatures:
    reg: Tensor
    seg: Tensor
    tcl: Tensor
    tclf: Tensor
    regf: Tensor
    segf: Tensor


@dataclass
class ModelOutputs:
    yield_map: Tensor | None
    class_logits: Tensor | None
    stages: list[StageFeatures] = field(default_factory=list)


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.GroupNorm(math.gcd(8, channels), channels)


def conv_block(cin: int, cout: int, stride: int = 1, norm: str = "none") -> list[nn.Module]:
    if norm == "none":
        return [conv3x3(cin, cout, stride), nn.ReLU()]
    return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), _norm_layer(norm, cout), nn.ReLU()]


class SCSE(nn.Module):
    """Parallel channel and spatial squeeze-and-excitation, summed."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.cse = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )
        self.sse = nn.Sequential(nn.Conv2d(channels, 1, 1), nn.Sigmoid())

    def forward(self, x: Tensor) -> Tensor:
        return x * self.cse(x) + x * self.sse(x)


class TCLBlock(nn.Module):
    """Fuses regression and segmentation features into a shared map.

    Returns (regf, segf, tclf, tcl): the fused branch features fed to the
    next decoder stage, the attended shared map and the raw shared map.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.conv2 = nn.Conv2d(2 * channels, channels, 1)
        self.conv1 = nn.Conv2d(channels, channels, 1)
        # one attention module refines all three maps, as in the fusion equations
        self.scse = SCSE(channels, reduction)

    def forward(self, reg: Tensor, seg: Tensor):
        if reg.shape != seg.shape:
            raise ValueError(f"branch feature shapes differ: {tuple(reg.shape)} vs {tuple(seg.shape)}")
        tcl = F.relu(self.conv1(F.relu(self.conv2(torch.cat([reg, seg], dim=1)))))
        tclf = self.scse(tcl)
        regf = tclf + self.scse(reg)
        segf = tclf + self.scse(seg)
        return regf, segf, tclf, tcl


class EncoderStage(nn.Sequential):
    def __init__(self, cin: int, cout: int, norm: str = "none"):
        super().__init__(*conv_block(cin, cout, 2, norm), *conv_block(cout, cout, 1, norm))


class Encoder(nn.Module):
    """Five-stage pyramid; features at strides 2, 4, 8, 16 and 32.

    Any module returning five maps with the same strides and the configured
    channel counts can be swapped in, e.g. a pretrained backbone.
    """

    def __init__(self, in_channels: int, widths, norm: str = "none"):
        super().__init__()
        chans = [in_channels, *widths]
        self.stages = nn.ModuleList(
            EncoderStage(a, b, norm) for a, b in zip(chans[:-1], chans[1:])
        )

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class DecoderStage(nn.Module):
    def __init__(self, cin: int, skip: int, cout: int, norm: str = "none"):
        super().__init__()
        self.conv = nn.Sequential(
            *conv_block(cin + skip, cout, 1, norm), *conv_block(cout, cout, 1, norm)
        )

    def forward(self, x: Tensor, skip: Tensor | None) -> Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv(x)


class Decoder(nn.ModuleList):
    def __init__(self, encoder_widths, decoder_widths, norm: str = "none"):
        # stage m upsamples and joins the encoder map one level shallower;
        # the last stage reaches full resolution with no skip
        skips = list(encoder_widths[-2::-1]) + [0]
        cins = [encoder_widths[-1], *decoder_widths[:-1]]
        super().__init__(DecoderStage(c, s, o, norm) for c, s, o in zip(cins, skips, decoder_widths))


class MTCYPNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        norm = cfg.norm
        self.encoder = Encoder(cfg.in_channels, cfg.encoder_widths, norm)
        self.reg_decoder = Decoder(cfg.encoder_widths, cfg.decoder_widths, norm) if cfg.has_yield else None
        self.seg_decoder = Decoder(cfg.encoder_widths, cfg.decoder_widths, norm) if cfg.has_class else None
        self.tcl_blocks = (
            nn.ModuleList(TCLBlock(w, cfg.scse_reduction) for w in cfg.decoder_widths)
            if cfg.has_tcl
            else None
        )
        # per-band standardization, fitted on training tiles
        self.register_buffer("band_mean", torch.zeros(cfg.in_channels))
        self.register_buffer("band_std", torch.ones(cfg.in_channels))
        last = cfg.decoder_widths[-1]
        self.yield_head = conv3x3(last, 1) if cfg.has_yield else None
        self.class_head = conv3x3(last, cfg.num_classes) if cfg.has_class else None
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=0.0, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def set_input_stats(self, mean, std) -> None:
        mean = torch.as_tensor(mean, dtype=self.band_mean.dtype).reshape(-1)
        std = torch.as_tensor(std, dtype=self.band_std.dtype).reshape(-1)
        if mean.numel() != self.config.in_channels or std.numel() != self.config.in_channels:
            raise ValueError(f"need {self.config.in_channels} band statistics")
        self.band_mean.copy_(mean)
        self.band_std.copy_(torch.clamp(std, min=1e-6))

    def forward(self, x: Tensor) -> ModelOutputs:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected input (B, {cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} must be a multiple of 32")
        x = (x - self.band_mean[:, None, None]) / self.band_std[:, None, None]
        feats = self.encoder(x)
        skips = feats[-2::-1] + [None]
        reg = seg = feats[-1]
        stages: list[StageFeatures] = []
        for m, skip in enumerate(skips):
            if self.reg_decoder is not None:
                reg = self.reg_decoder[m](reg, skip)
            if self.seg_decoder is not None:
                seg = self.seg_decoder[m](seg, skip)
            if self.tcl_blocks is not None:
                reg_in, seg_in = reg, seg
                reg, seg, tclf, tcl = self.tcl_blocks[m](reg_in, seg_in)
                stages.append(StageFeatures(reg_in, seg_in, tcl, tclf, reg, seg))
        return ModelOutputs(
            yield_map=self.yield_head(reg) if self.yield_head is not None else None,
            class_logits=self.class_head(seg) if self.class_head is not None else None,
            stages=stages,
        )


def build_model(config: ModelConfig, seed: int | None = None) -> MTCYPNet:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return MTCYPNet(config)
    return MTCYPNet(config)


def export_weights(model: MTCYPNet, path: str | Path) -> None:
    """Write parameters as float32 blobs with the config embedded in the header."""
    tensors = {k: v.detach().to(torch.float32).contiguous().cpu() for k, v in model.state_dict().items()}
    meta = {
        "format_version": str(FORMAT_VERSION),
        "model_config": json.dumps(model.config.to_dict()),
    }
    save_file(tensors, str(path), metadata=meta)


def read_weights_config(path: str | Path) -> ModelConfig:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
    version = meta.get("format_version")
    if version != str(FORMAT_VERSION):
        raise ValueError(f"{path}: weight format version {version!r}, expected {FORMAT_VERSION}")
    return ModelConfig(**json.loads(meta["model_config"]))


def load_weights(path: str | Path, config: ModelConfig | None = None) -> MTCYPNet:
    """Rebuild a model from ``path``.

    If ``config`` is given it must match the embedded one exactly.
    """
    stored = read_weights_config(path)
    if config is not None and config.to_dict() != stored.to_dict():
        diff = {
            k: (v, stored.to_dict()[k])
            for k, v in config.to_dict().items()
            if stored.to_dict()[k] != v
        }
        raise ValueError(f"{path}: config mismatch (requested, stored): {diff}")
    model = MTCYPNet(stored)
    model.load_state_dict(load_file(str(path)))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

