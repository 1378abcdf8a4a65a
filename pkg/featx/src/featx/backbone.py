"""Convolutional backbones producing three feature maps per image.

Two modes share one extraction interface. The default, ``resnet18``, keeps
the first three residual blocks of the 18-layer torchvision network and needs
pretrained weights: either a local state-dict file or, failing that, the
torchvision download. The ``random`` mode is a tiny seeded convolution stack
with the same output geometry, so every cross-format test runs offline.

Both modes consume 224 x 224 RGB images (the exporter resizes exactly once,
before augmentation) and emit float32 maps of shapes (64, 56, 56),
(128, 28, 28), and (256, 14, 14).
"""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

INPUT_SIZE = 224
STAGE_SHAPES = ((64, 56, 56), (128, 28, 28), (256, 14, 14))

# Standard channel statistics the pretrained network was trained with; the
# random mode uses them too so both modes share one preprocessing path.
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class FeatureExtractor:
    """Applies a fixed list of stages and collects each stage's output."""

    def __init__(self, stages: list[nn.Module]):
        self.stages = [s.eval() for s in stages]
        for stage in self.stages:
            for p in stage.parameters():
                p.requires_grad_(False)

    def extract(self, image: Image.Image) -> list[np.ndarray]:
        """Run one RGB image through the stages.

        Returns:
            One contiguous float32 (C, H, W) array per stage.

        Raises:
            ValueError: if the image is not 224 x 224 RGB.
        """
        if image.mode != "RGB":
            raise ValueError(f"expected an RGB image, got mode '{image.mode}'")
        if image.size != (INPUT_SIZE, INPUT_SIZE):
            raise ValueError(
                f"expected a {INPUT_SIZE}x{INPUT_SIZE} input, got "
                f"{image.size[0]}x{image.size[1]}")
        arr = np.asarray(image, dtype=np.float32) / 255.0
        arr = (arr - _MEAN) / _STD
        x = torch.from_numpy(arr.transpose(2, 0, 1).copy()).unsqueeze(0)
        outputs = []
        with torch.no_grad():
            for stage in self.stages:
                x = stage(x)
                outputs.append(np.ascontiguousarray(x.squeeze(0).numpy()))
        return outputs


def _seeded_conv(rng: np.random.Generator, in_ch: int, out_ch: int,
                 kernel: int, stride: int, padding: int) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding)
    fan_in = in_ch * kernel * kernel
    weight = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                        size=(out_ch, in_ch, kernel, kernel))
    with torch.no_grad():
        conv.weight.copy_(torch.from_numpy(weight.astype(np.float32)))
        conv.bias.zero_()
    return conv


def random_backbone(seed: int) -> FeatureExtractor:
    """Tiny three-stage stack with weights drawn from the seed."""
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(b"backbone")]))
    stage1 = nn.Sequential(
        _seeded_conv(rng, 3, 64, 7, stride=2, padding=3),
        nn.ReLU(),
        nn.MaxPool2d(3, stride=2, padding=1),
    )
    stage2 = nn.Sequential(
        _seeded_conv(rng, 64, 128, 3, stride=2, padding=1), nn.ReLU())
    stage3 = nn.Sequential(
        _seeded_conv(rng, 128, 256, 3, stride=2, padding=1), nn.ReLU())
    return FeatureExtractor([stage1, stage2, stage3])


def residual_backbone(weights_path: str | Path | None) -> FeatureExtractor:
    """First three blocks of the pretrained 18-layer residual network.

    With ``weights_path`` the state dict is read from that file; otherwise
    the torchvision pretrained weights are fetched, which needs network
    access. Either failure surfaces as a missing-weights error.
    """
    import torchvision

    model = torchvision.models.resnet18(weights=None)
    if weights_path is not None:
        try:
            state = torch.load(Path(weights_path), map_location="cpu",
                               weights_only=True)
            model.load_state_dict(state)
        except Exception as exc:
            raise ValueError(
                f"missing weights for backbone 'resnet18': {exc}") from exc
    else:
        try:
            weights = torchvision.models.ResNet18_Weights.IMAGENET1K_V1
            model.load_state_dict(weights.get_state_dict(progress=False))
        except Exception as exc:
            raise ValueError(
                "missing weights for backbone 'resnet18': pass a local "
                f"state-dict file ({exc})") from exc
    stem = nn.Sequential(model.conv1, model.bn1, model.relu, model.maxpool,
                         model.layer1)
    return FeatureExtractor([stem, model.layer2, model.layer3])


def build_backbone(kind: str, seed: int,
                   weights_path: str | Path | None = None) -> FeatureExtractor:
    """Dispatch on the backbone id."""
    if kind == "random":
        return random_backbone(seed)
    if kind == "resnet18":
        return residual_backbone(weights_path)
    raise ValueError(f"unknown backbone '{kind}'")
