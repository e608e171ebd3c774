"""The multitask network: shared backbone, alignment branch, pose and tracking heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import AtpnConfig, HeadSpec
from .heatmap import fuse, generate_heatmap
from .layers import (
    CoordConvBNAct,
    MobileNetV3Block,
    MultiviewBlock,
    MultiviewBlockSpec,
    UpsampleFuse,
    receptive_field,
)
from .nn import ConvBNAct, Dense, Module
from .tensor import InvalidShapeError, Tensor, count_macs, no_grad


class Backbone(Module):
    def __init__(self, cfg: AtpnConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.stem = ConvBNAct(cfg.input_channels, cfg.stem.channels, cfg.stem.kernel, cfg.stem.stride,
                              act=cfg.stem.activation, rng=rng)
        cin = cfg.stem.channels
        self.n_blocks = len(cfg.backbone)
        for i, spec in enumerate(cfg.backbone):
            self.add_module(f"block{i}", MobileNetV3Block(cin, spec, rng=rng))
            cin = spec.out_channels
        self.taps = cfg.tap_indices()

    def tap_channels(self) -> tuple[int, int, int]:
        return tuple(self.cfg.backbone[i].out_channels for i in self.taps)  # type: ignore[return-value]

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        cfg = self.cfg
        expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if image.ndim != 4 or image.shape[1:] != expected:
            raise InvalidShapeError(f"backbone expects [N,{expected[0]},{expected[1]},{expected[2]}], got {image.shape}")
        x = self.stem(image)
        feats = []
        for i in range(self.n_blocks):
            x = getattr(self, f"block{i}")(x)
            if i in self.taps:
                feats.append(x)
        return feats[0], feats[1], feats[2]


class AlignmentBranch(Module):
    """Coarse-to-fine fusion with multiview blocks, two coordinate-augmented convs, shape residual."""

    def __init__(self, cfg: AtpnConfig, tap_channels: tuple[int, int, int], rng):
        super().__init__()
        a = cfg.alignment
        c28, c14, c7 = tap_channels
        mv7, mv14, mv28 = a.multiview_channels
        up14, up28 = a.up_channels
        bk = tuple(a.branch_kernels)
        self.mv7 = MultiviewBlock(MultiviewBlockSpec(c7, mv7, bk, a.branch_channels[0]), a.activation, rng)
        self.up14 = UpsampleFuse(mv7, up14, rng=rng)
        self.mv14 = MultiviewBlock(MultiviewBlockSpec(c14 + up14, mv14, bk, a.branch_channels[1]), a.activation, rng)
        self.up28 = UpsampleFuse(mv14, up28, rng=rng)
        self.mv28 = MultiviewBlock(MultiviewBlockSpec(c28 + up28, mv28, bk, a.branch_channels[2]), a.activation, rng)
        cc1, cc2 = a.coord_channels
        self.coord1 = CoordConvBNAct(mv28, cc1, 3, stride=2, act=a.activation, rng=rng)
        self.coord2 = CoordConvBNAct(cc1, cc2, 3, stride=2, act=a.activation, rng=rng)
        final_extent = -(-(-(-cfg.heatmap_grid // 2)) // 2)
        self.landmarks = cfg.landmarks
        self.regress = Dense(cc2 * final_extent * final_extent, 2 * cfg.landmarks, rng=rng, std=1e-3)

    def forward(self, f28: Tensor, f14: Tensor, f7: Tensor, mean_shape: np.ndarray) -> Tensor:
        """Return the predicted shape as [N, 2L] (x0, y0, x1, y1, ...)."""
        a7 = self.mv7(f7)
        a14 = self.mv14(self.up14(f14, a7))
        a28 = self.mv28(self.up28(f28, a14))
        h = self.coord2(self.coord1(a28))
        delta = self.regress(T.flatten(h))
        s0 = np.broadcast_to(mean_shape.reshape(1, -1).astype(delta.dtype), delta.shape)
        return T.add(delta, Tensor(s0))


class Head(Module):
    """MobileNet-V3 blocks -> global pool -> optional hidden dense -> output dense."""

    def __init__(self, spec: HeadSpec, in_channels: int, outputs: int, rng, out_std=None):
        super().__init__()
        self.spec = spec
        cin = in_channels
        for i, b in enumerate(spec.blocks):
            self.add_module(f"block{i}", MobileNetV3Block(cin, b, rng=rng))
            cin = b.out_channels
        self.n_blocks = len(spec.blocks)
        if spec.hidden:
            self.hidden = Dense(cin, spec.hidden, rng=rng, std=math.sqrt(2.0 / cin))
            cin = spec.hidden
        else:
            self.hidden = None
        self.out = Dense(cin, outputs, rng=rng, std=out_std)

    def logits(self, x: Tensor) -> Tensor:
        for i in range(self.n_blocks):
            x = getattr(self, f"block{i}")(x)
        x = T.flatten(T.global_avg_pool(x))
        if self.hidden is not None:
            x = T.activation(self.spec.activation, self.hidden(x))
        return self.out(x)


class PoseHead(Head):
    def forward(self, fused: Tensor) -> Tensor:
        """(yaw, pitch, roll) in radians, squashed into [-pi, pi]."""
        return T.scale(T.tanh(self.logits(fused)), math.pi)


class TrackingHead(Head):
    def forward(self, fused: Tensor) -> Tensor:
        """Two-class softmax; column 1 is the face probability."""
        return T.softmax(self.logits(fused), axis=1)


@dataclass
class Outputs:
    shape: Tensor
    pose: Tensor
    probs: Tensor
    heatmap: np.ndarray

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.data[:, 1]

    def landmarks(self) -> np.ndarray:
        return self.shape.data.reshape(self.shape.shape[0], -1, 2)


class AtpnNet(Module):
    def __init__(self, cfg: AtpnConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg, rng)
        taps = self.backbone.tap_channels()
        self.alignment = AlignmentBranch(cfg, taps, rng)
        self.pose = PoseHead(cfg.pose, taps[0], 3, rng, out_std=1e-2)
        self.tracking = TrackingHead(cfg.tracking, taps[0], 2, rng)
        self.register_buffer("mean_shape", _default_mean_shape(cfg.landmarks))
        self.trained_stage = 0

    def set_mean_shape(self, shape) -> None:
        s = np.asarray(shape, dtype=np.float32).reshape(-1)
        if s.size != 2 * self.cfg.landmarks:
            raise InvalidShapeError(f"mean shape has {s.size // 2} landmarks, model expects {self.cfg.landmarks}")
        self.register_buffer("mean_shape", s.copy())

    # -- components -------------------------------------------------------
    def components(self) -> dict[str, list[Module]]:
        return {
            "backbone+alignment": [self.backbone, self.alignment],
            "tracking": [self.tracking],
            "pose": [self.pose],
        }

    def backbone_forward(self, image) -> tuple[Tensor, Tensor, Tensor]:
        return self.backbone(T.as_tensor(image))

    def alignment_forward(self, f28, f14, f7) -> Tensor:
        return self.alignment(f28, f14, f7, self.mean_shape)

    def heatmap(self, shape: Tensor | np.ndarray) -> np.ndarray:
        data = shape.data if isinstance(shape, Tensor) else np.asarray(shape)
        grid = (self.cfg.heatmap_grid, self.cfg.heatmap_grid)
        return generate_heatmap(data.reshape(data.shape[0], -1, 2), grid, self.cfg.heatmap_floor)

    def fused_features(self, image) -> tuple[Tensor, Tensor, np.ndarray]:
        f28, f14, f7 = self.backbone_forward(image)
        shape = self.alignment_forward(f28, f14, f7)
        hm = self.heatmap(shape)
        return shape, fuse(f28, hm), hm

    def forward(self, image) -> Outputs:
        shape, fused, hm = self.fused_features(image)
        return Outputs(shape, self.pose(fused), self.tracking(fused), hm)

    full_forward = forward

    def predict(self, image, batch_size: int = 64) -> dict[str, np.ndarray]:
        """Inference without tape recording; returns numpy arrays."""
        was_training = self.training
        self.eval()
        image = np.asarray(image.data if isinstance(image, Tensor) else image)
        parts = []
        try:
            with no_grad():
                for i in range(0, image.shape[0], batch_size):
                    out = self.forward(Tensor(image[i : i + batch_size]))
                    parts.append((out.landmarks(), out.pose.data, out.confidence, out.heatmap))
        finally:
            self.train(was_training)
        return {
            "landmarks": np.concatenate([p[0] for p in parts]),
            "pose": np.concatenate([p[1] for p in parts]),
            "confidence": np.concatenate([p[2] for p in parts]),
            "heatmap": np.concatenate([p[3] for p in parts]),
        }

    # -- receptive fields -------------------------------------------------
    def backbone_layers(self) -> list[list[tuple[int, int]]]:
        """(kernel, stride) chains from the input to each backbone block output."""
        chain = [(self.cfg.stem.kernel, self.cfg.stem.stride)]
        chains = []
        for spec in self.cfg.backbone:
            chain = chain + [(1, 1), (spec.kernel, spec.stride), (1, 1)]
            chains.append(chain)
        return chains

    def multiview_receptive_fields(self) -> dict[tuple[int, int], int]:
        """Receptive field (input pixels) of each multiview branch on each pyramid tap."""
        chains = self.backbone_layers()
        out = {}
        for idx in self.backbone.taps:
            extent = self.cfg.pyramid_extents()[1 + idx]
            for k in self.cfg.alignment.branch_kernels:
                out[(extent, k)] = receptive_field(chains[idx] + [(k, 1)])[0]
        return out


def _default_mean_shape(n: int) -> np.ndarray:
    """Placeholder mean shape (landmarks on a centred circle) until one is computed from data."""
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([0.5 + 0.25 * np.cos(t), 0.5 + 0.25 * np.sin(t)], axis=1).reshape(-1).astype(np.float32)


@dataclass
class Budget:
    params: dict[str, int]
    macs: dict[str, int]

    def summary(self) -> str:
        lines = ["component params macs"]
        for k in self.params:
            lines.append(f"{k} {self.params[k]} {self.macs[k]}")
        return "\n".join(lines) + "\n"


def report_budget(cfg: AtpnConfig, model: AtpnNet | None = None) -> Budget:
    """Trainable parameter count and per-image multiply-accumulates for each component."""
    model = model or AtpnNet(cfg)
    params = {
        name: int(sum(m.num_parameters() for m in mods)) for name, mods in model.components().items()
    }
    image = Tensor(np.zeros((2, cfg.input_channels, cfg.input_size, cfg.input_size), dtype=np.float32))
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            with count_macs() as ba:
                f28, f14, f7 = model.backbone_forward(image)
                shape = model.alignment_forward(f28, f14, f7)
            fused = fuse(f28, model.heatmap(shape))
            with count_macs() as tr:
                model.tracking(fused)
            with count_macs() as po:
                model.pose(fused)
    finally:
        model.train(was_training)
    macs = {"backbone+alignment": ba[0] // 2, "tracking": tr[0] // 2, "pose": po[0] // 2}
    return Budget(params, macs)
