"""Model/training configuration and its sectioned text format.

The file is a sequence of ``[section]`` headers followed by ``key = value``
lines.  ``block`` keys may repeat and are read in order; one block per line
as ``kernel channels expansion stride se activation``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .layers import MobileNetV3BlockSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StemSpec:
    kernel: int = 3
    channels: int = 16
    stride: int = 2
    activation: str = "swish"


@dataclass(frozen=True)
class AlignmentSpec:
    up_channels: tuple[int, int] = (24, 16)
    multiview_channels: tuple[int, int, int] = (64, 48, 32)
    branch_kernels: tuple[int, int, int] = (3, 5, 7)
    branch_channels: tuple[int, int, int] = (16, 8, 4)
    coord_channels: tuple[int, int] = (48, 32)
    activation: str = "swish"


@dataclass(frozen=True)
class HeadSpec:
    blocks: tuple[MobileNetV3BlockSpec, ...] = ()
    hidden: int = 0
    activation: str = "swish"


@dataclass(frozen=True)
class StageSchedule:
    epochs: int
    lr: float = 1e-3
    decay: float = 0.04
    decay_every: int = 2
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class TrainingSpec:
    batch_size: int = 32
    replication: int = 8
    stage1: StageSchedule = StageSchedule(16, 1e-3, 0.03, 4, 1e-4)
    stage2: StageSchedule = StageSchedule(6, 1e-3, 0.04, 2, 1e-4)
    stage3: StageSchedule = StageSchedule(6, 1e-3, 0.04, 2, 1e-4)

    def stage(self, k: int) -> StageSchedule:
        return {1: self.stage1, 2: self.stage2, 3: self.stage3}[k]


@dataclass(frozen=True)
class AtpnConfig:
    input_size: int = 112
    input_channels: int = 3
    landmarks: int = 98
    stem: StemSpec = StemSpec()
    backbone: tuple[MobileNetV3BlockSpec, ...] = ()
    alignment: AlignmentSpec = AlignmentSpec()
    pose: HeadSpec = HeadSpec()
    tracking: HeadSpec = HeadSpec()
    heatmap_grid: int = 28
    heatmap_floor: float = 0.5
    training: TrainingSpec = field(default_factory=TrainingSpec)

    def pyramid_extents(self) -> list[int]:
        """Spatial extent after the stem and after each backbone block."""
        size = -(-self.input_size // self.stem.stride)
        extents = []
        for b in self.backbone:
            size = -(-size // b.stride)
            extents.append(size)
        return [-(-self.input_size // self.stem.stride)] + extents

    def tap_indices(self) -> tuple[int, int, int]:
        """Indices of the backbone blocks emitting the 28/14/7-style pyramid (last block at each of the three finest-to-coarsest extents)."""
        ext = self.pyramid_extents()[1:]
        distinct = sorted(set(ext), reverse=True)
        if len(distinct) < 3:
            raise ConfigError(f"backbone must reach three pyramid scales, got extents {distinct}")
        scales = distinct[-3:]
        taps = tuple(max(i for i, e in enumerate(ext) if e == s) for s in scales)
        return taps  # type: ignore[return-value]

    def pyramid(self) -> tuple[int, int, int]:
        ext = self.pyramid_extents()[1:]
        return tuple(ext[i] for i in self.tap_indices())  # type: ignore[return-value]

    def validate(self) -> "AtpnConfig":
        if not self.backbone:
            raise ConfigError("backbone has no blocks")
        f28, f14, f7 = self.pyramid()
        if not (f28 == 2 * f14 and f14 == 2 * f7):
            raise ConfigError(f"pyramid extents must halve: {(f28, f14, f7)}")
        if self.heatmap_grid != f28:
            raise ConfigError(f"heatmap grid {self.heatmap_grid} must equal finest pyramid extent {f28}")
        if self.landmarks < 1:
            raise ConfigError("landmark count must be positive")
        return self

    def with_landmarks(self, n: int) -> "AtpnConfig":
        return replace(self, landmarks=n)


# -- text format ----------------------------------------------------------
def _block_line(b: MobileNetV3BlockSpec) -> str:
    return f"{b.kernel} {b.out_channels} {b.expansion} {b.stride} {int(b.use_se)} {b.activation}"


def _parse_block(text: str, where: str) -> MobileNetV3BlockSpec:
    parts = text.split()
    if len(parts) != 6:
        raise ConfigError(f"{where}: block needs 6 fields (kernel channels expansion stride se activation)")
    try:
        k, c, e, s, se = (int(p) for p in parts[:5])
        return MobileNetV3BlockSpec(k, c, e, s, bool(se), parts[5])
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _ints(v: tuple) -> str:
    return " ".join(str(x) for x in v)


def _fmt(x: float) -> str:
    return repr(float(x))


def architecture_text(cfg: AtpnConfig) -> str:
    a = cfg.alignment
    lines = [
        "[input]",
        f"size = {cfg.input_size}",
        f"channels = {cfg.input_channels}",
        f"landmarks = {cfg.landmarks}",
        "",
        "[backbone]",
        f"stem = {cfg.stem.kernel} {cfg.stem.channels} {cfg.stem.stride} {cfg.stem.activation}",
        "# kernel channels expansion stride se activation",
    ]
    lines += [f"block = {_block_line(b)}" for b in cfg.backbone]
    lines += [
        "",
        "[alignment]",
        f"up_channels = {_ints(a.up_channels)}",
        f"multiview_channels = {_ints(a.multiview_channels)}",
        f"branch_kernels = {_ints(a.branch_kernels)}",
        f"branch_channels = {_ints(a.branch_channels)}",
        f"coord_channels = {_ints(a.coord_channels)}",
        f"activation = {a.activation}",
    ]
    for name, head in (("pose", cfg.pose), ("tracking", cfg.tracking)):
        lines += ["", f"[{name}]", f"hidden = {head.hidden}", f"activation = {head.activation}"]
        lines += [f"block = {_block_line(b)}" for b in head.blocks]
    lines += ["", "[heatmap]", f"grid = {cfg.heatmap_grid}", f"floor = {_fmt(cfg.heatmap_floor)}"]
    return "\n".join(lines) + "\n"


def training_text(t: TrainingSpec) -> str:
    lines = ["[training]", f"batch_size = {t.batch_size}", f"replication = {t.replication}"]
    for k in (1, 2, 3):
        s = t.stage(k)
        lines.append(
            f"stage{k} = {s.epochs} {_fmt(s.lr)} {_fmt(s.decay)} {s.decay_every} {_fmt(s.weight_decay)}"
        )
    return "\n".join(lines) + "\n"


def dump_config(cfg: AtpnConfig) -> str:
    return architecture_text(cfg) + "\n" + training_text(cfg.training)


def _sections(text: str) -> dict[str, list[tuple[int, str, str]]]:
    sections: dict[str, list[tuple[int, str, str]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise ConfigError(f"line {lineno}: duplicate section [{current}]")
            sections[current] = []
            continue
        if current is None:
            raise ConfigError(f"line {lineno}: entry outside of a section")
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        sections[current].append((lineno, key.strip(), value.strip()))
    return sections


def _single(entries, key, default=None, conv=str):
    found = [(ln, v) for ln, k, v in entries if k == key]
    if not found:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return default
    ln, v = found[-1]
    try:
        return conv(v)
    except ValueError as exc:
        raise ConfigError(f"line {ln}: {key}: {exc}") from None


def _tuple_int(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split())


def parse_config(text: str) -> AtpnConfig:
    secs = _sections(text)
    for required in ("input", "backbone", "alignment", "pose", "tracking", "heatmap"):
        if required not in secs:
            raise ConfigError(f"missing section [{required}]")
    inp = secs["input"]
    bb = secs["backbone"]
    stem_parts = _single(bb, "stem").split()
    if len(stem_parts) != 4:
        raise ConfigError("stem needs 4 fields (kernel channels stride activation)")
    stem = StemSpec(int(stem_parts[0]), int(stem_parts[1]), int(stem_parts[2]), stem_parts[3])
    blocks = tuple(_parse_block(v, f"line {ln}") for ln, k, v in bb if k == "block")
    al = secs["alignment"]
    alignment = AlignmentSpec(
        up_channels=_single(al, "up_channels", conv=_tuple_int),
        multiview_channels=_single(al, "multiview_channels", conv=_tuple_int),
        branch_kernels=_single(al, "branch_kernels", conv=_tuple_int),
        branch_channels=_single(al, "branch_channels", conv=_tuple_int),
        coord_channels=_single(al, "coord_channels", conv=_tuple_int),
        activation=_single(al, "activation", "swish"),
    )
    heads = {}
    for name in ("pose", "tracking"):
        ent = secs[name]
        heads[name] = HeadSpec(
            blocks=tuple(_parse_block(v, f"line {ln}") for ln, k, v in ent if k == "block"),
            hidden=_single(ent, "hidden", 0, int),
            activation=_single(ent, "activation", "swish"),
        )
    hm = secs["heatmap"]
    training = TrainingSpec()
    if "training" in secs:
        tr = secs["training"]
        stages = {}
        for k in (1, 2, 3):
            parts = _single(tr, f"stage{k}", "").split()
            if not parts:
                stages[k] = training.stage(k)
                continue
            if len(parts) != 5:
                raise ConfigError(f"stage{k} needs 5 fields (epochs lr decay decay_every weight_decay)")
            stages[k] = StageSchedule(int(parts[0]), float(parts[1]), float(parts[2]), int(parts[3]), float(parts[4]))
        training = TrainingSpec(
            batch_size=_single(tr, "batch_size", training.batch_size, int),
            replication=_single(tr, "replication", training.replication, int),
            stage1=stages[1],
            stage2=stages[2],
            stage3=stages[3],
        )
    for f in ("up_channels", "coord_channels"):
        if len(getattr(alignment, f)) != 2:
            raise ConfigError(f"alignment.{f} needs 2 values")
    for f in ("multiview_channels", "branch_kernels", "branch_channels"):
        if len(getattr(alignment, f)) != 3:
            raise ConfigError(f"alignment.{f} needs 3 values")
    cfg = AtpnConfig(
        input_size=_single(inp, "size", conv=int),
        input_channels=_single(inp, "channels", 3, int),
        landmarks=_single(inp, "landmarks", conv=int),
        stem=stem,
        backbone=blocks,
        alignment=alignment,
        pose=heads["pose"],
        tracking=heads["tracking"],
        heatmap_grid=_single(hm, "grid", conv=int),
        heatmap_floor=_single(hm, "floor", 0.5, float),
        training=training,
    )
    return cfg.validate()


def load_config(path) -> AtpnConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(cfg: AtpnConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


B = MobileNetV3BlockSpec

# Full-size topology: about 1.1 M params and 0.06 G MACs for backbone + alignment.
ATPN_SMALL = AtpnConfig(
    landmarks=98,
    stem=StemSpec(3, 16, 2, "swish"),
    backbone=(
        B(3, 16, 16, 1, False, "relu"),
        B(3, 24, 64, 2, False, "relu"),
        B(3, 24, 72, 1, False, "relu"),
        B(5, 40, 96, 2, True, "swish"),
        B(5, 40, 240, 1, True, "swish"),
        B(5, 48, 144, 1, True, "swish"),
        B(5, 96, 288, 2, True, "swish"),
        B(5, 96, 576, 1, True, "swish"),
    ),
    alignment=AlignmentSpec(),
    pose=HeadSpec(
        blocks=(
            B(3, 40, 96, 2, True, "swish"),
            B(5, 48, 144, 1, True, "swish"),
            B(5, 96, 288, 2, True, "swish"),
        ),
        hidden=512,
    ),
    tracking=HeadSpec(
        blocks=(
            B(3, 40, 96, 2, True, "swish"),
            B(5, 48, 144, 1, True, "swish"),
            B(5, 96, 288, 2, True, "swish"),
        ),
        hidden=512,
    ),
).validate()

# Narrow variant with the same topology for CPU-scale training runs.
ATPN_DESK = AtpnConfig(
    landmarks=12,
    stem=StemSpec(3, 8, 2, "swish"),
    backbone=(
        B(3, 8, 8, 1, False, "relu"),
        B(3, 12, 32, 2, False, "relu"),
        B(3, 12, 36, 1, False, "relu"),
        B(5, 24, 48, 2, True, "swish"),
        B(5, 24, 72, 1, True, "swish"),
        B(5, 32, 96, 2, True, "swish"),
        B(5, 32, 128, 1, True, "swish"),
    ),
    alignment=AlignmentSpec(
        up_channels=(16, 12),
        multiview_channels=(32, 24, 16),
        branch_kernels=(3, 5, 7),
        branch_channels=(12, 8, 6),
        coord_channels=(24, 24),
    ),
    pose=HeadSpec(blocks=(B(3, 24, 48, 2, True, "swish"), B(3, 32, 64, 2, True, "swish")), hidden=64),
    tracking=HeadSpec(blocks=(B(3, 16, 32, 2, True, "swish"), B(3, 24, 48, 2, True, "swish")), hidden=32),
    training=TrainingSpec(
        batch_size=32,
        replication=1,
        stage1=StageSchedule(12, 2e-3, 0.1, 8, 1e-5),
        stage2=StageSchedule(3, 1e-3, 0.1, 2, 1e-5),
        stage3=StageSchedule(8, 2e-3, 0.1, 6, 1e-5),
    ),
).validate()

# Smallest valid topology; float64 finite-difference checks of whole objectives.
ATPN_TINY = AtpnConfig(
    input_size=32,
    landmarks=3,
    stem=StemSpec(3, 4, 2, "swish"),
    backbone=(
        B(3, 4, 8, 2, False, "swish"),
        B(3, 6, 8, 2, True, "swish"),
        B(3, 6, 8, 2, True, "swish"),
    ),
    alignment=AlignmentSpec(
        up_channels=(3, 3),
        multiview_channels=(4, 4, 4),
        branch_kernels=(3, 5, 7),
        branch_channels=(2, 2, 2),
        coord_channels=(4, 4),
    ),
    pose=HeadSpec(blocks=(B(3, 4, 6, 2, True, "swish"),), hidden=5),
    tracking=HeadSpec(blocks=(B(3, 4, 6, 2, True, "swish"),), hidden=5),
    heatmap_grid=8,
).validate()

PRESETS = {"atpn-small": ATPN_SMALL, "atpn-desk": ATPN_DESK, "atpn-tiny": ATPN_TINY}


def resolve_config(name_or_path: str | None) -> AtpnConfig:
    if name_or_path is None:
        return ATPN_DESK
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    return load_config(name_or_path)

