"""Assembles complete networks from block specs, at any supported depth.

Depth counts weighted layers on a path: the stem conv, every trunk conv
(one branch for merge-and-run blocks), and the classifier. Two-conv-block
families therefore satisfy depth = 6n + 2 for n blocks per stage, and the
three-conv bottleneck depth = 9n + 2. Projection shortcuts at stage
boundaries carry parameters but, per the usual convention, do not count
toward depth.

The plain family at depth 84 does not fit 6n + 2; it is realized as custom
per-stage module counts (14, 14, 13) totaling 82 trunk convs, and the
manifest records that note.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ParamStore, Tape
from .blocks import (BlockSpec, build_merge_run, build_plain_module,
                     build_preact_bottleneck, build_preact_building, make_block)
from .layers import BatchNorm2d, Conv2d, Linear, softmax_cross_entropy
from .tensor import Tensor

FAMILIES = ("plain", "resnet-preact", "resnet-preact-bottleneck", "dfn-mr1")

_PLAIN_84_STAGES = (14, 14, 13)


class DepthError(ValueError):
    """Requested depth is inconsistent with the family's block size."""


@dataclass(frozen=True)
class NetworkConfig:
    family: str
    depth: int | None = None
    num_classes: int = 10
    stage_widths: tuple = (16, 32, 64)
    stage_blocks: tuple | None = None    # overrides depth when given
    ratio: str = "1:1"                   # plain family
    removal: str = "none"                # residual/merge families
    pairing: str = "post"                # plain family only
    drop_bn_with_relu: bool = False
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.num_classes not in (10, 100):
            raise ValueError(f"num_classes must be 10 or 100, got {self.num_classes}")
        if len(self.stage_widths) != 3:
            raise ValueError("stage_widths must name three stages")
        if self.depth is None and self.stage_blocks is None:
            raise ValueError("give either a depth or explicit stage_blocks")


def _template_block(cfg: NetworkConfig) -> BlockSpec:
    """Shape-free block spec for the configured family and removal settings."""
    if cfg.family == "plain":
        return build_plain_module(cfg.ratio, cfg.pairing, drop_bn_with_relu=cfg.drop_bn_with_relu)
    if cfg.family == "resnet-preact":
        return build_preact_building(str(cfg.removal), drop_bn_with_relu=cfg.drop_bn_with_relu)
    if cfg.family == "resnet-preact-bottleneck":
        removal = 0 if cfg.removal in ("none", "0", 0) else int(cfg.removal)
        return build_preact_bottleneck(removal, drop_bn_with_relu=cfg.drop_bn_with_relu)
    return build_merge_run(str(cfg.removal), drop_bn_with_relu=cfg.drop_bn_with_relu)


def depth_of(stage_blocks, template: BlockSpec) -> int:
    # merge-run blocks count one branch: the two parallel paths have equal depth
    return 2 + sum(stage_blocks) * template.conv_count


def resolve_stage_blocks(cfg: NetworkConfig, template: BlockSpec):
    """Per-stage block counts for the requested depth, plus an optional note."""
    if cfg.stage_blocks is not None:
        return tuple(cfg.stage_blocks), None
    span = 3 * template.conv_count
    if cfg.family == "plain" and cfg.depth == 84 and template.conv_count == 2:
        note = "depth 84 is not 6n+2; realized as stage module counts (14,14,13)"
        return _PLAIN_84_STAGES, note
    trunk = cfg.depth - 2
    if trunk <= 0 or trunk % span != 0:
        lower = max(trunk // span, 1) * span + 2
        raise DepthError(
            f"depth {cfg.depth} invalid for family {cfg.family!r} "
            f"(needs {span}n+2); nearest valid depths are {lower} and {lower + span}"
        )
    n = trunk // span
    return (n, n, n), None


class Model:
    """Built network: layer tree plus its parameter store and block specs."""

    def __init__(self, cfg: NetworkConfig, store: ParamStore, stem, stages, head,
                 block_specs, depth_note=None):
        self.cfg = cfg
        self.store = store
        self.stem = stem            # (conv, bn-or-None)
        self.stages = stages        # list of lists of block objects
        self.head = head            # (bn-or-None, linear)
        self.block_specs = block_specs
        self.depth_note = depth_note

    @property
    def family(self):
        return self.cfg.family

    def forward_on(self, tape: Tape, x) -> "Node":
        x = np.asarray(x, dtype=self.store.dtype)
        node = tape.constant(Tensor(x))
        stem_conv, stem_bn = self.stem
        with tape.scope("stem"):
            node = stem_conv(tape, node)
            if stem_bn is not None:
                node = stem_bn(tape, node)
                node = tape.relu(node)
        if self.family == "dfn-mr1":
            pair = (node, node)
            for stage in self.stages:
                for block in stage:
                    pair = block(tape, pair)
            with tape.scope("head"):
                node = tape.scale(tape.add(*pair), 0.5)
        else:
            for stage in self.stages:
                for block in stage:
                    node = block(tape, node)
        head_bn, fc = self.head
        with tape.scope("head"):
            if head_bn is not None:
                node = head_bn(tape, node)
                node = tape.relu(node)
            node = tape.global_avg_pool(node)
            node = tape.flatten(node)
            return fc(tape, node)

    def forward(self, x, training: bool = False):
        tape = Tape(self.store, training=training)
        return self.forward_on(tape, x), tape

    def loss(self, x, labels, training: bool = True):
        tape = Tape(self.store, training=training)
        logits = self.forward_on(tape, x)
        return softmax_cross_entropy(tape, logits, labels), logits, tape

    def loss_builder(self, x, labels):
        """Closure for gradcheck: rebuilds the loss on any given tape."""
        def build(tape: Tape):
            return softmax_cross_entropy(tape, self.forward_on(tape, x), labels)
        return build


def build_network(cfg: NetworkConfig) -> Model:
    template = _template_block(cfg)
    stage_blocks, note = resolve_stage_blocks(cfg, template)
    store = ParamStore(cfg.precision)
    seed = cfg.seed

    is_pre = template.pairing == "pre" or (cfg.family == "plain" and cfg.pairing == "pre")
    stem_width = cfg.stage_widths[0]
    stem_conv = Conv2d(store, "stem.conv", 3, stem_width, 3, stride=1, seed=seed)
    stem_bn = None if is_pre else BatchNorm2d(store, "stem.bn", stem_width)

    bottleneck = cfg.family == "resnet-preact-bottleneck"
    stages, block_specs = [], []
    in_ch = stem_width
    for s, (width, count) in enumerate(zip(cfg.stage_widths, stage_blocks)):
        out_ch = width * 4 if bottleneck else width
        blocks = []
        for b in range(count):
            stride = 2 if (s > 0 and b == 0) else 1
            spec = template.with_shape(in_ch, out_ch, stride,
                                       mid_channels=width if bottleneck else None)
            block = make_block(store, f"stage{s + 1}.block{b}", spec, seed=seed)
            blocks.append(block)
            block_specs.append(spec)
            in_ch = out_ch
        stages.append(blocks)

    head_bn = BatchNorm2d(store, "head.bn", in_ch) if is_pre else None
    fc = Linear(store, "head.fc", in_ch, cfg.num_classes, seed=seed)
    return Model(cfg, store, (stem_conv, stem_bn), stages, (head_bn, fc), block_specs, note)


# -- summaries and manifests ---------------------------------------------------


@dataclass
class StageRow:
    name: str
    convs: int
    relus: int
    params: int
    flops_conv: int


@dataclass
class NetworkSummary:
    report: "RatioReport"
    rows: list = field(default_factory=list)
    depth_note: str | None = None

    def __str__(self):
        lines = [f"{'region':<10} {'convs':>6} {'relus':>6} {'params':>10} {'conv FLOPs':>14}"]
        for row in self.rows:
            lines.append(f"{row.name:<10} {row.convs:>6} {row.relus:>6} "
                         f"{row.params:>10} {row.flops_conv:>14}")
        r = self.report
        lines.append(f"trunk conv:ReLU ratio {r.ratio_text} "
                     f"({r.n_conv} convs, {r.n_relu} ReLUs); "
                     f"params {r.param_count}; ReLU FLOPs {r.flops_relu}")
        if self.depth_note:
            lines.append(f"note: {self.depth_note}")
        return "\n".join(lines)


def summarize(model: Model, input_shape=(1, 3, 32, 32)) -> NetworkSummary:
    from .audit import audit  # local import: audit also imports blocks

    report = audit(model, input_shape)
    probe = np.zeros(input_shape, dtype=model.store.dtype)
    _, tape = model.forward(probe, training=False)

    regions = ["stem"] + [f"stage{i + 1}" for i in range(len(model.stages))] + ["head"]
    rows = []
    for region in regions:
        convs = relus = flops = 0
        for node in tape.nodes:
            if not (node.scope == region or node.scope.startswith(region + ".")):
                continue
            if node.kind == "conv2d":
                o, c, kh, kw = node.meta["kernel_shape"]
                _, _, oh, ow = node.meta["out_shape"]
                convs += 1
                flops += 2 * kh * kw * c * o * oh * ow
            elif node.kind == "relu":
                relus += 1
        params = sum(p.value.size for name, p in model.store.trainable_items()
                     if name.startswith(region + "."))
        rows.append(StageRow(region, convs, relus, params, flops))
    return NetworkSummary(report, rows, model.depth_note)


def format_manifest(model: Model) -> str:
    cfg = model.cfg
    header = (
        f"family={cfg.family} depth={cfg.depth if cfg.depth is not None else 'custom'} "
        f"blocks={','.join(str(n) for n in (len(s) for s in model.stages))} "
        f"widths={','.join(map(str, cfg.stage_widths))} "
        f"ratio={cfg.ratio} removal={cfg.removal} pairing={cfg.pairing} "
        f"drop_bn={1 if cfg.drop_bn_with_relu else 0} "
        f"classes={cfg.num_classes} seed={cfg.seed} precision={cfg.precision}"
    )
    lines = [header]
    if model.depth_note:
        lines.append(f"# {model.depth_note}")
    specs = iter(model.block_specs)
    for s, stage in enumerate(model.stages):
        for b, _ in enumerate(stage):
            lines.append(f"block name=stage{s + 1}.block{b} " + next(specs).to_line())
    return "\n".join(lines) + "\n"


def parse_manifest(text: str):
    """Returns (header dict, list of (name, BlockSpec))."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    header = dict(item.split("=", 1) for item in lines[0].split())
    blocks = []
    for line in lines[1:]:
        assert line.startswith("block ")
        kv = dict(item.split("=", 1) for item in line[len("block "):].split())
        name = kv.pop("name")
        blocks.append((name, BlockSpec.from_line(" ".join(f"{k}={v}" for k, v in kv.items()))))
    return header, blocks


def config_from_manifest_header(header: dict) -> NetworkConfig:
    depth = None if header["depth"] == "custom" else int(header["depth"])
    return NetworkConfig(
        family=header["family"],
        depth=depth,
        stage_blocks=tuple(int(x) for x in header["blocks"].split(",")) if depth is None else None,
        stage_widths=tuple(int(x) for x in header["widths"].split(",")),
        ratio=header["ratio"],
        removal=header["removal"],
        pairing=header["pairing"],
        drop_bn_with_relu=header.get("drop_bn") == "1",
        num_classes=int(header["classes"]),
        seed=int(header["seed"]),
        precision=header["precision"],
    )
