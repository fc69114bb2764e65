"""Split residual CNNs with maskable structures.

A model is partitioned into an edge part (stem + first `split_index` residual
blocks) and a cloud part (remaining blocks + task head). Every residual block
exposes maskable structures: its hidden conv channels (channel granularity) or
its whole residual branch (block granularity). Trainable soft-mask scalars
scale those structures during defended training; `pruning.prune_surgery`
later removes the ones that fall at or below the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
from torch import nn

from .errors import ConfigurationError, ValidationError

CHECKPOINT_VERSION = 1

TASK_MODES = ("classification", "embedding")
GRANULARITIES = ("channel", "block")


@dataclass(frozen=True)
class ArchSpec:
    """Configurable small residual CNN family.

    `widths[i]` is the output channel count of block i, `strides[i]` its
    stride (2 = downsample). Defaults derive a ResNet-style trajectory from
    `base_channels`. `name` may pick a preset (see ARCH_PRESETS).
    """

    name: str = "desk4"
    num_blocks: int = 4
    base_channels: int = 16
    widths: tuple[int, ...] | None = None
    strides: tuple[int, ...] | None = None
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10
    embed_dim: int = 64

    def resolved_widths(self) -> tuple[int, ...]:
        if self.widths is not None:
            return tuple(self.widths)
        # double width at every second block, like ResNet stages
        w, out = self.base_channels, []
        for i in range(self.num_blocks):
            if i > 0 and i % 2 == 0:
                w *= 2
            out.append(w)
        return tuple(out)

    def resolved_strides(self) -> tuple[int, ...]:
        if self.strides is not None:
            return tuple(self.strides)
        # downsample where the width doubles
        widths = self.resolved_widths()
        return tuple(2 if (i > 0 and widths[i] != widths[i - 1]) else 1
                     for i in range(self.num_blocks))


# Named presets; "resnet18" mirrors the standard 8-basic-block topology.
ARCH_PRESETS: dict[str, dict] = {
    "desk2": dict(num_blocks=2, base_channels=16, widths=(16, 32), strides=(1, 2)),
    "desk4": dict(num_blocks=4, base_channels=16,
                  widths=(16, 32, 32, 64), strides=(1, 2, 2, 2)),
    "desk6": dict(num_blocks=6, base_channels=24),
    "desk8": dict(num_blocks=8, base_channels=32),
    "resnet18": dict(
        num_blocks=8,
        base_channels=64,
        widths=(64, 64, 128, 128, 256, 256, 512, 512),
        strides=(1, 1, 2, 1, 2, 1, 2, 1),
        image_size=64,
    ),
}


def arch_from_name(name: str, **overrides) -> ArchSpec:
    if name not in ARCH_PRESETS:
        raise ConfigurationError(
            f"unknown architecture family {name!r}; known: {sorted(ARCH_PRESETS)}")
    kwargs = dict(ARCH_PRESETS[name])
    kwargs.update(overrides)
    return ArchSpec(name=name, **kwargs)


@dataclass(frozen=True)
class StructureRef:
    """One maskable structure: a hidden channel or a whole residual branch."""

    block: int                 # edge block index, 0-based
    kind: str                  # "channel" | "block"
    channel: int | None
    param_count: int
    label: str

    def to_dict(self) -> dict:
        return asdict(self)


class ResidualBlock(nn.Module):
    """Basic block: conv-bn-(mask)-relu-conv-bn + shortcut, final relu.

    Channel masks scale the hidden channels post-bn1, pre-activation; a block
    mask scales the whole residual branch before the shortcut add. The
    shortcut is identity when shapes match, otherwise a 1x1 projection.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 hidden_channels: int | None = None):
        super().__init__()
        hidden = out_channels if hidden_channels is None else hidden_channels
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(hidden)
        self.conv2 = nn.Conv2d(hidden, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.branch_removed = False  # set by block-wise surgery

    @property
    def hidden_channels(self) -> int:
        return self.conv1.out_channels

    def branch(self, x, mask=None):
        h = self.bn1(self.conv1(x))
        if mask is not None:
            h = h * mask.view(1, -1, 1, 1).to(h.dtype)
        h = torch.relu(h)
        return self.bn2(self.conv2(h))

    def forward(self, x, mask=None, granularity=None):
        identity = self.shortcut(x)
        if self.branch_removed:
            return torch.relu(identity)
        if mask is None:
            return torch.relu(identity + self.branch(x))
        if granularity == "channel":
            return torch.relu(identity + self.branch(x, mask=mask))
        if granularity == "block":
            return torch.relu(identity + mask.to(x.dtype) * self.branch(x))
        raise ValidationError(f"unknown mask granularity {granularity!r}")

    def structure_refs(self, block_index: int, granularity: str) -> list[StructureRef]:
        if self.branch_removed:
            return []
        if granularity == "channel":
            per_channel = (
                self.conv1.weight[0].numel()       # one conv1 filter
                + 2                                # bn1 affine pair
                + self.conv2.weight[:, 0].numel()  # one conv2 input slice
            )
            return [
                StructureRef(block_index, "channel", c, per_channel,
                             f"edge{block_index}.conv1:c{c}")
                for c in range(self.hidden_channels)
            ]
        if granularity == "block":
            branch_params = sum(p.numel() for m in (self.conv1, self.bn1, self.conv2, self.bn2)
                                for p in m.parameters())
            return [StructureRef(block_index, "block", None, branch_params,
                                 f"edge{block_index}.branch")]
        raise ValidationError(f"unknown mask granularity {granularity!r}")


class PlainBlock(nn.Module):
    """Wraps an arbitrary module as a (non-maskable) block; used for toy models."""

    def __init__(self, module: nn.Module):
        super().__init__()
        self.inner = module
        self.branch_removed = False

    def forward(self, x, mask=None, granularity=None):
        return self.inner(x)

    def structure_refs(self, block_index: int, granularity: str) -> list[StructureRef]:
        return []


class SplitModel(nn.Module):
    """A network split into edge blocks and cloud blocks + head.

    Evaluation is pure given (parameters, masks, input); composing
    `forward_edge` with `forward_cloud` reproduces `forward_full`.
    """

    def __init__(self, stem: nn.Module, blocks: list[nn.Module], head: nn.Module,
                 split_index: int, task_mode: str, arch: ArchSpec | None = None,
                 aux_classifier: nn.Module | None = None):
        super().__init__()
        if task_mode not in TASK_MODES:
            raise ConfigurationError(f"unknown task_mode {task_mode!r}")
        if not blocks:
            raise ValidationError("model needs at least one block")
        if not 1 <= split_index <= len(blocks):
            raise ValidationError(
                f"split_index {split_index} out of range [1, {len(blocks)}]")
        self.stem = stem
        self.edge_blocks = nn.ModuleList(blocks[:split_index])
        self.cloud_blocks = nn.ModuleList(blocks[split_index:])
        self.head = head
        self.aux_classifier = aux_classifier
        self.split_index = split_index
        self.task_mode = task_mode
        self.arch = arch

    @property
    def block_count(self) -> int:
        """Number of edge blocks (the N of the per-block Lipschitz terms)."""
        return len(self.edge_blocks)

    @property
    def all_blocks(self) -> list[nn.Module]:
        return list(self.edge_blocks) + list(self.cloud_blocks)

    # -- masks ------------------------------------------------------------

    def maskable_structures(self, granularity: str) -> list[StructureRef]:
        if granularity not in GRANULARITIES:
            raise ValidationError(f"unknown mask granularity {granularity!r}")
        refs = []
        for i, block in enumerate(self.edge_blocks):
            refs.extend(block.structure_refs(i, granularity))
        return refs

    def _block_mask(self, masks, block_index: int):
        """Slice of mask values for one edge block, or (None, None)."""
        if masks is None:
            return None, None
        values = masks.values_for_block(block_index)
        if values is None:
            return None, None
        return values, masks.granularity

    def _check_input(self, x):
        if x.dim() != 4:
            raise ValidationError(f"expected 4-D batch, got shape {tuple(x.shape)}")
        if self.arch is not None and x.shape[1] != self.arch.in_channels:
            raise ValidationError(
                f"expected {self.arch.in_channels} input channels, got {x.shape[1]}")

    # -- forward paths -----------------------------------------------------

    def forward_edge(self, x, masks=None):
        """Activation at the cut point (prefix of the full forward)."""
        self._check_input(x)
        h = self.stem(x)
        for i, block in enumerate(self.edge_blocks):
            mask, gran = self._block_mask(masks, i)
            h = block(h, mask=mask, granularity=gran)
        return h

    def block_activations(self, x, masks=None):
        """Per-edge-block activations; element i is the output of block i."""
        self._check_input(x)
        h = self.stem(x)
        acts = []
        for i, block in enumerate(self.edge_blocks):
            mask, gran = self._block_mask(masks, i)
            h = block(h, mask=mask, granularity=gran)
            acts.append(h)
        return acts

    def forward_cloud(self, intermediate, masks=None):
        """Continue from the cut point through cloud blocks and the head."""
        h = intermediate
        for block in self.cloud_blocks:
            h = block(h)
        return self.head_forward(h)

    def trunk_forward(self, x, masks=None):
        """Activation after the entire block stack (last conv output)."""
        h = self.forward_edge(x, masks=masks)
        for block in self.cloud_blocks:
            h = block(h)
        return h

    def head_forward(self, trunk_out):
        pooled = torch.nn.functional.adaptive_avg_pool2d(trunk_out, 1).flatten(1)
        return self.head(pooled)

    def forward_full(self, x, masks=None):
        """Logits (classification) or embeddings (embedding mode)."""
        return self.head_forward(self.trunk_forward(x, masks=masks))

    def forward(self, x, masks=None):
        return self.forward_full(x, masks=masks)

    # -- topology / persistence ---------------------------------------------

    def topology(self) -> dict:
        """Shape description sufficient to rebuild the (possibly pruned) graph."""
        blocks = []
        for block in self.all_blocks:
            if isinstance(block, ResidualBlock):
                blocks.append(dict(
                    kind="residual",
                    in_channels=block.in_channels,
                    out_channels=block.out_channels,
                    stride=block.stride,
                    hidden_channels=block.hidden_channels,
                    branch_removed=block.branch_removed,
                ))
            else:
                raise ConfigurationError(
                    "only factory-built models can be checkpointed")
        return dict(
            version=CHECKPOINT_VERSION,
            arch=asdict(self.arch) if self.arch is not None else None,
            split_index=self.split_index,
            task_mode=self.task_mode,
            blocks=blocks,
        )


def _head_for(arch: ArchSpec, task_mode: str, trunk_channels: int):
    if task_mode == "classification":
        return nn.Linear(trunk_channels, arch.num_classes), None
    head = nn.Linear(trunk_channels, arch.embed_dim)
    aux = nn.Linear(arch.embed_dim, arch.num_classes)
    return head, aux


def build_split_model(arch_spec: ArchSpec | str, split_index: int,
                      task_mode: str = "classification", seed: int = 0) -> SplitModel:
    """Build a freshly initialized split model; deterministic given (spec, seed)."""
    arch = arch_from_name(arch_spec) if isinstance(arch_spec, str) else arch_spec
    if not 2 <= arch.num_blocks <= 8:
        raise ConfigurationError(
            f"block count {arch.num_blocks} outside supported range [2, 8]")
    if not 1 <= split_index <= arch.num_blocks:
        raise ValidationError(
            f"split_index {split_index} out of range [1, {arch.num_blocks}]")
    widths = arch.resolved_widths()
    strides = arch.resolved_strides()
    if len(widths) != arch.num_blocks or len(strides) != arch.num_blocks:
        raise ConfigurationError("widths/strides length must equal num_blocks")

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        stem = nn.Sequential(
            nn.Conv2d(arch.in_channels, arch.base_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(arch.base_channels),
            nn.ReLU(),
        )
        blocks: list[nn.Module] = []
        in_ch = arch.base_channels
        for width, stride in zip(widths, strides):
            blocks.append(ResidualBlock(in_ch, width, stride=stride))
            in_ch = width
        head, aux = _head_for(arch, task_mode, in_ch)
        model = SplitModel(stem, blocks, head, split_index, task_mode,
                           arch=arch, aux_classifier=aux)
    return model


def build_from_topology(topology: dict) -> SplitModel:
    """Rebuild an (optionally pruned) model skeleton from `SplitModel.topology()`."""
    if topology.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"unsupported checkpoint version {topology.get('version')!r}")
    arch = ArchSpec(**topology["arch"]) if topology["arch"] else None
    blocks = []
    for desc in topology["blocks"]:
        block = ResidualBlock(desc["in_channels"], desc["out_channels"],
                              stride=desc["stride"],
                              hidden_channels=desc["hidden_channels"])
        if desc["branch_removed"]:
            _remove_branch(block)
        blocks.append(block)
    if arch is None:
        raise ConfigurationError("topology lacks an architecture spec")
    stem = nn.Sequential(
        nn.Conv2d(arch.in_channels, arch.base_channels, 3, padding=1, bias=False),
        nn.BatchNorm2d(arch.base_channels),
        nn.ReLU(),
    )
    head, aux = _head_for(arch, topology["task_mode"], blocks[-1].out_channels)
    return SplitModel(stem, blocks, head, topology["split_index"],
                      topology["task_mode"], arch=arch, aux_classifier=aux)


def _remove_branch(block: ResidualBlock):
    """Strip a residual branch, leaving only the shortcut path."""
    block.branch_removed = True
    # keep 1-channel stubs so the module stays loadable and cheap
    block.conv1 = nn.Conv2d(block.in_channels, 1, 1, bias=False)
    block.bn1 = nn.BatchNorm2d(1)
    block.conv2 = nn.Conv2d(1, block.out_channels, 1, bias=False)
    block.bn2 = nn.BatchNorm2d(block.out_channels)


def resplit(model: SplitModel, split_index: int) -> SplitModel:
    """Same network, different cut point (modules are shared, not copied)."""
    return SplitModel(model.stem, model.all_blocks, model.head, split_index,
                      model.task_mode, arch=model.arch,
                      aux_classifier=model.aux_classifier)


def save_checkpoint(path, model: SplitModel, masks=None, extra: dict | None = None):
    payload = dict(
        topology=model.topology(),
        state_dict=model.state_dict(),
        masks=None if masks is None else masks.state_dict(),
        extra=extra or {},
    )
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns (model, mask_state_or_None, extra)."""
    payload = torch.load(path, weights_only=False)
    model = build_from_topology(payload["topology"])
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("masks"), payload.get("extra", {})
