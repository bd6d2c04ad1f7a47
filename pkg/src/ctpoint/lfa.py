"""Local feature aggregation: graph edge convolution over grouped neighborhoods.

For each sampled center, neighbor features are fused with the center's own
feature/coordinate context, pushed through a shared pointwise conv stack
(linear + batchnorm + ReLU per layer), and max-pooled over the neighborhood.
Multi-scale groupings are combined by channel concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, broadcast_to, concat, gather_rows, max_reduce, reshape, sub
from .layers import LBR
from .sampling import GroupingSpec, ball_query, farthest_point_sample


@dataclass(frozen=True)
class LfaConfig:
    """Grouping plus the per-scale edge-conv width stacks."""
    grouping: GroupingSpec
    edge_widths: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.edge_widths) != self.grouping.num_scales:
            raise ValueError(
                f"{len(self.edge_widths)} width lists for {self.grouping.num_scales} scales"
            )
        if any(not ws or any(w < 1 for w in ws) for ws in self.edge_widths):
            raise ValueError("edge conv widths must be nonempty and positive")

    @property
    def out_width(self) -> int:
        return sum(ws[-1] for ws in self.edge_widths)


@dataclass
class ModuleGrouping:
    """Precomputed sampling/grouping indices for one batch at one module."""
    fps: np.ndarray  # (B, S)
    members: tuple[np.ndarray, ...]  # per scale, (B, S, K)


def build_grouping(positions: np.ndarray, sample_count: int, spec: GroupingSpec) -> ModuleGrouping:
    """Run FPS once per batch element, then ball-query every scale."""
    b = positions.shape[0]
    fps = np.empty((b, sample_count), dtype=np.int64)
    members = [
        np.empty((b, sample_count, k), dtype=np.int64) for k in spec.ks
    ]
    for i in range(b):
        fps[i] = farthest_point_sample(positions[i], sample_count)
        for s, (radius, k) in enumerate(zip(spec.radii, spec.ks)):
            members[s][i] = ball_query(positions[i], fps[i], radius, k, scale=s).members
    return ModuleGrouping(fps, tuple(members))


def context_fuse(
    center_feature: Tensor,
    center_position: Tensor,
    neighbor_feature: Tensor,
    neighbor_position: Tensor | None = None,
) -> Tensor:
    """Edge input [F_j - F_i, F_i, P_i] of width 2D + 3.

    The neighbor's own coordinates do not enter the fused context (only the
    center's combined feature is concatenated to the feature difference), so
    `neighbor_position` is accepted for signature symmetry but unused.
    Inputs must be broadcast-aligned on the leading axes.
    """
    if center_feature.shape[-1] != neighbor_feature.shape[-1]:
        raise ValueError(
            f"feature widths disagree: center {center_feature.shape[-1]}, "
            f"neighbor {neighbor_feature.shape[-1]}"
        )
    diff = sub(neighbor_feature, center_feature)
    lead = diff.shape[:-1]
    fi = broadcast_to(center_feature, lead + (center_feature.shape[-1],))
    pi = broadcast_to(center_position, lead + (center_position.shape[-1],))
    return concat([diff, fi, pi], axis=-1)


class EdgeConv:
    """Shared pointwise conv stack applied identically to every edge."""

    def __init__(self, rng, d_in: int, widths: tuple[int, ...], dtype):
        self.layers = []
        d = d_in
        for w in widths:
            self.layers.append(LBR(rng, d, w, dtype=dtype))
            d = w

    @property
    def d_in(self) -> int:
        return self.layers[0].lin.d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].lin.d_out

    def __call__(self, edges: Tensor, train: bool) -> Tensor:
        if edges.shape[-1] != self.d_in:
            raise ValueError(f"edge width {edges.shape[-1]} != configured {self.d_in}")
        out = edges
        for layer in self.layers:
            out = layer(out, train)
        return out

    def named_parameters(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}.")

    def named_buffers(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_buffers(f"{prefix}{i}.")


def local_maxpool(edge_features: Tensor) -> Tensor:
    """Componentwise max over the neighborhood axis (second to last)."""
    pooled, _ = max_reduce(edge_features, axis=-2)
    return pooled


class LfaBlock:
    """FPS + multi-scale grouping + context fusion + edge conv + maxpool."""

    def __init__(self, rng, d_in: int, sample_count: int, config: LfaConfig, dtype):
        self.d_in = d_in
        self.sample_count = sample_count
        self.config = config
        self.convs = [
            EdgeConv(rng, 2 * d_in + 3, widths, dtype) for widths in config.edge_widths
        ]
        self.dtype = dtype

    @property
    def d_out(self) -> int:
        return self.config.out_width

    def __call__(
        self,
        positions: np.ndarray,
        features: Tensor,
        train: bool,
        grouping: ModuleGrouping | None = None,
    ) -> tuple[np.ndarray, Tensor, ModuleGrouping]:
        """positions (B, N, 3), features (B, N, D) -> centers (B, S, 3), (B, S, out_width)."""
        b = positions.shape[0]
        if grouping is None:
            grouping = build_grouping(positions, self.sample_count, self.config.grouping)
        b_idx = np.arange(b)[:, None]
        center_pos = positions[b_idx, grouping.fps]  # (B, S, 3)

        center_f = gather_rows(features, grouping.fps)  # (B, S, D)
        center_f1 = reshape(center_f, center_f.shape[:-1] + (1, center_f.shape[-1]))
        center_p1 = Tensor(center_pos[:, :, None, :].astype(self.dtype))

        per_scale = []
        for conv, members in zip(self.convs, grouping.members):
            neighbor_f = gather_rows(features, members.reshape(b, -1))
            neighbor_f = reshape(
                neighbor_f, (b, self.sample_count, members.shape[2], self.d_in)
            )
            edges = context_fuse(center_f1, center_p1, neighbor_f)
            per_scale.append(local_maxpool(conv(edges, train)))
        fused = per_scale[0] if len(per_scale) == 1 else concat(per_scale, axis=-1)
        return center_pos, fused, grouping

    def named_parameters(self, prefix: str = ""):
        for i, conv in enumerate(self.convs):
            yield from conv.named_parameters(f"{prefix}scale{i}.")

    def named_buffers(self, prefix: str = ""):
        for i, conv in enumerate(self.convs):
            yield from conv.named_buffers(f"{prefix}scale{i}.")


class PointEmbed:
    """Ablation stand-in when local aggregation is disabled.

    Embeds each sampled center's own feature/coordinate context through a
    single shared LBR (no neighborhood information).
    """

    def __init__(self, rng, d_in: int, sample_count: int, d_out: int, dtype):
        self.d_in = d_in
        self.sample_count = sample_count
        self.lbr = LBR(rng, d_in + 3, d_out, dtype=dtype)
        self.dtype = dtype

    @property
    def d_out(self) -> int:
        return self.lbr.lin.d_out

    def __call__(self, positions, features, train, grouping=None):
        b = positions.shape[0]
        if grouping is None:
            fps = np.empty((b, self.sample_count), dtype=np.int64)
            for i in range(b):
                fps[i] = farthest_point_sample(positions[i], self.sample_count)
            grouping = ModuleGrouping(fps, ())
        b_idx = np.arange(b)[:, None]
        center_pos = positions[b_idx, grouping.fps]
        center_f = gather_rows(features, grouping.fps)
        ctx = concat([center_f, Tensor(center_pos.astype(self.dtype))], axis=-1)
        return center_pos, self.lbr(ctx, train), grouping

    def named_parameters(self, prefix: str = ""):
        yield from self.lbr.named_parameters(f"{prefix}embed.")

    def named_buffers(self, prefix: str = ""):
        yield from self.lbr.named_buffers(f"{prefix}embed.")
