"""Global feature learning: single-head self-attention over sampled centers.

Supports the full ablation grid: scalar (dot-product) attention and five
vector-attention pairwise operators (concatenation / summation / subtraction
/ division / hadamard), learnable relative position encoding, and four
mechanisms (basic, offset with a Laplacian-style LBR residual, and the two
plain-residual variants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DomainError,
    Tensor,
    add,
    broadcast_to,
    concat,
    div,
    l1_normalize,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    sub,
    swapaxes,
    weighted_value_sum,
)
from .layers import LBR, BatchNorm, Linear, xavier_uniform

MECHANISMS = ("basic", "offset", "ascn_residual", "pa_residual")
OPERATORS = ("dot", "concatenation", "summation", "subtraction", "division", "hadamard")
VECTOR_OPERATORS = OPERATORS[1:]


@dataclass(frozen=True)
class AttentionConfig:
    """Mechanism x operator x position-encoding selection."""
    mechanism: str = "offset"
    operator: str = "subtraction"
    position_encoding: bool = True

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}; one of {MECHANISMS}")
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}; one of {OPERATORS}")

    @property
    def scalar_path(self) -> bool:
        return self.operator == "dot"


def qkv_project(y: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Three independent bias-free linear maps of the token features."""
    d = y.shape[-1]
    for name, w in (("W_Q", w_q), ("W_K", w_k), ("W_V", w_v)):
        if w.shape != (d, d):
            raise ValueError(f"{name} shape {w.shape} != ({d}, {d})")
    return matmul(y, w_q), matmul(y, w_k), matmul(y, w_v)


def scalar_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns (output, row-stochastic weights)."""
    d = q.shape[-1]
    logits = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    weights = softmax(logits, axis=-1)
    return matmul(weights, v), weights


def delta(q: Tensor, k: Tensor, operator: str) -> Tensor:
    """Pairwise (query m, key n) combination map, shape (..., S, S, D).

    Concatenation doubles the channel axis; division flags zero divisors.
    """
    if operator not in VECTOR_OPERATORS:
        raise ValueError(f"operator {operator!r} is not a vector form")
    qm = reshape(q, q.shape[:-1] + (1, q.shape[-1]))
    kn = reshape(k, k.shape[:-2] + (1,) + k.shape[-2:])
    if operator == "concatenation":
        full = qm.shape[:-3] + (q.shape[-2], k.shape[-2], q.shape[-1])
        return concat([broadcast_to(qm, full), broadcast_to(kn, full)], axis=-1)
    if operator == "summation":
        return add(qm, kn)
    if operator == "subtraction":
        return sub(qm, kn)
    if operator == "division":
        if np.any(k.data == 0):
            raise DomainError("division operator: key matrix contains exact zeros")
        return div(qm, kn)
    return mul(qm, kn)  # hadamard


class PositionEncoder:
    """Learnable encoding of pairwise relative coordinates.

    Two linear layers separated by batchnorm + ReLU lift the 3-d offsets
    P_m - P_n to the attention width.
    """

    def __init__(self, rng, d: int, dtype):
        self.lin1 = Linear(rng, 3, d, init="he", dtype=dtype)
        self.bn = BatchNorm(d, dtype=dtype)
        self.lin2 = Linear(rng, d, d, init="xavier", dtype=dtype)

    def __call__(self, rel: Tensor, train: bool) -> Tensor:
        return self.lin2(relu(self.bn(self.lin1(rel), train)))

    def named_parameters(self, prefix: str = ""):
        yield from self.lin1.named_parameters(f"{prefix}lin1.")
        yield from self.bn.named_parameters(f"{prefix}bn.")
        yield from self.lin2.named_parameters(f"{prefix}lin2.")

    def named_buffers(self, prefix: str = ""):
        yield from self.bn.named_buffers(f"{prefix}bn.")


def relative_positions(positions: np.ndarray, dtype) -> Tensor:
    """P_m - P_n as a constant tensor of shape (..., S, S, 3)."""
    p = np.asarray(positions)
    rel = p[..., :, None, :] - p[..., None, :, :]
    return Tensor(rel.astype(dtype))


def position_encode(positions: np.ndarray, encoder: PositionEncoder, train: bool, dtype) -> Tensor:
    return encoder(relative_positions(positions, dtype), train)


class AttentionMapMLP:
    """Per-channel map from the pairwise combination to attention pre-weights.

    linear + ReLU + linear; the final layer starts near zero so attention
    begins close to uniform.
    """

    def __init__(self, rng, d_in: int, d: int, dtype):
        self.lin1 = Linear(rng, d_in, d, init="he", dtype=dtype)
        self.lin2 = Linear(rng, d, d, init="small", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(relu(self.lin1(x)))

    def pairwise(self, q: Tensor, k: Tensor, operator: str) -> Tensor:
        """Equivalent of `self(delta(q, k, operator))` for the affine-
        distributing operators.

        For subtraction/summation the first layer's map of q_m -/+ k_n is
        (q W1 + b1)_m -/+ (k W1)_n, so the big matmul runs on S tokens
        instead of S^2 pairs.
        """
        if operator not in ("subtraction", "summation"):
            raise ValueError(f"pairwise fast map undefined for {operator!r}")
        a = self.lin1(q)
        c = matmul(k, self.lin1.weight)
        am = reshape(a, a.shape[:-1] + (1, a.shape[-1]))
        cn = reshape(c, c.shape[:-2] + (1,) + c.shape[-2:])
        h = sub(am, cn) if operator == "subtraction" else add(am, cn)
        return self.lin2(relu(h))

    def named_parameters(self, prefix: str = ""):
        yield from self.lin1.named_parameters(f"{prefix}lin1.")
        yield from self.lin2.named_parameters(f"{prefix}lin2.")

    def named_buffers(self, prefix: str = ""):
        return iter(())


def attend_premap(pre: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Normalize a pre-weight map and apply it to the values.

    Weights are softmax-then-l1 normalized along the key axis, so they sum
    to 1 per (query, channel); the output is the weight-modulated sum of
    values.
    """
    weights = l1_normalize(softmax(pre, axis=-2), axis=-2)
    return weighted_value_sum(weights, v), weights


def vector_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    rho: Tensor | None,
    tau,
    operator: str,
) -> tuple[Tensor, Tensor]:
    """Channel-wise attention; returns (output, per-channel weights)."""
    pre = tau(delta(q, k, operator))
    if rho is not None:
        if rho.shape != pre.shape:
            raise ValueError(f"position encoding shape {rho.shape} != map shape {pre.shape}")
        pre = add(pre, rho)
    return attend_premap(pre, v)


def offset_attention(y: Tensor, attended: Tensor, lbr: LBR, train: bool) -> Tensor:
    """Laplacian-style residual: LBR(Y - V_A(Y)) + Y."""
    if attended.shape != y.shape:
        raise ValueError(f"attention output shape {attended.shape} != input {y.shape}")
    return add(lbr(sub(y, attended), train), y)


class GflBlock:
    """Dispatches QKV projection, the configured attention path, and mechanism."""

    def __init__(self, rng, d: int, config: AttentionConfig, dtype):
        self.d = d
        self.config = config
        self.dtype = dtype
        self.w_q = Tensor(xavier_uniform(rng, d, d, dtype), requires_grad=True, dtype=dtype)
        self.w_k = Tensor(xavier_uniform(rng, d, d, dtype), requires_grad=True, dtype=dtype)
        self.w_v = Tensor(xavier_uniform(rng, d, d, dtype), requires_grad=True, dtype=dtype)
        self.tau = None
        self.pos = None
        self.lbr = None
        if not config.scalar_path:
            tau_in = 2 * d if config.operator == "concatenation" else d
            self.tau = AttentionMapMLP(rng, tau_in, d, dtype)
            if config.position_encoding:
                self.pos = PositionEncoder(rng, d, dtype)
        if config.mechanism == "offset":
            self.lbr = LBR(rng, d, d, dtype=dtype)

    def __call__(self, y: Tensor, positions: np.ndarray, train: bool) -> Tensor:
        q, k, v = qkv_project(y, self.w_q, self.w_k, self.w_v)
        if self.config.scalar_path:
            attended, _ = scalar_attention(q, k, v)
        else:
            rho = position_encode(positions, self.pos, train, self.dtype) if self.pos else None
            op = self.config.operator
            if op in ("subtraction", "summation"):
                # distribute the map MLP's first layer over the pairwise
                # combination: same math, S instead of S^2 matmul rows
                pre = self.tau.pairwise(q, k, op)
                if rho is not None:
                    pre = add(pre, rho)
                attended, _ = attend_premap(pre, v)
            else:
                attended, _ = vector_attention(q, k, v, rho, self.tau, op)
        mech = self.config.mechanism
        if mech == "basic":
            return attended
        if mech == "offset":
            return offset_attention(y, attended, self.lbr, train)
        return add(attended, y)  # ascn_residual / pa_residual

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}w_q", self.w_q
        yield f"{prefix}w_k", self.w_k
        yield f"{prefix}w_v", self.w_v
        if self.tau is not None:
            yield from self.tau.named_parameters(f"{prefix}tau.")
        if self.pos is not None:
            yield from self.pos.named_parameters(f"{prefix}pos.")
        if self.lbr is not None:
            yield from self.lbr.named_parameters(f"{prefix}lbr.")

    def named_buffers(self, prefix: str = ""):
        if self.pos is not None:
            yield from self.pos.named_buffers(f"{prefix}pos.")
        if self.lbr is not None:
            yield from self.lbr.named_buffers(f"{prefix}lbr.")
