"""Finite-difference verification suites for ops, blocks, and the full model.

Each suite returns {name: report} where report comes from
`autodiff.grad_check`.  Parameters are jittered to generic values first so
no ReLU input sits exactly on its kink (zero-initialized biases otherwise
put self-pair position offsets right at the nondifferentiable point).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check, sum_reduce
from .attention import MECHANISMS, OPERATORS, AttentionConfig, GflBlock
from .lfa import EdgeConv
from .network import Classifier, loss, micro_config

OP_TOL = 1e-4
MODEL_TOL = 1e-3


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _weighting(shape):
    w = np.linspace(0.5, 1.5, int(np.prod(shape))).reshape(shape)
    return Tensor(w, dtype=np.float64)


def jitter_parameters(module, rng) -> None:
    """Shift biases/affine BN parameters off zero so ReLU kinks are generic."""
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            p.data = p.data + rng.uniform(0.05, 0.35, size=p.shape) * rng.choice(
                [-1.0, 1.0], size=p.shape
            )
        elif leaf == "gamma":
            p.data = rng.uniform(0.7, 1.3, size=p.shape).astype(p.data.dtype)


def snapshot_buffers(module):
    saved = {name: buf.copy() for name, buf in module.named_buffers()}

    def restore():
        for name, buf in module.named_buffers():
            buf[...] = saved[name]

    return restore


def gradcheck_ops(tol: float = OP_TOL) -> dict[str, dict]:
    """Finite-difference checks for every differentiable primitive."""
    rng = np.random.default_rng(2024)
    reports: dict[str, dict] = {}

    a, b = _t(rng, 4, 5), _t(rng, 5, 3)
    reports["matmul"] = grad_check(lambda a, b: sum_reduce(ad.matmul(a, b)), [a, b], tol)

    for op in ("add", "sub", "mul", "div"):
        x = _t(rng, 3, 4)
        y = Tensor(
            rng.uniform(0.5, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)),
            requires_grad=True, dtype=np.float64,
        )
        reports[f"elementwise_{op}"] = grad_check(
            lambda x, y, op=op: sum_reduce(ad.elementwise(x, y, op) * _weighting((3, 4))),
            [x, y], tol,
        )

    x = Tensor(
        rng.uniform(0.1, 1.0, (3, 5)) * rng.choice([-1.0, 1.0], (3, 5)),
        requires_grad=True, dtype=np.float64,
    )
    reports["relu"] = grad_check(lambda x: sum_reduce(ad.relu(x) * _weighting((3, 5))), [x], tol)
    x = _t(rng, 3, 5)
    reports["softmax"] = grad_check(
        lambda x: sum_reduce(ad.softmax(x, axis=1) * _weighting((3, 5))), [x], tol
    )
    x = Tensor(
        rng.uniform(0.1, 1.0, (3, 5)) * rng.choice([-1.0, 1.0], (3, 5)),
        requires_grad=True, dtype=np.float64,
    )
    reports["l1_normalize"] = grad_check(
        lambda x: sum_reduce(ad.l1_normalize(x, axis=1) * _weighting((3, 5))), [x], tol
    )
    x = _t(rng, 4, 4)
    reports["scale"] = grad_check(lambda x: sum_reduce(ad.scale(x, -1.7)), [x], tol)
    x = _t(rng, 3, 4, 5)
    reports["max_reduce"] = grad_check(
        lambda x: sum_reduce(ad.max_reduce(x, axis=1)[0] * _weighting((3, 5))), [x], tol
    )
    x = _t(rng, 2, 6)
    reports["exp"] = grad_check(lambda x: sum_reduce(ad.exp(x) * _weighting((2, 6))), [x], tol)
    x = _t(rng, 2, 6, lo=0.2, hi=2.0)
    reports["log"] = grad_check(lambda x: sum_reduce(ad.log(x) * _weighting((2, 6))), [x], tol)

    xs = [_t(rng, 2, k) for k in (1, 3, 2)]
    reports["concat"] = grad_check(
        lambda *xs: sum_reduce(ad.concat(list(xs), axis=1) * _weighting((2, 6))), xs, tol
    )
    x = _t(rng, 6, 3)
    idx = np.array([0, 2, 2, 5])
    reports["gather"] = grad_check(
        lambda x: sum_reduce(ad.gather(x, idx, axis=0) * _weighting((4, 3))), [x], tol
    )
    x = _t(rng, 2, 5, 3)
    bidx = np.array([[0, 4, 4], [1, 2, 0]])
    reports["gather_rows"] = grad_check(
        lambda x: sum_reduce(ad.gather_rows(x, bidx) * _weighting((2, 3, 3))), [x], tol
    )

    x, w, bb = _t(rng, 4, 3), _t(rng, 3, 5), _t(rng, 5)
    reports["linear"] = grad_check(
        lambda x, w, bb: sum_reduce(ad.linear(x, w, bb) * _weighting((4, 5))), [x, w, bb], tol
    )
    for mode in ("train", "eval"):
        x = _t(rng, 6, 3)
        gamma = _t(rng, 3, lo=0.7, hi=1.3)
        beta = _t(rng, 3, lo=-0.4, hi=0.4)
        rm = rng.normal(size=3)
        rv = rng.uniform(0.5, 2.0, size=3)
        reports[f"batchnorm_{mode}"] = grad_check(
            lambda x, g, b, mode=mode: sum_reduce(
                ad.batchnorm(x, g, b, rm.copy(), rv.copy(), train=mode == "train")
                * _weighting((6, 3))
            ),
            [x, gamma, beta], tol,
        )
    return reports


def gradcheck_gfl(mechanism: str, operator: str, d: int = 4, s: int = 3,
                  seed: int = 7, tol: float = OP_TOL) -> dict:
    """End-to-end check of one attention mechanism/operator combination."""
    rng = np.random.default_rng(seed)
    block = GflBlock(rng, d, AttentionConfig(mechanism, operator, True), np.float64)
    jitter_parameters(block, rng)
    y = rng.uniform(-1.0, 1.0, size=(s, d))
    if operator == "division":
        y = rng.uniform(0.5, 1.5, size=(s, d))
        block.w_k.data = np.eye(d) + rng.uniform(-0.01, 0.01, (d, d))
    y = Tensor(y, requires_grad=True, dtype=np.float64)
    positions = rng.uniform(-1, 1, size=(s, 3))
    restore = snapshot_buffers(block)
    params = [y] + [p for _, p in block.named_parameters()]

    def fn(*_):
        restore()
        return sum_reduce(block(y, positions, train=True) * _weighting((s, d)))

    return grad_check(fn, params, tol)


def gradcheck_edge_conv(seed: int = 11, tol: float = OP_TOL) -> dict:
    rng = np.random.default_rng(seed)
    conv = EdgeConv(rng, d_in=11, widths=(5,), dtype=np.float64)
    jitter_parameters(conv, rng)
    edges = _t(rng, 2, 3, 11)
    restore = snapshot_buffers(conv)
    params = [edges] + [p for _, p in conv.named_parameters()]

    def fn(*_):
        restore()
        return sum_reduce(conv(edges, train=True) * _weighting((2, 3, 5)))

    return grad_check(fn, params, tol)


def gradcheck_blocks(tol: float = OP_TOL) -> dict[str, dict]:
    """Edge conv plus every attention mechanism x operator combination."""
    reports = {"edge_conv": gradcheck_edge_conv(tol=tol)}
    for mech in MECHANISMS:
        for op in OPERATORS:
            reports[f"gfl_{mech}_{op}"] = gradcheck_gfl(mech, op, tol=tol)
    return reports


def gradcheck_model(tol: float = MODEL_TOL, seed: int = 5) -> dict[str, dict]:
    """Loss-through-forward check of the micro model (train-mode batchnorm)."""
    rng = np.random.default_rng(seed)
    cfg = micro_config()
    model = Classifier(cfg, seed=seed, dtype=np.float64)
    jitter_parameters(model, rng)
    positions = rng.uniform(-1, 1, size=(2, cfg.points, 3))
    dirs = rng.normal(size=(2, cfg.points, 3))
    normals = dirs / np.linalg.norm(dirs, axis=2, keepdims=True)
    labels = np.array([0, 2])
    groupings = model.build_groupings(positions)
    restore = snapshot_buffers(model)
    params = [p for _, p in model.named_parameters()]

    def fn(*_):
        restore()
        logits = model.forward(positions, normals, train=True, groupings=groupings)
        return loss(logits, labels)

    return {"micro_model": grad_check(fn, params, tol)}


def run_scope(scope: str) -> dict[str, dict]:
    if scope == "ops":
        return gradcheck_ops()
    if scope == "blocks":
        return gradcheck_blocks()
    if scope == "model":
        return gradcheck_model()
    raise ValueError(f"unknown gradcheck scope {scope!r}; one of ops/blocks/model")
