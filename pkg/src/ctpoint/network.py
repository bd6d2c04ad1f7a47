"""The full classifier pipeline: two conv-Transformer modules, training loop,
metrics, cost accounting, checkpointing, and saliency attribution.

Each module runs local aggregation (LFA) over a farthest-point-sampled
subset and then global attention (GFL) over the sampled tokens; a pointwise
conv lifts module-2 features to the final width, global max pooling builds
the cloud descriptor, and an MLP head produces class logits.
"""

from __future__ import annotations

import base64
import ctypes
import ctypes.util
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gather_rows, max_reduce, no_grad, reshape, sum_reduce
from .attention import AttentionConfig, GflBlock
from .layers import LBR, Linear
from .lfa import LfaBlock, LfaConfig, ModuleGrouping, PointEmbed, build_grouping
from .pointcloud import Dataset, normalize, resample
from .sampling import GroupingSpec, farthest_point_sample


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss."""


_malloc_tuned = False


def _tune_allocator() -> None:
    """Keep large blocks on the heap instead of mmap/munmap churn.

    The training loop allocates and frees many multi-MB activation arrays
    per step; with glibc defaults each one round-trips through mmap and the
    page-fault cost dominates the numerics.  Raising the mmap/trim
    thresholds lets the allocator recycle them.  No-op off glibc.
    """
    global _malloc_tuned
    if _malloc_tuned:
        return
    _malloc_tuned = True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        m_trim_threshold, m_mmap_threshold = -1, -3
        libc.mallopt(m_mmap_threshold, 512 * 1024 * 1024)
        libc.mallopt(m_trim_threshold, 512 * 1024 * 1024)
    except (OSError, AttributeError):
        pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModuleSpec:
    """One hierarchy level: sample count plus grouping/edge-conv settings."""
    sample_count: int
    radii: tuple[float, ...]
    ks: tuple[int, ...]
    edge_widths: tuple[tuple[int, ...], ...]

    def grouping(self) -> GroupingSpec:
        return GroupingSpec(tuple(self.radii), tuple(self.ks))

    def lfa_config(self) -> LfaConfig:
        return LfaConfig(self.grouping(), tuple(tuple(w) for w in self.edge_widths))

    @property
    def out_width(self) -> int:
        return sum(w[-1] for w in self.edge_widths)

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "radii": list(self.radii),
            "ks": list(self.ks),
            "edge_widths": [list(w) for w in self.edge_widths],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModuleSpec":
        return cls(
            sample_count=int(d["sample_count"]),
            radii=tuple(float(r) for r in d["radii"]),
            ks=tuple(int(k) for k in d["ks"]),
            edge_widths=tuple(tuple(int(w) for w in ws) for ws in d["edge_widths"]),
        )


@dataclass(frozen=True)
class ModelConfig:
    points: int
    classes: int
    modules: tuple[ModuleSpec, ...]
    attention: AttentionConfig = AttentionConfig()
    in_width: int = 3  # normals
    feature_width: int = 1024
    head_widths: tuple[int, ...] = (512, 256)
    use_lfa: bool = True
    use_gfl: bool = True

    def __post_init__(self):
        if self.points < 1 or self.classes < 2:
            raise ValueError("need points >= 1 and classes >= 2")
        for spec in self.modules:
            if spec.sample_count < 1:
                raise ValueError("sample counts must be positive")

    def to_dict(self) -> dict:
        return {
            "points": self.points,
            "classes": self.classes,
            "modules": [m.to_dict() for m in self.modules],
            "attention": {
                "mechanism": self.attention.mechanism,
                "operator": self.attention.operator,
                "position_encoding": self.attention.position_encoding,
            },
            "in_width": self.in_width,
            "feature_width": self.feature_width,
            "head_widths": list(self.head_widths),
            "use_lfa": self.use_lfa,
            "use_gfl": self.use_gfl,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        att = d.get("attention", {})
        return cls(
            points=int(d["points"]),
            classes=int(d["classes"]),
            modules=tuple(ModuleSpec.from_dict(m) for m in d["modules"]),
            attention=AttentionConfig(
                att.get("mechanism", "offset"),
                att.get("operator", "subtraction"),
                bool(att.get("position_encoding", True)),
            ),
            in_width=int(d.get("in_width", 3)),
            feature_width=int(d.get("feature_width", 1024)),
            head_widths=tuple(int(w) for w in d.get("head_widths", (512, 256))),
            use_lfa=bool(d.get("use_lfa", True)),
            use_gfl=bool(d.get("use_gfl", True)),
        )


MODULE1_RADII = (0.1, 0.2, 0.4)
MODULE2_RADII = (0.2, 0.4, 0.8)
GROUP_KS = (8, 16, 32)
MODULE1_SCALE_WIDTH = 64
MODULE2_SCALE_WIDTH = 160


def default_config(
    points: int = 256,
    classes: int = 8,
    scales: int = 3,
    mechanism: str = "offset",
    operator: str = "subtraction",
    position_encoding: bool = True,
    hierarchy: bool = True,
    use_lfa: bool = True,
    use_gfl: bool = True,
) -> ModelConfig:
    """The default architecture, with every ablation axis as a switch.

    Multi-scale uses three grouping scales per module; the single-scale
    variant keeps only the middle scale.  Disabling `hierarchy` runs both
    modules at the full point count.
    """
    if scales not in (1, 3):
        raise ValueError("scales must be 1 or 3")
    if hierarchy and points % 16 != 0:
        raise ValueError(f"hierarchical sample counts need points % 16 == 0, got {points}")

    def pick(radii, width):
        if scales == 3:
            return radii, GROUP_KS, ((width,),) * 3
        mid = len(radii) // 2
        return (radii[mid],), (GROUP_KS[mid],), ((width,),)

    r1, k1, w1 = pick(MODULE1_RADII, MODULE1_SCALE_WIDTH)
    r2, k2, w2 = pick(MODULE2_RADII, MODULE2_SCALE_WIDTH)
    s1 = points // 4 if hierarchy else points
    s2 = points // 16 if hierarchy else points
    return ModelConfig(
        points=points,
        classes=classes,
        modules=(
            ModuleSpec(s1, r1, k1, w1),
            ModuleSpec(s2, r2, k2, w2),
        ),
        attention=AttentionConfig(mechanism, operator, position_encoding),
        use_lfa=use_lfa,
        use_gfl=use_gfl,
    )


def micro_config(
    points: int = 16,
    classes: int = 3,
    mechanism: str = "offset",
    operator: str = "subtraction",
    position_encoding: bool = True,
) -> ModelConfig:
    """A tiny model for finite-difference checking the whole pipeline."""
    return ModelConfig(
        points=points,
        classes=classes,
        modules=(
            ModuleSpec(4, (0.5, 1.0), (2, 3), ((4,), (4,))),
            ModuleSpec(1, (0.8, 1.6), (2, 3), ((4,), (4,))),
        ),
        attention=AttentionConfig(mechanism, operator, position_encoding),
        feature_width=16,
        head_widths=(8, 8),
    )


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class CtModule:
    """One hierarchy module: local aggregation then global attention."""

    def __init__(self, rng, d_in: int, spec: ModuleSpec, attention: AttentionConfig,
                 use_lfa: bool, use_gfl: bool, dtype):
        if use_lfa:
            self.lfa = LfaBlock(rng, d_in, spec.sample_count, spec.lfa_config(), dtype)
        else:
            self.lfa = PointEmbed(rng, d_in, spec.sample_count, spec.out_width, dtype)
        self.gfl = GflBlock(rng, spec.out_width, attention, dtype) if use_gfl else None
        self.d_out = spec.out_width

    def __call__(self, positions, features, train, grouping=None):
        centers, feats, grouping = self.lfa(positions, features, train, grouping)
        if self.gfl is not None:
            feats = self.gfl(feats, centers.astype(feats.dtype), train)
        return centers, feats, grouping

    def named_parameters(self, prefix: str = ""):
        yield from self.lfa.named_parameters(f"{prefix}lfa.")
        if self.gfl is not None:
            yield from self.gfl.named_parameters(f"{prefix}gfl.")

    def named_buffers(self, prefix: str = ""):
        yield from self.lfa.named_buffers(f"{prefix}lfa.")
        if self.gfl is not None:
            yield from self.gfl.named_buffers(f"{prefix}gfl.")


class Classifier:
    """Full pipeline; owns all parameters and exposes stable path names."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.modules = []
        d = config.in_width
        for spec in config.modules:
            module = CtModule(rng, d, spec, config.attention,
                              config.use_lfa, config.use_gfl, dtype)
            self.modules.append(module)
            d = module.d_out
        self.conv = LBR(rng, d, config.feature_width, dtype=dtype)
        self.head = []
        d = config.feature_width
        for w in config.head_widths:
            self.head.append(LBR(rng, d, w, dtype=dtype))
            d = w
        self.head_out = Linear(rng, d, config.classes, init="xavier", dtype=dtype)

    def forward(
        self,
        positions: np.ndarray,
        normals: np.ndarray,
        train: bool = False,
        groupings: list[ModuleGrouping] | None = None,
        collect: bool = False,
    ):
        """positions/normals (B, N, 3) -> logits (B, classes).

        With `collect` the return value is (logits, extras) where extras
        holds the pre-pool per-token features (gradient retained) and the
        module-2 center coordinates, for saliency attribution.
        """
        if positions.shape[1] != self.config.points:
            raise ValueError(
                f"expected {self.config.points} points per cloud, got {positions.shape[1]}"
            )
        feats = Tensor(np.ascontiguousarray(normals, dtype=self.dtype))
        pos = positions
        for i, module in enumerate(self.modules):
            grouping = groupings[i] if groupings is not None else None
            pos, feats, _ = module(pos, feats, train, grouping)
        prepool = self.conv(feats, train)
        if collect:
            prepool.retain_grad = True
        pooled, _ = max_reduce(prepool, axis=1)
        h = pooled
        for lbr in self.head:
            h = lbr(h, train)
        logits = self.head_out(h)
        if collect:
            return logits, {"prepool": prepool, "centers": pos}
        return logits

    def build_groupings(self, positions: np.ndarray) -> list[ModuleGrouping]:
        """Precompute FPS + grouping indices for each module (reusable)."""
        out = []
        pos = positions
        b_idx = np.arange(positions.shape[0])[:, None]
        for spec in self.config.modules:
            if self.config.use_lfa:
                grouping = build_grouping(pos, spec.sample_count, spec.grouping())
            else:
                fps = np.empty((pos.shape[0], spec.sample_count), dtype=np.int64)
                for i in range(pos.shape[0]):
                    fps[i] = farthest_point_sample(pos[i], spec.sample_count)
                grouping = ModuleGrouping(fps, ())
            out.append(grouping)
            pos = pos[b_idx, grouping.fps]
        return out

    def named_parameters(self, prefix: str = ""):
        for i, module in enumerate(self.modules):
            yield from module.named_parameters(f"{prefix}module{i}.")
        yield from self.conv.named_parameters(f"{prefix}conv.")
        for i, lbr in enumerate(self.head):
            yield from lbr.named_parameters(f"{prefix}head.{i}.")
        yield from self.head_out.named_parameters(f"{prefix}head.out.")

    def named_buffers(self, prefix: str = ""):
        for i, module in enumerate(self.modules):
            yield from module.named_buffers(f"{prefix}module{i}.")
        yield from self.conv.named_buffers(f"{prefix}conv.")
        for i, lbr in enumerate(self.head):
            yield from lbr.named_buffers(f"{prefix}head.{i}.")

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def slice_grouping(grouping: ModuleGrouping, idx) -> ModuleGrouping:
    return ModuleGrouping(grouping.fps[idx], tuple(m[idx] for m in grouping.members))


# ---------------------------------------------------------------------------
# loss and metrics
# ---------------------------------------------------------------------------

def loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch (numerically stable)."""
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    m, _ = max_reduce(logits, axis=-1)
    shifted = logits - reshape(m, m.shape + (1,))
    lse = ad.log(sum_reduce(ad.exp(shifted), axis=-1)) + m
    picked = reshape(gather_rows(logits, labels[:, None]), labels.shape)
    nll = lse - picked
    return sum_reduce(nll) * (1.0 / len(labels))


@dataclass
class Metrics:
    confusion: np.ndarray  # (C, C), rows = true, cols = predicted
    overall_accuracy: float
    mean_class_accuracy: float

    @classmethod
    def from_predictions(cls, y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> "Metrics":
        confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(confusion, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls.from_confusion(confusion)

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "Metrics":
        totals = confusion.sum(axis=1)
        correct = np.diagonal(confusion)
        oa = float(correct.sum() / totals.sum()) if totals.sum() else 0.0
        present = totals > 0
        if present.any():
            # exactly-rounded summation keeps the mean order-independent
            macc = math.fsum(correct[present] / totals[present]) / int(present.sum())
        else:
            macc = 0.0
        return cls(confusion, oa, macc)


def predict(model: Classifier, positions, normals, groupings=None, batch: int = 16) -> np.ndarray:
    """Eval-mode argmax class predictions for a stack of prepared clouds."""
    preds = np.empty(len(positions), dtype=np.int64)
    with no_grad():
        for lo in range(0, len(positions), batch):
            hi = min(lo + batch, len(positions))
            g = [slice_grouping(gr, slice(lo, hi)) for gr in groupings] if groupings else None
            logits = model.forward(positions[lo:hi], normals[lo:hi], train=False, groupings=g)
            preds[lo:hi] = logits.data.argmax(axis=1)
    return preds


def evaluate(model: Classifier, positions, normals, labels, groupings=None, batch: int = 16) -> Metrics:
    preds = predict(model, positions, normals, groupings, batch)
    return Metrics.from_predictions(labels, preds, model.config.classes)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    positions: np.ndarray  # (M, N, 3) float64, normalized
    normals: np.ndarray  # (M, N, 3) float64
    labels: np.ndarray  # (M,)


def prepare_dataset(dataset: Dataset, points: int, seed: int = 0) -> PreparedData:
    """Resample every cloud to `points` and normalize; stack into arrays."""
    pos = np.empty((len(dataset), points, 3))
    nrm = np.empty((len(dataset), points, 3))
    for i, cloud in enumerate(dataset.clouds):
        c = cloud if len(cloud) == points else resample(cloud, points, seed=seed + i)
        c = normalize(c)
        pos[i] = c.positions
        nrm[i] = c.normals
    return PreparedData(pos, nrm, dataset.labels())


# ---------------------------------------------------------------------------
# optimizer and training
# ---------------------------------------------------------------------------

class SGD:
    """SGD with momentum; weight decay is added to the gradient before the
    momentum update."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    # optional early stop: halt once both thresholds (when set) are reached
    stop_train_acc: float | None = None
    stop_test_macc: float | None = None

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 1 or self.lr <= 0:
            raise ValueError("epochs, batch size, and lr must be positive")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "momentum": self.momentum, "weight_decay": self.weight_decay,
            "seed": self.seed, "stop_train_acc": self.stop_train_acc,
            "stop_test_macc": self.stop_test_macc,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


LOG_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_mAcc", "test_OA")


@dataclass
class TrainResult:
    log_rows: list[dict]
    final_metrics: Metrics | None
    epochs_run: int
    optimizer: SGD


def train(
    model: Classifier,
    train_data: PreparedData,
    test_data: PreparedData | None,
    cfg: TrainConfig,
    log_hook=None,
) -> TrainResult:
    """SGD training with a per-epoch cosine learning rate schedule.

    Deterministic for a fixed seed: one shuffle stream drives all batch
    permutations.  Aborts with epoch/batch diagnostics if the loss goes
    non-finite.
    """
    m = len(train_data.positions)
    if m == 0:
        raise ValueError("training set is empty")
    if cfg.batch_size > m:
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {m}")
    _tune_allocator()

    params = dict(model.named_parameters())
    optimizer = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    train_groupings = model.build_groupings(train_data.positions)
    test_groupings = model.build_groupings(test_data.positions) if test_data is not None else None

    log_rows: list[dict] = []
    final_metrics = None
    epochs_run = 0
    for epoch in range(cfg.epochs):
        optimizer.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        perm = rng.permutation(m)
        total_loss = 0.0
        correct = 0
        counted = 0
        for lo in range(0, m, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            if len(idx) < 2:
                continue  # batchnorm needs at least two rows in train mode
            g = [slice_grouping(gr, idx) for gr in train_groupings]
            optimizer.zero_grad()
            logits = model.forward(
                train_data.positions[idx], train_data.normals[idx], train=True, groupings=g
            )
            batch_loss = loss(logits, train_data.labels[idx])
            value = float(batch_loss.data)
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}"
                )
            batch_loss.backward()
            optimizer.step()
            total_loss += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == train_data.labels[idx]).sum())
            counted += len(idx)

        train_acc = correct / counted if counted else 0.0
        row = {
            "epoch": epoch,
            "lr": optimizer.lr,
            "train_loss": total_loss / counted if counted else float("nan"),
            "train_acc": train_acc,
            "test_mAcc": "",
            "test_OA": "",
        }
        if test_data is not None:
            final_metrics = evaluate(
                model, test_data.positions, test_data.normals, test_data.labels,
                groupings=test_groupings, batch=cfg.batch_size,
            )
            row["test_mAcc"] = final_metrics.mean_class_accuracy
            row["test_OA"] = final_metrics.overall_accuracy
        log_rows.append(row)
        epochs_run = epoch + 1
        if log_hook is not None:
            log_hook(row)

        if cfg.stop_train_acc is not None and train_acc >= cfg.stop_train_acc:
            if (
                cfg.stop_test_macc is None
                or final_metrics is None
                or final_metrics.mean_class_accuracy >= cfg.stop_test_macc
            ):
                break
    return TrainResult(log_rows, final_metrics, epochs_run, optimizer)


def write_log_csv(log_rows: list[dict], path: str) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in log_rows:
            fh.write(",".join(str(row[c]) for c in LOG_COLUMNS) + "\n")


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    kind = "<f8" if a.dtype == np.float64 else "<f4"
    return {
        "dtype": kind,
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a, dtype=kind).tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d["dtype"]).reshape(d["shape"]).copy()


def save_checkpoint(
    path: str,
    model: Classifier,
    optimizer: SGD | None = None,
    epoch: int = 0,
    seed: int = 0,
    train_config: TrainConfig | None = None,
    class_names: list[str] | None = None,
) -> None:
    """Single JSON document: config, parameters, buffers, optimizer state."""
    doc = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "seed": int(seed),
        "parameters": {name: _encode_array(p.data) for name, p in model.named_parameters()},
        "buffers": {name: _encode_array(b) for name, b in model.named_buffers()},
        "optimizer": None,
        "train_config": train_config.to_dict() if train_config else None,
        "class_names": list(class_names) if class_names else None,
    }
    if optimizer is not None:
        doc["optimizer"] = {
            "lr": optimizer.lr,
            "momentum": optimizer.momentum,
            "weight_decay": optimizer.weight_decay,
            "velocity": {name: _encode_array(v) for name, v in optimizer.velocity.items()},
        }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[Classifier, dict]:
    """Rebuild the model; forward in eval mode is bit-identical to save time."""
    with open(path) as fh:
        doc = json.load(fh)
    config = ModelConfig.from_dict(doc["config"])
    dtype = np.float64 if any(
        p["dtype"] == "<f8" for p in doc["parameters"].values()
    ) else np.float32
    model = Classifier(config, seed=doc.get("seed", 0), dtype=dtype)
    params = dict(model.named_parameters())
    if set(params) != set(doc["parameters"]):
        raise ValueError(f"{path}: parameter names do not match the config architecture")
    for name, p in params.items():
        arr = _decode_array(doc["parameters"][name])
        if tuple(arr.shape) != p.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        p.data = arr.astype(dtype)
    buffers = dict(model.named_buffers())
    for name, b in buffers.items():
        b[...] = _decode_array(doc["buffers"][name]).astype(b.dtype)
    return model, doc


def restore_optimizer(doc: dict, model: Classifier) -> SGD | None:
    state = doc.get("optimizer")
    if state is None:
        return None
    optimizer = SGD(
        dict(model.named_parameters()), state["lr"], state["momentum"], state["weight_decay"]
    )
    for name, v in state["velocity"].items():
        optimizer.velocity[name] = _decode_array(v).astype(model.dtype)
    return optimizer


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------

@dataclass
class CostReport:
    parameters: int
    macs: int

    @property
    def flops(self) -> int:
        return 2 * self.macs


def count_costs(config: ModelConfig) -> CostReport:
    """Closed-form parameter and multiply-accumulate counts for one forward.

    Conventions: a linear layer on T tokens costs T*(d_in*d_out + d_out)
    MACs (bias add counted), batchnorm costs 2 per element, elementwise maps
    and normalizations are counted one MAC per produced element per pass,
    ReLU/pooling/gather are free.  FLOPs are reported as 2x MACs.
    """
    def lin_p(din, dout, bias=True):
        return din * dout + (dout if bias else 0)

    def lin_m(t, din, dout, bias=True):
        return t * (din * dout + (dout if bias else 0))

    def bn_p(c):
        return 2 * c

    def bn_m(t, c):
        return 2 * t * c

    params = 0
    macs = 0
    d = config.in_width
    n = config.points
    att = config.attention
    for spec in config.modules:
        s = spec.sample_count
        if config.use_lfa:
            for widths, k in zip(spec.edge_widths, spec.ks):
                edges = s * k
                w_in = 2 * d + 3
                for w in widths:
                    params += lin_p(w_in, w) + bn_p(w)
                    macs += lin_m(edges, w_in, w) + bn_m(edges, w)
                    w_in = w
        else:
            params += lin_p(d + 3, spec.out_width) + bn_p(spec.out_width)
            macs += lin_m(s, d + 3, spec.out_width) + bn_m(s, spec.out_width)
        d = spec.out_width
        if config.use_gfl:
            params += 3 * lin_p(d, d, bias=False)
            macs += 3 * lin_m(s, d, d, bias=False)
            pairs = s * s
            if att.scalar_path:
                macs += pairs * d  # Q K^T
                macs += 2 * pairs  # scale + softmax
                macs += pairs * d  # weighted sum of values
            else:
                tau_in = 2 * d if att.operator == "concatenation" else d
                macs += 0 if att.operator == "concatenation" else pairs * d  # delta map
                params += lin_p(tau_in, d) + lin_p(d, d)
                macs += lin_m(pairs, tau_in, d) + lin_m(pairs, d, d)
                if att.position_encoding:
                    params += lin_p(3, d) + bn_p(d) + lin_p(d, d)
                    macs += lin_m(pairs, 3, d) + bn_m(pairs, d) + lin_m(pairs, d, d)
                macs += 3 * pairs * d  # softmax + l1 normalization
                macs += 2 * pairs * d  # weight-modulated value sum
            if att.mechanism == "offset":
                params += lin_p(d, d) + bn_p(d)
                macs += lin_m(s, d, d) + bn_m(s, d) + s * d  # + residual add
            elif att.mechanism in ("ascn_residual", "pa_residual"):
                macs += s * d
        n = s

    s_last = config.modules[-1].sample_count
    params += lin_p(d, config.feature_width) + bn_p(config.feature_width)
    macs += lin_m(s_last, d, config.feature_width) + bn_m(s_last, config.feature_width)
    d = config.feature_width
    for w in config.head_widths:
        params += lin_p(d, w) + bn_p(w)
        macs += lin_m(1, d, w) + bn_m(1, w)
        d = w
    params += lin_p(d, config.classes)
    macs += lin_m(1, d, config.classes)
    return CostReport(parameters=params, macs=macs)


# ---------------------------------------------------------------------------
# saliency
# ---------------------------------------------------------------------------

@dataclass
class SaliencyResult:
    scores: np.ndarray  # (N,) in [0, 1]
    center_scores: np.ndarray  # (S2,)
    degenerate: bool


def saliency(model: Classifier, positions: np.ndarray, normals: np.ndarray,
             target_class: int) -> SaliencyResult:
    """Gradient x activation attribution of one class logit to input points.

    The target logit's gradient with respect to the pre-pool per-token
    features is folded with the features themselves, ReLU-rectified, and
    propagated to input points by nearest-center assignment, then scaled to
    [0, 1].  An all-zero map is flagged as degenerate.
    """
    if not 0 <= target_class < model.config.classes:
        raise ValueError(f"class {target_class} outside [0, {model.config.classes})")
    logits, extras = model.forward(
        positions[None], normals[None], train=False, collect=True
    )
    flat = reshape(logits, (model.config.classes,))
    picked = sum_reduce(ad.gather(flat, [target_class]))
    picked.backward()
    prepool = extras["prepool"]
    if prepool.grad is None:
        raise RuntimeError("no gradient reached the pre-pool features")
    g = prepool.grad[0].astype(np.float64)
    f = prepool.data[0].astype(np.float64)
    center_scores = np.maximum((g * f).sum(axis=1), 0.0)

    centers = extras["centers"][0]  # (S2, 3)
    diff = positions[:, None, :] - centers[None, :, :]
    assign = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
    scores = center_scores[assign]
    peak = scores.max()
    if peak <= 0.0:
        return SaliencyResult(np.zeros(len(positions)), center_scores, True)
    return SaliencyResult(scores / peak, center_scores, False)
