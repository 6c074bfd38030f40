"""Contrastive pretraining with iterative partition-based invariance.

The unlabeled set is repeatedly split into two subsets by a partition
matrix. Each subset contributes a contrastive loss over two augmented
views plus an invariance penalty: the squared derivative of that loss
with respect to a dummy scalar theta multiplying the similarities,
evaluated at theta = 1. Training minimizes loss + lambda1 * penalty
summed over all retained partitions; the partition search maximizes
loss + lambda2 * penalty over candidate partitions with the encoder
frozen. Plain SimCLR is the degenerate run: only the trivial all-in-one
partition, lambda1 = 0, and no searches.

The theta-derivative has a closed form in the pairwise similarities,

    dL/dtheta = sum_i (E_{p_i}[s] - s_pos_i) / tau,

with p_i the softmax over sample i's denominator terms, so the penalty
is an ordinary first-order expression and never needs second-order
autodiff.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Graph, SeededRng, Var, backward, concat, forward_eval
from .core.graph import softmax as graph_softmax
from .encoder import EncoderConfig, bind_params, conv_stack, init_params, project_head
from .imageops import resize_bilinear
from .optim import ScheduleConfig, lr_from_batch, schedule_lr, sgd_step

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.6, 1.0)  # area fraction of the square crop
    gain: tuple[float, float] = (0.8, 1.2)
    bias: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self) -> None:
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad crop scale range {self.crop_scale}")
        if hi > 1.0:
            raise ValueError("crop larger than the image is not supported")


IDENTITY_AUGMENT = AugmentConfig(crop_scale=(1.0, 1.0), gain=(1.0, 1.0), bias=(0.0, 0.0))


def augment_views(images: np.ndarray, config: AugmentConfig, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Two stochastic views per image: random resized crop + intensity jitter.

    Deterministic given (config, rng); the identity config returns exact
    copies of the input in both views.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"expected a nonempty (B, H, W, C) batch, got shape {images.shape}")
    b, h, w, c = images.shape
    if c != 1:
        raise ValueError("augmentation supports single-channel images")
    gen = rng.generator()
    views = []
    for _view in range(2):
        out = np.empty_like(images)
        for i in range(b):
            scale = gen.uniform(*config.crop_scale)
            side = int(round(np.sqrt(scale) * min(h, w)))
            side = max(1, min(side, min(h, w)))
            top = int(gen.integers(0, h - side + 1))
            left = int(gen.integers(0, w - side + 1))
            patch = images[i, top : top + side, left : left + side, 0]
            resized = resize_bilinear(patch, h, w)
            gain = gen.uniform(*config.gain)
            bias = gen.uniform(*config.bias)
            out[i, :, :, 0] = resized * gain + bias
        views.append(out)
    return views[0], views[1]


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class PartitionMatrix:
    """n x 2 one-hot assignment of samples to two subsets."""

    assignments: np.ndarray

    def __post_init__(self) -> None:
        a = self.assignments
        if a.ndim != 2 or a.shape[1] != 2:
            raise ValueError(f"partition matrix must be (n, 2), got {a.shape}")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("partition entries must be 0/1")
        if not np.all(a.sum(axis=1) == 1):
            raise ValueError("every row must be one-hot")

    @classmethod
    def trivial(cls, n: int) -> "PartitionMatrix":
        a = np.zeros((n, 2), dtype=np.int8)
        a[:, 0] = 1
        return cls(a)

    @classmethod
    def from_mask(cls, in_first: np.ndarray) -> "PartitionMatrix":
        in_first = np.asarray(in_first, dtype=bool)
        a = np.zeros((in_first.shape[0], 2), dtype=np.int8)
        a[in_first, 0] = 1
        a[~in_first, 1] = 1
        return cls(a)

    @property
    def n(self) -> int:
        return self.assignments.shape[0]

    def subset_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments[:, k] == 1)

    def is_degenerate(self) -> bool:
        return self.subset_indices(0).size == 0 or self.subset_indices(1).size == 0


class PartitionSet:
    """Ordered, strictly growing list of partitions; starts trivial."""

    def __init__(self, n: int):
        self.partitions: list[PartitionMatrix] = [PartitionMatrix.trivial(n)]
        self.n = n

    def append(self, partition: PartitionMatrix) -> None:
        if partition.n != self.n:
            raise ValueError(f"partition over {partition.n} samples, set covers {self.n}")
        self.partitions.append(partition)

    def __len__(self) -> int:
        return len(self.partitions)

    def __iter__(self):
        return iter(self.partitions)


@dataclass(frozen=True)
class IpIrmConfig:
    lambda1: float = 0.2
    lambda2: float = 0.5
    tau: float = 0.5
    outer_iterations: int = 3
    partition_steps: int = 40
    partition_restarts: int = 2
    partition_lr: float = 2.0
    tolerance: float = 1e-3
    epochs_per_iter: int = 6
    batch_size: int = 32
    weight_decay: float = 1e-4
    base_lr: float | None = 1e-3  # batch-size rule when None
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.partition_steps <= 0 or self.partition_restarts <= 0:
            raise ValueError("partition search budget must be positive")


@dataclass(frozen=True)
class SslBatch:
    """Index-aligned projection batches for the two views, plus subset ids."""

    view_a: np.ndarray  # (B, p) unit rows
    view_b: np.ndarray  # (B, p)
    subset_ids: np.ndarray  # (B,) values in {0, 1}

    def __post_init__(self) -> None:
        if self.view_a.shape != self.view_b.shape:
            raise ValueError("views must be index-aligned with equal shapes")
        if self.subset_ids.shape[0] != self.view_a.shape[0]:
            raise ValueError("subset ids must cover the batch")


def _denominator_columns(size: int) -> np.ndarray:
    """Per-row column picks into [S_aa | S_ab]: every column except own aa diagonal."""
    cols = np.empty((size, 2 * size - 1), dtype=np.int64)
    for i in range(size):
        cols[i] = np.concatenate([np.delete(np.arange(size), i), size + np.arange(size)])
    return cols


def contrastive_loss(batch: SslBatch, k: int, theta: float, tau: float) -> float:
    """Subsetwise two-view contrastive loss with dummy scalar theta.

    Every member's positive is its own other-view embedding; the
    denominator runs over the member's subset companions in view A plus
    the whole subset in view B, excluding only the member itself.
    """
    if not np.isfinite(theta):
        raise ValueError("theta must be finite")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    members = np.flatnonzero(batch.subset_ids == k)
    if members.size == 0:
        raise ValueError(f"subset {k} is empty (degenerate partition)")
    za = batch.view_a[members].astype(np.float64)
    zb = batch.view_b[members].astype(np.float64)
    s = members.size
    s_ab = za @ zb.T
    terms = np.concatenate([za @ za.T, s_ab], axis=1)[np.arange(s)[:, None], _denominator_columns(s)]
    x = terms * (theta / tau)
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    x_pos = np.diag(s_ab) * (theta / tau)
    return float(np.sum(lse - x_pos))


def theta_grad(batch: SslBatch, k: int, tau: float, theta: float = 1.0) -> float:
    """Closed-form dL/dtheta of the subset loss at the given theta."""
    members = np.flatnonzero(batch.subset_ids == k)
    if members.size == 0:
        raise ValueError(f"subset {k} is empty (degenerate partition)")
    za = batch.view_a[members].astype(np.float64)
    zb = batch.view_b[members].astype(np.float64)
    s = members.size
    s_ab = za @ zb.T
    terms = np.concatenate([za @ za.T, s_ab], axis=1)[np.arange(s)[:, None], _denominator_columns(s)]
    x = terms * (theta / tau)
    x = x - x.max(axis=1, keepdims=True)
    p = np.exp(x)
    p /= p.sum(axis=1, keepdims=True)
    expected = (p * terms).sum(axis=1)
    return float(np.sum(expected - np.diag(s_ab)) / tau)


def irm_penalty(batch: SslBatch, k: int, tau: float) -> float:
    """(dL/dtheta at theta = 1)^2; nonnegative, zero iff the derivative is."""
    g = theta_grad(batch, k, tau, theta=1.0)
    return g * g


def _subset_terms_graph(g: Graph, za: Var, zb: Var, members: np.ndarray, tau: float) -> tuple[Var, Var]:
    """Graph nodes for (loss, penalty) of one subset at theta = 1."""
    s = members.size
    za_k = za.gather(members)
    zb_k = zb.gather(members)
    s_ab = za_k @ zb_k.transpose((1, 0))
    s_aa = za_k @ za_k.transpose((1, 0))
    both = concat([s_aa, s_ab], axis=1)  # (s, 2s)
    cols = _denominator_columns(s)
    flat_idx = (np.arange(s)[:, None] * 2 * s + cols).ravel()
    terms = both.reshape((s * 2 * s,)).gather(flat_idx).reshape((s, 2 * s - 1))
    x = terms * (1.0 / tau)
    lse = x.logsumexp(axis=1)
    eye = g.constant(np.eye(s))
    s_pos = (s_ab * eye).sum(axis=1)
    loss = (lse - s_pos * (1.0 / tau)).sum()
    p = graph_softmax(x, axis=1)
    expected = (p * terms).sum(axis=1)
    grad_theta = (expected - s_pos).sum() * (1.0 / tau)
    penalty = grad_theta * grad_theta
    return loss, penalty


# ---------------------------------------------------------------------------
# representation update (Eq.-style objective over the partition set)


@dataclass
class TraceRow:
    step: int
    partition_count: int
    loss: float
    penalty: float
    lr: float


def _embed_batch_graph(
    g: Graph, images_nchw: np.ndarray, params: dict[str, np.ndarray], enc_cfg: EncoderConfig
) -> tuple[dict[str, Var], Var]:
    refs = bind_params(g, params)
    x = g.input("images", images_nchw.shape)
    fm = conv_stack(g, x, refs, enc_cfg)
    z = project_head(g, fm, refs, enc_cfg)
    return refs, z


def update_representation(
    params: dict[str, np.ndarray],
    enc_cfg: EncoderConfig,
    partitions: PartitionSet,
    batch_stream,
    config: IpIrmConfig,
    lr: float,
    lambda1: float,
    step_offset: int = 0,
) -> list[TraceRow]:
    """One optimizer step per batch on sum over partitions and subsets of
    loss + lambda1 * penalty. Degenerate subset terms are skipped and logged.

    `batch_stream` yields (sample_indices, view_a, view_b) with views as
    (B, H, W, C) image batches. Mutates `params`; returns trace rows.
    """
    trace: list[TraceRow] = []
    step = step_offset
    for indices, view_a, view_b in batch_stream:
        nchw = np.concatenate(
            [np.transpose(view_a, (0, 3, 1, 2)), np.transpose(view_b, (0, 3, 1, 2))], axis=0
        ).astype(params["conv0_w"].dtype)
        bsz = view_a.shape[0]
        g = Graph()
        refs, z = _embed_batch_graph(g, nchw, params, enc_cfg)
        za = z.gather(np.arange(bsz))
        zb = z.gather(np.arange(bsz, 2 * bsz))

        total = None
        loss_val_nodes: list[Var] = []
        pen_val_nodes: list[Var] = []
        for p_idx, partition in enumerate(partitions):
            batch_cols = partition.assignments[indices]
            for k in (0, 1):
                members = np.flatnonzero(batch_cols[:, k] == 1)
                if members.size == 0:
                    log.debug("step %d: partition %d subset %d empty on this batch, skipped", step, p_idx, k)
                    continue
                loss_node, pen_node = _subset_terms_graph(g, za, zb, members, config.tau)
                term = loss_node + lambda1 * pen_node
                total = term if total is None else total + term
                loss_val_nodes.append(loss_node)
                pen_val_nodes.append(pen_node)
        if total is None:
            raise ValueError("every partition degenerate on this batch; nothing to optimize")

        forward_eval(g, {"images": nchw})
        loss_sum = float(sum(n.value for n in loss_val_nodes))
        pen_sum = float(sum(n.value for n in pen_val_nodes))
        obj = float(total.value)
        if not np.isfinite(obj):
            raise FloatingPointError(
                f"non-finite pretraining objective at step {step}: loss={loss_sum}, penalty={pen_sum}"
            )
        grads = backward(g, total)
        sgd_step(params, grads, lr=lr, weight_decay=config.weight_decay)
        trace.append(TraceRow(step, len(partitions), loss_sum, pen_sum, lr))
        step += 1
    return trace


# ---------------------------------------------------------------------------
# partition search


def eval_partition_objective(
    za: np.ndarray, zb: np.ndarray, in_first: np.ndarray, lambda2: float, tau: float
) -> float:
    """Hard objective of a candidate partition: sum over both subsets of
    contrastive loss + lambda2 * penalty. Degenerate partitions are invalid."""
    in_first = np.asarray(in_first, dtype=bool)
    ids = np.where(in_first, 0, 1)
    batch = SslBatch(view_a=za, view_b=zb, subset_ids=ids)
    total = 0.0
    for k in (0, 1):
        total += contrastive_loss(batch, k, theta=1.0, tau=tau)
        total += lambda2 * irm_penalty(batch, k, tau)
    return total


def find_partition_embeddings(
    za: np.ndarray, zb: np.ndarray, config: IpIrmConfig, rng: SeededRng
) -> PartitionMatrix:
    """Search for the partition maximizing the subset objective.

    Per-sample logits are optimized by gradient ascent on a soft relaxation
    with the embeddings fixed, hardened by thresholding (ties to the first
    subset); the best hardened candidate across restarts wins by the exact
    hard objective. The relaxation uses membership-weighted per-subset
    means: the summed form grows with subset size, so its unconstrained
    maximum is the degenerate all-in-one corner, while the mean form keeps
    the ascent inside the valid region. All-degenerate outcomes error.
    """
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    n = za.shape[0]
    if n < 2:
        raise ValueError("partition search needs at least 2 samples")

    s_ab = za @ zb.T
    all_cols = _denominator_columns(n)
    # row i of [S_aa | S_ab] restricted to its denominator columns
    T = np.concatenate([za @ za.T, s_ab], axis=1)[np.arange(n)[:, None], all_cols]
    expT = np.exp(T / config.tau)
    s_pos = np.diag(s_ab)
    # source sample index of each denominator column (for membership weights)
    src = np.where(all_cols < n, all_cols, all_cols - n)

    best_obj = -np.inf
    best_mask: np.ndarray | None = None
    for restart in range(config.partition_restarts):
        gen = rng.child(restart).generator()
        logits_val = gen.normal(size=n) * 0.5
        g = Graph()
        logits = g.parameter("logits", logits_val)
        w1 = logits.sigmoid()
        w2 = 1.0 - w1
        obj = None
        for w in (w1, w2):
            w_cols = w.gather(src.ravel()).reshape((n, 2 * n - 1))
            weighted = w_cols * g.constant(expT)
            den = weighted.sum(axis=1)
            per_sample = den.log() - g.constant(s_pos / config.tau)
            mass = w.sum() + 1e-9
            loss = (w * per_sample).sum() / mass
            expected = (w_cols * g.constant(expT * T)).sum(axis=1) / den
            grad_theta = ((w * (expected - g.constant(s_pos))).sum() / mass) * (1.0 / config.tau)
            term = loss + config.lambda2 * grad_theta * grad_theta
            obj = term if obj is None else obj + term
        for _ in range(config.partition_steps):
            forward_eval(g)
            grads = backward(g, obj)
            logits_val += config.partition_lr * grads["logits"]
            # sigmoid saturates far earlier; keeps the weighted denominators > 0
            np.clip(logits_val, -30.0, 30.0, out=logits_val)
        in_first = 1.0 / (1.0 + np.exp(-logits_val)) >= 0.5
        if in_first.all() or (~in_first).all():
            # salvage instead of discarding: move the least-committed sample
            # across so tie-like instances still yield a valid partition
            flip = int(np.argmin(np.abs(logits_val)))
            in_first[flip] = not in_first[flip]
            log.debug("partition restart %d hardened degenerate; flipped sample %d", restart, flip)
        hard_obj = eval_partition_objective(za, zb, in_first, config.lambda2, config.tau)
        if hard_obj > best_obj:
            best_obj = hard_obj
            best_mask = in_first
    if best_mask is None:
        raise ValueError("all candidate partitions degenerate")
    return PartitionMatrix.from_mask(best_mask)


# ---------------------------------------------------------------------------
# pretraining driver


def _embed_dataset(images: np.ndarray, params: dict[str, np.ndarray], enc_cfg: EncoderConfig) -> np.ndarray:
    nchw = np.transpose(images, (0, 3, 1, 2)).astype(params["conv0_w"].dtype)
    g = Graph()
    refs = bind_params(g, params)
    x = g.input("images", nchw.shape)
    z = project_head(g, conv_stack(g, x, refs, enc_cfg), refs, enc_cfg)
    g.mark_output("z", z)
    return forward_eval(g, {"images": nchw})["z"]


PRETRAIN_MODES = ("simclr", "ipirm")


def pretrain(
    mode: str,
    images: np.ndarray,
    config: IpIrmConfig,
    enc_cfg: EncoderConfig,
    rng: SeededRng,
    dtype=np.float32,
) -> tuple[dict[str, np.ndarray], PartitionSet, list[TraceRow]]:
    """Full pretraining: a training phase, then (search + train) rounds.

    simclr mode forces lambda1 = 0 and zero search rounds, which is exactly
    the ipirm path restricted to the trivial partition. Returns the trained
    params, the grown partition set, and the per-step trace.
    """
    if mode not in PRETRAIN_MODES:
        raise ValueError(f"unknown pretrain mode {mode!r}")
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise ValueError("empty pretraining dataset")
    n = images.shape[0]

    lambda1 = 0.0 if mode == "simclr" else config.lambda1
    n_outer = 0 if mode == "simclr" else config.outer_iterations
    base_lr = config.base_lr if config.base_lr is not None else lr_from_batch(config.batch_size)
    total_epochs = (n_outer + 1) * config.epochs_per_iter
    sched = ScheduleConfig(kind="cosine", base_lr=base_lr, total_epochs=total_epochs)

    params = init_params(enc_cfg, rng.child(0), dtype=dtype)
    partitions = PartitionSet(n)
    trace: list[TraceRow] = []
    epoch = 0
    step = 0

    def batches(epoch_idx: int):
        order = rng.child(10_000 + epoch_idx).generator().permutation(n)
        for b_start in range(0, n, config.batch_size):
            idx = order[b_start : b_start + config.batch_size]
            if idx.size < 2:
                continue  # a 1-sample tail cannot form a contrastive term
            va, vb = augment_views(
                images[idx], config.augment, rng.child(20_000 + epoch_idx).child(b_start)
            )
            yield idx, va, vb

    def train_phase() -> float:
        nonlocal epoch, step
        phase_obj = 0.0
        phase_steps = 0
        for _ in range(config.epochs_per_iter):
            lr = schedule_lr(sched, epoch)
            rows = update_representation(
                params, enc_cfg, partitions, batches(epoch), config, lr, lambda1, step_offset=step
            )
            trace.extend(rows)
            step += len(rows)
            phase_obj += sum(r.loss + lambda1 * r.penalty for r in rows)
            phase_steps += len(rows)
            epoch += 1
        return phase_obj / max(1, phase_steps)

    prev_obj = train_phase()
    for outer in range(n_outer):
        va, vb = augment_views(images, config.augment, rng.child(30_000 + outer))
        za = _embed_dataset(va, params, enc_cfg)
        zb = _embed_dataset(vb, params, enc_cfg)
        partition = find_partition_embeddings(za, zb, config, rng.child(40_000 + outer))
        partitions.append(partition)
        cur_obj = train_phase()
        rel_change = abs(cur_obj - prev_obj) / max(1.0, abs(prev_obj))
        if rel_change < config.tolerance:
            log.info("pretrain converged after %d searches (relative change %.2e)", outer + 1, rel_change)
            break
        prev_obj = cur_obj
    return params, partitions, trace


def write_trace_csv(path: str, trace: list[TraceRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("iter,partition_count,loss,penalty,lr\n")
        for row in trace:
            f.write(f"{row.step},{row.partition_count},{row.loss:.10g},{row.penalty:.10g},{row.lr:.10g}\n")
