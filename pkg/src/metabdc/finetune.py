"""Labeled-phase training loops.

Three loops share the conv backbone:

  * episodic meta fine-tuning: N-way K-shot episodes scored through the
    distance-matrix head, cross-entropy over episode logits by default
    with a per-way AUC-margin option,
  * fully supervised training: one-vs-rest AUC-margin objective with
    independent per-class centers and duals, optimized by the
    saddle-point stepper,
  * plain cross-entropy supervised training, used to build the labeled
    proxy initialization.

None of these loops augments its inputs; episodes and batches are drawn
straight from the preprocessed images. Model selection is by mean
validation AUROC after each epoch against a fixed validation set, the
earliest best epoch winning ties.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bdc import METRICS, bdc_matrix, bdc_matrix_graph, class_prototypes, episode_classify, episode_scores_graph
from .core import Graph, SeededRng, backward, forward_eval
from .data import Episode, EpisodeSpec, LabeledImage, label_of, sample_episode
from .encoder import EncoderConfig, bind_params, classify, classify_head, conv_stack, encode, init_classifier
from .metrics import auroc_multiclass_ovr
from .optim import PesgConfig, PesgState, ScheduleConfig, aucm_loss_graph, pesg_step, schedule_lr, sgd_step

log = logging.getLogger(__name__)

EPISODE_LOSSES = ("ce", "aucm")


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 3e-3
    weight_decay: float = 1e-4
    epochs: int = 4
    decay_epochs: tuple[int, ...] = (3,)
    episodes_per_epoch: int = 90
    val_episodes: int = 60
    loss: str = "ce"
    metric: str = "neg_sq_distance"
    temperature: float = 1.0
    aucm_margin: float = 1.0
    batch_size: int = 32  # fully supervised minibatches
    proximal: float = 0.0  # fully supervised anchor pull

    def __post_init__(self) -> None:
        if self.loss not in EPISODE_LOSSES:
            raise ValueError(f"unknown episode loss {self.loss!r}; expected one of {EPISODE_LOSSES}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.lr <= 0 or self.temperature <= 0 or self.aucm_margin <= 0:
            raise ValueError("lr, temperature, and margin must be positive")
        if self.epochs <= 0 or self.episodes_per_epoch <= 0 or self.val_episodes <= 0:
            raise ValueError("epochs and episode counts must be positive")
        if self.batch_size < 2:
            raise ValueError("supervised batch size must be at least 2")


@dataclass
class FinetuneResult:
    params: dict[str, np.ndarray]
    best_epoch: int
    val_history: list[float]


def _nchw(images: list[LabeledImage], enc_cfg: EncoderConfig, dtype) -> np.ndarray:
    batch = np.stack([im.pixels for im in images])
    expected = (enc_cfg.height, enc_cfg.width, enc_cfg.channels)
    if batch.shape[1:] != expected:
        raise ValueError(f"images are {batch.shape[1:]}, encoder expects {expected}")
    return np.transpose(batch, (0, 3, 1, 2)).astype(dtype)


def _episode_label_indices(episode: Episode) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(episode.class_list)}
    return np.array([lookup[label_of(q, episode.label_space)] for q in episode.query])


# ---------------------------------------------------------------------------
# forward-only episode evaluation


def episode_scores(
    params: dict[str, np.ndarray],
    enc_cfg: EncoderConfig,
    episode: Episode,
    metric: str = "neg_sq_distance",
    temperature: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw (Q, N) scores plus query label indices in class-list order."""
    sup = np.stack([im.pixels for im in episode.support])
    qry = np.stack([im.pixels for im in episode.query])
    sup_mats = [bdc_matrix(fm) for fm in encode(sup, enc_cfg, params)]
    qry_mats = [bdc_matrix(fm) for fm in encode(qry, enc_cfg, params)]
    # support is class-major, so way index i is the label of block i
    sup_labels = np.repeat(np.arange(episode.n_way), episode.k_shot)
    protos = class_prototypes(sup_mats, sup_labels)
    logits = episode_classify(qry_mats, protos, metric=metric, temperature=temperature)
    return logits.scores, _episode_label_indices(episode)


def evaluate_episode(
    params: dict[str, np.ndarray],
    enc_cfg: EncoderConfig,
    episode: Episode,
    metric: str = "neg_sq_distance",
    temperature: float = 1.0,
) -> float:
    scores, labels = episode_scores(params, enc_cfg, episode, metric, temperature)
    return auroc_multiclass_ovr(scores, labels)


def evaluate_episodes(
    params: dict[str, np.ndarray],
    enc_cfg: EncoderConfig,
    episodes: list[Episode],
    metric: str = "neg_sq_distance",
    temperature: float = 1.0,
) -> list[float]:
    return [evaluate_episode(params, enc_cfg, ep, metric, temperature) for ep in episodes]


def sample_episode_block(
    images: list[LabeledImage], spec: EpisodeSpec, count: int, rng: SeededRng
) -> list[Episode]:
    return [sample_episode(images, spec, rng.child(i)) for i in range(count)]


# ---------------------------------------------------------------------------
# episodic meta fine-tuning


def _episode_loss_graph(
    g: Graph,
    refs: dict,
    enc_cfg: EncoderConfig,
    episode: Episode,
    config: FinetuneConfig,
    sup_shape,
    qry_shape,
):
    sup = g.input("sup", sup_shape)
    qry = g.input("qry", qry_shape)
    d = enc_cfg.feature_dim
    bdc_s = bdc_matrix_graph(g, conv_stack(g, sup, refs, enc_cfg), d)
    bdc_q = bdc_matrix_graph(g, conv_stack(g, qry, refs, enc_cfg), d)
    scores = episode_scores_graph(g, bdc_s, bdc_q, episode.n_way, episode.k_shot, d, config.metric)
    z = scores * (1.0 / config.temperature)
    labels = _episode_label_indices(episode)
    if config.loss == "ce":
        onehot = g.constant(np.eye(episode.n_way)[labels])
        return (z.logsumexp(axis=1) - (z * onehot).sum(axis=1)).mean()
    # per-way AUC-margin: way k scored by column k against a one-vs-rest split;
    # every way holds exactly q_query positives, so the positive rate is 1/N
    total = None
    for way in range(episode.n_way):
        col = (z * g.constant(np.eye(episode.n_way)[way])).sum(axis=1)
        term = aucm_loss_graph(
            g,
            col,
            (labels == way).astype(np.int64),
            refs[f"ep_a{way}"],
            refs[f"ep_b{way}"],
            refs[f"ep_alpha{way}"],
            margin=config.aucm_margin,
            p_hat=1.0 / episode.n_way,
        )
        total = term if total is None else total + term
    return total


def meta_finetune(
    params: dict[str, np.ndarray],
    enc_cfg: EncoderConfig,
    train_images: list[LabeledImage],
    val_images: list[LabeledImage],
    train_spec: EpisodeSpec,
    val_spec: EpisodeSpec,
    config: FinetuneConfig,
    rng: SeededRng,
) -> FinetuneResult:
    """Episodic fine-tuning of the conv backbone from a pretrained start.

    Only conv parameters move; projection weights ride along untouched.
    The validation episode set is sampled once up front so per-epoch
    selection scores are comparable. Input params are not mutated.
    """
    params = {k: v.copy() for k, v in params.items()}
    trainable = {k: v for k, v in params.items() if k.startswith("conv")}
    step_params = dict(trainable)
    dtype = params["conv0_w"].dtype

    use_aucm = config.loss == "aucm"
    state = None
    pesg_cfg = None
    if use_aucm:
        for way in range(train_spec.n_way):
            step_params[f"ep_a{way}"] = np.zeros(1)
            step_params[f"ep_b{way}"] = np.zeros(1)
            step_params[f"ep_alpha{way}"] = np.zeros(1)
        pesg_cfg = PesgConfig(
            lr=config.lr,
            weight_decay=config.weight_decay,
            proximal=config.proximal,
            decay_epochs=config.decay_epochs,
        )
        state = PesgState(
            center_names=tuple(
                n for way in range(train_spec.n_way) for n in (f"ep_a{way}", f"ep_b{way}")
            ),
            dual_names=tuple(f"ep_alpha{way}" for way in range(train_spec.n_way)),
        )

    val_episodes = sample_episode_block(val_images, val_spec, config.val_episodes, rng.child(2_000_000))
    sched = ScheduleConfig("step", config.lr, config.epochs, config.decay_epochs)

    best_params = {k: v.copy() for k, v in params.items()}
    best_score = -np.inf
    best_epoch = -1
    history: list[float] = []
    for epoch in range(config.epochs):
        lr = schedule_lr(sched, epoch)
        if use_aucm:
            state.start_epoch(step_params, epoch, pesg_cfg)
        epoch_rng = rng.child(1_000_000 + epoch)
        for e_idx in range(config.episodes_per_epoch):
            episode = sample_episode(train_images, train_spec, epoch_rng.child(e_idx))
            sup = _nchw(list(episode.support), enc_cfg, dtype)
            qry = _nchw(list(episode.query), enc_cfg, dtype)
            g = Graph()
            refs = bind_params(g, step_params)
            loss = _episode_loss_graph(g, refs, enc_cfg, episode, config, sup.shape, qry.shape)
            forward_eval(g, {"sup": sup, "qry": qry})
            if not np.isfinite(float(loss.value)):
                raise FloatingPointError(f"non-finite episode loss at epoch {epoch}, episode {e_idx}")
            grads = backward(g, loss)
            if use_aucm:
                pesg_step(step_params, grads, state, pesg_cfg, lr=lr)
            else:
                sgd_step(trainable, grads, lr=lr, weight_decay=config.weight_decay)
        score = float(np.mean(evaluate_episodes(params, enc_cfg, val_episodes, config.metric, config.temperature)))
        history.append(score)
        log.debug("meta epoch %d: lr %.4g val auroc %.4f", epoch, lr, score)
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
    return FinetuneResult(best_params, best_epoch, history)


# ---------------------------------------------------------------------------
# supervised loops


def classifier_scores(
    params: dict[str, np.ndarray], enc_cfg: EncoderConfig, images: list[LabeledImage]
) -> np.ndarray:
    """(B, n_classes) raw scores for a labeled image list."""
    batch = np.stack([im.pixels for im in images])
    return np.stack([classify(fm, params) for fm in encode(batch, enc_cfg, params)])


def _class_counts(labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes)
    if counts.min() == 0:
        raise ValueError(f"class {int(counts.argmin())} absent from the training labels")
    return counts


def supervised_pretrain_ce(
    params: dict[str, np.ndarray],
    enc_cfg: EncoderConfig,
    images: list[LabeledImage],
    label_space: str,
    n_classes: int,
    epochs: int,
    batch_size: int,
    lr: float,
    weight_decay: float,
    rng: SeededRng,
) -> dict[str, np.ndarray]:
    """Cross-entropy training of conv backbone + a throwaway linear head.

    Returns the params dict with trained conv weights; the head is
    dropped because only the backbone is carried downstream.
    """
    if batch_size < 2 or epochs <= 0:
        raise ValueError("need a positive epoch count and batches of at least 2")
    params = {k: v.copy() for k, v in params.items()}
    labels = np.array([label_of(im, label_space) for im in images])
    _class_counts(labels, n_classes)
    dtype = params["conv0_w"].dtype
    cls = init_classifier(enc_cfg, n_classes, rng.child(1), dtype=dtype)
    step_params = {k: v for k, v in params.items() if k.startswith("conv")}
    step_params.update(cls)
    all_nchw = _nchw(images, enc_cfg, dtype)
    sched = ScheduleConfig("cosine", lr, epochs)
    for epoch in range(epochs):
        cur_lr = schedule_lr(sched, epoch)
        order = rng.child(10_000 + epoch).generator().permutation(len(images))
        for start in range(0, len(images), batch_size):
            idx = order[start : start + batch_size]
            if idx.size < 2:
                continue
            g = Graph()
            refs = bind_params(g, step_params)
            x = g.input("x", (idx.size,) + all_nchw.shape[1:])
            z = classify_head(g, conv_stack(g, x, refs, enc_cfg), refs)
            onehot = g.constant(np.eye(n_classes)[labels[idx]])
            loss = (z.logsumexp(axis=1) - (z * onehot).sum(axis=1)).mean()
            forward_eval(g, {"x": all_nchw[idx]})
            if not np.isfinite(float(loss.value)):
                raise FloatingPointError(f"non-finite proxy loss at epoch {epoch}")
            grads = backward(g, loss)
            sgd_step(step_params, grads, lr=cur_lr, weight_decay=weight_decay)
    return params


def supervised_finetune(
    params: dict[str, np.ndarray],
    enc_cfg: EncoderConfig,
    train_images: list[LabeledImage],
    val_images: list[LabeledImage],
    label_space: str,
    n_classes: int,
    config: FinetuneConfig,
    rng: SeededRng,
) -> FinetuneResult:
    """Whole-split training with the one-vs-rest AUC-margin objective.

    Each class gets its own (a, b, alpha) triple; positive rates are
    estimated once from the training labels. Selection is by whole-split
    validation AUROC per epoch. Returned params include the scoring head.
    """
    params = {k: v.copy() for k, v in params.items()}
    labels = np.array([label_of(im, label_space) for im in train_images])
    counts = _class_counts(labels, n_classes)
    p_hat = counts / counts.sum()
    dtype = params["conv0_w"].dtype
    params.update(init_classifier(enc_cfg, n_classes, rng.child(1), dtype=dtype))

    step_params = {k: v for k, v in params.items() if k.startswith(("conv", "cls"))}
    for k in range(n_classes):
        step_params[f"aucm_a{k}"] = np.zeros(1)
        step_params[f"aucm_b{k}"] = np.zeros(1)
        step_params[f"aucm_alpha{k}"] = np.zeros(1)
    pesg_cfg = PesgConfig(
        lr=config.lr,
        weight_decay=config.weight_decay,
        proximal=config.proximal,
        decay_epochs=config.decay_epochs,
    )
    state = PesgState(
        center_names=tuple(n for k in range(n_classes) for n in (f"aucm_a{k}", f"aucm_b{k}")),
        dual_names=tuple(f"aucm_alpha{k}" for k in range(n_classes)),
    )

    all_nchw = _nchw(train_images, enc_cfg, dtype)
    val_labels = np.array([label_of(im, label_space) for im in val_images])
    sched = ScheduleConfig("step", config.lr, config.epochs, config.decay_epochs)

    best_params = {k: v.copy() for k, v in params.items()}
    best_score = -np.inf
    best_epoch = -1
    history: list[float] = []
    for epoch in range(config.epochs):
        lr = schedule_lr(sched, epoch)
        state.start_epoch(step_params, epoch, pesg_cfg)
        order = rng.child(10_000 + epoch).generator().permutation(len(train_images))
        for start in range(0, len(train_images), config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue
            batch_labels = labels[idx]
            g = Graph()
            refs = bind_params(g, step_params)
            x = g.input("x", (idx.size,) + all_nchw.shape[1:])
            z = classify_head(g, conv_stack(g, x, refs, enc_cfg), refs)
            total = None
            for k in range(n_classes):
                col = (z * g.constant(np.eye(n_classes)[k])).sum(axis=1)
                term = aucm_loss_graph(
                    g,
                    col,
                    (batch_labels == k).astype(np.int64),
                    refs[f"aucm_a{k}"],
                    refs[f"aucm_b{k}"],
                    refs[f"aucm_alpha{k}"],
                    margin=config.aucm_margin,
                    p_hat=float(p_hat[k]),
                )
                total = term if total is None else total + term
            forward_eval(g, {"x": all_nchw[idx]})
            if not np.isfinite(float(total.value)):
                raise FloatingPointError(f"non-finite supervised loss at epoch {epoch}")
            grads = backward(g, total)
            pesg_step(step_params, grads, state, pesg_cfg, lr=lr)
        score = auroc_multiclass_ovr(classifier_scores(params, enc_cfg, val_images), val_labels)
        history.append(score)
        log.debug("supervised epoch %d: lr %.4g val auroc %.4f", epoch, lr, score)
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
    return FinetuneResult(best_params, best_epoch, history)
