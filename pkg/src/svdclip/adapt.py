"""Training: contrastive pretraining, singular-value few-shot adaptation, evaluation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .clip_core import (
    DualEncoderModel,
    backward_images,
    backward_texts,
    encode_images,
    encode_texts,
    predict,
)
from .errors import ConfigError, InputError, ShapeError, UsageError
from .linalg import make_rng, softmax_rows
from .persistence import RECORD_MAGIC, read_container, write_container
from .svd_param import RankMaskSpec

log = logging.getLogger(__name__)

MAX_LOGIT_SCALE = math.log(100.0)


# ------------------------------------------------------------------ AdamW


@dataclass
class AdamWState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adamw_step(state: AdamWState, params, grads, mask=None) -> np.ndarray:
    """One AdamW update of a flat parameter vector; returns the new vector.

    Decay is decoupled (``theta -= lr * wd * theta``). Coordinates with
    ``mask == False`` are copied through untouched: no moment, no decay.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.ndim != 1:
        raise ShapeError(f"params {params.shape} and grads {grads.shape} must be equal-length vectors")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ShapeError(f"optimizer state has length {state.m.shape[0]}, params {params.shape[0]}")
    live = np.ones(params.shape, bool) if mask is None else np.asarray(mask, bool)
    state.step += 1
    t = state.step
    g = np.where(live, grads, 0.0)
    state.m = np.where(live, state.beta1 * state.m + (1 - state.beta1) * g, state.m)
    state.v = np.where(live, state.beta2 * state.v + (1 - state.beta2) * g * g, state.v)
    m_hat = state.m / (1 - state.beta1**t)
    v_hat = state.v / (1 - state.beta2**t)
    update = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps) - state.lr * state.weight_decay * params
    return np.where(live, update, params)


class _FlatParams:
    """Views a model's trainable arrays as one flat vector for :func:`adamw_step`."""

    def __init__(self, model):
        self.entries = model.named_trainables()
        self.mask = np.concatenate(
            [np.ones(a.size, bool) if m is None else np.asarray(m, bool).ravel() for _, a, m in self.entries]
        ) if self.entries else np.zeros(0, bool)

    @property
    def size(self):
        return self.mask.size

    def gather(self):
        return np.concatenate([a.ravel() for _, a, _ in self.entries])

    def gather_grads(self, grads):
        return np.concatenate([grads[n].ravel() for n, _, _ in self.entries])

    def scatter(self, flat):
        pos = 0
        for _, a, _ in self.entries:
            a[...] = flat[pos : pos + a.size].reshape(a.shape)
            pos += a.size


# ------------------------------------------------------------------ pretraining


def info_nce(img, txt, scale):
    """Symmetric in-batch InfoNCE; returns ``(loss, d_img, d_txt, d_scale)``."""
    B = img.shape[0]
    sims = img @ txt.T
    logits = scale * sims
    p_rows = softmax_rows(logits)
    p_cols = softmax_rows(logits.T).T
    diag = np.arange(B)
    loss = -0.5 * (np.log(p_rows[diag, diag]).mean() + np.log(p_cols[diag, diag]).mean())
    eye = np.eye(B)
    dlogits = 0.5 * ((p_rows - eye) + (p_cols - eye)) / B
    return loss, scale * dlogits @ txt, scale * dlogits.T @ img, float((dlogits * sims).sum())


def contrastive_pretrain(model: DualEncoderModel, dataset, epochs=10, lr=1e-3, seed=0,
                         batch_size=32, weight_decay=0.01):
    """Train every array of a dense model on aligned (image, caption) pairs.

    Returns the per-epoch mean loss; the model is updated in place.
    """
    if model.kind != "dense":
        raise UsageError("pretraining expects a dense (undecomposed) model")
    n = len(dataset)
    if n == 0:
        raise InputError("empty pretraining dataset")
    rng = make_rng(seed)
    flat = _FlatParams(model)
    state = AdamWState(lr=lr, weight_decay=weight_decay)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            img, icache = encode_images(model, dataset.patches[idx])
            txt, tcache = encode_texts(model, dataset.token_ids[idx])
            scale = math.exp(model.logit_scale[0])
            loss, d_img, d_txt, d_scale = info_nce(img, txt, scale)
            grads = backward_images(model, icache, d_img)
            grads.update(backward_texts(model, tcache, d_txt))
            grads["logit_scale"] = np.array([d_scale * scale])
            flat.scatter(adamw_step(state, flat.gather(), flat.gather_grads(grads)))
            np.minimum(model.logit_scale, MAX_LOGIT_SCALE, out=model.logit_scale)
            model.mark_updated()
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
    return history


# ------------------------------------------------------------------ few-shot


@dataclass(frozen=True)
class FewShotTask:
    shots: int
    classes: tuple
    support: np.ndarray
    query: np.ndarray
    seed: int

    def __post_init__(self):
        if np.intersect1d(self.support, self.query).size:
            raise UsageError("support and query sets overlap")


def sample_few_shot(data_split, classes, shots: int, seed: int) -> FewShotTask:
    """Uniformly draw ``shots`` training samples per class (no replacement)."""
    if shots < 1:
        raise ConfigError("shots must be >= 1")
    rng = make_rng(seed)
    support = []
    for c in classes:
        pool = data_split.train[c]
        if pool.size < shots:
            raise ConfigError(f"class {c} has {pool.size} training samples, need {shots}")
        support.append(np.sort(rng.choice(pool, size=shots, replace=False)))
    query = data_split.ids("test", classes)
    return FewShotTask(shots, tuple(int(c) for c in classes), np.concatenate(support), query, seed)


@dataclass
class AdaptHyper:
    lr: float = 5e-4
    iterations: int | None = None
    iteration_scale: float = 1.0
    batch_size: int = 32
    weight_decay: float = 0.01
    mask: RankMaskSpec = field(default_factory=RankMaskSpec)
    seed: int = 0

    def resolved_iterations(self, shots: int) -> int:
        if self.iterations is not None:
            return int(self.iterations)
        return max(1, int(round(200 * shots * self.iteration_scale)))

    def to_dict(self):
        d = asdict(self)
        d["mask"] = self.mask.to_dict()
        return d


@dataclass
class AdaptationRecord:
    s_initial: dict
    s_final: dict
    masks: dict
    losses: list
    batches: list
    hyper: dict
    task: dict


def _prepare(model: DualEncoderModel, mask_spec: RankMaskSpec) -> DualEncoderModel:
    if model.kind == "dense":
        return model.decomposed(mask_spec)
    adapted = copy.deepcopy(model)
    adapted.set_mask(mask_spec)
    return adapted


def _frozen_snapshot(model):
    trainable = {n for n, _, _ in model.named_trainables()}
    return {n: a.copy() for n, a in model.named_arrays().items() if n not in trainable}


def _labels_for(dataset, ids, classes):
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([lookup[int(c)] for c in dataset.labels[ids]], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"sample label {exc} is not among the task classes") from exc


def support_loss(model, dataset, ids, classes, class_texts):
    """Mean cross-entropy of the temperature-scaled class probabilities on ``ids``."""
    img, _ = encode_images(model, dataset.patches[ids])
    txt, _ = encode_texts(model, class_texts)
    p = softmax_rows(img @ txt.T / model.tau)
    y = _labels_for(dataset, ids, classes)
    return float(-np.log(p[np.arange(len(ids)), y]).mean())


def adapt_few_shot(model: DualEncoderModel, dataset, task: FewShotTask, class_texts,
                   hyper: AdaptHyper):
    """Train only singular values on the support set with cross-entropy + AdamW.

    ``class_texts`` holds one token-id row per entry of ``task.classes``.
    Returns ``(adapted_model, AdaptationRecord)``; the input model is untouched.
    """
    class_texts = np.asarray(class_texts)
    if class_texts.shape[0] != len(task.classes):
        raise ShapeError(f"{class_texts.shape[0]} class texts for {len(task.classes)} classes")
    adapted = _prepare(model, hyper.mask)
    flat = _FlatParams(adapted)
    if flat.size == 0 or not flat.mask.any():
        raise ConfigError("no trainable singular values under this mask")
    frozen = _frozen_snapshot(adapted)
    s_initial = {n: a.copy() for n, a, _ in flat.entries}
    state = AdamWState(lr=hyper.lr, weight_decay=hyper.weight_decay)
    rng = make_rng(hyper.seed)
    labels = _labels_for(dataset, task.support, task.classes)
    iterations = hyper.resolved_iterations(task.shots)
    tau = adapted.tau
    losses, batches = [], []
    order, cursor = rng.permutation(task.support.size), 0
    for _ in range(iterations):
        if cursor >= order.size:
            order, cursor = rng.permutation(task.support.size), 0
        pick = order[cursor : cursor + hyper.batch_size]
        cursor += pick.size
        ids = task.support[pick]
        batches.append(ids.copy())
        img, icache = encode_images(adapted, dataset.patches[ids])
        txt, tcache = encode_texts(adapted, class_texts)
        p = softmax_rows(img @ txt.T / tau)
        y = labels[pick]
        B = ids.size
        losses.append(float(-np.log(p[np.arange(B), y]).mean()))
        dlogits = p.copy()
        dlogits[np.arange(B), y] -= 1.0
        dlogits /= B * tau
        grads = backward_images(adapted, icache, dlogits @ txt)
        grads.update(backward_texts(adapted, tcache, dlogits.T @ img))
        flat.scatter(adamw_step(state, flat.gather(), flat.gather_grads(grads), flat.mask))
        adapted.mark_updated()
    for name, arr in adapted.named_arrays().items():
        if name in frozen and not np.array_equal(arr, frozen[name]):
            raise UsageError(f"frozen array {name} changed during adaptation")
    record = AdaptationRecord(
        s_initial,
        {n: a.copy() for n, a, _ in flat.entries},
        {n: np.asarray(m, bool).copy() for n, _, m in flat.entries},
        losses,
        batches,
        hyper.to_dict(),
        {"shots": task.shots, "classes": list(task.classes), "seed": task.seed},
    )
    return adapted, record


# ------------------------------------------------------------------ evaluation


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InputError("cannot score an empty slice")
    if predictions.shape != labels.shape:
        raise ShapeError(f"predictions {predictions.shape} vs labels {labels.shape}")
    return float(np.mean(predictions == labels))


def embed_images(model, patches, batch_size=256):
    out = [encode_images(model, patches[i : i + batch_size])[0] for i in range(0, len(patches), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.embed_dim))


def evaluate(model, dataset, ids, classes, class_texts) -> float:
    """Fraction of ``ids`` whose predicted class (among ``classes``) is correct."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise InputError("cannot evaluate an empty slice")
    txt, _ = encode_texts(model, np.asarray(class_texts))
    preds = predict(embed_images(model, dataset.patches[ids]), txt, model.tau)
    return accuracy(preds, _labels_for(dataset, ids, classes))


def harmonic_mean(base_acc: float, novel_acc: float) -> float:
    """``2ab / (a + b)`` for accuracies given in percent."""
    for x in (base_acc, novel_acc):
        if not 0.0 <= x <= 100.0:
            raise InputError(f"accuracy {x} outside [0, 100]")
    if base_acc + novel_acc == 0:
        raise InputError("harmonic mean undefined when both accuracies are zero")
    return 2.0 * base_acc * novel_acc / (base_acc + novel_acc)


def run_base_to_novel(model, dataset, data_split, shots, hyper: AdaptHyper, seed=0):
    """Adapt on base-class support only, then score base and novel test sets separately."""
    base, novel = data_split.classes.base, data_split.classes.novel
    texts = dataset.class_texts
    task = sample_few_shot(data_split, base, shots, seed)
    zs_model = _prepare(model, hyper.mask)
    zs_base = evaluate(zs_model, dataset, data_split.ids("test", base), base, texts[list(base)])
    zs_novel = evaluate(zs_model, dataset, data_split.ids("test", novel), novel, texts[list(novel)])
    adapted, record = adapt_few_shot(model, dataset, task, texts[list(base)], hyper)
    base_acc = evaluate(adapted, dataset, data_split.ids("test", base), base, texts[list(base)])
    novel_acc = evaluate(adapted, dataset, data_split.ids("test", novel), novel, texts[list(novel)])
    seen = set(dataset.labels[np.concatenate(record.batches)].tolist()) if record.batches else set()
    if seen & set(novel):
        raise UsageError("a novel class reached the optimizer")
    return {
        "base_acc": base_acc,
        "novel_acc": novel_acc,
        "hm": harmonic_mean(100 * base_acc, 100 * novel_acc) / 100 if base_acc + novel_acc else 0.0,
        "zero_shot_base_acc": zs_base,
        "zero_shot_novel_acc": zs_novel,
        "record": record,
        "model": adapted,
    }


# ------------------------------------------------------------------ record files


def save_record(path, record: AdaptationRecord):
    arrays = {}
    for name in record.s_initial:
        arrays[f"s_initial/{name}"] = record.s_initial[name]
        arrays[f"s_final/{name}"] = record.s_final[name]
        arrays[f"mask/{name}"] = record.masks[name].astype(np.float64)
    arrays["losses"] = np.asarray(record.losses, dtype=np.float64)
    arrays["batch_ids"] = np.concatenate(record.batches).astype(np.int64) if record.batches else np.zeros(0, np.int64)
    arrays["batch_sizes"] = np.array([b.size for b in record.batches], dtype=np.int64)
    header = {"format": "adaptation_record", "hyper": record.hyper, "task": record.task,
              "names": list(record.s_initial)}
    write_container(path, RECORD_MAGIC, header, arrays)


def load_record(path) -> AdaptationRecord:
    header, arrays = read_container(path, RECORD_MAGIC)
    names = header["names"]
    bounds = np.cumsum(arrays["batch_sizes"])[:-1] if arrays["batch_sizes"].size else []
    batches = np.split(arrays["batch_ids"], bounds) if arrays["batch_sizes"].size else []
    return AdaptationRecord(
        {n: arrays[f"s_initial/{n}"] for n in names},
        {n: arrays[f"s_final/{n}"] for n in names},
        {n: arrays[f"mask/{n}"] != 0 for n in names},
        arrays["losses"].tolist(),
        list(batches),
        header["hyper"],
        header["task"],
    )
