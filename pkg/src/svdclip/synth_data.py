"""Seeded synthetic paired image/text corpora and their class/sample splits.

Each class owns a latent prototype and a token template. An image is the
prototype plus Gaussian noise, pushed through a fixed linear "renderer" and cut
into patches; its caption is the class template cyclically shifted by a small
random offset. The renderer depends only on ``render_seed``, so corpora built
with different ``seed`` values share the same image geometry but not classes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DegenerateError, InputError
from .linalg import make_rng
from .persistence import DATASET_MAGIC, read_container, write_container


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    num_classes: int = 8
    num_patches: int = 4
    patch_dim: int = 8
    text_len: int = 4
    vocab_size: int = 64
    samples_per_class: int = 48
    noise: float = 0.1
    seed: int = 0
    latent_dim: int = 16
    render_seed: int = 12345
    jitter: int = 1

    def __post_init__(self):
        for name in ("num_classes", "num_patches", "patch_dim", "text_len", "vocab_size",
                     "samples_per_class", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if not 0 <= self.jitter < self.text_len:
            raise ConfigError("jitter must lie in [0, text_len)")


@dataclass
class SyntheticDataset:
    config: SyntheticCorpusConfig
    patches: np.ndarray      # (N, num_patches, patch_dim)
    token_ids: np.ndarray    # (N, text_len) int64
    labels: np.ndarray       # (N,) int64
    latents: np.ndarray      # (N, latent_dim)
    prototypes: np.ndarray   # (C, latent_dim)
    class_texts: np.ndarray  # (C, text_len) int64, the unshifted templates

    def __len__(self):
        return self.labels.shape[0]

    def sample(self, i):
        return self.patches[i], self.token_ids[i], int(self.labels[i])


def renderer(config: SyntheticCorpusConfig) -> np.ndarray:
    rng = make_rng(config.render_seed)
    out = config.num_patches * config.patch_dim
    return rng.standard_normal((config.latent_dim, out)) / math.sqrt(config.latent_dim)


def generate(config: SyntheticCorpusConfig) -> SyntheticDataset:
    rng = make_rng(config.seed)
    C, n = config.num_classes, config.samples_per_class
    prototypes = rng.standard_normal((C, config.latent_dim))
    templates = np.stack(
        [rng.choice(config.vocab_size, size=config.text_len, replace=config.text_len > config.vocab_size)
         for _ in range(C)]
    ).astype(np.int64)
    labels = np.repeat(np.arange(C, dtype=np.int64), n)
    latents = prototypes[labels] + config.noise * rng.standard_normal((C * n, config.latent_dim))
    shifts = rng.integers(0, config.jitter + 1, size=C * n)
    token_ids = np.stack([np.roll(templates[c], s) for c, s in zip(labels, shifts)])
    patches = (latents @ renderer(config)).reshape(C * n, config.num_patches, config.patch_dim)
    return SyntheticDataset(config, patches, token_ids, labels, latents, prototypes, templates)


@dataclass(frozen=True)
class BaseNovelSplit:
    base: tuple
    novel: tuple

    def __post_init__(self):
        if not self.base or not self.novel:
            raise DegenerateError("base and novel class sets must both be non-empty")
        if set(self.base) & set(self.novel):
            raise DegenerateError("base and novel classes overlap")


@dataclass(frozen=True)
class DataSplit:
    classes: BaseNovelSplit
    train: dict  # class -> sample ids
    test: dict

    def ids(self, part: str, classes) -> np.ndarray:
        table = self.train if part == "train" else self.test
        return np.concatenate([table[c] for c in classes]) if classes else np.zeros(0, np.int64)


def split(dataset: SyntheticDataset, base_fraction: float = 0.5, seed: int = 0,
          train_fraction: float = 0.5) -> DataSplit:
    """Class-level base/novel split plus a per-class train/test partition."""
    if not 0.0 < base_fraction < 1.0:
        raise DegenerateError(f"base_fraction must lie in (0, 1), got {base_fraction}")
    if not 0.0 < train_fraction < 1.0:
        raise DegenerateError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = make_rng(seed)
    classes = np.unique(dataset.labels)
    n_base = int(round(base_fraction * classes.size))
    if n_base == 0 or n_base == classes.size:
        raise DegenerateError(f"base_fraction {base_fraction} leaves one side empty")
    perm = rng.permutation(classes)
    base = tuple(int(c) for c in np.sort(perm[:n_base]))
    novel = tuple(int(c) for c in np.sort(perm[n_base:]))
    train, test = {}, {}
    for c in classes:
        ids = rng.permutation(np.flatnonzero(dataset.labels == c))
        cut = int(round(train_fraction * ids.size))
        if cut == 0 or cut == ids.size:
            raise DegenerateError(f"class {c} has too few samples for a train/test split")
        train[int(c)] = np.sort(ids[:cut])
        test[int(c)] = np.sort(ids[cut:])
    return DataSplit(BaseNovelSplit(base, novel), train, test)


def nearest_prototype_accuracy(dataset: SyntheticDataset) -> float:
    """Separability certificate: classify latents by the nearest class prototype."""
    d = ((dataset.latents[:, None, :] - dataset.prototypes[None]) ** 2).sum(axis=-1)
    return float(np.mean(np.argmin(d, axis=1) == dataset.labels))


def save_dataset(path, dataset: SyntheticDataset):
    header = {"format": "dataset", "config": asdict(dataset.config)}
    arrays = {
        "patches": dataset.patches,
        "token_ids": dataset.token_ids,
        "labels": dataset.labels,
        "latents": dataset.latents,
        "prototypes": dataset.prototypes,
        "class_texts": dataset.class_texts,
    }
    write_container(path, DATASET_MAGIC, header, arrays)


def load_dataset(path) -> SyntheticDataset:
    header, arrays = read_container(path, DATASET_MAGIC)
    try:
        return SyntheticDataset(
            SyntheticCorpusConfig(**header["config"]),
            arrays["patches"],
            arrays["token_ids"],
            arrays["labels"],
            arrays["latents"],
            arrays["prototypes"],
            arrays["class_texts"],
        )
    except KeyError as exc:
        raise InputError(f"dataset file is missing {exc}") from exc
