"""Episodic few-shot learning with prototypical networks.

A pool of labelled images is cut into N-way K-shot episodes. Each support
way gets a prototype (mean embedding); queries are scored with a softmax
over negative squared Euclidean distances to those prototypes.

Fake (generated) classes only ever enter an episode as extra support ways:
they compete in the softmax denominator but are never queried, so their
mask bit never switches a loss term on.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nncore
from .errors import ConfigError, NumericError, SamplingError


@dataclass(frozen=True, order=True)
class ClassId:
    index: int
    is_real: bool = True


# ---------------------------------------------------------------------------
# pools and episodes


@dataclass
class EpisodePool:
    """Images per class plus the fake ways attached to training episodes.

    ``real`` maps each real class to its images. ``queryable`` optionally
    restricts which of them may be drawn as queries (a bool mask per class);
    ``fake_twin`` maps a real class to its private fake class and
    ``shared_fake`` names one fake class shared by all episodes.
    """

    real: dict
    fake: dict = field(default_factory=dict)
    queryable: dict = field(default_factory=dict)
    fake_twin: dict = field(default_factory=dict)
    shared_fake: ClassId | None = None

    @property
    def classes(self) -> list:
        return sorted(self.real)

    def image(self, key) -> torch.Tensor:
        cid, i = key
        return (self.real if cid.is_real else self.fake)[cid][i]


@dataclass
class Episode:
    n_way: int
    k_shot: int
    ways: list
    support_keys: list
    support_images: torch.Tensor
    query_keys: list
    query_images: torch.Tensor

    @property
    def support_labels(self) -> list:
        return [k[0] for k in self.support_keys]

    @property
    def query_labels(self) -> list:
        return [k[0] for k in self.query_keys]

    @property
    def support(self) -> list:
        return list(zip(self.support_images, self.support_labels))

    @property
    def query(self) -> list:
        return list(zip(self.query_images, self.query_labels))

    @property
    def fake_ways(self) -> list:
        return [w for w in self.ways if not w.is_real]

    def way_index(self, labels) -> torch.Tensor:
        pos = {w: i for i, w in enumerate(self.ways)}
        return torch.tensor([pos[c] for c in labels], dtype=torch.long)


def sample_episode(pool: EpisodePool, n_way: int, k_shot: int, n_query: int, rng: np.random.Generator,
                   with_fakes: bool = True) -> Episode:
    """Draw one episode; ``rng`` is a numpy Generator.

    Real ways are sampled without replacement, then K support and Q query
    images per way without replacement. With ``with_fakes`` the pool's fake
    ways are appended, each with K support images.
    """
    classes = pool.classes
    if n_way < 1 or k_shot < 1 or n_query < 0:
        raise SamplingError(f"invalid episode shape {n_way}-way {k_shot}-shot {n_query}-query")
    if len(classes) < n_way:
        raise SamplingError(f"need {n_way} real classes, pool has {len(classes)}")
    picked = [classes[i] for i in sorted(rng.choice(len(classes), n_way, replace=False))]
    support, query = [], []
    for cid in picked:
        n = pool.real[cid].shape[0]
        qmask = pool.queryable.get(cid)
        if qmask is None:
            if n < k_shot + n_query:
                raise SamplingError(f"class {cid.index} has {n} images, episode needs {k_shot + n_query}")
            perm = rng.permutation(n)
            s_idx, q_idx = perm[:k_shot], perm[k_shot:k_shot + n_query]
        else:
            q_cand = np.flatnonzero(qmask.numpy())
            if len(q_cand) < n_query:
                raise SamplingError(f"class {cid.index} has {len(q_cand)} query-eligible images, need {n_query}")
            q_idx = rng.choice(q_cand, n_query, replace=False)
            rest = np.setdiff1d(np.arange(n), q_idx)
            if len(rest) < k_shot:
                raise SamplingError(f"class {cid.index} has {len(rest)} images left for {k_shot} shots")
            s_idx = rng.choice(rest, k_shot, replace=False)
        support += [(cid, int(i)) for i in s_idx]
        query += [(cid, int(i)) for i in q_idx]

    fakes = []
    if with_fakes:
        if pool.fake_twin:
            fakes = [pool.fake_twin[c] for c in picked if c in pool.fake_twin]
        elif pool.shared_fake is not None:
            fakes = [pool.shared_fake]
    for fid in fakes:
        n = pool.fake[fid].shape[0]
        if n < k_shot:
            raise SamplingError(f"fake class {fid.index} has {n} images, need {k_shot}")
        support += [(fid, int(i)) for i in rng.choice(n, k_shot, replace=False)]

    ways = sorted(picked) + sorted(fakes)
    s_img = torch.stack([pool.image(k) for k in support])
    q_img = torch.stack([pool.image(k) for k in query]) if query else s_img[:0]
    return Episode(n_way, k_shot, ways, support, s_img, query, q_img)


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (master seed, episode index)."""
    return np.random.default_rng([int(seed), int(index)])


# ---------------------------------------------------------------------------
# embedding network


class ConvEmbedding(nn.Module):
    """Conv-4: four conv3x3-BN-ReLU-maxpool blocks, flattened."""

    def __init__(self, in_channels: int = 3, hidden: int = 64, n_blocks: int = 4, image_size: int = 32):
        super().__init__()
        blocks = [nncore.conv_block(in_channels, hidden)]
        blocks += [nncore.conv_block(hidden, hidden) for _ in range(n_blocks - 1)]
        self.encoder = nn.Sequential(*blocks)
        self.in_channels = in_channels
        self.hidden = hidden
        self.n_blocks = n_blocks
        side = image_size >> n_blocks
        self.embed_dim = hidden * side * side

    def forward(self, x):
        return self.encoder(x).flatten(1)


def build_embedding(seed: int, in_channels=3, hidden=64, n_blocks=4, image_size=32) -> ConvEmbedding:
    model = ConvEmbedding(in_channels, hidden, n_blocks, image_size)
    nncore.he_uniform_(model, torch.Generator().manual_seed(seed))
    return model


def squared_distances(x: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Pairwise ||x_i - c_k||^2, shape [n, k]."""
    diff = x[:, None, :] - centers[None, :, :]
    return (diff * diff).sum(-1)


def prototype_matrix(embeddings: torch.Tensor, labels, ways) -> torch.Tensor:
    """Row k is the mean embedding of the support items labelled ``ways[k]``."""
    rows = []
    for w in ways:
        idx = [i for i, c in enumerate(labels) if c == w]
        if not idx:
            raise SamplingError(f"way {w} has no support items")
        rows.append(embeddings[idx].mean(0))
    return torch.stack(rows)


def compute_prototypes(episode: Episode, model) -> dict:
    """``{ClassId: mean support embedding}`` in the episode's way order."""
    if not episode.support_keys:
        raise SamplingError("episode has no support items")
    emb = model(episode.support_images)
    protos = prototype_matrix(emb, episode.support_labels, episode.ways)
    return dict(zip(episode.ways, protos))


def log_probs(query_emb: torch.Tensor, protos: torch.Tensor) -> torch.Tensor:
    return F.log_softmax(-squared_distances(query_emb, protos), dim=1)


def classify_query(query: torch.Tensor, prototypes: dict, model) -> torch.Tensor:
    """Softmax over negative squared distances to each prototype.

    ``query`` is one image or a batch; the output is [W] or [n, W] in the
    prototypes' insertion order.
    """
    if not prototypes:
        raise SamplingError("no prototypes to classify against")
    single = query.dim() == 3
    emb = model(query[None] if single else query)
    p = log_probs(emb, torch.stack(list(prototypes.values()))).exp()
    return p[0] if single else p


def l2_penalty(model) -> torch.Tensor:
    """Sum of squares of every trainable parameter."""
    return sum((p * p).sum() for p in model.parameters() if p.requires_grad)


def episode_loss(episode: Episode, model, lambda_reg: float, masks: torch.Tensor | None = None) -> torch.Tensor:
    """Masked negative log-likelihood of the query labels plus ``lambda * ||theta||^2``.

    ``masks`` defaults to the queries' real/fake bits; the NLL is averaged
    over all N queries, masked or not.
    """
    if lambda_reg < 0:
        raise ConfigError(f"lambda must be non-negative, got {lambda_reg}")
    n_s = len(episode.support_keys)
    if not episode.query_keys:
        raise SamplingError("episode has no query items")
    emb = model(torch.cat([episode.support_images, episode.query_images]))
    protos = prototype_matrix(emb[:n_s], episode.support_labels, episode.ways)
    logp = log_probs(emb[n_s:], protos)
    target = episode.way_index(episode.query_labels)
    if masks is None:
        masks = torch.tensor([float(c.is_real) for c in episode.query_labels])
    picked = logp.gather(1, target[:, None])[:, 0]
    nll = -(masks * picked).sum() / len(target)
    if lambda_reg == 0:
        return nll
    return nll + lambda_reg * l2_penalty(model)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    n_episodes: int
    mean_accuracy: float
    ci95_halfwidth: float
    per_episode_accuracies: list
    n_way: int = 0
    k_shot: int = 0
    seed: int = 0
    config_digest: str = ""

    @classmethod
    def from_accuracies(cls, accs, **meta) -> "EvalReport":
        arr = np.asarray(accs, dtype=np.float64)
        n = len(arr)
        mean = float(arr.mean())
        std = float(arr.std(ddof=1)) if n > 1 else 0.0
        return cls(n, mean, 1.96 * std / math.sqrt(n), [float(a) for a in arr], **meta)

    def to_json(self) -> dict:
        return {"n_episodes": self.n_episodes, "n_way": self.n_way, "k_shot": self.k_shot,
                "mean_accuracy": self.mean_accuracy, "ci95_halfwidth": self.ci95_halfwidth,
                "seed": self.seed, "config_digest": self.config_digest}

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["episode_index", "accuracy"])
                for i, a in enumerate(self.per_episode_accuracies):
                    w.writerow([i, repr(a)])


class ProtoPredictor:
    """Eval-mode prototypical classifier that embeds each image once.

    In eval mode the embedding of an image does not depend on its batch
    mates, so embeddings are cached per (class, index) key.
    """

    def __init__(self, model, pool: EpisodePool, batch_size: int = 256):
        self.model = model
        self.pool = pool
        self.batch_size = batch_size
        self._cache = {}

    def _embed_class(self, cid):
        images = (self.pool.real if cid.is_real else self.pool.fake)[cid]
        was_training = self.model.training
        self.model.eval()
        with torch.no_grad():
            out = torch.cat([self.model(images[i:i + self.batch_size])
                             for i in range(0, images.shape[0], self.batch_size)])
        self.model.train(was_training)
        return out

    def embeddings(self, keys) -> torch.Tensor:
        for cid, _ in keys:
            if cid not in self._cache:
                self._cache[cid] = self._embed_class(cid)
        return torch.stack([self._cache[c][i] for c, i in keys])

    def __call__(self, episode: Episode) -> torch.Tensor:
        protos = prototype_matrix(self.embeddings(episode.support_keys), episode.support_labels, episode.ways)
        scores = log_probs(self.embeddings(episode.query_keys), protos)
        # torch.argmax returns the first maximum: ways are sorted by class index
        return scores.argmax(dim=1)


def evaluate(pool: EpisodePool, model, n_episodes: int, n_way: int, k_shot: int, n_query: int,
             seed: int, include_fakes: bool = False, **meta) -> EvalReport:
    """Accuracy over ``n_episodes`` test episodes with a 95% interval.

    ``model`` is an embedding network or any callable mapping an episode to
    predicted way indices. Episode ``i`` is drawn from ``episode_rng(seed, i)``.
    """
    if n_episodes < 2:
        raise ConfigError("need at least 2 episodes for a confidence interval")
    predictor = ProtoPredictor(model, pool) if isinstance(model, nn.Module) else model
    accs = []
    for i in range(n_episodes):
        ep = sample_episode(pool, n_way, k_shot, n_query, episode_rng(seed, i), with_fakes=include_fakes)
        pred = predictor(ep)
        truth = ep.way_index(ep.query_labels)
        accs.append(float((pred == truth).float().mean()))
    return EvalReport.from_accuracies(accs, n_way=n_way, k_shot=k_shot, seed=seed, **meta)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLogRow:
    episode: int
    loss: float
    fake_ways: int
    val_accuracy: float | None = None


def train_episodic(model, pool: EpisodePool, n_way: int, k_shot: int, n_query: int, episodes: int,
                   lr: float, lambda_reg: float, seed: int, val_pool: EpisodePool | None = None,
                   val_every: int = 100, val_episodes: int = 200, optimizer: str = "adam",
                   lr_decay_every: int = 0, lr_decay: float = 0.5):
    """Episodic training; returns ``(log_rows, best_state, best_val)``.

    Validation runs every ``val_every`` episodes and at the end, with at
    most as many ways as the validation pool has classes; the best
    validation state (first on ties) is kept. Without a validation pool the
    final state is returned.
    """
    opt = nncore.make_optimizer(optimizer, model, lr)
    rows = []
    best_val, best_state = -1.0, None

    def validate(step):
        nonlocal best_val, best_state
        val_way = min(n_way, len(val_pool.classes))
        rep = evaluate(val_pool, model, val_episodes, val_way, k_shot, n_query, seed=seed + 7919)
        model.train()
        if rep.mean_accuracy > best_val:
            best_val = rep.mean_accuracy
            best_state = copy.deepcopy(nncore.model_params(model))
        return rep.mean_accuracy

    model.train()
    for step in range(episodes):
        if lr_decay_every and step and step % lr_decay_every == 0:
            opt.state.learning_rate *= lr_decay
        ep = sample_episode(pool, n_way, k_shot, n_query, episode_rng(seed, step))
        loss = episode_loss(ep, model, lambda_reg)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite episode loss at step {step}")
        nncore.backward_pass(loss)
        opt.step()
        row = TrainLogRow(step, loss.item(), len(ep.fake_ways))
        if val_pool is not None and ((step + 1) % val_every == 0 or step + 1 == episodes):
            row.val_accuracy = validate(step)
        rows.append(row)
    if best_state is None:
        best_state = copy.deepcopy(nncore.model_params(model))
    model.eval()
    return rows, best_state, best_val
