"""Per-domain latent-factor models (MF, GMF, two-tower) and their training loops.

All heads are trained on mean squared rating error with mini-batch Adam.
Gradients are hand-derived; ``loss_and_grads`` exposes exactly what the
training loop uses so it can be checked against finite differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .data import DomainDataset, IdMap
from .nn import Adam, TwoLayerNet, prefix_params, uniform_init

logger = logging.getLogger(__name__)

HEADS = ("mf", "gmf", "two_tower")


@dataclass
class TrainConfig:
    """Hyperparameters for one optimization stage."""

    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 512
    activation: str = "relu"
    patience: int | None = None


class DomainModel:
    """Embedding tables plus a scoring head for one domain.

    Heads: "mf" (dot product), "gmf" (weighted element-wise product),
    "two_tower" (dot product of per-side k -> 2k -> k nets).
    """

    def __init__(self, n_users: int, n_items: int, k: int, head: str = "mf",
                 activation: str = "relu", rng: np.random.Generator | None = None):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}, expected one of {HEADS}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.k = k
        self.head = head
        self.users = uniform_init(rng, k, (n_users, k))
        self.items = uniform_init(rng, k, (n_items, k))
        self.gmf_weights = uniform_init(rng, k, (k,)) if head == "gmf" else None
        if head == "two_tower":
            self.user_net = TwoLayerNet(k, 2 * k, k, activation, rng)
            self.item_net = TwoLayerNet(k, 2 * k, k, activation, rng)
        else:
            self.user_net = None
            self.item_net = None

    @property
    def n_users(self) -> int:
        return self.users.shape[0]

    @property
    def n_items(self) -> int:
        return self.items.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        p = {"users": self.users, "items": self.items}
        if self.head == "gmf":
            p["gmf_weights"] = self.gmf_weights
        elif self.head == "two_tower":
            p.update(prefix_params("user_net.", self.user_net.params()))
            p.update(prefix_params("item_net.", self.item_net.params()))
        return p


def predict_batch(model: DomainModel, user_idx: np.ndarray, item_idx: np.ndarray) -> np.ndarray:
    """Predicted ratings for aligned user/item index arrays."""
    U = model.users[user_idx]
    V = model.items[item_idx]
    if model.head == "mf":
        return np.einsum("bk,bk->b", U, V)
    if model.head == "gmf":
        return (U * V) @ model.gmf_weights
    A = model.user_net.forward(U)
    B = model.item_net.forward(V)
    return np.einsum("bk,bk->b", A, B)


def score(model: DomainModel, user: int, item: int) -> float:
    """Predicted rating of one (user, item) pair."""
    if not (0 <= user < model.n_users and 0 <= item < model.n_items):
        raise IndexError(f"user {user} or item {item} out of range "
                         f"({model.n_users} users, {model.n_items} items)")
    return float(predict_batch(model, np.asarray([user]), np.asarray([item]))[0])


def user_representation(model: DomainModel, user: int) -> np.ndarray:
    """The vector a bridge transforms: the embedding row, or the user-tower output."""
    if not 0 <= user < model.n_users:
        raise IndexError(f"user {user} out of range ({model.n_users} users)")
    row = model.users[user]
    if model.head == "two_tower":
        return model.user_net.forward(row)
    return row.copy()


def user_representations(model: DomainModel) -> np.ndarray:
    if model.head == "two_tower":
        return model.user_net.forward(model.users)
    return model.users.copy()


def item_representations(model: DomainModel) -> np.ndarray:
    """Item vectors in the same space user representations score against."""
    if model.head == "two_tower":
        return model.item_net.forward(model.items)
    return model.items.copy()


def item_scoring_vectors(model: DomainModel) -> np.ndarray:
    """Frozen per-item vectors q such that a rating is dot(user_repr, q)."""
    if model.head == "mf":
        return model.items.copy()
    if model.head == "gmf":
        return model.items * model.gmf_weights
    return model.item_net.forward(model.items)


def loss_and_grads(model: DomainModel, user_idx: np.ndarray, item_idx: np.ndarray,
                   ratings: np.ndarray):
    """Mean squared error of a batch and its gradients w.r.t. all parameters.

    This is the exact computation one training step performs. Embedding
    gradients come back as dense tables (rows outside the batch are zero).
    """
    B = len(ratings)
    U = model.users[user_idx]
    V = model.items[item_idx]
    grads: dict[str, np.ndarray] = {}

    if model.head == "mf":
        pred = np.einsum("bk,bk->b", U, V)
        g = 2.0 * (pred - ratings) / B
        dU = g[:, None] * V
        dV = g[:, None] * U
    elif model.head == "gmf":
        w = model.gmf_weights
        pred = (U * V) @ w
        g = 2.0 * (pred - ratings) / B
        dU = g[:, None] * (V * w)
        dV = g[:, None] * (U * w)
        grads["gmf_weights"] = (U * V).T @ g
    else:
        A, cache_u = model.user_net.forward_cached(U)
        Bv, cache_i = model.item_net.forward_cached(V)
        pred = np.einsum("bk,bk->b", A, Bv)
        g = 2.0 * (pred - ratings) / B
        net_u, dU = model.user_net.backward(cache_u, g[:, None] * Bv)
        net_i, dV = model.item_net.backward(cache_i, g[:, None] * A)
        grads.update(prefix_params("user_net.", net_u))
        grads.update(prefix_params("item_net.", net_i))

    d_users = np.zeros_like(model.users)
    d_items = np.zeros_like(model.items)
    np.add.at(d_users, user_idx, dU)
    np.add.at(d_items, item_idx, dV)
    grads["users"] = d_users
    grads["items"] = d_items
    loss = float(np.mean((pred - ratings) ** 2))
    return loss, grads


def _run_epochs(params, batch_fn, n: int, config: TrainConfig, rng: np.random.Generator,
                what: str):
    """Shared mini-batch Adam loop; returns the per-epoch mean-loss trace."""
    opt = Adam(params, lr=config.lr)
    trace = []
    best = np.inf
    stale = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = perm[start:start + config.batch_size]
            loss, grads = batch_fn(batch)
            if not np.isfinite(loss):
                raise RuntimeError(f"{what} diverged at epoch {epoch}: loss={loss}")
            opt.step(grads)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        trace.append(mean_loss)
        if config.patience is not None:
            if mean_loss < best - 1e-12:
                best = mean_loss
                stale = 0
            else:
                stale += 1
                if stale > config.patience:
                    break
    return trace


def pretrain(dataset: DomainDataset, k: int, head: str = "mf",
             config: TrainConfig | None = None, seed: int = 0):
    """Fit a DomainModel to a rating log by mini-batch Adam on squared error.

    Returns (model, trace) where trace is the per-epoch mean training loss.
    Same seed and data reproduce the model bit for bit.
    """
    if dataset.n_ratings == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    config = config or TrainConfig()
    if config.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    model = DomainModel(dataset.n_users, dataset.n_items, k, head,
                        activation=config.activation, rng=rng)
    params = model.params()

    def batch_fn(batch):
        return loss_and_grads(model, dataset.user_idx[batch], dataset.item_idx[batch],
                              dataset.rating[batch])

    trace = _run_epochs(params, batch_fn, dataset.n_ratings, config, rng, "pretrain")
    if trace:
        logger.info("pretrained %s head on %d ratings: loss %.4f -> %.4f",
                    head, dataset.n_ratings, trace[0], trace[-1])
    return model, trace


@dataclass
class CmfModel:
    """Shared user factors across both domains with per-domain item tables."""

    user_map: IdMap
    users: np.ndarray
    src_items: np.ndarray
    tgt_items: np.ndarray
    k: int


def cmf_train(src: DomainDataset, tgt: DomainDataset, k: int,
              config: TrainConfig | None = None, seed: int = 0):
    """Train one user table on the concatenated source+target rating pools.

    Users are keyed by external id (source order first, then target-only
    users); items stay per-domain. Scoring is plain dot product. Returns
    (CmfModel, trace).
    """
    config = config or TrainConfig()
    if src.n_ratings + tgt.n_ratings == 0:
        raise ValueError("cannot train CMF with no ratings in either domain")
    user_map = IdMap.from_ids(src.users.backward)
    for ext in tgt.users.backward:
        user_map.add(ext)

    src_u = np.asarray([user_map.index(src.users.external(i)) for i in src.user_idx],
                       dtype=np.int64)
    tgt_u = np.asarray([user_map.index(tgt.users.external(i)) for i in tgt.user_idx],
                       dtype=np.int64)
    pool_u = np.concatenate([src_u, tgt_u])
    pool_i = np.concatenate([src.item_idx, tgt.item_idx])
    pool_r = np.concatenate([src.rating, tgt.rating])
    in_tgt = np.concatenate([np.zeros(src.n_ratings, dtype=bool),
                             np.ones(tgt.n_ratings, dtype=bool)])

    rng = np.random.default_rng(seed)
    users = uniform_init(rng, k, (len(user_map), k))
    src_items = uniform_init(rng, k, (src.n_items, k))
    tgt_items = uniform_init(rng, k, (tgt.n_items, k))
    model = CmfModel(user_map=user_map, users=users, src_items=src_items,
                     tgt_items=tgt_items, k=k)
    params = {"users": users, "src_items": src_items, "tgt_items": tgt_items}

    def batch_fn(batch):
        u = pool_u[batch]
        i = pool_i[batch]
        r = pool_r[batch]
        t = in_tgt[batch]
        B = len(batch)
        V = np.empty((B, k))
        V[~t] = src_items[i[~t]]
        V[t] = tgt_items[i[t]]
        U = users[u]
        pred = np.einsum("bk,bk->b", U, V)
        g = 2.0 * (pred - r) / B
        dU = g[:, None] * V
        dV = g[:, None] * U
        d_users = np.zeros_like(users)
        d_src = np.zeros_like(src_items)
        d_tgt = np.zeros_like(tgt_items)
        np.add.at(d_users, u, dU)
        np.add.at(d_src, i[~t], dV[~t])
        np.add.at(d_tgt, i[t], dV[t])
        loss = float(np.mean((pred - r) ** 2))
        return loss, {"users": d_users, "src_items": d_src, "tgt_items": d_tgt}

    trace = _run_epochs(params, batch_fn, len(pool_r), config, rng, "cmf")
    return model, trace


def save_model(prefix, model: DomainModel) -> None:
    tensors = dict(model.params())
    meta = {"kind": "domain_model", "head": model.head, "k": model.k}
    if model.head == "two_tower":
        meta["activation"] = model.user_net.activation
    checkpoint.save_tensors(prefix, tensors, meta)


def load_model(prefix) -> DomainModel:
    tensors, meta = checkpoint.load_tensors(prefix)
    if meta.get("kind") != "domain_model":
        raise ValueError(f"checkpoint at {prefix} is not a domain model")
    head = meta["head"]
    n_users, k = tensors["users"].shape
    n_items = tensors["items"].shape[0]
    model = DomainModel(n_users, n_items, k, head,
                        activation=meta.get("activation", "relu"))
    model.users = tensors["users"]
    model.items = tensors["items"]
    if head == "gmf":
        model.gmf_weights = tensors["gmf_weights"]
    elif head == "two_tower":
        model.user_net.set_params({n.split(".", 1)[1]: t for n, t in tensors.items()
                                   if n.startswith("user_net.")})
        model.item_net.set_params({n.split(".", 1)[1]: t for n, t in tensors.items()
                                   if n.startswith("item_net.")})
    return model
