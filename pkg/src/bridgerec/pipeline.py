"""End-to-end experiment orchestration.

A plan fully determines a run: pre-train both domains, run the chosen
transfer method, evaluate on the cold set, then fine-tune on the cold set and
evaluate on the warm set. A synthetic world generator with planted factors
and planted bridges serves as the ground-truth oracle for the method
comparisons, and a suite runner aggregates many plans into one report table.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bridge import (CharacteristicEncoder, MetaNetwork, build_context,
                     train_common_bridge, train_meta, train_meta_mapping,
                     transform_user)
from .data import (DomainDataset, RatingTriple, SplitPlan, build_sequences,
                   dataset_from_triples, filter_to_indices, load_domain,
                   make_split, rows_by_user)
from .models import (TrainConfig, cmf_train, item_scoring_vectors, pretrain,
                     user_representation)
from .nn import Adam, softmax

logger = logging.getLogger(__name__)

LR_GRID = (0.001, 0.005, 0.01, 0.02, 0.1)
METHODS = ("tgt", "cmf", "emcdr", "ptupcdr", "ptupcdr_mapping_ablation")
BASE_MODELS = ("mf", "gmf", "two_tower")
BRIDGE_FAMILIES = ("shared_linear", "per_user_linear")

SUITE_COLUMNS = ("task", "beta", "method", "stage", "seed",
                 "mae", "rmse", "n_eval", "runtime_s")


# ---------------------------------------------------------------------------
# plans

@dataclass
class AmazonTask:
    """Two rating-log files (csv or json-lines) forming one transfer task."""

    src_path: str
    tgt_path: str
    fmt: str | None = None
    name: str = ""

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return f"{Path(self.src_path).stem}->{Path(self.tgt_path).stem}"


@dataclass
class SyntheticSpec:
    """Parameters of a generated two-domain world with known ground truth."""

    n_users_src: int = 300
    n_users_tgt: int = 300
    n_overlap: int = 200
    n_items_src: int = 150
    n_items_tgt: int = 150
    k_true: int = 6
    ratings_per_user: int = 20
    noise_sd: float = 0.1
    bridge_family: str = "per_user_linear"
    n_clusters: int = 4
    selection_sharpness: float = 3.0
    identity_bridge: bool = False

    def validate(self) -> None:
        if self.bridge_family not in BRIDGE_FAMILIES:
            raise ValueError(f"bridge_family must be one of {BRIDGE_FAMILIES}")
        if self.n_overlap > min(self.n_users_src, self.n_users_tgt):
            raise ValueError("n_overlap exceeds a domain's user count")
        if self.ratings_per_user > min(self.n_items_src, self.n_items_tgt):
            raise ValueError("ratings_per_user exceeds the item count")
        if self.ratings_per_user < 1 or self.k_true < 1 or self.n_clusters < 1:
            raise ValueError("ratings_per_user, k_true and n_clusters must be >= 1")
        if self.noise_sd < 0 or self.selection_sharpness < 0:
            raise ValueError("noise_sd and selection_sharpness must be >= 0")


@dataclass
class SyntheticTask:
    spec: SyntheticSpec

    @property
    def label(self) -> str:
        return "synthetic"


@dataclass
class ExperimentPlan:
    """Everything that determines a run; same plan gives identical results."""

    task: AmazonTask | SyntheticTask
    method: str
    base_model: str = "mf"
    beta: float = 0.2
    seed: int = 0
    k: int = 10
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.01, epochs=10))
    bridge: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.01, epochs=10))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.01, epochs=100))
    max_seq_len: int | None = 20
    include_test_users_in_source: bool = True
    finetune_items: bool = False
    allow_off_grid_lr: bool = False
    clip_low: float = 0.0
    clip_high: float = 5.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.base_model not in BASE_MODELS:
            raise ValueError(f"base_model must be one of {BASE_MODELS}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.allow_off_grid_lr:
            for stage, cfg in (("pretrain", self.pretrain), ("bridge", self.bridge),
                               ("finetune", self.finetune)):
                if cfg.lr not in LR_GRID:
                    raise ValueError(
                        f"{stage} lr {cfg.lr} is off the grid {LR_GRID}; "
                        "set allow_off_grid_lr=True to override")


def _stage_seeds(seed: int) -> dict[str, int]:
    vals = np.random.SeedSequence(seed).generate_state(6)
    names = ("data", "src", "tgt", "bridge", "nets", "finetune")
    return {n: int(v) for n, v in zip(names, vals)}


# ---------------------------------------------------------------------------
# synthetic oracle

@dataclass
class PlantedTruth:
    """Ground-truth factors and bridges behind a synthetic world."""

    k: int
    bridge_family: str
    src_user_factors: np.ndarray
    tgt_user_factors: np.ndarray
    src_item_factors: np.ndarray
    tgt_item_factors: np.ndarray
    overlap_ids: list[str]
    shared_bridge: np.ndarray | None = None
    cluster_diags: np.ndarray | None = None
    user_clusters: dict[str, int] = field(default_factory=dict)


def _pick_items(rng, factors, user_vec, count, sharpness):
    scores = factors @ user_vec
    p = softmax(sharpness * scores)
    return rng.choice(len(factors), size=count, replace=False, p=p)


def generate_synthetic(spec: SyntheticSpec, seed: int = 0):
    """Build two domains whose overlap users are linked by planted bridges.

    User and item factors are non-negative with scale chosen so every exact
    rating lies in [0, 5]. Users and items belong to preference archetypes;
    each user rates items drawn with probability increasing in the planted
    score, so a user's history is informative about their archetype. Overlap
    users' target factors are ``B_u @ src_factor`` with B either one shared
    matrix or a per-archetype diagonal. Returns (src, tgt, PlantedTruth).
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    k = spec.k_true
    scale = np.sqrt(5.0 / k) * 0.95

    # sparse archetype directions keep clusters distinguishable
    centers = rng.dirichlet(np.full(k, 0.4), size=spec.n_clusters)
    centers /= centers.max(axis=1, keepdims=True)

    def draw_factor(cluster):
        return scale * (0.8 * centers[cluster] + 0.2 * rng.uniform(0.0, 1.0, k))

    if spec.bridge_family == "shared_linear":
        if spec.identity_bridge:
            shared = np.eye(k)
        else:
            perm = rng.permutation(k)
            shared = np.zeros((k, k))
            shared[np.arange(k), perm] = rng.uniform(0.5, 1.0, k)
        diags = None
    else:
        shared = None
        diags = rng.uniform(0.3, 1.0, (spec.n_clusters, k))

    users = {}   # ext id -> (cluster, src_factor or None, tgt_factor or None)
    overlap_ids = []
    for i in range(spec.n_overlap):
        c = int(rng.integers(spec.n_clusters))
        u = draw_factor(c)
        if spec.bridge_family == "shared_linear":
            ut = shared @ u
        else:
            ut = diags[c] * u
        ext = f"ou{i:05d}"
        users[ext] = (c, u, ut)
        overlap_ids.append(ext)
    for i in range(spec.n_users_src - spec.n_overlap):
        c = int(rng.integers(spec.n_clusters))
        users[f"su{i:05d}"] = (c, draw_factor(c), None)
    for i in range(spec.n_users_tgt - spec.n_overlap):
        c = int(rng.integers(spec.n_clusters))
        users[f"tu{i:05d}"] = (c, None, draw_factor(c))

    item_factors = {}
    for prefix, count in (("si", spec.n_items_src), ("ti", spec.n_items_tgt)):
        clusters = rng.integers(spec.n_clusters, size=count)
        item_factors[prefix] = np.stack([draw_factor(int(c)) for c in clusters])

    def domain_triples(prefix, side):
        factors = item_factors[prefix]
        triples = []
        for ext, (c, us, ut) in users.items():
            vec = us if side == "src" else ut
            if vec is None:
                continue
            chosen = _pick_items(rng, factors, vec, spec.ratings_per_user,
                                 spec.selection_sharpness)
            r = factors[chosen] @ vec
            if spec.noise_sd > 0:
                r = r + rng.normal(0.0, spec.noise_sd, len(chosen))
            r = np.clip(r, 0.0, 5.0)
            for t, (j, rv) in enumerate(zip(chosen, r)):
                triples.append(RatingTriple(ext, f"{prefix}{int(j):05d}", float(rv), t))
        return triples

    src = dataset_from_triples(domain_triples("si", "src"))
    tgt = dataset_from_triples(domain_triples("ti", "tgt"))

    def aligned(ds, table, side):
        if table == "users":
            vecs = [users[e][1 if side == "src" else 2] for e in ds.users.backward]
            return np.stack(vecs)
        idx = [int(e[2:]) for e in ds.items.backward]
        return item_factors["si" if side == "src" else "ti"][idx]

    truth = PlantedTruth(
        k=k, bridge_family=spec.bridge_family,
        src_user_factors=aligned(src, "users", "src"),
        tgt_user_factors=aligned(tgt, "users", "tgt"),
        src_item_factors=aligned(src, "items", "src"),
        tgt_item_factors=aligned(tgt, "items", "tgt"),
        overlap_ids=overlap_ids,
        shared_bridge=shared,
        cluster_diags=diags,
        user_clusters={e: users[e][0] for e in users},
    )
    return src, tgt, truth


# ---------------------------------------------------------------------------
# metrics

def compute_metrics(ratings, predictions):
    """(MAE, RMSE) of aligned rating/prediction arrays; empty input is an error."""
    r = np.asarray(ratings, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no prediction pairs to score")
    if r.shape != p.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {p.shape}")
    err = p - r
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


@dataclass
class MetricsReport:
    method: str
    beta: float
    seed: int
    stage: str
    mae: float
    rmse: float
    n_eval: int
    counters: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# cold stage

@dataclass
class ColdRun:
    """Report plus everything the warm stage and exporters need."""

    plan: ExperimentPlan
    report: MetricsReport
    src: DomainDataset
    tgt: DomainDataset
    truth: PlantedTruth | None
    split: SplitPlan
    tgt_train: DomainDataset
    scoring: np.ndarray
    init: dict[str, np.ndarray]
    artifacts: dict = field(default_factory=dict)


def _resolve_data(plan: ExperimentPlan, data_seed: int):
    if isinstance(plan.task, SyntheticTask):
        return generate_synthetic(plan.task.spec, data_seed)
    src = load_domain(plan.task.src_path, plan.task.fmt)
    tgt = load_domain(plan.task.tgt_path, plan.task.fmt)
    return src, tgt, None


def run_cold(plan: ExperimentPlan, pretrained: dict | None = None) -> ColdRun:
    """Pre-train, run the plan's transfer method, and evaluate on cold sets.

    Each test user's initial target representation (random for tgt, shared
    for cmf, bridged otherwise) is scored against every rating in their cold
    set; predictions are clipped to the plan's rating range. ``pretrained``
    may inject already-trained {"src_model", "tgt_model"} to skip pre-training.
    """
    seeds = _stage_seeds(plan.seed)
    src, tgt, truth = _resolve_data(plan, seeds["data"])
    split = make_split(src, tgt, plan.beta, plan.seed)
    tgt_train = filter_to_indices(tgt, split.target_train_indices)
    if plan.include_test_users_in_source:
        src_train = src
    else:
        test_src = np.asarray([src.users.index(u) for u in split.test_users])
        src_train = filter_to_indices(src, np.flatnonzero(~np.isin(src.user_idx, test_src)))

    artifacts: dict = {"truth": truth}
    counters = {"test_users_missing_source": 0, "unseen_item_predictions": 0,
                "skipped_meta_samples": 0}
    init: dict[str, np.ndarray] = {}

    if plan.method == "cmf":
        cmf, trace = cmf_train(src_train, tgt_train, plan.k, plan.pretrain,
                               seed=seeds["tgt"])
        artifacts["cmf"] = cmf
        artifacts["cmf_trace"] = trace
        scoring = cmf.tgt_items
        for u in split.test_users:
            init[u] = cmf.users[cmf.user_map.index(u)].copy()
    else:
        if pretrained and "tgt_model" in pretrained:
            tgt_model, tgt_trace = pretrained["tgt_model"], []
        else:
            tgt_model, tgt_trace = pretrain(tgt_train, plan.k, plan.base_model,
                                            plan.pretrain, seed=seeds["tgt"])
        artifacts["tgt_model"] = tgt_model
        artifacts["tgt_trace"] = tgt_trace
        scoring = item_scoring_vectors(tgt_model)

        if plan.method == "tgt":
            for u in split.test_users:
                init[u] = user_representation(tgt_model, tgt.users.index(u))
        else:
            if pretrained and "src_model" in pretrained:
                src_model, src_trace = pretrained["src_model"], []
            else:
                src_model, src_trace = pretrain(src_train, plan.k, plan.base_model,
                                                plan.pretrain, seed=seeds["src"])
            artifacts["src_model"] = src_model
            artifacts["src_trace"] = src_trace
            ctx = build_context(src_model, tgt_model, build_sequences(src))
            artifacts["ctx"] = ctx
            train_src = np.asarray([src.users.index(u) for u in split.train_overlap_users])
            train_tgt = np.asarray([tgt.users.index(u) for u in split.train_overlap_users])

            if plan.method == "emcdr":
                W, trace = train_common_bridge(ctx.user_reprs[train_src],
                                               ctx.tgt_user_reprs[train_tgt],
                                               plan.bridge, seed=seeds["bridge"])
                artifacts["common_bridge"] = W
                artifacts["bridge_trace"] = trace
                for u in split.test_users:
                    init[u] = W @ ctx.user_reprs[src.users.index(u)]
            else:
                rng = np.random.default_rng(seeds["nets"])
                enc = CharacteristicEncoder(plan.k, max_seq_len=plan.max_seq_len,
                                            activation=plan.bridge.activation, rng=rng)
                meta = MetaNetwork(plan.k, activation=plan.bridge.activation, rng=rng)
                if plan.method == "ptupcdr":
                    groups = rows_by_user(tgt_train)
                    su, it, rt = [], [], []
                    for u, t_idx in zip(split.train_overlap_users, train_tgt):
                        rows = groups.get(int(t_idx))
                        if rows is None:
                            continue
                        su.append(np.full(len(rows), src.users.index(u), dtype=np.int64))
                        it.append(tgt_train.item_idx[rows])
                        rt.append(tgt_train.rating[rows])
                    if not su:
                        raise ValueError("no target-domain ratings of overlap users to train on")
                    trace = train_meta(enc, meta, ctx,
                                       np.concatenate(su), np.concatenate(it),
                                       np.concatenate(rt), plan.bridge,
                                       seed=seeds["bridge"])
                    counters["skipped_meta_samples"] = trace["skipped_samples"]
                else:  # ptupcdr_mapping_ablation
                    trace = train_meta_mapping(enc, meta, ctx, train_src, train_tgt,
                                               plan.bridge, seed=seeds["bridge"])
                artifacts["enc"] = enc
                artifacts["meta"] = meta
                artifacts["bridge_trace"] = trace
                for u in split.test_users:
                    init[u] = transform_user(enc, meta, ctx, src.users.index(u))

    trained_items = np.unique(tgt_train.item_idx)
    all_r, all_p = [], []
    for u in split.test_users:
        if u not in init:
            counters["test_users_missing_source"] += 1
            continue
        rows = split.cold[u]
        items = tgt.item_idx[rows]
        counters["unseen_item_predictions"] += int(np.sum(~np.isin(items, trained_items)))
        preds = np.clip(scoring[items] @ init[u], plan.clip_low, plan.clip_high)
        all_r.append(tgt.rating[rows])
        all_p.append(preds)
    mae, rmse = compute_metrics(np.concatenate(all_r), np.concatenate(all_p))
    report = MetricsReport(method=plan.method, beta=plan.beta, seed=plan.seed,
                           stage="cold", mae=mae, rmse=rmse,
                           n_eval=int(sum(len(x) for x in all_r)), counters=counters)
    logger.info("cold %s beta=%.2f seed=%d: mae=%.4f rmse=%.4f (n=%d)",
                plan.method, plan.beta, plan.seed, mae, rmse, report.n_eval)
    return ColdRun(plan=plan, report=report, src=src, tgt=tgt, truth=truth,
                   split=split, tgt_train=tgt_train, scoring=scoring, init=init,
                   artifacts=artifacts)


# ---------------------------------------------------------------------------
# warm stage

def run_warm(plan: ExperimentPlan, cold: ColdRun | None = None) -> MetricsReport:
    """Fine-tune each test user's representation on their cold set, score the warm set.

    Fine-tuning is joint mini-batch Adam over all test users' cold ratings;
    item vectors stay frozen unless ``plan.finetune_items`` is set. With zero
    fine-tune epochs the warm-set predictions equal the cold-stage ones.
    """
    if cold is None:
        cold = run_cold(plan)
    split = cold.split
    users = [u for u in split.test_users if u in cold.init]
    slot = {u: i for i, u in enumerate(users)}
    E = np.stack([cold.init[u] for u in users]) if users else np.zeros((0, plan.k))
    Q = cold.scoring.copy() if plan.finetune_items else cold.scoring

    su, it, rt = [], [], []
    for u in users:
        rows = split.cold[u]
        su.append(np.full(len(rows), slot[u], dtype=np.int64))
        it.append(cold.tgt.item_idx[rows])
        rt.append(cold.tgt.rating[rows])
    pool_u = np.concatenate(su) if su else np.zeros(0, dtype=np.int64)
    pool_i = np.concatenate(it) if it else np.zeros(0, dtype=np.int64)
    pool_r = np.concatenate(rt) if rt else np.zeros(0)

    cfg = plan.finetune
    if cfg.epochs > 0 and len(pool_r) > 0:
        params = {"E": E}
        if plan.finetune_items:
            params["Q"] = Q
        opt = Adam(params, lr=cfg.lr)
        rng = np.random.default_rng(_stage_seeds(plan.seed)["finetune"])
        for epoch in range(cfg.epochs):
            perm = rng.permutation(len(pool_r))
            for start in range(0, len(pool_r), cfg.batch_size):
                batch = perm[start:start + cfg.batch_size]
                uu, ii, rr = pool_u[batch], pool_i[batch], pool_r[batch]
                pred = np.einsum("bk,bk->b", E[uu], Q[ii])
                g = 2.0 * (pred - rr) / len(batch)
                if not np.isfinite(pred).all():
                    raise RuntimeError(f"warm fine-tuning diverged at epoch {epoch}")
                dE = np.zeros_like(E)
                np.add.at(dE, uu, g[:, None] * Q[ii])
                grads = {"E": dE}
                if plan.finetune_items:
                    dQ = np.zeros_like(Q)
                    np.add.at(dQ, ii, g[:, None] * E[uu])
                    grads["Q"] = dQ
                opt.step(grads)

    counters = {"users_empty_warm": 0}
    all_r, all_p = [], []
    for u in users:
        rows = split.warm[u]
        if len(rows) == 0:
            counters["users_empty_warm"] += 1
            continue
        items = cold.tgt.item_idx[rows]
        preds = np.clip(Q[items] @ E[slot[u]], plan.clip_low, plan.clip_high)
        all_r.append(cold.tgt.rating[rows])
        all_p.append(preds)
    mae, rmse = compute_metrics(np.concatenate(all_r), np.concatenate(all_p))
    report = MetricsReport(method=plan.method, beta=plan.beta, seed=plan.seed,
                           stage="warm", mae=mae, rmse=rmse,
                           n_eval=int(sum(len(x) for x in all_r)), counters=counters)
    logger.info("warm %s beta=%.2f seed=%d: mae=%.4f rmse=%.4f (n=%d)",
                plan.method, plan.beta, plan.seed, mae, rmse, report.n_eval)
    return report


def run_plan(plan: ExperimentPlan):
    """Cold stage then warm stage; returns both reports with wall times attached."""
    t0 = time.monotonic()
    cold = run_cold(plan)
    t1 = time.monotonic()
    warm = run_warm(plan, cold)
    t2 = time.monotonic()
    return (cold.report, t1 - t0), (warm, t2 - t1)


# ---------------------------------------------------------------------------
# suites

def _plan_rows(plan: ExperimentPlan, record_runtime: bool):
    try:
        (cold, t_cold), (warm, t_warm) = run_plan(plan)
    except Exception as exc:  # suite keeps going; the row records the failure
        logger.exception("plan failed: %s %s beta=%s seed=%s",
                         plan.task.label, plan.method, plan.beta, plan.seed)
        return [{"task": plan.task.label, "beta": plan.beta, "method": plan.method,
                 "stage": "failed", "seed": plan.seed, "mae": None, "rmse": None,
                 "n_eval": None, "runtime_s": 0.0, "error": str(exc)}]
    rows = []
    for report, t in ((cold, t_cold), (warm, t_warm)):
        rows.append({"task": plan.task.label, "beta": plan.beta, "method": plan.method,
                     "stage": report.stage, "seed": plan.seed, "mae": report.mae,
                     "rmse": report.rmse, "n_eval": report.n_eval,
                     "runtime_s": round(t, 3) if record_runtime else 0.0})
    return rows


def run_suite(plans, parallelism: int = 1, record_runtime: bool = True):
    """Run every plan, then append seed-averaged rows per (task, beta, method, stage).

    Failed plans produce a single row with stage "failed" and an ``error``
    field; the suite continues. Rows come back in deterministic plan order.
    """
    if not plans:
        raise ValueError("need at least one plan")
    if parallelism > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallelism) as pool:
            chunks = list(pool.map(_plan_rows, plans, [record_runtime] * len(plans)))
    else:
        chunks = [_plan_rows(p, record_runtime) for p in plans]
    rows = [r for chunk in chunks for r in chunk]

    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["stage"] == "failed":
            continue
        groups.setdefault((r["task"], r["beta"], r["method"], r["stage"]), []).append(r)
    for key, members in groups.items():
        if len(members) < 2:
            continue
        rows.append({"task": key[0], "beta": key[1], "method": key[2], "stage": key[3],
                     "seed": "mean",
                     "mae": float(np.mean([m["mae"] for m in members])),
                     "rmse": float(np.mean([m["rmse"] for m in members])),
                     "n_eval": float(np.mean([m["n_eval"] for m in members])),
                     "runtime_s": float(np.mean([m["runtime_s"] for m in members]))})
    return rows


def _format_cell(col, value):
    if value is None:
        return ""
    if col in ("mae", "rmse"):
        return f"{value:.6f}"
    if col == "runtime_s":
        return f"{value:.3f}"
    if col in ("beta", "n_eval"):
        return f"{value:g}" if isinstance(value, float) else str(value)
    return str(value)


def write_suite_csv(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SUITE_COLUMNS)
        for r in rows:
            writer.writerow([_format_cell(c, r.get(c)) for c in SUITE_COLUMNS])


def write_suite_json(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")


def sweep_plans(base: ExperimentPlan, methods=None, betas=None, seeds=None):
    """Cross product of method/beta/seed variations of a base plan."""
    plans = []
    for m in methods or [base.method]:
        for b in betas or [base.beta]:
            for s in seeds or [base.seed]:
                plans.append(replace(base, method=m, beta=b, seed=s))
    return plans
