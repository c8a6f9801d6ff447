"""Training loop: per-sample optimization steps, Adam or plain SGD, replicated
runs with best-model selection, and assembly of per-sample training instances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from spotgraph.ingest import STSample, EmbeddingMatrix
from spotgraph.smoothing import SpcsParams, smooth_8n, spcs_smooth
from spotgraph.clustering import cluster_spatial, cluster_feature
from spotgraph.graph import HierGraph, assemble, one_hop_graph
from spotgraph import gnn

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    learning_rate: float = 1e-3
    optimizer: str = "adam"        # "adam" | "sgd"
    seed: int = 3927
    replicate_count: int = 5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.replicate_count < 1:
            raise ValueError("replicate_count must be >= 1")


@dataclass
class TrainingInstance:
    """One sample ready for the GNN: features, targets, and the edge set."""

    sample_id: str
    x: np.ndarray                  # (n, d) node features
    y: np.ndarray                  # (n, m) target expression
    pairs: np.ndarray              # (L, 2) unique undirected edges
    n_nodes: int
    graph: HierGraph | None = None


@dataclass
class TrainResult:
    model: gnn.GatModel
    loss_curve: list[float]              # winning replicate, mean loss per epoch
    replicate_scores: list[float]        # selection score per replicate
    best_replicate: int
    all_curves: list[list[float]] = field(repr=False, default_factory=list)


def prepare_instance(sample: STSample, embeddings: EmbeddingMatrix,
                     graph_kind: str = "hier", smoothing: str = "spcs",
                     spcs_params: SpcsParams | None = None,
                     cluster_size: int = 100, seed: int = 3927) -> TrainingInstance:
    """Smooth targets, build the requested graph, and bundle a training instance.

    graph_kind: "hier" (internal + shortcut + one-hop) or "one-hop".
    smoothing: "spcs", "8n", or "none" (raw targets).
    """
    if smoothing == "spcs":
        y = spcs_smooth(sample, spcs_params or SpcsParams())
    elif smoothing == "8n":
        y = smooth_8n(sample)
    elif smoothing == "none":
        y = sample.expr_raw.copy()
    else:
        raise ValueError(f"unknown smoothing method {smoothing!r}")

    if graph_kind == "hier":
        spatial = cluster_spatial(sample, embeddings, cluster_size, seed)
        feature = cluster_feature(embeddings, cluster_size, seed)
        graph = assemble(sample, spatial, feature)
    elif graph_kind == "one-hop":
        graph = one_hop_graph(sample)
    else:
        raise ValueError(f"unknown graph kind {graph_kind!r}")

    return TrainingInstance(sample_id=sample.sample_id, x=embeddings.data.copy(),
                            y=y, pairs=graph.adjacency_pairs(), n_nodes=sample.n_spots,
                            graph=graph)


# -- optimizers -------------------------------------------------------------------

class _Adam:
    def __init__(self, grads_like, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [{k: np.zeros_like(v) for k, v in layer.items()} for layer in grads_like]
        self.v = [{k: np.zeros_like(v) for k, v in layer.items()} for layer in grads_like]

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for layer, glayer, m, v in zip(params, grads, self.m, self.v):
            for name, g in glayer.items():
                m[name] = self.beta1 * m[name] + (1 - self.beta1) * g
                v[name] = self.beta2 * v[name] + (1 - self.beta2) * (g * g)
                update = self.lr * (m[name] / b1c) / (np.sqrt(v[name] / b2c) + self.eps)
                arr = getattr(layer, name)
                setattr(layer, name, arr - update)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for layer, glayer in zip(params, grads):
            for name, g in glayer.items():
                setattr(layer, name, getattr(layer, name) - self.lr * g)


def _mean_eval_mse(model, instances) -> float:
    losses = []
    for inst in instances:
        pred = gnn.gat_forward(model, inst.pairs, inst.x, mode="eval")
        loss, _ = gnn.mse_loss(pred, inst.y)
        losses.append(loss)
    return float(np.mean(losses))


def _train_once(instances, config: TrainConfig, replicate: int,
                model_init=None) -> tuple[gnn.GatModel, list[float]]:
    in_dim = instances[0].x.shape[1]
    out_dim = instances[0].y.shape[1]
    if model_init is not None:
        model = model_init(replicate)
    else:
        model = gnn.init_model(in_dim=in_dim, out_dim=out_dim,
                               seed=config.seed + replicate)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [config.seed, replicate, 0xd209])))
    opt = _Adam(_zero_grads(model), config.learning_rate) if config.optimizer == "adam" \
        else _Sgd(config.learning_rate)

    curve = []
    for epoch in range(config.epochs):
        epoch_losses = []
        for inst in instances:
            keep = gnn.dropout_mask(inst.pairs.shape[0], model.edge_dropout_p, rng)
            src, dst = gnn.expand_edges(inst.pairs, inst.n_nodes, keep)
            loss, grads, _ = gnn.loss_and_grads(model, src, dst, inst.x, inst.y)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss is {loss} at epoch {epoch}, sample {inst.sample_id!r} "
                    f"(replicate {replicate}, lr {config.learning_rate})")
            opt.step(model.layers, grads)
            epoch_losses.append(loss)
        curve.append(float(np.mean(epoch_losses)))
    return model, curve


def _zero_grads(model):
    return [{name: np.zeros_like(arr) for name, arr in lyr.param_items()}
            for lyr in model.layers]


def train(instances, config: TrainConfig, val_instances=None, model_init=None) -> TrainResult:
    """Train over samples (one optimization step per sample per epoch).

    Runs ``replicate_count`` independent replicates (seeds seed+0 .. seed+r-1)
    and returns the one with the lowest mean eval MSE on ``val_instances``
    (falling back to the final training loss when no validation set is given).
    """
    if not instances:
        raise ValueError("need at least one training sample")
    instances = sorted(instances, key=lambda inst: inst.sample_id)

    best = None
    scores, curves = [], []
    for r in range(config.replicate_count):
        model, curve = _train_once(instances, config, r, model_init)
        score = _mean_eval_mse(model, val_instances) if val_instances else curve[-1]
        scores.append(score)
        curves.append(curve)
        log.info("replicate %d: final train loss %.6g, selection score %.6g", r, curve[-1], score)
        if best is None or score < scores[best]:
            best = r
            best_model, best_curve = model, curve
    return TrainResult(model=best_model, loss_curve=best_curve, replicate_scores=scores,
                       best_replicate=best, all_curves=curves)
