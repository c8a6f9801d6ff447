"""Joint gene-expression prediction over hierarchical spot graphs.

The pipeline: load spot tables and patch embeddings, smooth the noisy
expression matrix (plain 8-neighbor averaging or two-factor spatial +
pattern smoothing), cluster spots in grid space and in embedding space,
assemble a hierarchical graph with internal, shortcut, and one-hop edges,
and train a small graph attention network to regress per-spot expression
vectors from the embeddings.
"""

__version__ = "0.1.0"

from spotgraph.ingest import STSample, SpotRecord, EmbeddingMatrix, load_sample, load_embeddings
from spotgraph.smoothing import SpcsParams, logcpm, smooth_8n, spcs_smooth
from spotgraph.clustering import ClusterModel, cluster_spatial, cluster_feature
from spotgraph.graph import HierGraph, assemble, one_hop_graph
from spotgraph.gnn import GatModel, init_model, gat_forward
from spotgraph.train import TrainConfig, TrainingInstance, train
from spotgraph.evaluate import MetricsReport, compute_metrics, cross_validate
from spotgraph.synth import SynthSpec, generate

__all__ = [
    "STSample", "SpotRecord", "EmbeddingMatrix", "load_sample", "load_embeddings",
    "SpcsParams", "logcpm", "smooth_8n", "spcs_smooth",
    "ClusterModel", "cluster_spatial", "cluster_feature",
    "HierGraph", "assemble", "one_hop_graph",
    "GatModel", "init_model", "gat_forward",
    "TrainConfig", "TrainingInstance", "train",
    "MetricsReport", "compute_metrics", "cross_validate",
    "SynthSpec", "generate",
]
