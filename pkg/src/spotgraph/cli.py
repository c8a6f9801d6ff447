"""Command-line entrypoint: one subcommand per pipeline stage plus ``pipeline``
for the full chain. Every run writes a resolved-config snapshot next to its
outputs so any artifact can be reproduced bit-identically from the snapshot.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import spotgraph
from spotgraph import gnn, kernels
from spotgraph.ingest import (IngestError, load_sample, load_embeddings, save_spots,
                              save_expression, save_embeddings, save_matrix)
from spotgraph.smoothing import SpcsParams, smooth_8n, spcs_smooth
from spotgraph.clustering import cluster_spatial, cluster_feature
from spotgraph.graph import GraphInvariantError, assemble, save_edges
from spotgraph.train import TrainConfig, TrainingDiverged, prepare_instance, train
from spotgraph.evaluate import compute_metrics, cross_validate, heatmap_export, mean_report
from spotgraph.synth import SynthSpec, InfeasibleSpecError, generate

log = logging.getLogger("spotgraph")


@dataclass
class RunConfig:
    """Flat key-value run configuration; flags override file values."""

    seed: int = 3927
    smoothing: str = "spcs"        # spcs | 8n | none
    tau_s: int = 2
    tau_p: int = 16
    alpha: float = 0.6
    beta: float = 0.4
    pca_dim: int = 10
    cluster_size: int = 100
    graph: str = "hier"            # hier | one-hop
    epochs: int = 400
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    replicates: int = 5
    folds: int = 8
    heads: int = 8
    head_dim: int = 32
    edge_dropout: float = 0.2

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in fields:
                    raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _coerce(fields[key].default, value)
        return cls(**values)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for f in dataclasses.fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")

    def override(self, args: argparse.Namespace) -> "RunConfig":
        updates = {}
        for f in dataclasses.fields(self):
            flag = getattr(args, f.name, None)
            if flag is not None:
                updates[f.name] = flag
        return dataclasses.replace(self, **updates)

    def spcs_params(self) -> SpcsParams:
        return SpcsParams(tau_s=self.tau_s, tau_p=self.tau_p, alpha=self.alpha,
                          beta=self.beta, pca_dim=self.pca_dim)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                           optimizer=self.optimizer, seed=self.seed,
                           replicate_count=self.replicates)


def _coerce(default, text: str):
    kind = type(default)
    if kind is bool:
        return text.lower() in ("1", "true", "yes")
    return kind(text)


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.override(args)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: RunConfig, out: Path) -> None:
    cfg.to_file(out / "config.resolved.cfg")


def _add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    types = {f.name: (float if f.type == "float" else int if f.type == "int" else str)
             for f in dataclasses.fields(RunConfig)}
    for key in keys:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=types[key], default=None)


def _discover_samples(root) -> list[Path]:
    root = Path(root)
    if (root / "spots.tsv").exists():
        return [root]
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "spots.tsv").exists())
    if not dirs:
        raise IngestError(f"no sample directories (containing spots.tsv) under {root}")
    return dirs


def _load_sample_dir(d: Path):
    sample = load_sample(d / "spots.tsv", d / "expr.tsv", sample_id=d.name)
    emb = load_embeddings(d / "embeddings.tsv", sample)
    return sample, emb


def _instances(args, cfg: RunConfig):
    out = []
    for d in _discover_samples(args.data):
        sample, emb = _load_sample_dir(d)
        out.append(prepare_instance(sample, emb, graph_kind=cfg.graph,
                                    smoothing=cfg.smoothing, spcs_params=cfg.spcs_params(),
                                    cluster_size=cfg.cluster_size, seed=cfg.seed))
    return out


def _write_metrics(report, path_base: Path, extra: dict | None = None) -> None:
    payload = dict(report.as_dict())
    if extra:
        payload.update(extra)
    with open(path_base.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(path_base.with_suffix(".tsv"), "w", encoding="utf-8") as fh:
        keys = sorted(payload)
        fh.write("\t".join(keys) + "\n")
        fh.write("\t".join(repr(payload[k]) if isinstance(payload[k], float) else str(payload[k])
                 for k in keys) + "\n")


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    spec = SynthSpec(grid_rows=args.rows, grid_cols=args.cols, n_regions=args.regions,
                     genes_per_region=args.genes_per_region, embedding_dim=args.embedding_dim,
                     noise_sigma=args.noise_sigma, dropout_rate=args.dropout_rate,
                     seed=cfg.seed)
    sample, emb, labels = generate(spec)
    out = _outdir(args)
    save_spots(sample, out / "spots.tsv")
    save_expression(sample, out / "expr.tsv")
    save_embeddings(emb, sample.spot_ids, out / "embeddings.tsv")
    with open(out / "labels.tsv", "w", encoding="utf-8") as fh:
        fh.write("spot_id\tregion\n")
        for sid, lab in zip(sample.spot_ids, labels):
            fh.write(f"{sid}\t{lab}\n")
    _snapshot(cfg, out)
    print(f"wrote synthetic sample: {sample.n_spots} spots, {sample.n_genes} genes, "
          f"{spec.n_regions} regions -> {out}")
    return 0


def cmd_ingest(args) -> int:
    sample = load_sample(args.spots, args.expr)
    out = _outdir(args)
    save_spots(sample, out / "spots.tsv")
    save_expression(sample, out / "expr.tsv")
    if args.embeddings:
        emb = load_embeddings(args.embeddings, sample)
        save_embeddings(emb, sample.spot_ids, out / "embeddings.tsv")
        dim = emb.dim
    else:
        dim = None
    print(f"validated sample {sample.sample_id!r}: {sample.n_spots} spots, "
          f"{sample.n_genes} genes" + (f", {dim}-dim embeddings" if dim else ""))
    return 0


def cmd_smooth(args) -> int:
    cfg = _resolve_config(args)
    method = args.method or cfg.smoothing
    sample = load_sample(args.spots, args.expr)
    if method == "8n":
        smoothed = smooth_8n(sample)
        params = {}
    elif method == "spcs":
        params = cfg.spcs_params().as_dict()
        smoothed = spcs_smooth(sample, cfg.spcs_params())
    else:
        raise ValueError(f"unknown smoothing method {method!r}")
    out = _outdir(args)
    save_matrix(out / "expr_smoothed.tsv", sample.spot_ids, sample.genes, smoothed)
    with open(out / "smooth_meta.json", "w", encoding="utf-8") as fh:
        json.dump({"method": method, "seed": cfg.seed, **params}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _snapshot(cfg, out)
    print(f"smoothed {sample.sample_id!r} with {method} -> {out / 'expr_smoothed.tsv'}")
    return 0


def _cluster_pair(sample, emb, cfg):
    spatial = cluster_spatial(sample, emb, cfg.cluster_size, cfg.seed)
    feature = cluster_feature(emb, cfg.cluster_size, cfg.seed)
    return spatial, feature


def cmd_cluster(args) -> int:
    cfg = _resolve_config(args)
    sample = load_sample(args.spots, args.expr)
    emb = load_embeddings(args.embeddings, sample)
    spatial, feature = _cluster_pair(sample, emb, cfg)
    out = _outdir(args)
    s_hubs = set(spatial.centroid_spot.tolist())
    f_hubs = set(feature.centroid_spot.tolist())
    with open(out / "clusters.tsv", "w", encoding="utf-8") as fh:
        fh.write("spot_id\tspatial_cluster\tfeature_cluster\tis_spatial_centroid\tis_feature_centroid\n")
        for i, sid in enumerate(sample.spot_ids):
            fh.write(f"{sid}\t{spatial.assignments[i]}\t{feature.assignments[i]}"
                     f"\t{int(i in s_hubs)}\t{int(i in f_hubs)}\n")
    _snapshot(cfg, out)
    print(f"clustered {sample.n_spots} spots into {spatial.c} spatial / {feature.c} feature clusters")
    return 0


def cmd_build_graph(args) -> int:
    cfg = _resolve_config(args)
    sample = load_sample(args.spots, args.expr)
    emb = load_embeddings(args.embeddings, sample)
    spatial, feature = _cluster_pair(sample, emb, cfg)
    g = assemble(sample, spatial, feature)
    out = _outdir(args)
    save_edges(g, sample.spot_ids, out / "edges.tsv")
    _snapshot(cfg, out)
    print(f"graph over {g.n_nodes} nodes: {g.n_edges} edges -> {out / 'edges.tsv'}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    instances = _instances(args, cfg)
    result = train(instances, cfg.train_config())
    out = _outdir(args)
    gnn.save_checkpoint(result.model, out / "checkpoint.npz")
    with open(out / "loss_curve.tsv", "w", encoding="utf-8") as fh:
        fh.write("epoch\tloss\n")
        for e, v in enumerate(result.loss_curve):
            fh.write(f"{e}\t{repr(v)}\n")
    _snapshot(cfg, out)
    print(f"trained on {len(instances)} samples, {cfg.epochs} epochs; "
          f"final loss {result.loss_curve[-1]:.6g} (replicate {result.best_replicate}) -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    model = gnn.load_checkpoint(args.checkpoint)
    instances = _instances(args, cfg)
    reports = []
    out = _outdir(args)
    for inst in instances:
        pred = gnn.gat_forward(model, inst.pairs, inst.x, mode="eval")
        report = compute_metrics(pred, inst.y)
        reports.append(report)
        _write_metrics(report, out / f"metrics_{inst.sample_id}", {"sample_id": inst.sample_id})
    overall = mean_report(reports)
    _write_metrics(overall, out / "metrics", {"n_samples": len(instances)})
    _snapshot(cfg, out)
    print(f"eval on {len(instances)} samples: mse {overall.mse:.6g} mae {overall.mae:.6g} "
          f"pcc {overall.pcc:.4f}")
    return 0


def cmd_cv(args) -> int:
    cfg = _resolve_config(args)
    instances = _instances(args, cfg)
    if len(instances) < cfg.folds:
        raise ValueError(f"fewer samples than folds ({len(instances)} < {cfg.folds})")
    result = cross_validate(instances, cfg.folds, cfg.train_config())
    out = _outdir(args)
    with open(out / "cv_folds.tsv", "w", encoding="utf-8") as fh:
        fh.write("fold\ttest_samples\tmse\tmae\tpcc\n")
        for fr in result.folds:
            fh.write(f"{fr.fold}\t{','.join(fr.test_ids)}\t{repr(fr.report.mse)}"
                     f"\t{repr(fr.report.mae)}\t{repr(fr.report.pcc)}\n")
    _write_metrics(result.mean, out / "cv_mean", {"folds": cfg.folds})
    _snapshot(cfg, out)
    print(f"{cfg.folds}-fold CV: mean mse {result.mean.mse:.6g} mae {result.mean.mae:.6g} "
          f"pcc {result.mean.pcc:.4f}")
    return 0


def cmd_heatmap(args) -> int:
    cfg = _resolve_config(args)
    model = gnn.load_checkpoint(args.checkpoint)
    d = _discover_samples(args.data)[0]
    sample, emb = _load_sample_dir(d)
    inst = prepare_instance(sample, emb, graph_kind=cfg.graph, smoothing=cfg.smoothing,
                            spcs_params=cfg.spcs_params(), cluster_size=cfg.cluster_size,
                            seed=cfg.seed)
    pred = gnn.gat_forward(model, inst.pairs, inst.x, mode="eval")
    img = heatmap_export(sample, args.gene, pred, inst.y, args.out)
    print(f"wrote {args.out} and {img}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _resolve_config(args)
    out = _outdir(args)
    dirs = _discover_samples(args.data)
    instances, samples = [], {}
    for d in dirs:
        sample, emb = _load_sample_dir(d)
        inst = prepare_instance(sample, emb, graph_kind=cfg.graph, smoothing=cfg.smoothing,
                                spcs_params=cfg.spcs_params(), cluster_size=cfg.cluster_size,
                                seed=cfg.seed)
        sdir = out / sample.sample_id
        sdir.mkdir(parents=True, exist_ok=True)
        save_matrix(sdir / "expr_smoothed.tsv", sample.spot_ids, sample.genes, inst.y)
        if inst.graph is not None:
            save_edges(inst.graph, sample.spot_ids, sdir / "edges.tsv")
        instances.append(inst)
        samples[inst.sample_id] = sample

    if args.cv:
        if len(instances) < cfg.folds:
            raise ValueError(f"fewer samples than folds ({len(instances)} < {cfg.folds})")
        result = cross_validate(instances, cfg.folds, cfg.train_config())
        _write_metrics(result.mean, out / "metrics", {"folds": cfg.folds})
        with open(out / "cv_folds.tsv", "w", encoding="utf-8") as fh:
            fh.write("fold\ttest_samples\tmse\tmae\tpcc\n")
            for fr in result.folds:
                fh.write(f"{fr.fold}\t{','.join(fr.test_ids)}\t{repr(fr.report.mse)}"
                         f"\t{repr(fr.report.mae)}\t{repr(fr.report.pcc)}\n")
        summary = result.mean
    else:
        tr = train(instances, cfg.train_config())
        gnn.save_checkpoint(tr.model, out / "checkpoint.npz")
        reports = []
        for inst in instances:
            sample = samples[inst.sample_id]
            pred = gnn.gat_forward(tr.model, inst.pairs, inst.x, mode="eval")
            save_matrix(out / inst.sample_id / "predictions.tsv",
                        sample.spot_ids, sample.genes, pred)
            reports.append(compute_metrics(pred, inst.y))
        summary = mean_report(reports)
        _write_metrics(summary, out / "metrics", {"n_samples": len(instances)})
    _snapshot(cfg, out)
    print(f"pipeline done: mse {summary.mse:.6g} mae {summary.mae:.6g} pcc {summary.pcc:.4f} -> {out}")
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spotgraph",
                                     description="hierarchical spot-graph expression prediction")
    parser.add_argument("--version", action="version",
                        version=f"spotgraph {spotgraph.__version__} "
                                f"(kernel backend: {kernels.active_backend()})")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sample")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--regions", type=int, required=True)
    p.add_argument("--genes-per-region", type=int, default=5)
    p.add_argument("--embedding-dim", type=int, default=256)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--dropout-rate", type=float, default=0.0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["seed"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate and canonicalize a sample")
    p.add_argument("--spots", required=True)
    p.add_argument("--expr", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("smooth", help="smooth the expression matrix")
    p.add_argument("--spots", required=True)
    p.add_argument("--expr", required=True)
    p.add_argument("--method", choices=["8n", "spcs"], default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["tau_s", "tau_p", "alpha", "beta", "pca_dim", "seed"])
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("cluster", help="spatial + feature clustering")
    p.add_argument("--spots", required=True)
    p.add_argument("--expr", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--size", dest="cluster_size", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["seed"])
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("build-graph", help="assemble the hierarchical graph")
    p.add_argument("--spots", required=True)
    p.add_argument("--expr", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--size", dest="cluster_size", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["seed"])
    p.set_defaults(func=cmd_build_graph)

    for name, handler, extra in (("train", cmd_train, ()),
                                 ("cv", cmd_cv, ("folds",))):
        p = sub.add_parser(name, help=f"{name} on a directory of samples")
        p.add_argument("--data", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--out", required=True)
        _add_config_flags(p, ["seed", "epochs", "learning_rate", "cluster_size",
                              "graph", "smoothing", "replicates", "optimizer"] + list(extra))
        p.set_defaults(func=handler)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["seed", "cluster_size", "graph", "smoothing"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="export truth/prediction heatmaps for one gene")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gene", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["seed", "cluster_size", "graph", "smoothing"])
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("pipeline", help="smooth, cluster, build graphs, train, evaluate")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--cv", action="store_true", help="cross-validate instead of in-sample eval")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["seed", "epochs", "learning_rate", "cluster_size",
                          "graph", "smoothing", "replicates", "optimizer", "folds"])
    p.set_defaults(func=cmd_pipeline)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (IngestError, GraphInvariantError, TrainingDiverged, InfeasibleSpecError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
