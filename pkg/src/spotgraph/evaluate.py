"""Metrics (MSE / MAE / per-gene PCC), the slide-level cross-validation
harness, per-gene heatmap export, and a graph-free linear baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from spotgraph.ingest import STSample, _fmt
from spotgraph import gnn
from spotgraph.train import TrainConfig, TrainingInstance, TrainResult, train

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    mse: float
    mae: float
    pcc: float                      # mean over genes with defined correlation
    per_gene_pcc: np.ndarray        # (m,), NaN where undefined
    n_genes_excluded: int = 0

    def as_dict(self) -> dict:
        return {"mse": self.mse, "mae": self.mae, "pcc": self.pcc,
                "n_genes_excluded": self.n_genes_excluded}


def compute_metrics(pred: np.ndarray, truth: np.ndarray) -> MetricsReport:
    """MSE and MAE over all entries; PCC per gene across spots, then averaged.

    A gene whose truth or prediction column has zero variance has no defined
    correlation: it is excluded from the mean and counted in the report.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}")
    diff = pred - truth
    mse = float(np.mean(diff * diff))
    mae = float(np.mean(np.abs(diff)))

    dp = pred - pred.mean(axis=0)
    dt = truth - truth.mean(axis=0)
    denom = np.sqrt((dp * dp).sum(axis=0) * (dt * dt).sum(axis=0))
    defined = denom > 0
    per_gene = np.full(pred.shape[1], np.nan)
    per_gene[defined] = (dp[:, defined] * dt[:, defined]).sum(axis=0) / denom[defined]
    per_gene[defined] = np.clip(per_gene[defined], -1.0, 1.0)
    n_excluded = int((~defined).sum())
    pcc = float(per_gene[defined].mean()) if defined.any() else float("nan")
    return MetricsReport(mse=mse, mae=mae, pcc=pcc, per_gene_pcc=per_gene,
                         n_genes_excluded=n_excluded)


def mean_report(reports) -> MetricsReport:
    """Average a list of reports field-wise (per-gene vectors averaged over NaN)."""
    reports = list(reports)
    per_gene = np.nanmean(np.stack([r.per_gene_pcc for r in reports]), axis=0) \
        if len({r.per_gene_pcc.shape for r in reports}) == 1 else np.array([])
    return MetricsReport(
        mse=float(np.mean([r.mse for r in reports])),
        mae=float(np.mean([r.mae for r in reports])),
        pcc=float(np.mean([r.pcc for r in reports])),
        per_gene_pcc=per_gene,
        n_genes_excluded=int(np.sum([r.n_genes_excluded for r in reports])),
    )


# -- cross validation ---------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    test_ids: list[str]
    report: MetricsReport
    train_result: TrainResult = field(repr=False, default=None)


@dataclass
class CrossValResult:
    folds: list[FoldResult]
    mean: MetricsReport
    fold_of_sample: dict[str, int]


def partition_folds(sample_ids, folds: int, seed: int) -> dict[str, int]:
    """Deterministic slide-level partition keyed by sample_id (order-invariant)."""
    ids = sorted(sample_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids")
    if len(ids) < folds:
        raise ValueError(f"fewer samples than folds ({len(ids)} < {folds})")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xf01d])))
    perm = rng.permutation(len(ids))
    return {ids[j]: int(i % folds) for i, j in enumerate(perm)}


def cross_validate(instances, folds: int, config: TrainConfig,
                   model_init=None) -> CrossValResult:
    """Slide-level k-fold CV: train on k-1 folds, select replicates by held-out
    MSE, report per-fold metrics (per-sample reports averaged) and their mean."""
    instances = sorted(instances, key=lambda inst: inst.sample_id)
    fold_of = partition_folds([inst.sample_id for inst in instances], folds, config.seed)
    results = []
    for f in range(folds):
        test = [inst for inst in instances if fold_of[inst.sample_id] == f]
        train_set = [inst for inst in instances if fold_of[inst.sample_id] != f]
        tr = train(train_set, config, val_instances=test, model_init=model_init)
        reports = []
        for inst in test:
            pred = gnn.gat_forward(tr.model, inst.pairs, inst.x, mode="eval")
            reports.append(compute_metrics(pred, inst.y))
        fold_report = mean_report(reports)
        log.info("fold %d (%s): mse %.5g mae %.5g pcc %.4f", f,
                 ",".join(inst.sample_id for inst in test),
                 fold_report.mse, fold_report.mae, fold_report.pcc)
        results.append(FoldResult(fold=f, test_ids=[inst.sample_id for inst in test],
                                  report=fold_report, train_result=tr))
    return CrossValResult(folds=results, mean=mean_report([r.report for r in results]),
                          fold_of_sample=fold_of)


# -- graph-free baseline --------------------------------------------------------

def fit_linear_baseline(instances, ridge: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Per-node ridge regression from features to targets over pooled spots."""
    x = np.concatenate([inst.x for inst in instances])
    y = np.concatenate([inst.y for inst in instances])
    xm = x.mean(axis=0)
    ym = y.mean(axis=0)
    xc = x - xm
    gram = xc.T @ xc + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(gram, xc.T @ (y - ym))
    b = ym - xm @ w
    return w, b


def predict_linear(w, b, x) -> np.ndarray:
    return x @ w + b


# -- heatmap export ---------------------------------------------------------------

def heatmap_export(sample: STSample, gene: str, pred: np.ndarray, truth: np.ndarray,
                   path) -> str:
    """Write a per-spot (grid_row, grid_col, truth, pred) TSV plus a PNG of both
    fields; the per-gene PCC goes into the figure caption and PNG metadata.

    Returns the image path. The TSV re-ingests bit-exactly.
    """
    from pathlib import Path
    if gene not in sample.genes:
        raise ValueError(f"gene {gene!r} not in panel; available: {', '.join(sample.genes)}")
    j = sample.genes.index(gene)
    pred_g = np.asarray(pred, dtype=np.float64)[:, j]
    truth_g = np.asarray(truth, dtype=np.float64)[:, j]

    report = compute_metrics(pred_g[:, None], truth_g[:, None])
    pcc = report.per_gene_pcc[0]

    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("grid_row\tgrid_col\ttruth\tpred\n")
        for i, s in enumerate(sample.spots):
            fh.write(f"{s.grid_row}\t{s.grid_col}\t{_fmt(truth_g[i])}\t{_fmt(pred_g[i])}\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = np.array([s.grid_row for s in sample.spots])
    cols = np.array([s.grid_col for s in sample.spots])
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    vmin = float(min(truth_g.min(), pred_g.min()))
    vmax = float(max(truth_g.max(), pred_g.max()))
    for ax, values, title in ((axes[0], truth_g, "truth"), (axes[1], pred_g, "prediction")):
        sc = ax.scatter(cols, rows, c=values, s=60, marker="s", vmin=vmin, vmax=vmax)
        ax.invert_yaxis()
        ax.set_title(title)
        ax.set_aspect("equal")
    fig.colorbar(sc, ax=axes, shrink=0.8)
    caption = f"{gene} (PCC {pcc:.4f})" if np.isfinite(pcc) else f"{gene} (PCC undefined)"
    fig.suptitle(caption)
    img_path = path.with_suffix(".png")
    fig.savefig(img_path, dpi=100, metadata={"Description": caption})
    plt.close(fig)
    return str(img_path)
