"""Report rendering: aggregated tables as CSV, aligned text, and figures.

The text table has one block per training-data fraction, regimes down the
side, and AUROC/AUPRC/B-Acc for both tasks across. Cells show mean and
sample std over seeds at three decimals; cells with no completed runs render
as a dash. Significance stars compare each regime against target-only at the
same fraction via a paired bootstrap over pooled per-seed test scores.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evalmetrics import MetricError, ReportRow, ScoredSet, aggregate, auroc, paired_bootstrap
from .rng import stream
from .transferlab import cell_name

DISPLAY_NAMES = {
    "source-only": "Source-Only",
    "target-only": "Target-Only",
    "source-ftd": "Source+FTD",
    "source-ftf": "Source+FTF",
    "cpc-ftd": "CPC+FTD",
    "cpc-ftf": "CPC+FTF",
}
MISSING = "—"
METRICS = ("auroc", "auprc", "bacc")
METRIC_LABELS = {"auroc": "AUROC", "auprc": "AUPRC", "bacc": "B-Acc"}


def rows_to_report_rows(rows: list[dict]) -> list[ReportRow]:
    out = []
    for r in rows:
        if "error" in r:
            continue
        out.append(ReportRow(
            task=r["task"], regime=r["regime"], fraction=r["fraction"],
            seed=r["seed"], auroc=r["auroc"], auprc=r["auprc"], bacc=r["bacc"],
            n_test=r["n_test"],
        ))
    return out


def _fmt(v: float) -> str:
    s = f"{v:.3f}"
    return s[1:] if s.startswith("0.") else s


def format_cell(mean: float | None, std: float | None) -> str:
    if mean is None:
        return MISSING
    if std is None:
        return _fmt(mean)
    return f"{_fmt(mean)}±{_fmt(std)}"


def _cell_lookup(stats, task, regime, fraction):
    # source-only rows are fraction-independent; reuse them in every block
    key = (task, regime, 1.0 if regime == "source-only" else fraction)
    return stats.get(key)


def load_cell_scores(scores_dir, task, regime, fraction, seeds) -> ScoredSet | None:
    """Pooled per-seed test scores for one cell; None when any seed is absent."""
    if regime == "source-only":
        fraction = 1.0
    all_scores, all_labels = [], []
    for seed in seeds:
        path = os.path.join(scores_dir, f"{cell_name(task, regime, fraction, seed)}.npz")
        if not os.path.exists(path):
            return None
        with np.load(path) as z:
            all_scores.append(z["scores"])
            all_labels.append(z["labels"])
    return ScoredSet(np.concatenate(all_scores), np.concatenate(all_labels))


def significance_marks(rows, cfg, scores_dir, n_boot=10_000) -> dict:
    """Stars per (task, regime, fraction) for AUROC vs target-only, same
    fraction, from a paired bootstrap over pooled per-seed test items."""
    marks = {}
    if scores_dir is None or "target-only" not in cfg.regimes:
        return marks
    for task in (1, 2):
        for fraction in cfg.fractions:
            base = load_cell_scores(scores_dir, task, "target-only", fraction, cfg.seeds)
            if base is None:
                continue
            for regime in cfg.regimes:
                if regime == "target-only":
                    continue
                other = load_cell_scores(scores_dir, task, regime, fraction, cfg.seeds)
                if other is None or len(other) != len(base):
                    continue
                rng = stream(0, "bootstrap", task, cfg.fractions.index(fraction),
                             list(cfg.regimes).index(regime))
                try:
                    p = paired_bootstrap(other, base, auroc, n_boot, rng)
                except MetricError:
                    continue
                if p < 0.01:
                    marks[(task, regime, fraction)] = "**"
                elif p < 0.05:
                    marks[(task, regime, fraction)] = "*"
    return marks


def write_report_csv(path, stats, cfg) -> None:
    with open(path, "w") as fh:
        cols = ["task", "regime", "fraction"]
        for m in METRICS:
            cols += [f"{m}_mean", f"{m}_std"]
        cols.append("n_seeds")
        fh.write(",".join(cols) + "\n")
        for task in (1, 2):
            for fraction in cfg.fractions:
                for regime in cfg.regimes:
                    cell = _cell_lookup(stats, task, regime, fraction)
                    vals = [str(task), regime, f"{fraction:g}"]
                    n = 0
                    for m in METRICS:
                        if cell is None:
                            vals += ["", ""]
                        else:
                            st = cell[m]
                            n = st.n
                            vals.append(f"{st.mean:.6f}")
                            vals.append("" if st.std is None else f"{st.std:.6f}")
                    vals.append(str(n))
                    fh.write(",".join(vals) + "\n")


def render_text(stats, cfg, marks) -> str:
    width = 12
    name_w = max(len(DISPLAY_NAMES.get(r, r)) for r in cfg.regimes) + 2
    lines = []
    for fraction in cfg.fractions:
        lines.append(f"=== {fraction:.0%} training data ===")
        header1 = " " * name_w
        header2 = "Regime".ljust(name_w)
        for task in (1, 2):
            header1 += f"Task {task}".center(3 * width)
            for m in METRICS:
                header2 += METRIC_LABELS[m].rjust(width)
        lines.append(header1.rstrip())
        lines.append(header2)
        for regime in cfg.regimes:
            row = DISPLAY_NAMES.get(regime, regime).ljust(name_w)
            for task in (1, 2):
                cell = _cell_lookup(stats, task, regime, fraction)
                for m in METRICS:
                    if cell is None:
                        text = MISSING
                    else:
                        st = cell[m]
                        text = format_cell(st.mean, st.std)
                        if st.missing_seeds:
                            text += "!"
                    if m == "auroc":
                        text += marks.get((task, regime, fraction), "")
                    row += text.rjust(width)
            lines.append(row)
        lines.append("")
    lines.append("+/- is the sample standard deviation over seeds (n-1 denominator).")
    lines.append("! marks cells aggregated from fewer seeds than requested; "
                 f"{MISSING} marks cells with no completed runs.")
    lines.append("*/**: p<0.05 / p<0.01 vs Target-Only at the same fraction "
                 "(paired bootstrap on pooled per-seed test scores, 10,000 "
                 "resamples, two-sided).")
    lines.append("Source-Only uses no target training data; its rows are "
                 "repeated in every fraction block.")
    return "\n".join(lines) + "\n"


def render_figures(stats, cfg, out_dir) -> list[str]:
    """AUROC vs training fraction per regime, one figure per task."""
    paths = []
    fractions = sorted(cfg.fractions)
    for task in (1, 2):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for regime in cfg.regimes:
            means, stds = [], []
            for fraction in fractions:
                cell = _cell_lookup(stats, task, regime, fraction)
                if cell is None:
                    means.append(np.nan)
                    stds.append(0.0)
                else:
                    means.append(cell["auroc"].mean)
                    stds.append(cell["auroc"].std or 0.0)
            ax.errorbar(
                [f * 100 for f in fractions], means, yerr=stds,
                marker="o", capsize=3, label=DISPLAY_NAMES.get(regime, regime),
            )
        ax.set_xscale("log")
        ax.set_xticks([f * 100 for f in fractions])
        ax.get_xaxis().set_major_formatter(matplotlib.ticker.ScalarFormatter())
        ax.set_xlabel("target training data (%)")
        ax.set_ylabel("test AUROC")
        ax.set_title(f"Task {task}: transfer performance vs target data budget")
        ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = os.path.join(out_dir, f"auroc_vs_fraction_task{task}.png")
        fig.savefig(path, dpi=120, metadata={"Software": "ventxfer"})
        plt.close(fig)
        paths.append(path)
    return paths


def render_report(rows: list[dict], cfg, out_dir, scores_dir=None) -> dict:
    """Writes report.csv, report.txt and the PNG figures; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    report_rows = rows_to_report_rows(rows)
    stats = aggregate(report_rows, expected_seeds=len(cfg.seeds))
    marks = significance_marks(rows, cfg, scores_dir)
    csv_path = os.path.join(out_dir, "report.csv")
    write_report_csv(csv_path, stats, cfg)
    txt_path = os.path.join(out_dir, "report.txt")
    with open(txt_path, "w") as fh:
        fh.write(render_text(stats, cfg, marks))
    figures = render_figures(stats, cfg, out_dir)
    return {"csv": csv_path, "txt": txt_path, "figures": figures}
