"""Report tables and figures from training logs and allocation files.

Every figure has a CSV twin holding exactly the plotted data, so the plots
can be regenerated elsewhere.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

CURVE_COLUMNS = ["episode", "R", "r_q", "r_b", "avg_bits", "ppl", "best_R", "best_ppl", "alpha",
                 "loss_critic1", "loss_critic2", "loss_actor", "loss_mean_entropy"]


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed log record ({exc.msg})") from None
    return rows


def training_curves(episodes: Sequence[dict]) -> list[dict]:
    """Per-episode rows with best-so-far reward and the perplexity of the
    best-so-far allocation."""
    rows = []
    best_R, best_ppl = -np.inf, None
    for rec in episodes:
        if rec["R"] > best_R:
            best_R, best_ppl = rec["R"], rec["ppl"]
        row = {k: rec.get(k) for k in CURVE_COLUMNS}
        row["best_R"], row["best_ppl"] = best_R, best_ppl
        rows.append(row)
    return rows


def bit_histogram(bits: Sequence[int], palette: Sequence[int]) -> list[tuple[int, int]]:
    counts = Counter(int(b) for b in bits)
    keys = sorted(set(palette) | set(counts))
    return [(b, counts.get(b, 0)) for b in keys]


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else v for v in r])


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _tidy(ax) -> None:
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.grid(alpha=0.3, linewidth=0.5)


def plot_training_dynamics(rows: Sequence[dict], path: str | Path, warmup: int | None = None) -> None:
    plt = _pyplot()
    ep = [r["episode"] for r in rows]
    fig, axes = plt.subplots(3, 1, figsize=(7, 7.5), sharex=True)
    ax = axes[0]
    ax.plot(ep, [r["R"] for r in rows], lw=0.8, alpha=0.6, label="R")
    ax.plot(ep, [r["best_R"] for r in rows], lw=1.4, label="best so far")
    ax.set_ylabel("reward")
    ax.legend(frameon=False, fontsize=8)
    ax = axes[1]
    ax.plot(ep, [r["avg_bits"] for r in rows], lw=0.8)
    ax.axhline(4.0, color="k", lw=0.6, ls="--")
    ax.axhline(4.25, color="r", lw=0.6, ls=":")
    ax.set_ylabel("avg bits")
    ax = axes[2]
    for key in ("loss_critic1", "loss_critic2"):
        vals = [np.nan if r.get(key) is None else r[key] for r in rows]
        ax.plot(ep, vals, lw=0.8, label=key.replace("loss_", ""))
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_ylabel("critic loss")
    ax.set_xlabel("episode")
    ax.legend(frameon=False, fontsize=8)
    for ax in axes:
        _tidy(ax)
        if warmup:
            ax.axvspan(-0.5, warmup - 0.5, color="0.9", zorder=0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_best_so_far_ppl(rows: Sequence[dict], path: str | Path, ppl_base: float | None = None) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r["episode"] for r in rows], [r["best_ppl"] for r in rows], lw=1.4, drawstyle="steps-post")
    if ppl_base is not None:
        ax.axhline(ppl_base, color="k", lw=0.6, ls="--", label="unquantized")
        ax.legend(frameon=False, fontsize=8)
    ax.set_xlabel("episode")
    ax.set_ylabel("perplexity of best allocation")
    _tidy(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bit_allocation(bits: Sequence[int], names: Sequence[str] | None, palette: Sequence[int],
                        path: str | Path) -> None:
    plt = _pyplot()
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5), gridspec_kw={"width_ratios": [3, 1]})
    ax0.bar(range(len(bits)), bits, color="C0", width=0.8)
    ax0.set_ylim(min(palette) - 0.5, max(max(palette), max(bits)) + 0.5)
    ax0.set_xlabel("layer")
    ax0.set_ylabel("bits")
    if names is not None and len(names) <= 32:
        ax0.set_xticks(range(len(bits)))
        ax0.set_xticklabels([n.replace("blocks.", "") for n in names], rotation=90, fontsize=6)
    hist = bit_histogram(bits, palette)
    ax1.bar([str(b) for b, _ in hist], [c for _, c in hist], color="C1")
    ax1.set_xlabel("bits")
    ax1.set_ylabel("layers")
    for ax in (ax0, ax1):
        _tidy(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(out_dir: str | Path, episodes: Sequence[dict] | None = None, allocation: dict | None = None,
                 warmup: int | None = None) -> dict:
    """Writes CSV tables and PNG figures; returns a summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"files": []}
    if episodes:
        rows = training_curves(episodes)
        write_csv(out / "training_curves.csv", CURVE_COLUMNS, [[r[k] for k in CURVE_COLUMNS] for r in rows])
        plot_training_dynamics(rows, out / "training_dynamics.png", warmup)
        ppl_base = episodes[0].get("ppl_base")
        plot_best_so_far_ppl(rows, out / "best_so_far_ppl.png", ppl_base)
        summary["files"] += ["training_curves.csv", "training_dynamics.png", "best_so_far_ppl.png"]
        best = max(episodes, key=lambda r: r["R"])
        summary.update({
            "episodes": len(episodes),
            "best_episode": best["episode"],
            "best_R": best["R"],
            "best_ppl": best["ppl"],
            "best_avg_bits": best["avg_bits"],
            "ppl_base": ppl_base,
            "final_R": episodes[-1]["R"],
        })
    if allocation:
        bits = allocation["bits"]
        palette = allocation.get("palette", sorted(set(bits)))
        per_layer = allocation.get("per_layer") or [{"name": f"layer{i}", "bits": b} for i, b in enumerate(bits)]
        names = [p["name"] for p in per_layer]
        write_csv(out / "allocation.csv", ["index", "name", "bits", "rel_frob_error"],
                  [[i, p["name"], p["bits"], p.get("rel_frob_error")] for i, p in enumerate(per_layer)])
        write_csv(out / "bit_histogram.csv", ["bits", "count"], bit_histogram(bits, palette))
        plot_bit_allocation(bits, names, palette, out / "bit_allocation.png")
        summary["files"] += ["allocation.csv", "bit_histogram.csv", "bit_allocation.png"]
        summary["avg_bits"] = float(np.mean(bits))
    if not summary["files"]:
        raise ValidationError("nothing to report: supply a training log and/or an allocation")
    return summary
