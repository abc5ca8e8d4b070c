"""Bar charts rendered from the report tables. Needs matplotlib (the ``plots`` extra)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _bars(ax, groups, series, values, errors):
    width = 0.8 / max(len(series), 1)
    for i, s in enumerate(series):
        xs = [g + i * width for g in range(len(groups))]
        ax.bar(xs, [values.get((s, g), 0.0) for g in groups], width,
               yerr=[errors.get((s, g), 0.0) for g in groups], label=str(s), capsize=2)
    ax.set_xticks([g + 0.4 - width / 2 for g in range(len(groups))])
    ax.set_xticklabels([str(g) for g in groups])
    ax.legend(fontsize="small")


def _num(x):
    return 0.0 if x == "NA" else float(x)


def render_svgs(tables: dict, out: Path) -> list[Path]:
    written = []
    plt.rcParams["svg.hashsalt"] = "dlmlab"

    def save(fig, name):
        path = out / name
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)

    for name, rows in tables.items():
        if name.startswith("success_rates_alpha_"):
            langs = sorted({r[0] for r in rows})
            pids = sorted({r[1] for r in rows})
            fig, ax = plt.subplots(figsize=(6, 3.5))
            _bars(ax, pids, langs, {(r[0], r[1]): _num(r[5]) for r in rows},
                  {(r[0], r[1]): _num(r[6]) for r in rows})
            ax.set_xlabel("prompt")
            ax.set_ylabel("success rate")
            save(fig, name.replace(".csv", ".svg"))

    rows = tables["acceptable_rates.csv"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    _bars(ax, sorted({r[1] for r in rows}), sorted({r[0] for r in rows}),
          {(r[0], r[1]): _num(r[5]) for r in rows}, {(r[0], r[1]): _num(r[6]) for r in rows})
    ax.set_xlabel("prompt")
    ax.set_ylabel("acceptable rate")
    save(fig, "acceptable_rates.svg")

    rows = tables["unfairness_absolute.csv"]
    for alpha in sorted({r[1] for r in rows}):
        sub = [r for r in rows if r[1] == alpha]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        _bars(ax, sorted({r[2] for r in sub}), sorted({r[0] for r in sub}),
              {(r[0], r[2]): _num(r[4]) for r in sub}, {(r[0], r[2]): _num(r[5]) for r in sub})
        ax.set_xlabel("DP_variance threshold")
        ax.set_ylabel("prompts above threshold")
        save(fig, f"unfairness_absolute_alpha_{alpha:g}.svg")
    return written
