"""SVG charts of frontier tables: GWM against conversion, fairness against lambda_s."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from fairprice.eval import FrontierTable  # noqa: E402

# fixed ids and no date stamp keep the SVG bytes reproducible
_RC = {"svg.hashsalt": "fairprice", "svg.fonttype": "path"}
_META = {"Date": None}


def _save(fig, path):
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def frontier_plot(table: FrontierTable, path, split: str = "dev", methods=None) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    methods = methods or sorted({p.method for p in table.select(split=split)})
    for method in methods:
        pts = sorted(table.select(method, split), key=lambda p: p.conversion_rate)
        if not pts:
            continue
        ax.plot([p.conversion_rate for p in pts], [p.gwm for p in pts], marker="o", ms=4, label=method)
    ax.set_xlabel("conversion rate")
    ax.set_ylabel("GWM")
    ax.set_title(f"efficiency frontier ({split})")
    ax.grid(alpha=0.3)
    if ax.lines:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)


def fairness_plot(table: FrontierTable, path, split: str = "dev", method: str = "fair-optigrad") -> None:
    pts = sorted(table.select(method, split), key=lambda p: p.lambda_s)
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    x = [p.lambda_s for p in pts]
    for name, label in (("rdc_score", "RDC"), ("hgr_score", "HGR_NN"), ("pearson", "|Pearson|")):
        ax.plot(x, [getattr(p, name) for p in pts], marker="o", ms=4, label=label)
    if x and min(x) >= 0 and max(x) > 0:
        ax.set_xscale("symlog", linthresh=max(min([v for v in x if v > 0] or [1.0]), 1e-6))
    ax.set_xlabel("lambda_s")
    ax.set_ylabel("dependence on sensitive attribute")
    ax.set_title(f"{method} fairness ({split})")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
