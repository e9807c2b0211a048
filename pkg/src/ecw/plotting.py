"""Deterministic SVG line charts for convergence traces and weight scans."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids inside the SVG so that identical data give identical bytes
matplotlib.rcParams["svg.hashsalt"] = "ecw"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_trace(trace, path, title="convergence"):
    """Energy per state and Q against the outer iteration index."""
    fig, (ax_e, ax_q) = plt.subplots(2, 1, figsize=(6.0, 6.0), sharex=True)
    states = sorted({row["state"] for row in trace})
    for n in states:
        rows = [r for r in trace if r["state"] == n]
        ax_e.plot([r["iter"] for r in rows], [r["energy"] for r in rows], marker=".", label=f"state {n}")
    ground = [r for r in trace if r["state"] == 0]
    ax_q.plot([r["iter"] for r in ground], [max(r["Q"], 1e-300) for r in ground], marker=".", color="k")
    ax_q.set_yscale("log")
    ax_e.set_ylabel("energy / Eh")
    ax_q.set_ylabel("Q")
    ax_q.set_xlabel("iteration")
    ax_e.set_title(title)
    if states:
        ax_e.legend(loc="best", fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def plot_scan(rows, residual_names, path):
    """Q, ground energy and normalized residuals against the weight scale."""
    scale = [r["scale"] for r in rows]
    fig, axes = plt.subplots(3, 1, figsize=(6.0, 8.0), sharex=True)
    axes[0].plot(scale, [r["Q"] for r in rows], marker="o", color="k")
    axes[0].set_ylabel("Q (unit scale)")
    axes[1].plot(scale, [r["E0"] for r in rows], marker="o", color="tab:blue")
    axes[1].set_ylabel("E0 / Eh")
    for name in residual_names:
        axes[2].plot(scale, [r[name] for r in rows], marker="o", label=name)
    axes[2].axhline(0.0, color="0.6", lw=0.8)
    axes[2].set_ylabel("(calc - value) / sigma")
    axes[2].set_xlabel("weight scale")
    if residual_names:
        axes[2].legend(loc="best", fontsize="small")
    fig.tight_layout()
    _save(fig, path)
