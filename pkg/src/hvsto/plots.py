"""Figure rendering for benchmark result rows.

Each experiment gets one PNG next to the delimited output; figures are
plain matplotlib line charts over the sweep parameter.
"""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .bench import parse_param  # noqa: E402


def _series(rows, metric, x_key, group_key=None):
    """metric rows -> {group: ([x...], [y...])} sorted by x."""
    groups = defaultdict(list)
    for r in rows:
        if r.metric != metric:
            continue
        p = parse_param(r.param)
        group = p.get(group_key, "") if group_key else ""
        groups[group].append((int(p[x_key]), r.value))
    return {g: tuple(zip(*sorted(pts))) for g, pts in groups.items()}


def plot_snapshot_latency(rows, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for metric, label in (("hvsto_mean_pass_us", "hvsto"),
                          ("chain_mean_pass_us", "chain baseline")):
        series = _series(rows, metric, "depth")
        for xs, ys in series.values():
            ax1.plot(xs, [y / 1000 for y in ys], marker="o", label=label)
    ax1.set_xlabel("snapshot depth")
    ax1.set_ylabel("mean read latency (ms, simulated)")
    ax1.legend()
    for metric, label in (("hvsto_fetches_per_lookup", "hvsto"),
                          ("chain_fetches_per_lookup", "chain baseline")):
        series = _series(rows, metric, "depth")
        for xs, ys in series.values():
            ax2.plot(xs, ys, marker="o", label=label)
    ax2.set_xlabel("snapshot depth")
    ax2.set_ylabel("index fetches per lookup")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_bootstorm(rows, path):
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    series = _series(rows, "makespan_us", "vms", "mode")
    for mode in sorted(series):
        xs, ys = series[mode]
        ax.plot(xs, [y / 1e6 for y in ys], marker="o", label=mode)
    ax.set_xlabel("concurrently booting VMs")
    ax.set_ylabel("boot makespan (s, simulated)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_scalability(rows, path):
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    series = _series(rows, "tps_per_server", "nodes", "servers")
    for servers in sorted(series):
        xs, ys = series[servers]
        ax.plot(xs, ys, marker="o", label=f"{servers}-way")
    ax.set_xlabel("storage nodes")
    ax.set_ylabel("transactions per s per server (simulated)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_leakage(rows, path):
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    closed = _series(rows, "leak_ratio", "n", "s")
    for s in sorted(closed, key=int):
        xs, ys = closed[s]
        ax.plot(xs, [y * 100 for y in ys], marker="o",
                label=f"block size {int(s)}")
    mc = _series(rows, "mc_ratio", "n", "s")
    for s in sorted(mc, key=int):
        xs, ys = mc[s]
        ax.plot(xs, [y * 100 for y in ys], linestyle="none", marker="x",
                label=f"monte carlo, {int(s)}")
    ax.set_xlabel("compromised nodes")
    ax.set_ylabel("leakage ratio (%)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


_PLOTTERS = {
    "snapshot-latency": plot_snapshot_latency,
    "bootstorm": plot_bootstorm,
    "scalability": plot_scalability,
    "leakage": plot_leakage,
}


def render_figures(rows, out_prefix) -> list[str]:
    """One figure per experiment present in `rows`; returns written paths."""
    experiments = []
    for r in rows:
        if r.experiment not in experiments:
            experiments.append(r.experiment)
    written = []
    for experiment in experiments:
        plotter = _PLOTTERS.get(experiment)
        if plotter is None:
            continue
        path = f"{out_prefix}_{experiment}.png"
        plotter([r for r in rows if r.experiment == experiment], path)
        written.append(path)
    return written
