"""Static figures for the experiment reports.

Poses are read as ``V/2`` planar joints with coordinates ``(2j, 2j+1)``.
Everything renders with the Agg backend straight to PNG files; PNG metadata
is stripped so identical inputs give identical files.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = dict(dpi=110, metadata={"Software": None})
_CMAP = "tab10"


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def _joint(motion, j):
    return motion[..., 2 * j], motion[..., 2 * j + 1]


def draw_fan(ax, context, samples, truth=None, joint=0, title=""):
    """Context trail in black, samples as coloured trajectories, truth dashed."""
    cx, cy = _joint(np.asarray(context), joint)
    ax.plot(cx, cy, color="k", lw=2, label="context")
    colors = plt.get_cmap(_CMAP)
    for k, x in enumerate(np.asarray(samples)):
        sx, sy = _joint(np.concatenate([context[-1:], x]), joint)
        ax.plot(sx, sy, color=colors(k % 10), lw=1, alpha=0.8)
        ax.plot(sx[-1], sy[-1], "o", color=colors(k % 10), ms=3)
    if truth is not None:
        tx, ty = _joint(np.concatenate([context[-1:], truth]), joint)
        ax.plot(tx, ty, "k--", lw=1, label="observed")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(title, fontsize=9)
    ax.tick_params(labelsize=7)


def plot_sample_fans(context, sets: dict, path, truth=None):
    """One row per joint, one column per method (``sets`` maps name to ``(K, T, V)``)."""
    J = np.asarray(context).shape[-1] // 2
    fig, axes = plt.subplots(J, len(sets), figsize=(3.2 * len(sets), 3.0 * J), squeeze=False)
    for col, (name, X) in enumerate(sets.items()):
        for j in range(J):
            draw_fan(axes[j, col], context, X, truth, j, f"{name} / joint {j}")
    return _finish(fig, path)


def plot_end_poses(contexts, sets: dict, path, joint=0):
    """End-pose displacement scatter, pooled over several contexts."""
    fig, axes = plt.subplots(1, len(sets), figsize=(3.2 * len(sets), 3.2), squeeze=False)
    for ax, (name, X) in zip(axes[0], sets.items()):
        X = np.asarray(X)
        d = X[:, :, -1] - np.asarray(contexts)[:, None, -1]
        dx, dy = _joint(d, joint)
        slots = np.broadcast_to(np.arange(X.shape[1]), dx.shape)
        ax.scatter(dx.ravel(), dy.ravel(), c=slots.ravel() % 10, cmap=_CMAP, vmin=0, vmax=9, s=6)
        ax.set_title(f"{name}: end displacement, joint {joint}", fontsize=9)
        ax.set_aspect("equal", adjustable="datalim")
        ax.tick_params(labelsize=7)
    return _finish(fig, path)


def plot_metrics_vs_k(curves: dict, path):
    """``curves`` maps method name to ``{K: {metric: value}}``; one panel per metric."""
    metrics = [m for m in ("apd", "ade", "fde", "mmade", "mmfde") if any(m in r for c in curves.values() for r in c.values())]
    fig, axes = plt.subplots(1, len(metrics), figsize=(2.8 * len(metrics), 2.8), squeeze=False)
    for ax, m in zip(axes[0], metrics):
        for name, curve in curves.items():
            ks = sorted(curve)
            ax.plot(ks, [curve[k][m] for k in ks], marker="o", ms=3, label=name)
        ax.set_xscale("log")
        ax.set_xlabel("K", fontsize=8)
        ax.set_title(m.upper(), fontsize=9)
        ax.tick_params(labelsize=7)
    axes[0, 0].legend(fontsize=7)
    return _finish(fig, path)


def plot_beta_fans(context, fans: dict, path, joint=0):
    """Sample fans side by side for several ``beta`` values."""
    fig, axes = plt.subplots(1, len(fans), figsize=(3.0 * len(fans), 3.0), squeeze=False)
    for ax, (beta, X) in zip(axes[0], fans.items()):
        draw_fan(ax, context, X, None, joint, f"beta = {beta:g}")
    return _finish(fig, path)


def plot_eps_variation(context, draws, path, joint=0):
    """End poses of each slot across eps draws; ``draws`` is ``(R, K, T, V)``."""
    draws = np.asarray(draws)
    R, K = draws.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4))
    colors = plt.get_cmap(_CMAP)
    cx, cy = _joint(np.asarray(context), joint)
    ax.plot(cx, cy, color="k", lw=2)
    for k in range(K):
        ex, ey = _joint(draws[:, k, -1], joint)
        ax.scatter(ex, ey, color=colors(k % 10), s=12, label=f"slot {k + 1}")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(f"end poses over {R} eps draws, joint {joint}", fontsize=9)
    ax.legend(fontsize=6, ncol=2)
    return _finish(fig, path)


def plot_control(context, reference, X, path, J_s=(0, 1), J_d=(2, 3)):
    """Similar-feature joint (left) and diverse-feature joint (right) for one sample set."""
    fig, axes = plt.subplots(1, 2, figsize=(6.4, 3.2))
    for ax, feats, name in ((axes[0], J_s, "similar"), (axes[1], J_d, "diverse")):
        j = min(feats) // 2
        draw_fan(ax, context, X, reference, j, f"{name} features, joint {j}")
    return _finish(fig, path)
