"""PNG figures written next to the CSV / JSON-lines outputs."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sphere import SphereGrid  # noqa: E402


def loss_curve(path, history: Sequence[dict]) -> None:
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("radius", "direction", "total"):
        ax.plot(epochs, [h[key] for h in history], marker="o", label=key)
    if any(h.get("property_mae") is not None for h in history):
        ax.plot(epochs, [h["property_mae"] for h in history], marker="s", label="energy MAE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def radius_histogram(path, centers: np.ndarray, probs: np.ndarray, truth: np.ndarray | None = None) -> None:
    """One curve per neighbour; dashed lines mark true distances when known."""
    probs = np.atleast_2d(probs)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = centers[1] - centers[0]
    for k, p in enumerate(probs):
        ax.step(centers, p, where="mid", label=f"neighbour {k}")
        if truth is not None:
            ax.axvline(truth[k], color=ax.lines[-1].get_color(), ls="--", lw=0.8)
    ax.set_xlim(centers[0] - width / 2, centers[-1] + width / 2)
    ax.set_xlabel("distance (angstrom)")
    ax.set_ylabel("probability")
    if len(probs) <= 8:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def direction_map(path, grid: SphereGrid, probs: np.ndarray, truth=None) -> None:
    """Equirectangular map of one neighbour's direction distribution."""
    theta, phi = grid.angles
    values = np.asarray(probs).reshape(grid.n_theta, grid.n_phi)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    mesh = ax.pcolormesh(np.degrees(phi.reshape(grid.n_theta, grid.n_phi)),
                         np.degrees(theta.reshape(grid.n_theta, grid.n_phi)), values, shading="nearest")
    if truth is not None:
        t = np.asarray(truth, dtype=float)
        t = t / np.linalg.norm(t)
        ax.plot(np.degrees(np.arctan2(t[1], t[0]) % (2 * np.pi)), np.degrees(np.arccos(np.clip(t[2], -1, 1))),
                "r+", ms=12, mew=2)
    ax.invert_yaxis()
    ax.set_xlabel("phi (deg)")
    ax.set_ylabel("theta (deg)")
    fig.colorbar(mesh, ax=ax, label="probability")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
