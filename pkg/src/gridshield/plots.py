"""Figure rendering for the report path: training curves, gap summary, and
violation heatmaps, written next to the CSVs they visualize."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def render_training_curves(log, path):
    """Reward plus residual/beta traces from the training log rows."""
    steps = np.array([r.step for r in log])
    reward = np.array([r.reward for r in log])
    beta = np.array([r.beta for r in log])
    r_mu = np.array([r.r_mu_norm for r in log])

    fig, axes = plt.subplots(3, 1, figsize=(8, 8), sharex=True)
    axes[0].plot(steps, reward, lw=0.6, color="tab:blue")
    if len(reward) > 50:
        k = max(len(reward) // 100, 5)
        smooth = np.convolve(reward, np.ones(k) / k, mode="valid")
        axes[0].plot(steps[k - 1:], smooth, lw=1.6, color="tab:red",
                     label=f"moving mean ({k})")
        axes[0].legend(loc="lower right", fontsize=8)
    axes[0].set_ylabel("reward")
    axes[1].semilogy(steps, np.maximum(r_mu, 1e-12), lw=0.6, color="tab:orange")
    axes[1].set_ylabel(r"$\|r_\mu\|$")
    axes[2].plot(steps, beta, lw=1.2, color="tab:green")
    axes[2].set_ylabel(r"$\beta_t$")
    axes[2].set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_gap_report(report, path):
    gaps = np.array([r.gap_pct for r in report.rows])
    rewards = np.array([r.policy_reward for r in report.rows])
    oracle = np.array([r.oracle_reward for r in report.rows])

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    idx = np.arange(len(gaps))
    axes[0].plot(idx, rewards, lw=1.0, label="policy")
    axes[0].plot(idx, oracle, lw=1.0, label="oracle (-J3)")
    axes[0].set_xlabel("scenario")
    axes[0].set_ylabel("episode reward")
    axes[0].legend(fontsize=8)
    axes[1].hist(gaps, bins=min(30, max(len(gaps) // 3, 5)),
                 color="tab:purple", alpha=0.8)
    axes[1].axvline(report.mean_gap, color="k", ls="--",
                    label=f"mean {report.mean_gap:.2f}%")
    axes[1].set_xlabel("gap (%)")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def _parse_heatmap_csv(text):
    rows = [line.split(",") for line in text.strip().splitlines()]
    labels = rows[0][1:]
    data = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return labels, data


def render_heatmaps(omega_csv: str, psi_csv: str, path):
    """Hour-by-element violation maps (voltage left, thermal right)."""
    _, omega = _parse_heatmap_csv(omega_csv)
    _, psi = _parse_heatmap_csv(psi_csv)

    fig, axes = plt.subplots(1, 2, figsize=(12, 4))
    for ax, data, title, xlabel in (
            (axes[0], omega, "voltage violations (p.u.)", "bus"),
            (axes[1], psi, "thermal violations (p.u.)", "branch")):
        im = ax.imshow(data, aspect="auto", cmap="inferno",
                       interpolation="nearest", origin="lower")
        ax.set_title(title, fontsize=10)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("hour")
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
