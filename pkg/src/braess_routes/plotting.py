"""Report figures (PNG) and the CSV series behind them."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import io  # noqa: E402

SERIES_HEADER = ("demand_vph", "Y_model", "Y_model_new", "Y_sim", "Y_sim_new",
                 "I_th_pct", "I_sim_pct")


def _series(rows) -> list[tuple]:
    out = []
    for r in sorted(rows, key=lambda r: r.demand):
        y_new = r.y_model if r.paradox_free else r.y_model_new
        y_sim_new = r.y_sim if r.paradox_free else r.y_sim_new
        i_sim = 0.0 if r.paradox_free and r.y_sim is not None else r.i_sim
        out.append((r.demand, r.y_model, y_new, r.y_sim, y_sim_new, 100 * r.i_th,
                    None if i_sim is None else 100 * i_sim))
    return out


def _save(fig, path: Path) -> None:
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def write_report_figures(rows: Sequence, out_dir) -> list[Path]:
    """Network delay and improvement against demand; returns the files written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series = _series(rows)
    io.write_csv(out_dir / "report_series.csv", SERIES_HEADER, series)
    written = [out_dir / "report_series.csv"]
    if not series:
        return written
    cols = list(zip(*series))

    def clean(values):
        return [float("nan") if v is None else v for v in values]

    demand = cols[0]
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    ax.plot(demand, clean(cols[1]), "o-", color="C0", label="model, all routes")
    ax.plot(demand, clean(cols[2]), "s--", color="C1", label="model, routes removed")
    ax.plot(demand, clean(cols[3]), "o:", color="C0", alpha=0.6, label="simulated, all routes")
    ax.plot(demand, clean(cols[4]), "s:", color="C1", alpha=0.6,
            label="simulated, routes removed")
    ax.set_xlabel("demand (veh/h)")
    ax.set_ylabel("network delay Y (veh h / h)")
    ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, out_dir / "delay_vs_demand.png")
    written.append(out_dir / "delay_vs_demand.png")

    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    ax.plot(demand, clean(cols[5]), "o-", label="I_th (model)")
    ax.plot(demand, clean(cols[6]), "s--", label="I_sim (simulation)")
    ax.axhline(0.0, color="0.5", lw=0.8)
    ax.set_xlabel("demand (veh/h)")
    ax.set_ylabel("delay reduction (%)")
    ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, out_dir / "improvement.png")
    written.append(out_dir / "improvement.png")
    return written
