"""Named ablation variants and small helpers for comparing runs."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .config import TrainConfig
from .exceptions import ConfigError
from .training import run_training

# variant -> (row label, config changes); the removal of the residual module
# carries the "w/o RSM" row label
ABLATIONS: Dict[str, tuple] = {
    "baseline": ("Baseline", dict(router="none", use_cons=False, use_spd=False)),
    "baseline-sr": ("Baseline w/SR", dict(router="sr", use_cons=False, use_spd=False)),
    "baseline-msr": ("Baseline w/MSR", dict(router="msr", use_cons=False, use_spd=False)),
    "baseline-cons": ("Baseline w/ L_cons", dict(router="none", use_spd=False)),
    "baseline-cons-sr": ("Baseline w/ L_cons + SR", dict(router="sr", use_spd=False)),
    "baseline-cons-msr": ("Baseline w/ L_cons + MSR", dict(router="msr", use_spd=False)),
    "sdfn": ("Baseline w/ L_cons + MSR + SPD (SDFN)", {}),
    "no-rcm": ("SDFN w/o RCM (RSM)", dict(disabled_modules=("rcm",))),
    "no-jrm": ("SDFN w/o JRM", dict(disabled_modules=("jrm",))),
    "no-gtm": ("SDFN w/o GTM", dict(disabled_modules=("gtm",))),
    "no-cam": ("SDFN w/o CAM", dict(disabled_modules=("cam",))),
}
MODULE_REMOVALS = ("no-rcm", "no-jrm", "no-gtm", "no-cam")
TSV_COLUMNS = ("variant", "label", "seed", "R1", "R10", "R50", "churn_6plus", "l_total")


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {name!r}; choose from {list(ABLATIONS)}")
    changes = dict(ABLATIONS[name][1])
    if "disabled_modules" in changes:
        changes["disabled_modules"] = tuple(sorted(set(base.disabled_modules) | set(changes["disabled_modules"])))
    return base.replace(**changes)


def mean_churn(log: Sequence[dict], first_epoch: int = 6) -> Optional[float]:
    """Mean of the recorded churn from ``first_epoch`` on; None when nothing was recorded."""
    vals = [r["churn"] for r in log if r["epoch"] >= first_epoch and r.get("churn") is not None]
    return float(np.mean(vals)) if vals else None


def summarize(name: str, cfg: TrainConfig, log: Sequence[dict]) -> dict:
    last = log[-1]
    return {
        "variant": name,
        "label": ABLATIONS[name][0] if name in ABLATIONS else name,
        "seed": cfg.seed,
        "R1": last.get("R1"),
        "R10": last.get("R10"),
        "R50": last.get("R50"),
        "churn_6plus": mean_churn(log),
        "l_total": last["l_total"],
    }


def run_variants(base: TrainConfig, names: Iterable[str] = tuple(ABLATIONS), out_dir=None,
                 dataset=None) -> List[dict]:
    """Train every named variant on the same data; one summary row each."""
    rows = []
    for name in names:
        cfg = variant_config(base, name)
        sub = Path(out_dir) / name if out_dir is not None else None
        _, log, _ = run_training(cfg, dataset, out_dir=sub)
        rows.append(summarize(name, cfg, log))
    return rows


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_tsv(rows: Sequence[dict], path, columns: Sequence[str] = TSV_COLUMNS) -> Path:
    path = Path(path)
    lines = ["\t".join(columns)] + ["\t".join(_fmt(r.get(c)) for c in columns) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path
