"""SI-SNRi evaluation, missing-cue subset split, histograms and comparison tables."""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch

from ._validation import InvalidInputError
from .losses import si_snr
from .model import extract
from .separator import CuePresence

__all__ = [
    "EvalRecord",
    "EvalReport",
    "si_snri",
    "classify_subset",
    "evaluate",
    "histogram",
    "summarize",
    "comparison_table",
    "write_report",
]

WO_MISSING = "w/o-missing"
W_MISSING = "w/-missing"


def si_snri(mixture, target, estimate, eps=1e-8):
    """SI-SNR improvement (dB) of `estimate` over the unprocessed `mixture`."""
    t = torch.as_tensor(np.asarray(target), dtype=torch.float64)
    est = torch.as_tensor(np.asarray(estimate), dtype=torch.float64)
    mix = torch.as_tensor(np.asarray(mixture), dtype=torch.float64)
    return float(si_snr(t, est, eps) - si_snr(t, mix, eps))


def classify_subset(presence, variant):
    """``"w/o-missing"`` iff every cue the variant uses is present, else ``"w/-missing"``."""
    available = {"lip": presence.has_lip, "gesture": presence.has_gesture}
    return WO_MISSING if all(available[c] for c in variant.cue_names) else W_MISSING


@dataclass
class EvalRecord:
    id: str
    si_snr_mix: float
    si_snr_est: float
    si_snri: float
    has_lip: bool
    has_gesture: bool
    subset: str


@dataclass
class EvalReport:
    variant: str
    full: float
    wo_missing: float
    w_missing: float
    counts: Dict[str, int]
    histogram: Dict[str, list] = field(default_factory=dict)
    records: List[EvalRecord] = field(default_factory=list)

    def to_json(self):
        d = {k: v for k, v in asdict(self).items() if k != "records"}
        for key in ("full", "wo_missing", "w_missing"):
            d[key] = None if np.isnan(d[key]) else round(d[key], 4)
        return d


def _mean(values):
    return float(np.mean(values)) if len(values) else float("nan")


def summarize(records, variant_name, bin_width=2.0, value_range=(-30.0, 30.0)):
    records = sorted(records, key=lambda r: r.id)
    wo = [r.si_snri for r in records if r.subset == WO_MISSING]
    w = [r.si_snri for r in records if r.subset == W_MISSING]
    edges, counts = histogram(records, bin_width, value_range)
    return EvalReport(
        variant=variant_name,
        full=_mean([r.si_snri for r in records]),
        wo_missing=_mean(wo),
        w_missing=_mean(w),
        counts={"full": len(records), "wo_missing": len(wo), "w_missing": len(w)},
        histogram={"edges": edges.tolist(), "counts": counts.tolist()},
        records=records,
    )


def evaluate(model, samples, variant=None, variant_name=None, eps=1e-8):
    """Run `model` over every sample and aggregate SI-SNRi per subset.

    A unimodal model evaluated on a sample missing its cue still runs, with
    that cue's branch zeroed.
    """
    variant = variant or model.config.variant
    records = []
    for i in range(len(samples)):
        s = samples[i]
        estimate = extract(model, s.mixture, lip=s.lip, gesture=s.gesture)
        target = torch.as_tensor(np.asarray(s.target), dtype=torch.float64)
        mix_db = float(si_snr(target, torch.as_tensor(np.asarray(s.mixture), dtype=torch.float64), eps))
        est_db = float(si_snr(target, torch.as_tensor(estimate, dtype=torch.float64), eps))
        presence = CuePresence(s.lip is not None, s.gesture is not None)
        records.append(EvalRecord(
            id=s.id,
            si_snr_mix=mix_db,
            si_snr_est=est_db,
            si_snri=est_db - mix_db,
            has_lip=presence.has_lip,
            has_gesture=presence.has_gesture,
            subset=classify_subset(presence, variant),
        ))
    return summarize(records, variant_name or _variant_label(variant))


def _variant_label(variant):
    return f"{variant.cues}/{variant.fusion}" + ("+infonce" if variant.use_infonce else "")


def histogram(records, bin_width=2.0, value_range=(-30.0, 30.0), csv_path=None, figure_path=None, title=None):
    """Bin SI-SNRi values; out-of-range values are clipped into the edge bins.

    Returns ``(edges, counts)`` and optionally writes a CSV and a figure.
    """
    values = np.array([r.si_snri if isinstance(r, EvalRecord) else float(r) for r in records])
    if values.size == 0:
        raise InvalidInputError("histogram needs at least one record")
    lo, hi = value_range
    edges = np.arange(lo, hi + bin_width / 2, bin_width)
    counts, _ = np.histogram(np.clip(values, lo, hi), bins=edges)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count"])
            for a, b, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([f"{a:g}", f"{b:g}", int(c)])
    if figure_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.bar(edges[:-1], counts, width=bin_width, align="edge", edgecolor="black", linewidth=0.4)
        ax.set_xlabel("SI-SNRi (dB)")
        ax.set_ylabel("samples")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(figure_path)
        plt.close(fig)
    return edges, counts


def write_report(report, out_dir):
    """Write ``report.json``, ``records.csv``, ``histogram.csv`` and ``histogram.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2))
    with open(out_dir / "records.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "si_snr_mix", "si_snr_est", "si_snri", "has_lip", "has_gesture", "subset"])
        for r in report.records:
            w.writerow([r.id, f"{r.si_snr_mix:.4f}", f"{r.si_snr_est:.4f}", f"{r.si_snri:.4f}",
                        int(r.has_lip), int(r.has_gesture), r.subset])
    histogram(report.records, csv_path=out_dir / "histogram.csv", figure_path=out_dir / "histogram.png",
              title=report.variant)
    return out_dir


def comparison_table(reports, variants=None):
    """Markdown table in the layout of the paper's results table (1-decimal dB)."""
    lines = [
        "| Sys. | Model | Modalities | Fusion | Loss | Full test set | w/o missing | w/ missing |",
        "|---|---|---|---|---|---|---|---|",
    ]
    modality = {"lip": "Lip", "gesture": "Gesture", "both": "Lip & Gesture"}

    def fmt(x):
        return "n/a" if x is None or np.isnan(x) else f"{x:.1f}"

    for i, report in enumerate(reports, start=1):
        v = (variants or {}).get(report.variant)
        mods = modality[v.cues] if v else ""
        fusion = v.fusion.capitalize() if v else ""
        loss = ("SI-SNR + InfoNCE" if v.use_infonce else "SI-SNR") if v else ""
        lines.append(
            f"| {i} | {report.variant} | {mods} | {fusion} | {loss} | "
            f"{fmt(report.full)} | {fmt(report.wo_missing)} | {fmt(report.w_missing)} |"
        )
    return "\n".join(lines) + "\n"


def report_from_json(d):
    return EvalReport(
        variant=d["variant"],
        full=float("nan") if d["full"] is None else d["full"],
        wo_missing=float("nan") if d["wo_missing"] is None else d["wo_missing"],
        w_missing=float("nan") if d["w_missing"] is None else d["w_missing"],
        counts=d["counts"],
        histogram=d.get("histogram", {}),
    )
