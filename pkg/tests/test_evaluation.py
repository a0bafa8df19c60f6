import itertools
import json

import numpy as np
import pytest
import torch

from selg._validation import InvalidInputError
from selg.datasim import SimConfig, simulate_sample, speaker_pools
from selg.evaluation import (
    W_MISSING,
    WO_MISSING,
    EvalRecord,
    classify_subset,
    comparison_table,
    evaluate,
    histogram,
    report_from_json,
    si_snri,
    summarize,
    write_report,
)
from selg.losses import si_snr
from selg.model import VARIANTS, SeLG, desk_config
from selg.separator import CuePresence


def test_si_snri_identities():
    rng = np.random.default_rng(0)
    s, b = rng.standard_normal(800), rng.standard_normal(800)
    mix = s + b
    assert si_snri(mix, s, mix) == 0.0
    assert si_snri(mix, s, s) > 100
    est = s + 0.3 * rng.standard_normal(800)
    expected = float(si_snr(torch.from_numpy(s), torch.from_numpy(est))) - float(
        si_snr(torch.from_numpy(s), torch.from_numpy(mix)))
    assert si_snri(mix, s, est) == pytest.approx(expected, abs=1e-12)


def test_classify_subset_truth_table():
    expected = {
        # (variant, has_lip, has_gesture) -> subset
        ("both", True, True): WO_MISSING,
        ("both", True, False): W_MISSING,
        ("both", False, True): W_MISSING,
        ("lip", True, True): WO_MISSING,
        ("lip", True, False): WO_MISSING,
        ("lip", False, True): W_MISSING,
        ("gesture", True, True): WO_MISSING,
        ("gesture", True, False): W_MISSING,
        ("gesture", False, True): WO_MISSING,
    }
    for name, variant in VARIANTS.items():
        for lip, gesture in itertools.product([True, False], repeat=2):
            if not (lip or gesture):
                continue
            got = classify_subset(CuePresence(lip, gesture), variant)
            assert got == expected[(variant.cues, lip, gesture)], (name, lip, gesture)


def _records(rng, n=40):
    out = []
    for i in range(n):
        lip, gesture = [(True, True), (True, False), (False, True)][i % 3]
        v = float(rng.normal(5, 8))
        out.append(EvalRecord(f"s{i:03d}", 0.0, v, v, lip, gesture,
                              classify_subset(CuePresence(lip, gesture), VARIANTS["selg"])))
    return out


def test_subset_means_recombine():
    records = _records(np.random.default_rng(1))
    rep = summarize(records, "selg")
    n1, n2 = rep.counts["wo_missing"], rep.counts["w_missing"]
    assert n1 + n2 == rep.counts["full"] == 40
    assert abs(rep.full - (n1 * rep.wo_missing + n2 * rep.w_missing) / (n1 + n2)) < 1e-9


def test_histogram_conservation_and_edges(tmp_path):
    rng = np.random.default_rng(2)
    values = list(rng.normal(0, 20, 500))
    edges, counts = histogram(values, csv_path=tmp_path / "h.csv", figure_path=tmp_path / "h.png")
    assert counts.sum() == 500
    assert edges[0] == -30 and edges[-1] == 30 and len(edges) == 31
    assert (tmp_path / "h.png").stat().st_size > 0
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 31
    _, counts = histogram([0.0] * 7)
    assert np.count_nonzero(counts) == 1 and counts.sum() == 7
    with pytest.raises(InvalidInputError):
        histogram([])


def test_wrong_speaker_mass_in_failure_band():
    """Extracting the interferer instead of the target lands in [-20, -10] dB here."""
    cfg = SimConfig(counts={"train": 0, "val": 0, "test": 30}, duration=(1.0, 1.0), snr_range=(0.0, 10.0))
    pools = speaker_pools(cfg)
    vals = []
    for i in range(30):
        s = simulate_sample(cfg, "test", i, pools["test"])
        leaked = s.interferers[0] + 0.3 * s.target
        vals.append(si_snri(s.mixture, s.target, leaked))
    edges, counts = histogram(vals)
    band = counts[(edges[:-1] >= -20) & (edges[1:] <= -10)].sum()
    assert band >= 0.5 * len(vals)


@pytest.fixture(scope="module")
def test_samples():
    cfg = SimConfig(counts={"train": 0, "val": 0, "test": 9}, duration=(0.6, 0.6), seed=4)
    pools = speaker_pools(cfg)
    return [simulate_sample(cfg, "test", i, pools["test"]) for i in range(9)]


def test_evaluate_is_reproducible_and_consistent(test_samples, tmp_path):
    torch.manual_seed(0)
    model = SeLG(desk_config("usev"))
    a = evaluate(model, test_samples, variant_name="usev")
    b = evaluate(model, test_samples, variant_name="usev")
    assert a.to_json() == b.to_json()
    assert [r.id for r in a.records] == sorted(r.id for r in a.records)
    for r in a.records:
        assert r.si_snri == r.si_snr_est - r.si_snr_mix
        assert r.subset == (WO_MISSING if r.has_lip else W_MISSING)
    write_report(a, tmp_path)
    d = json.loads((tmp_path / "report.json").read_text())
    assert set(d) == {"variant", "full", "wo_missing", "w_missing", "counts", "histogram"}
    assert report_from_json(d).counts == a.counts
    assert (tmp_path / "records.csv").exists() and (tmp_path / "histogram.png").exists()


def test_comparison_table_layout():
    rng = np.random.default_rng(3)
    reports = [summarize(_records(rng), name) for name in ("usev", "selg")]
    table = comparison_table(reports, VARIANTS)
    lines = table.strip().splitlines()
    assert lines[0].startswith("| Sys. | Model | Modalities")
    assert "Full test set" in lines[0] and "w/o missing" in lines[0] and "w/ missing" in lines[0]
    assert "| 2 | selg | Lip & Gesture | Attention | SI-SNR + InfoNCE |" in lines[3]
    assert f"{reports[0].full:.1f}" in lines[2]
