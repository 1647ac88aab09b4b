import json

import numpy as np
import pytest

from flowrefine.geom3d import kabsch_align
from flowrefine.metrics import (
    amr_precision,
    amr_recall,
    coverage_precision,
    coverage_recall,
    ensemble_report,
    improvement_downgrade,
    precision_rmsd,
    rmsd_matrix,
    write_irdr_tsv,
    write_json,
    write_per_molecule_tsv,
    write_report_tsv,
)

M22 = np.array([[0.3, 0.9], [0.8, 0.6]])


def naive_matrix(gen, refs):
    out = np.zeros((len(refs), len(gen)))
    for l in range(len(refs)):
        for k in range(len(gen)):
            out[l, k] = kabsch_align(gen[k], refs[l]).rmsd
    return out


def naive_cov_amr(m, delta):
    # recall: loop over references, then over generated conformers
    L, K = m.shape
    covered, total = 0, 0.0
    for l in range(L):
        best = m[l, 0]
        for k in range(1, K):
            if m[l, k] < best:
                best = m[l, k]
        total += best
        if best < delta:
            covered += 1
    return 100.0 * covered / L, total / L


def naive_irdr(before, after, tau):
    up = down = 0
    for b, a in zip(before, after):
        if b - a > tau:
            up += 1
        elif a - b > tau:
            down += 1
    return 100.0 * up / len(before), 100.0 * down / len(before)


def test_rmsd_matrix_examples():
    rng = np.random.default_rng(0)
    confs = list(rng.normal(size=(3, 6, 3)))
    m = rmsd_matrix(confs, confs)
    assert np.all(np.abs(np.diag(m)) < 1e-12)
    single = rmsd_matrix(confs[:1], confs[1:2])
    assert single.shape == (1, 1)
    assert abs(single[0, 0] - kabsch_align(confs[0], confs[1]).rmsd) < 1e-12
    refs = list(rng.normal(size=(3, 7, 3)))
    gen = list(rng.normal(size=(4, 7, 3)))
    m = rmsd_matrix(gen, refs)
    assert m.shape == (3, 4)
    assert np.max(np.abs(m - naive_matrix(gen, refs))) < 1e-12
    np.testing.assert_allclose(rmsd_matrix(refs, gen), m.T, atol=1e-12)


def test_rmsd_matrix_errors():
    with pytest.raises(ValueError):
        rmsd_matrix([np.zeros((4, 3))], [np.zeros((5, 3))])
    with pytest.raises(ValueError):
        rmsd_matrix([], [np.zeros((5, 3))])


def test_recall_examples():
    assert coverage_recall(np.zeros((3, 2)), 0.1) == 100.0
    assert amr_recall(np.zeros((3, 2))) == 0.0
    assert coverage_recall(M22, 0.75) == 100.0
    assert abs(amr_recall(M22) - 0.45) < 1e-15
    assert coverage_recall(np.array([[0.8]]), 0.75) == 0.0
    assert amr_recall(np.array([[0.8]])) == 0.8


def test_precision_examples():
    assert coverage_precision(M22, 0.75) == 100.0
    assert abs(amr_precision(M22) - 0.45) < 1e-15
    m = np.random.default_rng(1).uniform(size=(4, 4))
    sym = m + m.T
    assert coverage_precision(sym, 0.9) == coverage_recall(sym, 0.9)
    assert amr_precision(sym) == amr_recall(sym)


def test_coverage_is_strict():
    assert coverage_recall(np.array([[0.75]]), 0.75) == 0.0


def test_empty_matrix_rejected():
    for fn in (amr_recall, amr_precision):
        with pytest.raises(ValueError):
            fn(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        coverage_recall(np.zeros((2, 0)), 0.5)


def test_two_k_convention_uses_full_matrix():
    rng = np.random.default_rng(2)
    refs = list(rng.normal(size=(3, 5, 3)))
    gen = list(rng.normal(size=(6, 5, 3)))
    rep = ensemble_report({"m": rmsd_matrix(gen, refs)}, 0.75)
    assert rep.per_molecule[0].n_references == 3 and rep.per_molecule[0].n_generated == 6


def test_irdr_examples():
    before = np.array([0.5, 0.2])
    (row,) = improvement_downgrade(before, np.array([0.30, 0.35]), [0.10])
    assert row.improvement_rate == 50.0 and row.downgrade_rate == 50.0 and row.n_pairs == 2
    for r in improvement_downgrade(before, before, [0.0, 0.1, 1.0]):
        assert r.improvement_rate == 0.0 and r.downgrade_rate == 0.0
    for r in improvement_downgrade(before, np.array([0.30, 0.35]), [0.5, 2.0]):
        assert r.improvement_rate == 0.0 and r.downgrade_rate == 0.0
    with pytest.raises(ValueError):
        improvement_downgrade(before, before[:1], [0.1])


def test_oracle_equivalence_random_instances():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(3, 9))
        L, K = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        refs = list(rng.normal(size=(L, n, 3)))
        gen = list(rng.normal(size=(K, n, 3)) * rng.uniform(0.2, 1.5))
        m = rmsd_matrix(gen, refs)
        naive = naive_matrix(gen, refs)
        assert np.max(np.abs(m - naive)) < 1e-12
        delta = float(rng.uniform(0.3, 1.5))
        cov_r, amr_r = naive_cov_amr(m, delta)
        cov_p, amr_p = naive_cov_amr(m.T, delta)
        assert coverage_recall(m, delta) == cov_r
        assert amr_recall(m) == pytest.approx(amr_r, abs=1e-15)
        assert coverage_precision(m, delta) == cov_p
        assert amr_precision(m) == pytest.approx(amr_p, abs=1e-15)
        before, after = rng.uniform(0, 1, K), rng.uniform(0, 1, K)
        taus = [0.0, 0.05, 0.2]
        for row, tau in zip(improvement_downgrade(before, after, taus), taus):
            assert (row.improvement_rate, row.downgrade_rate) == naive_irdr(before, after, tau)


def test_threshold_monotonicity():
    rng = np.random.default_rng(4)
    m = rng.uniform(0, 2, size=(5, 7))
    covs = [coverage_recall(m, d) for d in np.linspace(0, 2.5, 30)]
    assert all(b >= a for a, b in zip(covs, covs[1:]))
    rows = improvement_downgrade(rng.uniform(size=50), rng.uniform(size=50), np.linspace(0, 1, 20))
    for a, b in zip(rows, rows[1:]):
        assert b.improvement_rate <= a.improvement_rate and b.downgrade_rate <= a.downgrade_rate
    assert all(r.improvement_rate + r.downgrade_rate <= 100 for r in rows)


def test_adding_generated_conformer_is_monotone():
    rng = np.random.default_rng(5)
    refs = list(rng.normal(size=(4, 6, 3)))
    gen = list(rng.normal(size=(3, 6, 3)))
    m1 = rmsd_matrix(gen, refs)
    m2 = rmsd_matrix(gen + [rng.normal(size=(6, 3))], refs)
    assert coverage_recall(m2, 1.5) >= coverage_recall(m1, 1.5)
    assert amr_recall(m2) <= amr_recall(m1)


def test_perfect_refiner_limit():
    rng = np.random.default_rng(6)
    refs = list(rng.normal(size=(3, 6, 3)))
    gen = [r + rng.normal(scale=0.2, size=r.shape) for r in refs] + [refs[0].copy()]
    before = precision_rmsd(gen, refs)
    nearest = rmsd_matrix(gen, refs).argmin(axis=0)
    after_confs = [refs[i] for i in nearest]
    assert amr_precision(rmsd_matrix(after_confs, refs)) < 1e-12
    after = precision_rmsd(after_confs, refs)
    (row,) = improvement_downgrade(before, after, [1e-9])
    assert row.improvement_rate == 100.0 * np.mean(before > 1e-9) == 75.0


def test_report_aggregates_per_molecule_rows():
    rng = np.random.default_rng(7)
    mats = {f"m{i}": rng.uniform(0, 1.5, size=(3, 6)) for i in range(5)}
    rep = ensemble_report(mats, 0.75, "20+20")
    covs = [r.cov_r for r in rep.per_molecule]
    assert rep.cov_r.mean == pytest.approx(np.mean(covs), abs=1e-12)
    assert rep.cov_r.median == np.median(covs)
    assert rep.amr_p.mean == pytest.approx(np.mean([amr_precision(m) for m in mats.values()]), abs=1e-12)


def test_report_files(tmp_path):
    rng = np.random.default_rng(8)
    rep = ensemble_report({"a": rng.uniform(size=(2, 4)), "b": rng.uniform(size=(3, 6))}, 0.5, "20+20")
    rows = improvement_downgrade(rng.uniform(size=10), rng.uniform(size=10), [0.05, 0.1])
    write_report_tsv(tmp_path / "r.tsv", [rep])
    write_per_molecule_tsv(tmp_path / "p.tsv", rep)
    write_irdr_tsv(tmp_path / "i.tsv", rows)
    write_json(tmp_path / "r.json", {"report": rep, "irdr": rows})
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert lines[0].split("\t")[:3] == ["label", "delta", "cov_r_mean"]
    assert lines[1].startswith("20+20\t0.5\t")
    assert len((tmp_path / "p.tsv").read_text().splitlines()) == 3
    assert len((tmp_path / "i.tsv").read_text().splitlines()) == 3
    payload = json.loads((tmp_path / "r.json").read_text())
    assert payload["report"]["label"] == "20+20"
    assert len(payload["irdr"]) == 2
