import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from flowrefine.data import MoleculeRecord, ToyDatasetSpec, build_chain, synth_dataset
from flowrefine.geom3d import kabsch_rmsd_many, random_rotation
from flowrefine.interpolant import Schedule
from flowrefine.metrics import precision_rmsd
from flowrefine.model import MolecularGraph, ModelConfig, init_model
from flowrefine.pipeline import (
    RefinementError,
    SampleConfig,
    TrainConfig,
    TrainingDivergedError,
    budget_label,
    generate_from_noise,
    generate_many,
    noise_draws,
    pipeline_refine_ensemble,
    refine,
    refine_many,
    total_steps,
    train_generator,
    train_refiner,
    write_trajectory_dump,
)


def _chain_graph(n):
    return MolecularGraph([1] * n, [(i, i + 1, 1) for i in range(n - 1)])


def _random_model(seed=0, hidden=16):
    # a fresh model has a zero gate; give it a random one so the field is non-trivial
    rng = np.random.default_rng(seed)
    model = init_model(ModelConfig(hidden=hidden, n_layers=2), rng)
    model.params["gate_w2"] = rng.normal(0.0, 0.3, size=hidden)
    return model


def _const_field(c):
    return lambda x, t: np.broadcast_to(c, x.shape).copy()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(sigma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        SampleConfig(0)
    with pytest.raises(ValueError):
        SampleConfig(2, times=(0.1, 0.5, 1.0))
    with pytest.raises(ValueError):
        SampleConfig(2, times=(0.0, 0.5, 0.9))
    with pytest.raises(ValueError):
        SampleConfig(3, times=(0.0, 0.5, 0.4, 1.0))
    assert np.array_equal(SampleConfig(4).schedule(), [0.0, 0.25, 0.5, 0.75, 1.0])


def test_cosine_learning_rate():
    cfg = TrainConfig(epochs=11, lr=1e-2, lr_final=1e-4)
    assert cfg.lr_at(0) == 1e-2
    assert cfg.lr_at(10) == pytest.approx(1e-4, abs=1e-18)
    assert cfg.lr_at(5) == pytest.approx(0.5 * (1e-2 + 1e-4))
    lrs = [cfg.lr_at(e) for e in range(11)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    assert TrainConfig(lr=3e-3).lr_at(7) == 3e-3


def test_schedule_kind_checked():
    recs = synth_dataset(ToyDatasetSpec(n_molecules=1, seed=0))
    m = init_model(ModelConfig(hidden=8, n_layers=1))
    with pytest.raises(ValueError):
        train_refiner(recs, m, TrainConfig(epochs=1, schedule=Schedule("generator_gaussian")))
    with pytest.raises(ValueError):
        train_generator(recs, m, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train_refiner([], m, TrainConfig(epochs=1))


def _aligned_noise_sq(x1, sigma, n_draws, rng):
    # independent oracle: scipy's rotation fit on centred copies, no flowrefine geometry
    x1c = x1 - x1.mean(axis=0)
    out = np.empty(n_draws)
    for k in range(n_draws):
        x0 = x1 + sigma * rng.standard_normal(x1.shape)
        x0c = x0 - x0.mean(axis=0)
        rot, _ = Rotation.align_vectors(x1c, x0c)
        u = x1c - rot.apply(x0c)
        out[k] = np.sum(u * u) / len(x1)
    return out


def test_initial_loss_matches_aligned_noise_oracle():
    rec = synth_dataset(ToyDatasetSpec(n_molecules=1, seed=1, jitter=0.0))[0]
    x1 = rec.references[0]
    oracle = _aligned_noise_sq(x1, 1.0, 4000, np.random.default_rng(0)).mean()
    # lr = 0 keeps the zero-gate model fixed, so every epoch reports the initial loss
    many = MoleculeRecord(rec.id, rec.graph, [x1] * 200)
    model = init_model(ModelConfig(hidden=8, n_layers=1), np.random.default_rng(1))
    _, hist = train_refiner([many], model, TrainConfig(sigma=1.0, epochs=20, batch_size=100, lr=0.0), np.random.default_rng(2))
    assert abs(np.mean(hist) / oracle - 1.0) < 0.05
    # without alignment the loss is the raw noise energy 3 sigma^2 (minus the centroid share)
    _, raw = train_refiner([many], model, TrainConfig(sigma=1.0, epochs=20, batch_size=100, lr=0.0, align_base=False), np.random.default_rng(3))
    assert abs(np.mean(raw) / 3.0 - 1.0) < 0.05


def test_zero_learning_rate_keeps_parameters():
    recs = synth_dataset(ToyDatasetSpec(n_molecules=3, seed=2))
    model = _random_model(1)
    before = {k: v.copy() for k, v in model.params.items()}
    trained, hist = train_refiner(recs, model, TrainConfig(epochs=2, batch_size=4, lr=0.0), np.random.default_rng(3))
    assert len(hist) == 2
    for k, v in before.items():
        assert np.array_equal(trained.params[k], v)


def test_overfit_single_frozen_example():
    # one conformer with one frozen noise/time draw: the classic memorisation check
    rec = synth_dataset(ToyDatasetSpec(n_molecules=1, seed=0, jitter=0.0))[0]
    one = MoleculeRecord(rec.id, rec.graph, [rec.references[0]])
    model = init_model(ModelConfig(hidden=32), np.random.default_rng(0))
    cfg = TrainConfig(sigma=1.0, epochs=200, batch_size=1, lr=1e-2, freeze_noise=True)
    _, hist = train_refiner([one], model, cfg, np.random.default_rng(10))
    assert hist[-1] < 0.1 * hist[0]


def test_frozen_noise_repeats_draws():
    recs = synth_dataset(ToyDatasetSpec(n_molecules=2, seed=3))
    model = _random_model(2)
    _, hist = train_refiner(recs, model, TrainConfig(epochs=3, batch_size=64, lr=0.0, freeze_noise=True), np.random.default_rng(4))
    assert hist[0] == pytest.approx(hist[1], rel=1e-12) and hist[1] == pytest.approx(hist[2], rel=1e-12)


def test_training_is_deterministic():
    recs = synth_dataset(ToyDatasetSpec(n_molecules=3, seed=4))
    runs = []
    for _ in range(2):
        m, h = train_refiner(recs, init_model(ModelConfig(hidden=8, n_layers=1), np.random.default_rng(5)),
                             TrainConfig(epochs=2, batch_size=4, lr=1e-2), np.random.default_rng(6))
        runs.append((m, h))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0].params:
        assert np.array_equal(runs[0][0].params[k], runs[1][0].params[k])


def test_training_loss_decreases():
    recs = synth_dataset(ToyDatasetSpec(n_molecules=10, seed=5))
    model = init_model(ModelConfig(hidden=16, n_layers=2), np.random.default_rng(6))
    _, hist = train_refiner(recs, model, TrainConfig(epochs=15, batch_size=16, lr=3e-3), np.random.default_rng(7))
    assert np.mean(hist[-3:]) < 0.8 * hist[0]


def test_non_finite_loss_reports_context():
    recs = synth_dataset(ToyDatasetSpec(n_molecules=2, seed=6))
    model = _random_model(3)
    model.params["gate_b2"][0] = np.nan
    with pytest.raises(TrainingDivergedError, match=r"epoch 0, batch 0, molecules .*mol"):
        train_refiner(recs, model, TrainConfig(epochs=1), np.random.default_rng(8))


@pytest.mark.parametrize("steps", [1, 3, 20])
def test_zero_model_is_identity(steps):
    g = _chain_graph(6)
    x = np.random.default_rng(9).normal(size=(6, 3))
    out, traj = refine(init_model(rng=np.random.default_rng(10)), x, g, SampleConfig(steps, capture_trajectory=True))
    assert np.array_equal(out, x)
    assert len(traj) == steps + 1


@pytest.mark.parametrize("steps", [1, 7, 40])
def test_constant_field_adds_c(steps):
    g = _chain_graph(4)
    rng = np.random.default_rng(11)
    x, c = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    out, _ = refine(_const_field(c), x, g, SampleConfig(steps))
    np.testing.assert_allclose(out, x + c, atol=1e-12)
    times = np.sort(rng.uniform(size=steps - 1)) if steps > 1 else np.array([])
    sched = tuple([0.0] + list(times) + [1.0])
    out2, _ = refine(_const_field(c), x, g, SampleConfig(steps, times=sched))
    np.testing.assert_allclose(out2, x + c, atol=1e-12)


def test_euler_first_order_on_linear_decay():
    g = _chain_graph(5)
    x0 = np.random.default_rng(12).normal(size=(5, 3))
    exact = x0 * np.exp(-1.0)
    errs = []
    for n in (10, 20, 40):
        out, _ = refine(lambda x, t: -x, x0, g, SampleConfig(n))
        errs.append(np.max(np.abs(out - exact)))
    assert errs[0] / errs[1] >= 1.8 and errs[1] / errs[2] >= 1.8
    # the analytic Euler result is (1 - 1/N)^N x0
    out, _ = refine(lambda x, t: -x, x0, g, SampleConfig(10))
    np.testing.assert_allclose(out, x0 * 0.9**10, atol=1e-14)


def test_sampler_equivariance():
    g = _chain_graph(6)
    rng = np.random.default_rng(13)
    model = _random_model(4)
    x = build_chain([180.0, 60.0, -60.0], 1.5, 112.0) + 0.3 * rng.normal(size=(6, 3))
    out, _ = refine(model, x, g, SampleConfig(20))
    assert np.max(np.abs(out - x)) > 1e-3
    for _ in range(5):
        q, shift = random_rotation(rng), rng.normal(size=3) * 5
        moved, _ = refine(model, x @ q.T + shift, g, SampleConfig(20))
        assert np.max(np.abs(moved - (out @ q.T + shift))) < 1e-8


def test_refinement_error_has_step():
    g = _chain_graph(3)

    def blows_up(x, t):
        return np.full_like(x, np.inf) if t >= 0.5 else np.zeros_like(x)

    with pytest.raises(RefinementError) as err:
        refine(blows_up, np.zeros((3, 3)), g, SampleConfig(4))
    assert err.value.step == 2
    with pytest.raises(ValueError):
        refine(blows_up, np.zeros((4, 3)), g, SampleConfig(4))


def test_trajectory_invariants():
    g = _chain_graph(5)
    x = np.random.default_rng(14).normal(size=(5, 3))
    times = (0.0, 0.1, 0.3, 0.7, 1.0)
    _, traj = refine(_random_model(5), x, g, SampleConfig(4, times=times, capture_trajectory=True))
    assert np.array_equal(traj.times, times)
    assert np.array_equal(traj.points[0].state, x)
    assert traj.points[-1].velocity is None and np.isnan(traj.points[-1].mean_speed)
    for a, b in zip(traj.points, traj.points[1:]):
        np.testing.assert_allclose(b.state, a.state + (b.t - a.t) * a.velocity, atol=1e-14)
        assert a.mean_speed == pytest.approx(np.linalg.norm(a.velocity, axis=1).mean())
    assert traj.centroid_drift >= 0.0
    _, none = refine(_random_model(5), x, g, SampleConfig(4))
    assert none is None


def test_generate_zero_model_returns_noise():
    g = _chain_graph(7)
    out, _ = generate_from_noise(init_model(rng=np.random.default_rng(15)), g, SampleConfig(5), 1.5, np.random.default_rng(16))
    expected = noise_draws([g], 1.5, np.random.default_rng(16))[0]
    assert np.array_equal(out, expected)
    assert np.linalg.norm(out.mean(axis=0)) < 1e-12


def test_generation_is_seed_deterministic():
    graphs = [_chain_graph(n) for n in (4, 6, 8)]
    model = _random_model(6)
    a, _ = generate_many(model, graphs, SampleConfig(5), 1.0, np.random.default_rng(17))
    b, _ = generate_many(model, graphs, SampleConfig(5), 1.0, np.random.default_rng(17))
    c, _ = generate_many(model, graphs, SampleConfig(5), 1.0, np.random.default_rng(18))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])


def test_batched_refinement_matches_single():
    graphs = [_chain_graph(n) for n in (4, 7, 5)]
    rng = np.random.default_rng(19)
    xs = [rng.normal(size=(g.n_atoms, 3)) for g in graphs]
    model = _random_model(7)
    many, _ = refine_many(model, xs, graphs, SampleConfig(6))
    for x, g, y in zip(xs, graphs, many):
        single, _ = refine(model, x, g, SampleConfig(6))
        np.testing.assert_allclose(single, y, atol=1e-12)


def test_ensemble_empty_and_identity():
    g4, g5 = _chain_graph(4), _chain_graph(5)
    zero = init_model(rng=np.random.default_rng(20))
    assert pipeline_refine_ensemble([], [], zero, SampleConfig(3)) == []
    rng = np.random.default_rng(21)
    ups = [[rng.normal(size=(4, 3)) for _ in range(3)], [], [rng.normal(size=(5, 3))]]
    out = pipeline_refine_ensemble(ups, [g4, g4, g5], zero, SampleConfig(3), molecule_ids=["a", "b", "c"])
    assert [e.molecule_id for e in out] == ["a", "b", "c"]
    assert [len(e.after) for e in out] == [3, 0, 1]
    for ens, src in zip(out, ups):
        assert ens.indices == list(range(len(src)))
        assert all(np.array_equal(x, y) for x, y in zip(ens.after, src))


def test_ensemble_errors_name_molecule():
    g = _chain_graph(4)
    with pytest.raises(ValueError, match="one graph"):
        pipeline_refine_ensemble([[np.zeros((4, 3))]], [], init_model(), SampleConfig(2))
    with pytest.raises(ValueError, match="molecule m7, conformer 1"):
        pipeline_refine_ensemble([[np.zeros((4, 3)), np.zeros((5, 3))]], [g], init_model(), SampleConfig(2), molecule_ids=["m7"])

    def blows_up(x, t):
        return np.full_like(x, np.nan)

    with pytest.raises(RefinementError, match="m7"):
        pipeline_refine_ensemble([[np.ones((4, 3))]], [g], blows_up, SampleConfig(2), molecule_ids=["m7"])


def test_budget_accounting():
    assert budget_label(20, 20) == "20+20" and total_steps(20, 20) == 40
    assert budget_label(10, 10) == "10+10"
    assert budget_label(40) == "40" and total_steps(40) == 40


def test_trajectory_dump(tmp_path):
    g = _chain_graph(4)
    ref = build_chain([180.0], 1.5, 112.0)
    x = ref + 0.1
    out = pipeline_refine_ensemble([[x, ref]], [g], init_model(), SampleConfig(2, capture_trajectory=True), molecule_ids=["m0"])
    write_trajectory_dump(tmp_path / "traj.tsv", out, {"m0": [ref]})
    lines = (tmp_path / "traj.tsv").read_text().splitlines()
    assert lines[0] == "molecule\tconformer\tt\tmean_speed\trmsd"
    assert len(lines) == 1 + 2 * 3
    assert lines[1] == "m0\t0\t0.000000\t0.000000\t0.000000"
    assert lines[3].endswith("\tnan\t0.000000")
    write_trajectory_dump(tmp_path / "noref.tsv", out)
    assert (tmp_path / "noref.tsv").read_text().splitlines()[1].endswith("\tnan")


# --- properties of the trained toy models (shared session fixture) ---


def test_trained_generator_beats_raw_noise(toy_models):
    gen, graphs, recs = toy_models.generator, toy_models.eval_graphs, toy_models.eval_records
    rng = np.random.default_rng(30)
    noise = noise_draws(graphs, toy_models.sigma_gen, rng)
    out, _ = refine_many(gen, noise, graphs, SampleConfig(20))
    wins, pos = 0, 0
    for rec in recs:
        k = toy_models.per_molecule(rec)
        refs = np.stack(rec.references)
        for a, b in zip(noise[pos : pos + k], out[pos : pos + k]):
            wins += kabsch_rmsd_many(b[None], refs).min() < kabsch_rmsd_many(a[None], refs).min()
        pos += k
    assert wins / pos >= 0.9


def test_trained_refiner_improves_perturbed_inputs(toy_models):
    sigma_star = 0.2
    rng = np.random.default_rng(31)
    xs, graphs, owners = [], [], []
    for rec in toy_models.eval_records:
        for x in rec.references:
            xs.append(x + sigma_star * rng.standard_normal(x.shape))
            graphs.append(rec.graph)
            owners.append(rec)
    out, trajs = refine_many(toy_models.refiner, xs, graphs, SampleConfig(20, capture_trajectory=True))
    before = np.array([precision_rmsd([x], r.references)[0] for x, r in zip(xs, owners)])
    after = np.array([precision_rmsd([x], r.references)[0] for x, r in zip(out, owners)])
    assert np.median(after) < np.median(before)
    # warm-up tolerance along the trajectories
    peaks = []
    for tr, rec, b in zip(trajs, owners, before):
        refs = np.stack(rec.references)
        peaks.append(max(kabsch_rmsd_many(p.state[None], refs).min() for p in tr.points) - b)
    assert max(peaks) <= 0.5 * sigma_star
