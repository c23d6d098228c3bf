import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from pocketdiff.api.dependencies.custom_exception import CorpusError, EmptyProteinError, TrainingDivergedError
from pocketdiff.core import autodiff as ad
from pocketdiff.core.autodiff import Tape, Tensor
from pocketdiff.core.optim import AdamState
from pocketdiff.schemas.molecule import Complex, Molecule, Prediction, one_hot
from pocketdiff.services.checkpoint import load_checkpoint
from pocketdiff.services.denoiser import DenoiserParams, forward, make_predictor
from pocketdiff.services.diffusion import diffusion_service
from pocketdiff.services.schedules import schedule_service
from pocketdiff.services.trainer import trainer_service
from pocketdiff.tests.factories import make_complex


def never_called(*args):
    raise AssertionError("the estimation branch should not run")


def zero_predictor(K):
    def _predict(y_xt, y_vt, t, protein):
        return Prediction(x0_hat=np.zeros_like(y_xt), v0_hat=np.full((y_xt.shape[0], K), 1.0 / K))
    return _predict


def noisy_for(complex_, t, schedule, rng):
    return diffusion_service.perturb(complex_.ligand.positions, complex_.ligand.types, t, schedule, rng)


# centering

def test_center_complex_moves_protein_centroid_to_origin(small_complex):
    centered, offset = trainer_service.center_complex(small_complex)
    assert_allclose(centered.protein.positions.mean(axis=0), 0.0, atol=1e-12)
    assert_allclose(offset, small_complex.protein.positions.mean(axis=0))
    assert_allclose(centered.ligand.positions + offset, small_complex.ligand.positions, atol=1e-12)
    again, second_offset = trainer_service.center_complex(centered)
    assert_allclose(second_offset, 0.0, atol=1e-12)
    assert_allclose(again.ligand.positions, centered.ligand.positions, atol=1e-12)


def test_center_on_empty_protein():
    with pytest.raises(EmptyProteinError):
        trainer_service.center_positions(np.zeros((0, 3)))


# pseudo molecule estimation

def test_estimation_skipped_when_p_is_one(small_complex, small_schedule, rng):
    noisy = noisy_for(small_complex, 3, small_schedule, rng)
    for _ in range(50):
        pseudo = trainer_service.pseudo_molecule_estimation(small_complex, noisy, 3, 1.0, None, small_schedule, rng, never_called)
        assert pseudo.chose_ground_truth
        assert_array_equal(pseudo.y_xt, noisy.x_t)
        assert_array_equal(pseudo.y_vt, noisy.v_t)


def test_estimation_skipped_at_last_timestep(small_complex, small_schedule, rng):
    noisy = noisy_for(small_complex, 10, small_schedule, rng)
    pseudo = trainer_service.pseudo_molecule_estimation(small_complex, noisy, 10, 0.0, None, small_schedule, rng, never_called)
    assert pseudo.chose_ground_truth


def test_estimate_is_renoised_prediction(small_schedule, rng):
    m = 20_000
    big = Complex(
        protein=make_complex(rng).protein,
        ligand=Molecule(positions=rng.normal(size=(m, 3)), types=one_hot(rng.integers(0, 4, m), 4)),
    )
    noisy = noisy_for(big, 3, small_schedule, rng)
    pseudo = trainer_service.pseudo_molecule_estimation(big, noisy, 3, 0.0, None, small_schedule, rng, zero_predictor(4))
    assert not pseudo.chose_ground_truth
    # x̂_0 = 0, so y_xt ~ N(0, 1 - ᾱ_3)
    assert abs(pseudo.y_xt.var() / (1.0 - small_schedule.alpha_bar(3)) - 1.0) < 0.03
    # uniform v̂_0 hardens to type 0 before re-noising
    expected = diffusion_service.type_marginal(one_hot([0], 4), 3, small_schedule, 4)[0]
    assert_allclose(pseudo.y_vt.mean(axis=0), expected, atol=0.02)


@pytest.mark.parametrize("p", [0.0, 0.25, 0.5, 0.8, 1.0])
def test_ground_truth_frequency_matches_p(p, small_schedule):
    rng = np.random.default_rng(99)
    complex_ = make_complex(rng, m=1, n=3)
    noisy = noisy_for(complex_, 2, small_schedule, rng)
    predictor = zero_predictor(4)
    trials = 100_000
    hits = sum(
        trainer_service.pseudo_molecule_estimation(complex_, noisy, 2, p, None, small_schedule, rng, predictor).chose_ground_truth
        for _ in range(trials)
    )
    assert abs(hits / trials - p) < 0.005


# loss

def test_loss_without_kl_weight_is_mse(small_complex, small_schedule, rng):
    ligand = small_complex.ligand
    x_hat = ad.as_tensor(ligand.positions + 0.5)
    v_hat = ad.as_tensor(rng.dirichlet(np.ones(4), size=6))
    loss, mse, _ = trainer_service.compute_loss(x_hat, v_hat, ligand, ligand.types, 4, small_schedule, 0.0)
    assert loss.item() == pytest.approx(0.75)
    assert mse.item() == pytest.approx(0.75)


def test_perfect_prediction_has_zero_loss(small_complex, small_schedule, rng):
    ligand = small_complex.ligand
    y_vt = one_hot(rng.integers(0, 4, 6), 4)
    loss, mse, kl = trainer_service.compute_loss(
        ad.as_tensor(ligand.positions), ad.as_tensor(ligand.types), ligand, y_vt, 5, small_schedule, 100.0
    )
    assert mse.item() == 0.0
    assert abs(kl.item()) < 1e-12
    assert abs(loss.item()) < 1e-10


def test_kl_term_is_non_negative(small_complex, small_schedule, rng):
    ligand = small_complex.ligand
    for t in range(1, 11):
        y_vt = one_hot(rng.integers(0, 4, 6), 4)
        _, _, kl = trainer_service.compute_loss(
            ad.as_tensor(ligand.positions), ad.as_tensor(rng.dirichlet(np.ones(4), size=6)),
            ligand, y_vt, t, small_schedule, 1.0,
        )
        assert kl.item() >= -1e-15


def test_full_loss_gradient_matches_finite_differences(tiny_params, small_complex, small_schedule):
    centered, _ = trainer_service.center_complex(small_complex)
    noisy = noisy_for(centered, 4, small_schedule, np.random.default_rng(4))

    def full_loss(weights):
        x_hat, v_hat = forward(weights, tiny_params.config, noisy.x_t, noisy.v_t, 4, centered.protein)
        loss, _, _ = trainer_service.compute_loss(x_hat, v_hat, centered.ligand, noisy.v_t, 4, small_schedule, 10.0)
        return loss

    with Tape() as tape:
        leaves = tiny_params.tensors(requires_grad=True)
        grads = tape.backward(full_loss(leaves))

    h = 1e-5
    analytic, numeric = [], []
    with ad.no_grad():
        for name, w in tiny_params.weights.items():
            analytic.append(grads[leaves[name]].reshape(-1))
            column = np.zeros(w.size)
            for i in range(w.size):
                shifted = {k: Tensor(v) for k, v in tiny_params.weights.items()}
                plus, minus = w.copy().reshape(-1), w.copy().reshape(-1)
                plus[i] += h
                minus[i] -= h
                shifted[name] = Tensor(plus.reshape(w.shape))
                f_plus = full_loss(shifted).item()
                shifted[name] = Tensor(minus.reshape(w.shape))
                f_minus = full_loss(shifted).item()
                column[i] = (f_plus - f_minus) / (2.0 * h)
            numeric.append(column)
    analytic, numeric = np.concatenate(analytic), np.concatenate(numeric)
    # entries far below the gradient's scale are judged against that scale
    floor = 1e-3 * np.max(np.abs(numeric))
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    assert np.max(rel) < 1e-4


def test_translating_the_raw_complex_leaves_prediction_unchanged(tiny_params, small_complex, small_schedule):
    shift = np.array([12.0, -3.5, 40.0])
    moved = Complex(
        protein=small_complex.protein.translated(shift),
        ligand=Molecule(positions=small_complex.ligand.positions + shift, types=small_complex.ligand.types),
    )
    predictor = make_predictor(tiny_params)
    outputs = []
    for complex_ in (small_complex, moved):
        centered, _ = trainer_service.center_complex(complex_, scale=2.0)
        noisy = noisy_for(centered, 3, small_schedule, np.random.default_rng(8))
        outputs.append(predictor(noisy.x_t, noisy.v_t, 3, centered.protein))
    assert_allclose(outputs[1].x0_hat, outputs[0].x0_hat, atol=1e-10)
    assert_allclose(outputs[1].v0_hat, outputs[0].v0_hat, atol=1e-12)


# training step

def run_steps(config, dataset, params, steps, estimator=None):
    schedule = schedule_service.build_noise_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    state = AdamState()
    records = []
    for step in range(steps):
        record, params, state = trainer_service.training_step(
            dataset, step, config, params, state, schedule, config.anneal_spec(), estimator
        )
        records.append(record)
    return records, params


def test_classic_mode_equals_never_estimating(tiny_train_config, tiny_params, rng):
    dataset = [make_complex(rng, complex_id=f"c{i}") for i in range(2)]
    classic = tiny_train_config.model_copy(update={"classic_mode": True})
    always_truth = tiny_train_config.model_copy(update={"r": float("inf")})
    rec_a, params_a = run_steps(classic, dataset, tiny_params, 3)
    rec_b, params_b = run_steps(always_truth, dataset, tiny_params, 3)
    assert rec_a == rec_b
    for name in params_a.weights:
        assert_array_equal(params_a.weights[name], params_b.weights[name])


def test_estimation_branch_adds_no_gradient(tiny_train_config, tiny_params, rng):
    dataset = [make_complex(rng, complex_id=f"c{i}") for i in range(2)]
    config = tiny_train_config.model_copy(update={"p_init": 0.0, "lower_bound": 0.0})
    frozen = make_predictor(tiny_params.with_weights({k: w.copy() for k, w in tiny_params.weights.items()}))
    rec_live, params_live = run_steps(config, dataset, tiny_params, 1)
    rec_frozen, params_frozen = run_steps(config, dataset, tiny_params, 1, estimator=frozen)
    assert rec_live == rec_frozen
    assert rec_live[0].p_T == 0.0
    for name in params_live.weights:
        assert_array_equal(params_live.weights[name], params_frozen.weights[name])


def test_records_use_annealed_probability(tiny_train_config, tiny_params, rng):
    config = tiny_train_config.model_copy(update={"epoch_divisor": 1, "lower_bound": 0.0})
    records, _ = run_steps(config, [make_complex(rng)], tiny_params, 3)
    spec = config.anneal_spec()
    assert [r.p_T for r in records] == [schedule_service.anneal_probability(spec, e) for e in range(3)]
    assert [r.epoch for r in records] == [0, 1, 2]


def test_divergence_is_reported(tiny_train_config, tiny_params, rng):
    blown = make_complex(rng)
    blown = Complex(
        protein=blown.protein,
        ligand=Molecule(positions=rng.normal(size=(6, 3)) * 1e200, types=blown.ligand.types),
    )
    with pytest.raises(TrainingDivergedError) as exc:
        run_steps(tiny_train_config, [blown], tiny_params, 1)
    assert exc.value.errors["step"] == 0
    assert "t" in exc.value.errors


def test_divergence_while_estimating_is_reported(tiny_train_config, tiny_params, rng):
    blown = make_complex(rng)
    blown = Complex(
        protein=blown.protein,
        ligand=Molecule(positions=rng.normal(size=(6, 3)) * 1e200, types=blown.ligand.types),
    )
    config = tiny_train_config.model_copy(update={"p_init": 0.0, "lower_bound": 0.0})
    with pytest.raises(TrainingDivergedError) as exc:
        run_steps(config, [blown, blown], tiny_params, 1)
    assert exc.value.errors["step"] == 0
    assert exc.value.errors["p_T"] == 0.0
    assert {"t", "item", "cause", "mse", "kl"} <= set(exc.value.errors)


def test_smoothed_loss_ratio():
    metrics = pd.DataFrame({"loss": [4.0] * 10 + [1.0] * 10})
    assert trainer_service.smoothed_loss_ratio(metrics, window=10) == 0.25
    assert trainer_service.smoothed_loss_ratio(metrics, window=1000) == 1.0
    assert np.isnan(trainer_service.smoothed_loss_ratio(metrics.iloc[:0]))


# train

def test_zero_steps_writes_initial_checkpoint(tmp_path, tiny_train_config, rng):
    config = tiny_train_config.model_copy(update={"total_steps": 0})
    result = trainer_service.train(config, [make_complex(rng)], tmp_path)
    params, meta = load_checkpoint(result.checkpoint_path)
    initial = DenoiserParams.initialize(config.denoiser_config(4, 2), np.random.default_rng(config.seed))
    for name, w in initial.weights.items():
        assert_array_equal(params.weights[name], w)
    assert meta["step"] == 0
    assert meta["atom_counts"] == {"6": 1}
    assert len(pd.read_csv(result.metrics_path)) == 0
    assert (tmp_path / "resolved_config.txt").exists()


def test_same_seed_same_metrics(tmp_path, tiny_train_config):
    dataset = [make_complex(np.random.default_rng(i), complex_id=f"c{i}") for i in range(3)]
    first = trainer_service.train(tiny_train_config, dataset, tmp_path / "a")
    second = trainer_service.train(tiny_train_config, dataset, tmp_path / "b")
    assert first.metrics_path.read_bytes() == second.metrics_path.read_bytes()
    assert list(first.metrics.columns) == ["step", "epoch", "p_T", "mse", "kl", "loss", "chose_gt_fraction"]


def test_annealed_and_disabled_runs_agree_in_first_epoch(tmp_path, tiny_train_config):
    dataset = [make_complex(np.random.default_rng(i), complex_id=f"c{i}") for i in range(3)]
    annealed = trainer_service.train(tiny_train_config, dataset, tmp_path / "arc")
    disabled = trainer_service.train(tiny_train_config.model_copy(update={"r": float("inf")}), dataset, tmp_path / "inf")
    pd.testing.assert_frame_equal(annealed.metrics, disabled.metrics)


def test_periodic_checkpoints(tmp_path, tiny_train_config, rng):
    config = tiny_train_config.model_copy(update={"checkpoint_every": 2, "total_steps": 4})
    trainer_service.train(config, [make_complex(rng)], tmp_path)
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_0000002.npz", "step_0000004.npz"]


def test_empty_dataset(tmp_path, tiny_train_config):
    with pytest.raises(CorpusError):
        trainer_service.train(tiny_train_config, [], tmp_path)


@pytest.mark.slow
def test_loss_goes_down(tmp_path, tiny_train_config):
    dataset = [make_complex(np.random.default_rng(i), complex_id=f"c{i}") for i in range(8)]
    config = tiny_train_config.model_copy(update={"total_steps": 300, "lr": 3e-3, "log_every": 50})
    metrics = trainer_service.train(config, dataset, tmp_path).metrics
    assert metrics["loss"].iloc[-50:].mean() < metrics["loss"].iloc[:50].mean()
