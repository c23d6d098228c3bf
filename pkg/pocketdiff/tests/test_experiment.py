import math

import numpy as np
import pytest

from pocketdiff.api.dependencies.custom_exception import ConfigKeyError, CorpusError, ScheduleError
from pocketdiff.schemas.config import EvalConfig, ExperimentConfig
from pocketdiff.schemas.enums import AnnealKind
from pocketdiff.services.experiment import ARM_PRESETS, experiment_service


TINY_TRAIN = {
    "total_steps": "3",
    "batch_size": "2",
    "diffusion_steps": "5",
    "hidden_dim": "8",
    "num_layers": "1",
    "time_dim": "4",
}


def test_parse_classic_arm():
    arm = experiment_service.parse_arm(" Classic ")
    assert arm.text == "classic"
    assert arm.overrides == {"classic_mode": "true"}


def test_parse_anneal_arm_keeps_only_written_keys():
    arm = experiment_service.parse_arm("linear:slope=-0.01, lower_bound=0.8")
    assert arm.overrides == {"anneal": "linear", "classic_mode": "false", "slope": "-0.01", "lower_bound": "0.8"}
    assert experiment_service.parse_arm("arc").overrides == {"anneal": "arc", "classic_mode": "false"}
    with pytest.raises(ScheduleError):
        experiment_service.parse_arm("cosine:r=2")


def test_presets_cover_the_ablation_grid():
    curves = [experiment_service.arm_label(experiment_service.arm_config(ExperimentConfig(), {}, arm))
              for arm in experiment_service.resolve_arms(None, ["curves"])]
    assert curves == [
        "original(mu=12,lb=0.5)", "original(mu=12,lb=0.8)",
        "linear(slope=-0.005,lb=0.5)", "linear(slope=-0.005,lb=0.8)",
        "arc(r=2,lb=0.5)", "arc(r=2,lb=0.8)",
    ]
    radius = experiment_service.resolve_arms(None, ["radius"])
    assert [a.overrides["r"] for a in radius] == ["1.5", "2", "3", "4", "8", "inf"]
    assert len(ARM_PRESETS["directional"]) == 2


def test_resolve_arms_defaults_and_order():
    assert [a.text for a in experiment_service.resolve_arms(None, None)] == ["classic", "arc:r=2"]
    arms = experiment_service.resolve_arms(["classic"], ["radius"])
    assert arms[-1].text == "classic" and len(arms) == 7
    with pytest.raises(ScheduleError) as exc:
        experiment_service.resolve_arms(None, ["everything"])
    assert "radius" in exc.value.errors["valid"]


def test_split_values_routes_keys():
    experiment, evaluation, train = experiment_service.split_values(
        {"samples_per_arm": "10", "bond_bins": "20", "lr": "1e-3"}
    )
    assert experiment == {"samples_per_arm": "10"}
    assert evaluation == {"bond_bins": "20"}
    assert train == {"lr": "1e-3"}
    with pytest.raises(ConfigKeyError) as exc:
        experiment_service.split_values({"samples": "3"})
    assert exc.value.errors["unknown"] == ["samples"]
    assert "samples_per_arm" in exc.value.errors["valid"]


def test_arm_config_layers_desk_defaults_train_values_and_arm():
    arm = experiment_service.parse_arm("arc:r=3")
    config = experiment_service.arm_config(ExperimentConfig(), {"lr": "1e-3", "r": "8"}, arm)
    assert config.epoch_divisor == 15
    assert config.position_scale == 2.0
    assert config.lr == 1e-3
    assert config.r == 3.0
    assert config.anneal == AnnealKind.ARC
    plain = experiment_service.arm_config(ExperimentConfig(desk_defaults=False), {}, arm)
    assert plain.epoch_divisor == 1000
    assert plain.position_scale == 1.0


def test_samples_per_pocket():
    assert experiment_service.samples_per_pocket(200, 50) == [4] * 50
    assert experiment_service.samples_per_pocket(4, 3) == [2, 1, 1]
    assert experiment_service.samples_per_pocket(2, 3) == [1, 1, 0]
    with pytest.raises(CorpusError):
        experiment_service.samples_per_pocket(2, 0)


def test_tiny_run_writes_everything(tmp_path):
    config = ExperimentConfig(num_complexes=12, held_out_fraction=0.25, samples_per_arm=5, smoothing_window=2)
    arms = experiment_service.resolve_arms(["classic", "arc:r=2,lower_bound=0"], None)
    result = experiment_service.run(config, arms, tmp_path, TINY_TRAIN, EvalConfig(containment_threshold=0.0))

    assert list(result.summary["arm"]) == ["classic", "arc(r=2,lb=0)"]
    assert result.checks["finite_jsd"]
    assert result.checks["containment"]
    classic, arc = result.arms
    assert classic.estimated_fraction == 0.0
    assert classic.min_p_T == 1.0
    assert arc.train_config.lower_bound == 0.0
    assert sum(1 for _ in (classic.directory / "samples").glob("*/*.xyz")) == 5
    assert 0.0 <= result.consistency <= 1.0
    assert not math.isnan(classic.loss_ratio)
    for name in ("summary.csv", "comparison.csv", "experiment_config.txt"):
        assert (tmp_path / name).exists()


def test_run_needs_an_arm(tmp_path):
    with pytest.raises(ScheduleError):
        experiment_service.run(ExperimentConfig(num_complexes=4), [], tmp_path)


# desk-scale acceptance run: 500 complexes, 3000 steps per arm, 200 held-out samples per arm

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    arms = experiment_service.resolve_arms(None, ["directional"])
    return experiment_service.run(ExperimentConfig(), arms, tmp_path_factory.mktemp("desk"))


@pytest.mark.slow
def test_desk_run_halves_the_smoothed_loss_in_both_arms(desk_run):
    for arm in desk_run.arms:
        assert arm.loss_ratio < 0.5, arm.label


@pytest.mark.slow
def test_desk_run_reaches_the_estimation_regime(desk_run):
    classic, arc = desk_run.arms
    assert classic.estimated_fraction == 0.0
    assert arc.min_p_T == pytest.approx(0.5)
    assert arc.estimated_fraction > 0.05


@pytest.mark.slow
def test_desk_run_reports(desk_run):
    assert desk_run.passed, desk_run.checks
    assert desk_run.consistency < 0.05
    for arm in desk_run.arms:
        assert sum(1 for _ in (arm.directory / "samples").glob("*/*.xyz")) == 200
        assert np.all(np.isfinite(arm.report["jsd"]))
        assert arm.containment >= 0.95
    assert list(desk_run.comparison.columns) == ["metric", "class", "classic", "arc(r=2,lb=0.5)"]
