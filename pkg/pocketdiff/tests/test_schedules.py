import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from pocketdiff.api.dependencies.custom_exception import (
    ScheduleError,
    TimestepRangeError,
    UnknownAnnealKindError,
)
from pocketdiff.schemas.enums import AnnealKind
from pocketdiff.schemas.schedule import AnnealSpec, NoiseSchedule, parse_anneal
from pocketdiff.services.schedules import schedule_service


@pytest.mark.parametrize(
    "spec, epoch, expected",
    [
        (AnnealSpec(kind=AnnealKind.ARC, r=2.0, lower_bound=0.0), 100, math.sqrt(3.0) / 2.0),
        (AnnealSpec(kind=AnnealKind.ARC, r=2.0, lower_bound=0.0), 200, 0.0),
        (AnnealSpec(kind=AnnealKind.ARC, r=2.0, lower_bound=0.5), 200, 0.5),
        (AnnealSpec(kind=AnnealKind.ARC, r=2.0, lower_bound=0.0), 500, 0.0),
        (AnnealSpec(kind=AnnealKind.ORIGINAL, mu=12.0, lower_bound=0.0), 0, 12.0 / 13.0),
        (AnnealSpec(kind=AnnealKind.ORIGINAL, mu=12.0, lower_bound=0.0), 50, 12.0 / (12.0 + math.exp(50.0 / 12.0))),
        (AnnealSpec(kind=AnnealKind.LINEAR, slope=-0.005, lower_bound=0.0), 100, 0.5),
        (AnnealSpec(kind=AnnealKind.LINEAR, slope=-0.005, lower_bound=0.0), 400, 0.0),
        (AnnealSpec(kind=AnnealKind.LINEAR, slope=-0.005, lower_bound=0.0, p_init=0.5), 0, 0.5),
    ],
)
def test_anneal_probability_values(spec, epoch, expected):
    assert schedule_service.anneal_probability(spec, epoch) == pytest.approx(expected, abs=1e-6)


def test_original_curve_does_not_overflow():
    spec = AnnealSpec(kind=AnnealKind.ORIGINAL, mu=1.0, lower_bound=0.0)
    assert schedule_service.anneal_probability(spec, 10_000) == 0.0


@pytest.mark.parametrize("kind", list(AnnealKind))
def test_curves_are_non_increasing_and_bounded(kind):
    spec = AnnealSpec(kind=kind, lower_bound=0.2)
    values = [schedule_service.anneal_probability(spec, e) for e in range(0, 301)]
    assert all(0.2 <= v <= 1.0 for v in values)
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))


def test_disabled_curve_is_always_one():
    spec = parse_anneal("arc:r=inf")
    assert spec.disabled
    assert all(schedule_service.anneal_probability(spec, e) == 1.0 for e in (0, 10, 1000))


def test_negative_epoch():
    with pytest.raises(ScheduleError):
        schedule_service.anneal_probability(AnnealSpec(), -1)


def test_epoch_from_step():
    assert schedule_service.epoch_from_step(2500, 1000) == 2
    assert schedule_service.epoch_from_step(999, 1000) == 0
    with pytest.raises(ScheduleError):
        schedule_service.epoch_from_step(10, 0)


def test_probability_at_step_uses_epoch_divisor():
    spec = AnnealSpec(kind=AnnealKind.LINEAR, slope=-0.005, lower_bound=0.0, epoch_divisor=10)
    assert schedule_service.probability_at_step(spec, 1000) == pytest.approx(0.5)


def test_dump_curves_shape_and_values():
    specs = [parse_anneal("arc:r=2,lower_bound=0"), parse_anneal("original:mu=12,lower_bound=0")]
    frame = schedule_service.dump_curves(specs, 200)
    assert list(frame.columns) == ["epoch", specs[0].name, specs[1].name]
    assert len(frame) == 201
    assert frame[specs[0].name].iloc[0] == 1.0
    assert frame[specs[0].name].iloc[100] == pytest.approx(0.866025, abs=1e-6)
    assert frame[specs[1].name].iloc[0] == pytest.approx(0.923077, abs=1e-6)


def test_dump_curves_keeps_duplicate_specs_apart():
    spec = parse_anneal("linear")
    frame = schedule_service.dump_curves([spec, spec], 5)
    assert frame.shape == (6, 3)


def test_parse_anneal_names_and_errors():
    assert parse_anneal("arc:r=2,lower_bound=0").name == "arc(r=2,lb=0)"
    assert parse_anneal("arc:r=inf").name == "arc(r=inf,lb=0.5)"
    with pytest.raises(UnknownAnnealKindError):
        parse_anneal("cosine")
    with pytest.raises(ScheduleError):
        parse_anneal("arc:bogus=1")
    with pytest.raises(ScheduleError):
        parse_anneal("arc:r")


def test_infinite_radius_must_use_disabled():
    with pytest.raises(ScheduleError):
        AnnealSpec(r=math.inf)


def test_noise_schedule_tables():
    schedule = schedule_service.build_noise_schedule(10, 1e-3, 0.2)
    assert schedule.T == 10
    assert schedule.beta(0) == 0.0
    assert schedule.alpha_bar(0) == 1.0
    assert_allclose(schedule.alpha_bars[1:], np.cumprod(1.0 - np.linspace(1e-3, 0.2, 10)), rtol=1e-15)
    for t in range(1, 11):
        assert schedule.alpha_bar(t) == schedule.alpha_bar(t - 1) * schedule.alpha(t)


def test_noise_schedule_rejects_bad_input():
    with pytest.raises(ScheduleError):
        schedule_service.build_noise_schedule(0)
    with pytest.raises(ScheduleError):
        schedule_service.build_noise_schedule(10, 0.3, 0.1)
    with pytest.raises(ScheduleError):
        NoiseSchedule.from_betas([0.1, 1.0])


def test_timestep_out_of_range():
    schedule = NoiseSchedule.from_betas([0.1, 0.2])
    with pytest.raises(TimestepRangeError):
        schedule.check_t(0)
    with pytest.raises(TimestepRangeError):
        schedule.alpha_bar(3)
