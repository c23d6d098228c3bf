import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.spatial.transform import Rotation

from pocketdiff.api.dependencies.custom_exception import EmptyStatsError, SamplingDivergedError
from pocketdiff.schemas.molecule import Prediction, ProteinContext, one_hot
from pocketdiff.schemas.training import AtomCountStats
from pocketdiff.services import dataio
from pocketdiff.services.dataio import dataio_service
from pocketdiff.services.sampler import MANIFEST_COLUMNS, sampler_service
from pocketdiff.services.schedules import schedule_service


class RotatedRng:
    """Forwards draws to a generator, rotating every 3-vector normal draw by R."""

    def __init__(self, rng, R):
        self.rng = rng
        self.R = R

    def normal(self, size):
        return self.rng.normal(size=size) @ self.R.T

    def random(self, *args, **kwargs):
        return self.rng.random(*args, **kwargs)


def oracle(template_x, template_v):
    def _predict(y_xt, y_vt, t, protein):
        return Prediction(x0_hat=template_x, v0_hat=template_v)
    return _predict


@pytest.fixture
def pocket(small_complex):
    return small_complex.protein


def test_choose_atom_count():
    rng = np.random.default_rng(0)
    assert sampler_service.choose_atom_count(AtomCountStats(counts={8: 10}), rng) == 8
    assert sampler_service.choose_atom_count(None, rng, fixed_m=5) == 5
    stats = AtomCountStats.from_sizes([6] * 50 + [10] * 50)
    draws = np.array([sampler_service.choose_atom_count(stats, rng) for _ in range(10_000)])
    assert set(draws) == {6, 10}
    assert abs(np.mean(draws == 6) - 0.5) < 0.02


def test_choose_atom_count_without_stats():
    with pytest.raises(EmptyStatsError):
        sampler_service.choose_atom_count(None, np.random.default_rng(0))
    with pytest.raises(EmptyStatsError):
        sampler_service.choose_atom_count(AtomCountStats(counts={}), np.random.default_rng(0))


def test_single_step_emits_prediction(pocket, rng):
    schedule = schedule_service.build_noise_schedule(1)
    template_x = rng.normal(size=(4, 3))
    template_v = np.array([[0.1, 0.7, 0.1, 0.1]] * 4)
    mol = sampler_service.sample_molecule(pocket, 4, None, schedule, rng, K=4, predict_fn=oracle(template_x, template_v))
    assert_array_equal(mol.positions, template_x + pocket.positions.mean(axis=0))
    assert_array_equal(mol.types, one_hot([1, 1, 1, 1], 4))


def test_oracle_denoiser_recovers_template(pocket):
    schedule = schedule_service.build_noise_schedule(50)
    ligand = dataio_service.place_ligand(dataio.TEMPLATES[2], np.random.default_rng(1), 0.0)
    centered_x = ligand.positions - pocket.positions.mean(axis=0)
    predict_fn = oracle(centered_x, ligand.types)
    for seed in range(20):
        mol = sampler_service.sample_molecule(pocket, ligand.num_atoms, None, schedule, np.random.default_rng(seed), K=4, predict_fn=predict_fn)
        rmsd = np.sqrt(np.mean(np.sum((mol.positions - ligand.positions) ** 2, axis=1)))
        assert rmsd < 0.05
        assert_array_equal(mol.types, ligand.types)


def test_sampling_is_rotation_equivariant(tiny_params, pocket):
    schedule = schedule_service.build_noise_schedule(5)
    R = Rotation.from_euler("zyx", [1.2, 0.4, -0.7]).as_matrix()
    rotated_pocket = ProteinContext(positions=pocket.positions @ R.T, types=pocket.types)
    base = sampler_service.sample_molecule(pocket, 6, tiny_params, schedule, np.random.default_rng(3))
    turned = sampler_service.sample_molecule(rotated_pocket, 6, tiny_params, schedule, RotatedRng(np.random.default_rng(3), R))
    assert np.max(np.abs(turned.positions - base.positions @ R.T)) < 1e-6
    assert_array_equal(turned.types, base.types)


def test_same_seed_same_sample(tiny_params, pocket):
    schedule = schedule_service.build_noise_schedule(5)
    a = sampler_service.sample_molecule(pocket, 7, tiny_params, schedule, np.random.default_rng(11))
    b = sampler_service.sample_molecule(pocket, 7, tiny_params, schedule, np.random.default_rng(11))
    assert_array_equal(a.positions, b.positions)
    assert_array_equal(a.types, b.types)


def test_divergence_is_reported(pocket, rng):
    schedule = schedule_service.build_noise_schedule(3)
    blown = oracle(np.full((2, 3), np.inf), np.full((2, 4), 0.25))
    with pytest.raises(SamplingDivergedError) as exc:
        sampler_service.sample_molecule(pocket, 2, None, schedule, rng, K=4, predict_fn=blown)
    assert exc.value.errors["t"] == 3


def test_sample_many_writes_files(tmp_path, tiny_params, pocket):
    schedule = schedule_service.build_noise_schedule(3)
    manifest = sampler_service.sample_many(pocket, 3, tiny_params, schedule, seed=4, out_dir=tmp_path, fixed_m=8, pocket_id="p1", num_workers=2)
    assert list(manifest.columns) == MANIFEST_COLUMNS
    assert list(manifest["m"]) == [8, 8, 8]
    assert sorted(p.name for p in tmp_path.glob("*.xyz")) == ["sample_00000.xyz", "sample_00001.xyz", "sample_00002.xyz"]
    record = dataio_service.read_xyz(tmp_path / "sample_00001.xyz")
    assert record.atoms.num_atoms == 8
    assert "pocket=p1" in record.provenance


def test_sample_many_is_reproducible(tmp_path, tiny_params, pocket):
    schedule = schedule_service.build_noise_schedule(3)
    stats = AtomCountStats.from_sizes([4, 5, 6])
    sampler_service.sample_many(pocket, 2, tiny_params, schedule, seed=9, out_dir=tmp_path / "a", stats=stats, num_workers=1)
    sampler_service.sample_many(pocket, 2, tiny_params, schedule, seed=9, out_dir=tmp_path / "b", stats=stats, num_workers=2)
    for name in ("sample_00000.xyz", "sample_00001.xyz", "manifest.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_zero_samples(tmp_path, tiny_params, pocket):
    schedule = schedule_service.build_noise_schedule(3)
    manifest = sampler_service.sample_many(pocket, 0, tiny_params, schedule, seed=1, out_dir=tmp_path, fixed_m=4)
    assert len(manifest) == 0
    assert list(pd.read_csv(tmp_path / "manifest.csv").columns) == MANIFEST_COLUMNS


def test_position_scale_maps_back_to_angstrom(pocket):
    schedule = schedule_service.build_noise_schedule(1)
    ligand = dataio_service.place_ligand(dataio.TEMPLATES[0], np.random.default_rng(2), 0.0)
    center = pocket.positions.mean(axis=0)
    seen = []

    def predict(y_xt, y_vt, t, protein):
        seen.append(protein.positions)
        return Prediction(x0_hat=(ligand.positions - center) / 2.0, v0_hat=ligand.types)

    mol = sampler_service.sample_molecule(
        pocket, ligand.num_atoms, None, schedule, np.random.default_rng(0), K=4, predict_fn=predict, position_scale=2.0
    )
    assert_allclose(mol.positions, ligand.positions, atol=1e-12)
    assert_allclose(seen[0], (pocket.positions - center) / 2.0, atol=1e-12)
