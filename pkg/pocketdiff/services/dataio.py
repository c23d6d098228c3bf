"""
Synthetic pocket/ligand corpus and XYZ file I/O.

Ligands are instantiated from a small library of planar fragments whose bond lengths
come from ``BOND_TABLE``; the evaluator reads the same table, so generated bond-length
windows and detected bond classes always agree. Pockets are shells of protein atoms
sampled around the placed ligand.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy.spatial.distance import pdist, squareform
from scipy.spatial.transform import Rotation

from pocketdiff.api.dependencies.custom_exception import BaseAppException, CorpusError, XYZFormatError
from pocketdiff.core.config import Config
from pocketdiff.schemas.config import CorpusSpec
from pocketdiff.schemas.enums import AtomRole, BondOrder
from pocketdiff.schemas.evaluation import BondSpec
from pocketdiff.schemas.molecule import AtomSet, Complex, Molecule, ProteinContext, one_hot
from pocketdiff.utils.logger import get_logger


logger = get_logger(__name__)

LIGAND_SYMBOLS: Tuple[str, ...] = ("C", "N", "O", "F")
POCKET_SYMBOLS: Tuple[str, ...] = ("C", "N")
POCKET_TYPE_WEIGHTS = (0.7, 0.3)
BOND_WINDOW = 0.1
MANIFEST_COLUMNS = ["complex_id", "template", "m", "n", "ligand_file", "pocket_file"]

C, N, O, F = range(4)


def _bond(a: int, b: int, order: BondOrder, length: float) -> BondSpec:
    label = f"{LIGAND_SYMBOLS[a]}{order.symbol}{LIGAND_SYMBOLS[b]}"
    return BondSpec(
        type_a=a, type_b=b, order=order, length=length,
        lo=length - BOND_WINDOW, hi=length + BOND_WINDOW, label=label,
    )


BOND_TABLE: Tuple[BondSpec, ...] = (
    _bond(C, C, BondOrder.SINGLE, 1.54),
    _bond(C, N, BondOrder.SINGLE, 1.47),
    _bond(C, O, BondOrder.SINGLE, 1.43),
    _bond(C, F, BondOrder.SINGLE, 1.35),
    _bond(C, C, BondOrder.DOUBLE, 1.34),
    _bond(C, N, BondOrder.DOUBLE, 1.28),
    _bond(C, O, BondOrder.DOUBLE, 1.22),
    _bond(C, C, BondOrder.AROMATIC, 1.40),
    _bond(C, N, BondOrder.AROMATIC, 1.34),
)
BONDS_BY_LABEL: Dict[str, BondSpec] = {b.label: b for b in BOND_TABLE}


class Template(BaseModel):
    """A planar fragment: types, reference coordinates and its bonds as (i, j, label)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str
    types: Tuple[int, ...]
    positions: np.ndarray
    bonds: Tuple[Tuple[int, int, str], ...]

    @property
    def num_atoms(self) -> int:
        return len(self.types)


class _Builder:
    """Places atoms in the z = 0 plane with 120° bond angles."""

    def __init__(self, name: str):
        self.name = name
        self.types: List[int] = []
        self.points: List[np.ndarray] = []
        self.bonds: List[Tuple[int, int, str]] = []

    def _add(self, type_: int, point: np.ndarray) -> int:
        self.types.append(type_)
        self.points.append(point)
        return len(self.types) - 1

    def chain(self, types: Sequence[int], labels: Sequence[str]) -> "_Builder":
        """Zig-zag chain; turns alternate ±60° so every bond angle is 120°."""
        heading = 0.0
        idx = self._add(types[0], np.zeros(3))
        for k, (type_, label) in enumerate(zip(types[1:], labels)):
            step = BONDS_BY_LABEL[label].length * np.array([math.cos(heading), math.sin(heading), 0.0])
            nxt = self._add(type_, self.points[idx] + step)
            self.bonds.append((idx, nxt, label))
            idx = nxt
            heading += math.radians(60.0) * (1 if k % 2 == 0 else -1)
        return self

    def ring(self, types: Sequence[int], labels: Sequence[str]) -> "_Builder":
        """Equiangular hexagon; opposite edges must be equal for it to close."""
        if len(types) != 6 or len(labels) != 6:
            raise CorpusError(f"{self.name}: rings have six atoms")
        start = len(self.types)
        point = np.zeros(3)
        for k, (type_, label) in enumerate(zip(types, labels)):
            self._add(type_, point)
            heading = math.radians(60.0 * k)
            point = point + BONDS_BY_LABEL[label].length * np.array([math.cos(heading), math.sin(heading), 0.0])
            self.bonds.append((start + k, start + (k + 1) % 6, label))
        if np.linalg.norm(point - self.points[start]) > 1e-9:
            raise CorpusError(f"{self.name}: ring does not close")
        return self

    def branch(self, at: int, type_: int, label: str) -> "_Builder":
        """Third substituent on an atom with two neighbours, 120° from both."""
        neighbours = [j if i == at else i for i, j, _ in self.bonds if at in (i, j)]
        if len(neighbours) != 2:
            raise CorpusError(f"{self.name}: atom {at} needs exactly two neighbours to branch")
        units = [(self.points[n] - self.points[at]) / np.linalg.norm(self.points[n] - self.points[at]) for n in neighbours]
        direction = -(units[0] + units[1])
        direction /= np.linalg.norm(direction)
        new = self._add(type_, self.points[at] + BONDS_BY_LABEL[label].length * direction)
        self.bonds.append((at, new, label))
        return self

    def build(self) -> Template:
        return Template(
            name=self.name,
            types=tuple(self.types),
            positions=np.array(self.points),
            bonds=tuple(self.bonds),
        )


def default_templates() -> Tuple[Template, ...]:
    return (
        _Builder("propanol").chain([C, C, C, O], ["C-C", "C-C", "C-O"]).build(),
        _Builder("acetamide").chain([C, C, N], ["C-C", "C-N"]).branch(1, O, "C=O").build(),
        _Builder("fluorobenzene").ring([C] * 6, ["C:C"] * 6).branch(0, F, "C-F").build(),
        _Builder("pyrazine").ring([C, C, N, C, C, N], ["C:C", "C:N", "C:N", "C:C", "C:N", "C:N"]).build(),
        _Builder("propenimine").chain([C, C, C, N], ["C=C", "C-C", "C=N"]).build(),
        _Builder("fluoroacetate").chain([F, C, C, O, C], ["C-F", "C-C", "C-O", "C-O"]).branch(2, O, "C=O").build(),
    )


TEMPLATES: Tuple[Template, ...] = default_templates()


class XYZRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    role: AtomRole
    provenance: str
    atoms: AtomSet


class DataIOService:
    """Synthetic corpus generation plus XYZ and corpus-directory I/O."""

    def template_violations(self, template: Template, bond_table: Sequence[BondSpec] = BOND_TABLE) -> List[str]:
        """
        Problems that would break bond recovery: edges off their target length, or
        non-bonded pairs falling inside a window for their type pair.
        """
        problems: List[str] = []
        dist = squareform(pdist(template.positions))
        bonded = set()
        for i, j, label in template.bonds:
            bonded.add((min(i, j), max(i, j)))
            if abs(dist[i, j] - BONDS_BY_LABEL[label].length) > 1e-9:
                problems.append(f"{template.name}: edge {i}-{j} is {dist[i, j]:.4f}, expected {label}")
        windows: Dict[Tuple[int, int], List[BondSpec]] = {}
        for spec in bond_table:
            windows.setdefault(spec.pair, []).append(spec)
        m = template.num_atoms
        for i in range(m):
            for j in range(i + 1, m):
                if (i, j) in bonded:
                    continue
                pair = (min(template.types[i], template.types[j]), max(template.types[i], template.types[j]))
                if any(spec.contains(dist[i, j]) for spec in windows.get(pair, [])):
                    problems.append(f"{template.name}: non-bonded pair {i}-{j} at {dist[i, j]:.4f} looks bonded")
        return problems

    def place_ligand(self, template: Template, rng: np.random.Generator, jitter: float) -> Molecule:
        rotation = Rotation.random(None, rng)
        positions = rotation.apply(template.positions) + rng.uniform(-10.0, 10.0, size=3)
        if jitter > 0:
            positions = positions + rng.normal(0.0, jitter, size=positions.shape)
        return Molecule(positions=positions, types=one_hot(np.array(template.types), len(LIGAND_SYMBOLS)))

    def build_pocket(self, ligand: Molecule, spec: CorpusSpec, rng: np.random.Generator) -> ProteinContext:
        """
        Rejection-sample protein atoms at shell_radius ± shell_width from a random ligand
        atom, keeping those whose nearest ligand atom is at least shell_radius − shell_width
        away and that sit ``pocket_spacing`` apart from each other.
        """
        n_target = int(rng.integers(spec.min_pocket_atoms, spec.max_pocket_atoms + 1))
        inner = spec.shell_radius - spec.shell_width
        accepted: List[np.ndarray] = []
        for _ in range(200 * n_target):
            if len(accepted) == n_target:
                break
            anchor = ligand.positions[rng.integers(ligand.num_atoms)]
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            radius = rng.uniform(inner, spec.shell_radius + spec.shell_width)
            point = anchor + radius * direction
            if np.min(np.linalg.norm(ligand.positions - point, axis=1)) < inner:
                continue
            if accepted and np.min(np.linalg.norm(np.array(accepted) - point, axis=1)) < spec.pocket_spacing:
                continue
            accepted.append(point)
        if len(accepted) < spec.min_pocket_atoms:
            raise CorpusError(
                f"could only place {len(accepted)} pocket atoms, need {spec.min_pocket_atoms}",
                errors={"placed": len(accepted), "target": n_target},
            )
        types = rng.choice(len(POCKET_SYMBOLS), size=len(accepted), p=POCKET_TYPE_WEIGHTS)
        return ProteinContext(positions=np.array(accepted), types=one_hot(types, len(POCKET_SYMBOLS)))

    def eligible_templates(self, spec: CorpusSpec, templates: Sequence[Template] = TEMPLATES) -> List[Template]:
        chosen = [t for t in templates if spec.min_ligand_atoms <= t.num_atoms <= spec.max_ligand_atoms]
        if not chosen:
            raise CorpusError(
                f"no template has between {spec.min_ligand_atoms} and {spec.max_ligand_atoms} atoms",
                errors={"sizes": sorted({t.num_atoms for t in templates})},
            )
        return chosen

    def generate_complex(
        self,
        spec: CorpusSpec,
        rng: np.random.Generator,
        complex_id: Optional[str] = None,
        templates: Sequence[Template] = TEMPLATES,
    ) -> Complex:
        pool = self.eligible_templates(spec, templates)
        template = pool[int(rng.integers(len(pool)))]
        ligand = self.place_ligand(template, rng, spec.jitter)
        pocket = self.build_pocket(ligand, spec, rng)
        return Complex(protein=pocket, ligand=ligand, complex_id=complex_id, template=template.name)

    def generate_corpus(self, spec: CorpusSpec, num_workers: Optional[int] = None) -> List[Complex]:
        """Complex i uses the stream ``default_rng([seed, i])``; output order is index order."""
        def _one(i: int) -> Complex:
            return self.generate_complex(spec, np.random.default_rng([spec.seed, i]), complex_id=f"c{i:05d}")

        workers = max(1, num_workers or Config.NUM_WORKERS)
        if workers == 1:
            complexes = [_one(i) for i in range(spec.num_complexes)]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                complexes = list(pool.map(_one, range(spec.num_complexes)))
        logger.info("Generated %d complexes (seed %d)", len(complexes), spec.seed)
        return complexes

    def filter_complexes(self, complexes: Sequence[Complex], max_rmsd: float = 1.0) -> List[Complex]:
        """
        Docking-RMSD filter hook. Synthetic complexes carry no docking pose, so every
        complex passes.
        """
        logger.debug("RMSD filter (max %.2f Å) kept all %d complexes", max_rmsd, len(complexes))
        return list(complexes)

    def split_corpus(
        self, complexes: Sequence[Complex], held_out_fraction: float, seed: int
    ) -> Tuple[List[Complex], List[Complex]]:
        """Seeded split into (train, held-out); held-out pockets are used for sampling."""
        if not 0.0 <= held_out_fraction < 1.0:
            raise CorpusError(f"held_out_fraction must be in [0, 1), got {held_out_fraction}")
        order = np.random.default_rng(seed).permutation(len(complexes))
        n_held = int(round(held_out_fraction * len(complexes)))
        held = [complexes[i] for i in sorted(order[:n_held])]
        train = [complexes[i] for i in sorted(order[n_held:])]
        return train, held

    # XYZ

    def symbols_for(self, role: AtomRole, K: int) -> Tuple[str, ...]:
        table = LIGAND_SYMBOLS if role == AtomRole.LIGAND else POCKET_SYMBOLS
        if K == len(table):
            return table
        return tuple(f"T{k}" for k in range(K))

    def write_xyz(
        self,
        path: Path,
        atoms: AtomSet,
        role: Optional[AtomRole] = None,
        provenance: str = "",
        symbols: Optional[Sequence[str]] = None,
    ) -> Path:
        """
        Write ``atoms`` as: count line, ``role=<r> K=<k> provenance=<text>`` comment, then
        ``TYPE x y z`` rows with six decimals.
        """
        path = Path(path)
        if role is None:
            role = AtomRole.PROTEIN if isinstance(atoms, ProteinContext) else AtomRole.LIGAND
        table = tuple(symbols) if symbols else self.symbols_for(role, atoms.num_types)
        comment = " ".join(f"role={role.value} K={atoms.num_types} provenance={provenance}".split("\n"))
        lines = [str(atoms.num_atoms), comment]
        for k, (x, y, z) in zip(atoms.type_indices, atoms.positions):
            lines.append(f"{table[k]} {x:.6f} {y:.6f} {z:.6f}")
        try:
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as e:
            raise CorpusError(f"Cannot write {path}: {e}", errors={"path": str(path)})
        return path

    def _parse_comment(self, comment: str, path: Path) -> Tuple[AtomRole, int, str]:
        head, _, provenance = comment.partition("provenance=")
        fields = dict(tok.split("=", 1) for tok in head.split() if "=" in tok)
        try:
            role = AtomRole(fields["role"])
            K = int(fields["K"])
        except (KeyError, ValueError):
            raise XYZFormatError(
                f"{path}:2: comment line must carry role=ligand|protein and K=<int>, got '{comment}'",
                errors={"path": str(path), "line": 2},
            )
        return role, K, provenance.strip()

    def read_xyz(self, path: Path) -> XYZRecord:
        """
        Parse a file written by ``write_xyz``.

        Raises:
            XYZFormatError: naming the offending line, or both numbers on a count mismatch.
        """
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise CorpusError(f"Cannot read {path}: {e}", errors={"path": str(path)})
        if len(lines) < 2:
            raise XYZFormatError(f"{path}: expected a count line and a comment line", errors={"path": str(path)})
        try:
            count = int(lines[0].strip())
        except ValueError:
            raise XYZFormatError(f"{path}:1: atom count '{lines[0].strip()}' is not an integer", errors={"path": str(path), "line": 1})
        role, K, provenance = self._parse_comment(lines[1], path)
        table = self.symbols_for(role, K)

        rows = [(n, line) for n, line in enumerate(lines[2:], start=3) if line.strip()]
        if len(rows) != count:
            raise XYZFormatError(
                f"{path}: count line says {count} atoms but the file has {len(rows)} rows",
                errors={"path": str(path), "declared": count, "found": len(rows)},
            )
        types: List[int] = []
        positions: List[List[float]] = []
        for lineno, line in rows:
            parts = line.split()
            if len(parts) != 4 or parts[0] not in table:
                raise XYZFormatError(f"{path}:{lineno}: expected 'TYPE x y z', got '{line.strip()}'", errors={"path": str(path), "line": lineno})
            try:
                positions.append([float(v) for v in parts[1:]])
            except ValueError:
                raise XYZFormatError(f"{path}:{lineno}: non-numeric coordinate in '{line.strip()}'", errors={"path": str(path), "line": lineno})
            types.append(table.index(parts[0]))

        cls = Molecule if role == AtomRole.LIGAND else ProteinContext
        try:
            atoms = cls(positions=np.array(positions), types=one_hot(np.array(types), K))
        except (ValueError, IndexError) as e:
            raise XYZFormatError(f"{path}: {e}", errors={"path": str(path)})
        except BaseAppException as e:
            raise XYZFormatError(f"{path}: {e.message}", errors={"path": str(path)})
        return XYZRecord(role=role, provenance=provenance, atoms=atoms)

    # corpus directories

    def write_corpus(self, complexes: Sequence[Complex], out_dir: Path) -> pd.DataFrame:
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise CorpusError(f"Cannot create {out_dir}: {e}", errors={"path": str(out_dir)})
        rows = []
        for i, cplx in enumerate(complexes):
            cid = cplx.complex_id or f"c{i:05d}"
            lig_file, pocket_file = f"{cid}_ligand.xyz", f"{cid}_pocket.xyz"
            self.write_xyz(out_dir / lig_file, cplx.ligand, AtomRole.LIGAND, provenance=f"template={cplx.template}")
            self.write_xyz(out_dir / pocket_file, cplx.protein, AtomRole.PROTEIN, provenance=f"pocket of {cid}")
            rows.append({
                "complex_id": cid,
                "template": cplx.template,
                "m": cplx.ligand.num_atoms,
                "n": cplx.protein.num_atoms,
                "ligand_file": lig_file,
                "pocket_file": pocket_file,
            })
        manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
        manifest.to_csv(out_dir / "manifest.csv", index=False)
        return manifest

    def load_corpus(self, directory: Path) -> List[Complex]:
        directory = Path(directory)
        manifest_path = directory / "manifest.csv"
        if not manifest_path.is_file():
            raise CorpusError(f"{manifest_path} not found", errors={"path": str(manifest_path)})
        manifest = pd.read_csv(manifest_path, dtype={"complex_id": str, "template": str})
        complexes = []
        for row in manifest.itertuples(index=False):
            ligand = self.read_xyz(directory / row.ligand_file).atoms
            pocket = self.read_xyz(directory / row.pocket_file).atoms
            if not isinstance(ligand, Molecule) or not isinstance(pocket, ProteinContext):
                raise CorpusError(f"{row.complex_id}: ligand/pocket roles are swapped", errors={"complex_id": row.complex_id})
            complexes.append(Complex(protein=pocket, ligand=ligand, complex_id=row.complex_id, template=row.template if isinstance(row.template, str) else None))
        return complexes

    def load_ligands(self, directory: Path) -> List[Molecule]:
        """Every ligand-role XYZ file in ``directory``, in file-name order."""
        directory = Path(directory)
        if not directory.is_dir():
            raise CorpusError(f"{directory} is not a directory", errors={"path": str(directory)})
        molecules = []
        for path in sorted(directory.glob("*.xyz")):
            record = self.read_xyz(path)
            if record.role == AtomRole.LIGAND:
                molecules.append(record.atoms)
        return molecules

    def load_pocket(self, path: Union[str, Path]) -> ProteinContext:
        record = self.read_xyz(Path(path))
        if record.role != AtomRole.PROTEIN:
            raise CorpusError(f"{path} holds a {record.role.value}, expected a protein pocket", errors={"path": str(path)})
        return record.atoms


dataio_service = DataIOService()
