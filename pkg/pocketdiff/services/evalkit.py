import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist, squareform
from scipy.special import rel_entr

from pocketdiff.api.dependencies.custom_exception import BinningMismatchError, EmptySetError
from pocketdiff.schemas.config import EvalConfig
from pocketdiff.schemas.evaluation import REPORT_COLUMNS, Binning, BondSpec, DetectedBond, Histogram
from pocketdiff.schemas.molecule import AtomSet, Molecule, ProteinContext
from pocketdiff.services.dataio import BOND_TABLE
from pocketdiff.utils.logger import get_logger


logger = get_logger(__name__)

MISSING_FLAG = "missing"


class EvalService:
    """Distance histograms and Jensen-Shannon comparisons between molecule sets."""

    def histogram(self, values: Sequence[float], binning: Binning) -> Histogram:
        """Counts on the shared edges; values outside [lo, hi] are dropped."""
        counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=binning.edges)
        return Histogram(edges=edges, counts=counts)

    def jsd(self, p: Histogram, q: Histogram) -> float:
        """
        Base-2 Jensen-Shannon divergence, in [0, 1].

        Raises:
            BinningMismatchError: the histograms use different edges.
            EmptySetError: either histogram has no counts.
        """
        if p.edges.shape != q.edges.shape or not np.array_equal(p.edges, q.edges):
            raise BinningMismatchError(
                "histograms must share bin edges",
                errors={"left_bins": int(p.counts.size), "right_bins": int(q.counts.size)},
            )
        if p.total == 0 or q.total == 0:
            raise EmptySetError("cannot compare an empty histogram")
        pp, qq = p.probabilities, q.probabilities
        mid = 0.5 * (pp + qq)
        value = 0.5 * (np.sum(rel_entr(pp, mid)) + np.sum(rel_entr(qq, mid))) / math.log(2.0)
        return float(min(max(value, 0.0), 1.0))

    def pairwise_distances(self, atoms: AtomSet) -> np.ndarray:
        return pdist(atoms.positions)

    def detect_bonds(self, molecule: AtomSet, table: Sequence[BondSpec] = BOND_TABLE) -> List[DetectedBond]:
        """
        Pairs i < j whose distance falls in a window for their type pair; overlapping
        windows go to the one with the nearest midpoint.
        """
        windows: Dict[tuple, List[BondSpec]] = {}
        for spec in table:
            windows.setdefault(spec.pair, []).append(spec)
        types = molecule.type_indices
        dist = squareform(pdist(molecule.positions))
        found: List[DetectedBond] = []
        m = molecule.num_atoms
        for i in range(m):
            for j in range(i + 1, m):
                pair = (min(types[i], types[j]), max(types[i], types[j]))
                d = float(dist[i, j])
                hits = [s for s in windows.get(pair, ()) if s.contains(d)]
                if hits:
                    best = min(hits, key=lambda s: abs(d - s.midpoint))
                    found.append(DetectedBond(i=i, j=j, spec=best, distance=d))
        return found

    def bond_lengths(
        self, molecules: Sequence[AtomSet], table: Sequence[BondSpec] = BOND_TABLE
    ) -> Dict[str, List[float]]:
        lengths: Dict[str, List[float]] = {spec.label: [] for spec in table}
        for molecule in molecules:
            for bond in self.detect_bonds(molecule, table):
                lengths[bond.spec.label].append(bond.distance)
        return lengths

    def _pooled_distances(self, molecules: Sequence[AtomSet], name: str) -> np.ndarray:
        if not molecules:
            raise EmptySetError(f"{name} set is empty", errors={"set": name})
        return np.concatenate([self.pairwise_distances(m) for m in molecules])

    def all_atom_row(
        self,
        generated: Sequence[AtomSet],
        reference: Sequence[AtomSet],
        binning: Binning = Binning(lo=0.0, hi=12.0, bins=100),
    ) -> Dict[str, object]:
        """
        The ``all_atom`` report row. A generated set with no distance inside the binning
        range (single atoms, or everything beyond ``hi``) reports jsd = 1 flagged ``missing``.
        """
        gen = self.histogram(self._pooled_distances(generated, "generated"), binning)
        ref = self.histogram(self._pooled_distances(reference, "reference"), binning)
        if gen.total == 0 and ref.total > 0:
            logger.warning("No generated distance falls inside [%g, %g]", binning.lo, binning.hi)
            return {"metric": "all_atom", "class": "all", "jsd": 1.0, "flag": MISSING_FLAG}
        return {"metric": "all_atom", "class": "all", "jsd": self.jsd(gen, ref), "flag": ""}

    def all_atom_distance_jsd(
        self,
        generated: Sequence[AtomSet],
        reference: Sequence[AtomSet],
        binning: Binning = Binning(lo=0.0, hi=12.0, bins=100),
    ) -> float:
        gen = self.histogram(self._pooled_distances(generated, "generated"), binning)
        ref = self.histogram(self._pooled_distances(reference, "reference"), binning)
        return self.jsd(gen, ref)

    def bond_report(
        self,
        generated: Sequence[AtomSet],
        reference: Sequence[AtomSet],
        table: Sequence[BondSpec] = BOND_TABLE,
        binning: Binning = Binning(lo=0.8, hi=2.2, bins=64),
    ) -> pd.DataFrame:
        """
        One row per bond class present in ``reference``. Classes the generated set never
        forms report jsd = 1 with flag ``missing``.
        """
        if not generated:
            raise EmptySetError("generated set is empty", errors={"set": "generated"})
        if not reference:
            raise EmptySetError("reference set is empty", errors={"set": "reference"})
        gen_lengths = self.bond_lengths(generated, table)
        ref_lengths = self.bond_lengths(reference, table)
        rows = []
        for spec in table:
            ref_hist = self.histogram(ref_lengths[spec.label], binning)
            if ref_hist.total == 0:
                continue
            gen_hist = self.histogram(gen_lengths[spec.label], binning)
            if gen_hist.total == 0:
                rows.append({"metric": "bond_length", "class": spec.label, "jsd": 1.0, "flag": MISSING_FLAG})
            else:
                rows.append({"metric": "bond_length", "class": spec.label, "jsd": self.jsd(gen_hist, ref_hist), "flag": ""})
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def evaluation_report(
        self,
        generated: Sequence[AtomSet],
        reference: Sequence[AtomSet],
        config: Optional[EvalConfig] = None,
        table: Sequence[BondSpec] = BOND_TABLE,
    ) -> pd.DataFrame:
        """``bond_report`` followed by the ``all_atom`` distance row."""
        config = config or EvalConfig()
        report = self.bond_report(
            generated, reference, table, Binning(lo=config.bond_min, hi=config.bond_max, bins=config.bond_bins)
        )
        all_atom = self.all_atom_row(
            generated, reference, Binning(lo=config.distance_min, hi=config.distance_max, bins=config.distance_bins)
        )
        row = pd.DataFrame([all_atom], columns=REPORT_COLUMNS)
        report = pd.concat([report, row], ignore_index=True) if len(report) else row
        logger.info("Evaluated %d generated vs %d reference molecules", len(generated), len(reference))
        return report

    def containment_fraction(
        self,
        molecules: Sequence[Molecule],
        pocket: ProteinContext,
        cutoff: float = 6.0,
        margin: float = 4.0,
    ) -> float:
        """Share of ligand atoms within cutoff + margin of the pocket centroid."""
        if not molecules:
            raise EmptySetError("no molecules to check")
        center = pocket.positions.mean(axis=0)
        radii = np.concatenate([np.linalg.norm(m.positions - center, axis=1) for m in molecules])
        return float(np.mean(radii <= cutoff + margin))

    def containment_check(
        self,
        samples: Sequence[Tuple[ProteinContext, Sequence[Molecule]]],
        config: Optional[EvalConfig] = None,
    ) -> Tuple[float, bool]:
        """Atom-weighted containment over several pockets and whether it reaches the threshold."""
        config = config or EvalConfig()
        inside = 0.0
        total = 0
        for pocket, molecules in samples:
            if not molecules:
                continue
            atoms = sum(m.num_atoms for m in molecules)
            fraction = self.containment_fraction(
                molecules, pocket, config.containment_cutoff, config.containment_margin
            )
            inside += fraction * atoms
            total += atoms
        if total == 0:
            raise EmptySetError("no molecules to check")
        fraction = inside / total
        return fraction, fraction >= config.containment_threshold

    def split_half_consistency(
        self,
        reference: Sequence[AtomSet],
        seed: int,
        binning: Binning = Binning(lo=0.0, hi=12.0, bins=100),
    ) -> float:
        """All-atom JSD between two seeded random halves of ``reference``."""
        if len(reference) < 2:
            raise EmptySetError("need at least two molecules to split", errors={"size": len(reference)})
        order = np.random.default_rng(seed).permutation(len(reference))
        half = len(reference) // 2
        first = [reference[i] for i in order[:half]]
        second = [reference[i] for i in order[half:]]
        return self.all_atom_distance_jsd(first, second, binning)


eval_service = EvalService()
