"""Surrogate-driven candidate ranking, oracle validation and pruning."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dataset import LabeledSetup, oracle_qfi
from .graph import encode_setup
from .optics import OpticalSetup, format_setup
from .sensing import Hamiltonian
from .surrogate import SurrogateModel, predict

QFI_TOL = 1e-9


@dataclass(frozen=True)
class Candidate:
    id: int
    setup: OpticalSetup
    predicted: float
    oracle: float | None = None


@dataclass
class RankedCandidates:
    """Top-K setups, sorted by prediction (descending) then id (ascending)."""

    candidates: list[Candidate]
    k: int
    pool_size: int = 0
    pool_best: float | None = None      # max oracle label in a fully labeled pool
    duplicates: int = 0

    def __post_init__(self):
        keys = [(-c.predicted, c.id) for c in self.candidates]
        if keys != sorted(keys):
            raise ValueError("candidates must be sorted by prediction, then id")

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    @property
    def ids(self) -> list[int]:
        return [c.id for c in self.candidates]

    @property
    def validated(self) -> bool:
        return all(c.oracle is not None for c in self.candidates)

    @property
    def best(self) -> Candidate | None:
        """Validated candidate with the largest oracle QFI (earliest rank wins ties)."""
        if not self.validated or not self.candidates:
            return None
        return max(self.candidates, key=lambda c: (c.oracle, -self.candidates.index(c)))

    @property
    def regret(self) -> float | None:
        if self.pool_best is None or self.best is None:
            return None
        return self.pool_best - self.best.oracle

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["rank", "id", "predicted", "oracle", "setup"])
        for r, c in enumerate(self.candidates, 1):
            w.writerow([r, c.id, repr(c.predicted), "" if c.oracle is None else repr(c.oracle),
                        format_setup(c.setup)])
        return out.getvalue()


def top_k(ids: Sequence[int], scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` best scores; ties go to the smaller id."""
    ids = np.asarray(ids)
    order = np.lexsort((ids, -np.asarray(scores, dtype=float)))
    return order[:k]


def rank_candidates(model: SurrogateModel, setups: Sequence[LabeledSetup | OpticalSetup],
                    k: int, batch_size: int = 256) -> RankedCandidates:
    """Score every setup with the eval-mode surrogate and keep the top ``k``.

    Plain setups get their position as id.  Predictions are reported in
    QFI units (the model's scaled output times ``N**2``).
    """
    if not 0 < k <= len(setups):
        raise ValueError(f"k={k} must lie in [1, {len(setups)}]")
    records = [s if isinstance(s, LabeledSetup) else LabeledSetup(i, s, None, None, None)
               for i, s in enumerate(setups)]
    n = records[0].setup.n_photons
    pred, _ = predict(model, [encode_setup(r.setup) for r in records], batch_size)
    pred = pred * n ** 2
    ids = [r.id for r in records]
    picked = top_k(ids, pred, k)
    cands = [Candidate(records[i].id, records[i].setup, float(pred[i])) for i in picked]
    pool_best = None
    if all(r.qfi is not None for r in records):
        pool_best = max(r.qfi for r in records)
    keys = {format_setup(r.setup) for r in records}
    return RankedCandidates(cands, k, len(records), pool_best, len(records) - len(keys))


def validate(ranked: RankedCandidates, H: Hamiltonian) -> RankedCandidates:
    """Attach oracle QFIs; invalid setups keep their slot with QFI 0."""
    cands = [c if c.oracle is not None else replace(c, oracle=oracle_qfi(c.setup, H)[0])
             for c in ranked.candidates]
    return replace(ranked, candidates=cands)


def prune_setup(setup: OpticalSetup, H: Hamiltonian, trials: int | None = None,
                rng: np.random.Generator | None = None) -> OpticalSetup:
    """Randomly drop sequence devices while the oracle QFI stays unchanged.

    ``trials`` defaults to three times the sequence length.
    """
    trials = 3 * len(setup.sequence) if trials is None else trials
    if trials < 1 and setup.sequence:
        raise ValueError("trials must be >= 1")
    rng = rng or np.random.default_rng(0)
    target = oracle_qfi(setup, H)[0]
    current = setup
    for _ in range(trials):
        if not current.sequence:
            break
        i = int(rng.integers(len(current.sequence)))
        trial = current.without(i)
        if abs(oracle_qfi(trial, H)[0] - target) <= QFI_TOL:
            current = trial
    return current
