"""Reference setups with known output states, used as end-to-end checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optics import OpticalSetup, QubitState, fidelity_up_to_phase, parse_setup, postselect, run_setup
from .sensing import qfi_pure, sum_z

BELL8 = "DCBell(a,b) -> DCBell(c,d) -> DCBell(e,f) -> DCBell(g,h)"


def _ket(bits: str) -> np.ndarray:
    v = np.zeros(2 ** len(bits), dtype=complex)
    v[int(bits, 2)] = 1
    return v


def _ghz(n: int, phase: complex = 1) -> np.ndarray:
    return _ket("0" * n) + phase * _ket("1" * n)


def _with_qubit(single: np.ndarray, rest: np.ndarray, pos: int, n: int) -> np.ndarray:
    """Tensor ``single`` (one qubit) into slot ``pos`` of an ``n``-qubit product with ``rest``."""
    t = np.tensordot(single, rest, axes=0).reshape([2] * n)
    return np.moveaxis(t, 0, pos).reshape(-1)


@dataclass(frozen=True)
class GoldenCase:
    name: str
    text: str
    expected_state: np.ndarray
    expected_qfi: float

    @property
    def setup(self) -> OpticalSetup:
        return parse_setup(self.text)


def golden_cases() -> list[GoldenCase]:
    s2 = np.sqrt(2)
    c1 = ((1 - 1j) * _ket("0" * 8) + (1 + 1j) * _ket("1" * 8)) / 2
    c2 = (-1 + 1j) / s2 * np.kron(_ghz(4, 1j), _ghz(4)) / 2
    c3 = _with_qubit(np.array([1j, 1]), _ghz(7), 1, 8) / 2
    c4 = _with_qubit(np.array([(1 - 1j) / s2, (1j - 1) / s2]), _ghz(7), 6, 8) / 2
    return [
        GoldenCase("top1", BELL8 + " -> PBS(b,c) -> PBS(a,g) -> QWP(h,0.5pi) -> PBS(d,f) -> PBS(c,h)"
                   " -> R(d) -> PBS(e,f) -> HWP(a,0.5pi)", c1, 64.0),
        GoldenCase("top2", BELL8 + " -> PBS(a,g) -> R(c) -> PBS(b,c) -> PBS(a,g) -> PBS(g,f)"
                   " -> HWP(g,0.5pi) -> HWP(d,0.5pi) -> HWP(c,pi) -> R(b) -> HWP(h,pi) -> QWP(a,pi)",
                   c2, 32.0),
        GoldenCase("top3", BELL8 + " -> PBS(f,d) -> R(a) -> PBS(a,e) -> QWP(b,0.25pi) -> PBS(h,a)",
                   c3, 50.0),
        GoldenCase("train_best", BELL8 + " -> R(b) -> PBS(f,h) -> QWP(h,0.75pi) -> QWP(f,pi)"
                   " -> PBS(d,h) -> QWP(e,0.5pi) -> R(c) -> PBS(c,f) -> R(f) -> PBS(b,g)"
                   " -> QWP(g,0.75pi) -> R(c) -> HWP(h,5pi)", c4, 50.0),
    ]


GHZ4_TEXT = "DCBell(a,b) -> DCBell(c,d) -> R(b) -> PBS(b,c) -> R(c)"


def ghz4_setup() -> OpticalSetup:
    """Two Bell pairs fused into a four-photon GHZ state."""
    return parse_setup(GHZ4_TEXT)


@dataclass(frozen=True)
class GoldenResult:
    name: str
    fidelity: float
    qfi: float
    expected_qfi: float
    state: QubitState

    def ok(self, tol: float = 1e-9) -> bool:
        return self.fidelity >= 1 - tol and abs(self.qfi - self.expected_qfi) <= tol


def check_case(case: GoldenCase) -> GoldenResult:
    qs = postselect(run_setup(case.setup))
    H = sum_z(qs.n_qubits)
    return GoldenResult(case.name, fidelity_up_to_phase(qs, case.expected_state), qfi_pure(qs, H),
                        case.expected_qfi, qs)
