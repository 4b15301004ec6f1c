"""Phase encoding, quantum Fisher information and response inference.

Convention: the channel applies ``exp(-i theta H / 2)``, so the generator is
``G = H/2`` and the pure-state QFI ``4 Var(G)`` equals ``Var(H)``.  With
``H = sum_i Z_i`` a GHZ probe on N qubits reaches ``N**2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .optics import QubitState

_PAULIS = "IXYZ"


# ---------------------------------------------------------------- operators

@dataclass(frozen=True)
class PauliString:
    word: str

    def __post_init__(self):
        if not self.word or set(self.word) - set(_PAULIS):
            raise ValueError(f"bad Pauli word {self.word!r}")

    @property
    def n_qubits(self) -> int:
        return len(self.word)

    def _action(self):
        n = len(self.word)
        idx = np.arange(2 ** n)
        flip = 0
        phase = np.ones(2 ** n, dtype=complex)
        for k, p in enumerate(self.word):
            bit = (idx >> (n - 1 - k)) & 1
            if p in "XY":
                flip |= 1 << (n - 1 - k)
            if p in "YZ":
                phase = phase * np.where(bit, -1.0, 1.0)
            if p == "Y":
                phase = phase * 1j
        return idx ^ flip, phase

    def apply(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec)
        if vec.shape[0] != 2 ** self.n_qubits:
            raise ValueError(f"dimension mismatch: {vec.shape[0]} vs 2^{self.n_qubits}")
        target, phase = self._action()
        out = np.zeros_like(vec, dtype=complex)
        out[target] = phase * vec
        return out

    def matrix(self) -> np.ndarray:
        return self.apply(np.eye(2 ** self.n_qubits, dtype=complex))

    def commutes(self, other: "PauliString") -> bool:
        anti = sum(a != "I" and b != "I" and a != b for a, b in zip(self.word, other.word))
        return anti % 2 == 0


@dataclass(frozen=True)
class Hamiltonian:
    """Sum of mutually commuting Pauli strings (each squares to identity)."""

    terms: tuple[PauliString, ...]
    name: str = "custom"

    def __post_init__(self):
        terms = tuple(t if isinstance(t, PauliString) else PauliString(t) for t in self.terms)
        object.__setattr__(self, "terms", terms)
        if not terms:
            raise ValueError("empty Hamiltonian")
        if len({t.n_qubits for t in terms}) != 1:
            raise ValueError("terms act on different qubit counts")
        for i, a in enumerate(terms):
            for b in terms[i + 1:]:
                if not a.commutes(b):
                    raise ValueError(f"terms {a.word} and {b.word} do not commute")

    @property
    def n_qubits(self) -> int:
        return self.terms[0].n_qubits

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return sum(t.apply(vec) for t in self.terms)

    def matrix(self) -> np.ndarray:
        return sum(t.matrix() for t in self.terms)

    def degree(self) -> int:
        """Largest frequency in the response, i.e. half the spectral span."""
        ev = np.linalg.eigvalsh(self.matrix())
        return max(1, math.ceil((ev[-1] - ev[0]) / 2 - 1e-9))


def _single(n: int, k: int, p: str) -> str:
    return "I" * k + p + "I" * (n - k - 1)


def sum_z(n: int) -> Hamiltonian:
    return Hamiltonian(tuple(PauliString(_single(n, k, "Z")) for k in range(n)), "sumZ")


def sum_x(n: int) -> Hamiltonian:
    return Hamiltonian(tuple(PauliString(_single(n, k, "X")) for k in range(n)), "sumX")


def xx_pairs(n: int) -> Hamiltonian:
    terms = []
    for i in range(n):
        for j in range(i + 1, n):
            w = ["I"] * n
            w[i] = w[j] = "X"
            terms.append(PauliString("".join(w)))
    return Hamiltonian(tuple(terms), "xxPairs")


HAMILTONIANS: dict[str, Callable[[int], Hamiltonian]] = {
    "sumZ": sum_z, "sumX": sum_x, "xxPairs": xx_pairs,
}
OBSERVABLES = {"prodX": "X", "prodY": "Y", "prodZ": "Z"}


def hamiltonian(tag: str, n: int) -> Hamiltonian:
    try:
        return HAMILTONIANS[tag](n)
    except KeyError:
        raise ValueError(f"unknown Hamiltonian {tag!r}; choose from {sorted(HAMILTONIANS)}") from None


def observable(tag: str, n: int) -> PauliString:
    if tag in OBSERVABLES:
        return PauliString(OBSERVABLES[tag] * n)
    return PauliString(tag)


def _vec(state) -> np.ndarray:
    return np.asarray(getattr(state, "amplitudes", state), dtype=complex)


# ---------------------------------------------------------------- dynamics

def evolve(state, H: Hamiltonian, theta: float) -> np.ndarray:
    """Apply exp(-i theta H / 2) as a product of commuting per-term rotations."""
    v = _vec(state)
    if v.shape[0] != 2 ** H.n_qubits:
        raise ValueError(f"dimension mismatch: state {v.shape[0]}, H on {H.n_qubits} qubits")
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    for t in H.terms:
        v = c * v - 1j * s * t.apply(v)
    return v


def qfi_pure(state, H: Hamiltonian) -> float:
    v = _vec(state)
    hv = H.apply(v)
    mean = np.vdot(v, hv).real
    return max(0.0, float(np.vdot(hv, hv).real - mean ** 2))


def qfi_mixed(rho: np.ndarray, H: Hamiltonian, tol: float = 1e-9) -> float:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2 ** H.n_qubits,) * 2:
        raise ValueError(f"rho shape {rho.shape} does not match H on {H.n_qubits} qubits")
    if np.abs(rho - rho.conj().T).max() > tol:
        raise ValueError("rho is not Hermitian")
    if abs(np.trace(rho).real - 1) > tol:
        raise ValueError("rho does not have unit trace")
    b, phi = np.linalg.eigh(rho)
    if b[0] < -tol:
        raise ValueError("rho is not positive semidefinite")
    b = np.clip(b, 0.0, None)
    g = phi.conj().T @ (H.matrix() / 2) @ phi
    bi, bj = b[:, None], b[None, :]
    denom = bi + bj
    ok = denom >= 1e-12
    np.fill_diagonal(ok, False)
    terms = np.where(ok, (bi - bj) ** 2 / np.where(ok, denom, 1.0) * np.abs(g) ** 2, 0.0)
    return max(0.0, float(2 * terms.sum()))


def response_exact(state, H: Hamiltonian, O: PauliString, theta: float) -> float:
    v = evolve(state, H, theta)
    return float(np.vdot(v, O.apply(v)).real)


def sample_response(state, H: Hamiltonian, O: PauliString, theta: float, shots: int,
                    rng: np.random.Generator | int | None = None) -> float:
    """Mean of ``shots`` +-1 outcomes with P(+1) = (1 + R(theta)) / 2."""
    return _sample(response_exact(state, H, O, theta), shots, rng)


def _sample(r: float, shots: int, rng) -> float:
    if shots < 1:
        raise ValueError("shots must be >= 1")
    rng = np.random.default_rng(rng)
    p = min(1.0, max(0.0, (1 + r) / 2))
    k = rng.binomial(shots, p)
    return (2 * k - shots) / shots


# ---------------------------------------------------------------- interpolation

def nodes(n: int) -> np.ndarray:
    return 2 * np.pi * np.arange(2 * n + 1) / (2 * n + 1)


@dataclass(frozen=True)
class TrigPoly:
    """c + sum_s a_s cos(s t) + b_s sin(s t), s = 1..n."""

    a: np.ndarray
    b: np.ndarray
    c: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).ravel()
        b = np.asarray(self.b, dtype=float).ravel()
        if a.shape != b.shape:
            raise ValueError("a and b must have equal length")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))

    @property
    def degree(self) -> int:
        return self.a.size

    def _basis(self, theta):
        t = np.asarray(theta, dtype=float)
        s = np.arange(1, self.degree + 1)
        st = t[..., None] * s
        return s, np.cos(st), np.sin(st)

    def __call__(self, theta):
        _, cs, sn = self._basis(theta)
        return cs @ self.a + sn @ self.b + self.c

    def derivative(self, theta):
        s, cs, sn = self._basis(theta)
        return (-sn * s) @ self.a + (cs * s) @ self.b

    def to_dict(self) -> dict:
        return {"degree": self.degree, "a": self.a.tolist(), "b": self.b.tolist(), "c": self.c}


def fit_trig(readings: Sequence[float], n: int) -> TrigPoly:
    """Interpolate readings taken at ``nodes(n)`` by discrete orthogonality."""
    r = np.asarray(readings, dtype=float)
    if r.shape != (2 * n + 1,):
        raise ValueError(f"need {2 * n + 1} readings for degree {n}, got {r.size}")
    t = nodes(n)
    s = np.arange(1, n + 1)[:, None]
    scale = 2.0 / (2 * n + 1)
    return TrigPoly(scale * np.cos(s * t) @ r, scale * np.sin(s * t) @ r, r.mean())


_INV_PHI = (math.sqrt(5) - 1) / 2


def _golden(f, lo: float, hi: float, tol: float = 1e-12, max_iter: int = 200) -> float:
    x1 = hi - _INV_PHI * (hi - lo)
    x2 = lo + _INV_PHI * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if hi - lo < tol:
            break
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _INV_PHI * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _INV_PHI * (hi - lo)
            f2 = f(x2)
    return (lo + hi) / 2


def infer_theta(poly: TrigPoly, reading: float, grid: int = 2 ** 14,
                atol: float = 1e-6) -> list[float]:
    """All near-global minimizers of |poly(theta) - reading| on [0, 2 pi)."""
    h = 2 * np.pi / grid
    t = np.arange(grid) * h
    r = np.abs(poly(t) - reading)
    left, right = np.roll(r, 1), np.roll(r, -1)
    cand = np.flatnonzero((r < left) & (r <= right))
    if cand.size == 0:
        cand = np.array([int(np.argmin(r))])
    f = lambda x: abs(float(poly(x)) - reading)
    refined = []
    for i in cand:
        x = _golden(f, t[i] - h, t[i] + h)
        x = float(np.mod(x, 2 * np.pi))
        if x >= 2 * np.pi - 1e-12:
            x = 0.0
        refined.append((f(x), x))
    best = min(v for v, _ in refined)
    keep = sorted((v, x) for v, x in refined if v <= best + atol)
    out: list[tuple[float, float]] = []
    for v, x in keep:
        if all(min(abs(x - y), 2 * np.pi - abs(x - y)) > 2 * h for _, y in out):
            out.append((v, x))
    return [x for _, x in out]


def sensitivity(poly: TrigPoly, theta, slope_floor: float = 1e-9):
    """(1 - R^2) / R'^2 for a +-1-valued observable; inf where the slope vanishes."""
    r = poly(theta)
    d = np.abs(poly.derivative(theta))
    num = np.clip(1 - r ** 2, 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(d > slope_floor, num / np.where(d > slope_floor, d, 1.0) ** 2, np.inf)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------- black box

class BlackBoxChannel:
    """Probe + hidden channel + measurement, reachable only through ``query``.

    ``query(theta)`` returns the exact response (infinite shots); with
    ``shots`` it returns a shot-averaged reading drawn from ``rng``.
    """

    __slots__ = ("_query",)

    def __init__(self, query: Callable[[float, int | None, np.random.Generator | None], float]):
        self._query = query

    def query(self, theta: float, shots: int | None = None,
              rng: np.random.Generator | None = None) -> float:
        return float(self._query(theta, shots, rng))


def simulated_channel(probe, H: Hamiltonian, O: PauliString) -> BlackBoxChannel:
    vec = _vec(probe).copy()

    def query(theta, shots, rng):
        r = response_exact(vec, H, O, theta)
        return r if shots is None else _sample(r, shots, rng)

    return BlackBoxChannel(query)


@dataclass
class SensingReport:
    n_photons: int
    degree: int
    shots: int | None
    seed: int | None
    nodes: np.ndarray
    readings: np.ndarray
    poly: TrigPoly
    theta_grid: np.ndarray
    response_fit: np.ndarray
    sensitivity: np.ndarray
    slope_floor: float
    response_exact: np.ndarray | None = None
    eps: float | None = None
    mean_abs_error: float | None = None

    @property
    def sql(self) -> float:
        return 1.0 / self.n_photons

    @property
    def hl(self) -> float:
        return 1.0 / self.n_photons ** 2

    @property
    def min_sensitivity(self) -> float:
        return float(np.min(self.sensitivity))

    @property
    def all_infinite(self) -> bool:
        return bool(np.all(np.isinf(self.sensitivity)))

    def to_dict(self) -> dict:
        finite = lambda x: None if x is None or not np.isfinite(x) else float(x)
        d = {
            "n_photons": self.n_photons, "degree": self.degree,
            "shots": self.shots, "seed": self.seed,
            "nodes": self.nodes.tolist(), "readings": self.readings.tolist(),
            "poly": self.poly.to_dict(),
            "theta_grid": self.theta_grid.tolist(),
            "sensitivity": [finite(x) for x in self.sensitivity],
            "min_sensitivity": finite(self.min_sensitivity),
            "all_infinite": self.all_infinite,
            "slope_floor": self.slope_floor,
            "sql": self.sql, "hl": self.hl,
            "eps": self.eps, "mean_abs_error": self.mean_abs_error,
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        lines = ["theta,sensitivity"]
        lines += [f"{t!r},{s!r}" for t, s in zip(self.theta_grid, self.sensitivity)]
        return "\n".join(lines) + "\n"


def run_sensing(channel: BlackBoxChannel, n_photons: int, degree: int | None = None,
                shots: int | None = None, seed: int | None = None, grid_points: int = 512,
                slope_floor: float = 1e-9, validate: bool = True) -> SensingReport:
    """Query the channel at the uniform nodes, interpolate, and assess sensitivity.

    With ``validate`` the exact response is pulled from the channel's
    infinite-shot mode to fill in the error fields.
    """
    n = degree or n_photons
    t = nodes(n)
    streams = np.random.SeedSequence(seed).spawn(t.size) if shots is not None else [None] * t.size
    readings = np.array([
        channel.query(th, shots, None if ss is None else np.random.default_rng(ss))
        for th, ss in zip(t, streams)
    ])
    poly = fit_trig(readings, n)
    grid = 2 * np.pi * np.arange(grid_points) / grid_points
    report = SensingReport(
        n_photons=n_photons, degree=n, shots=shots, seed=seed, nodes=t, readings=readings,
        poly=poly, theta_grid=grid, response_fit=poly(grid),
        sensitivity=np.asarray(sensitivity(poly, grid, slope_floor)), slope_floor=slope_floor,
    )
    if validate:
        exact_nodes = np.array([channel.query(th) for th in t])
        exact_grid = np.array([channel.query(th) for th in grid])
        report.response_exact = exact_grid
        report.eps = float(np.max(np.abs(exact_nodes - readings)))
        report.mean_abs_error = float(np.mean(np.abs(report.response_fit - exact_grid)))
    return report
