"""Linear-optical setup simulation over polarization-encoded photons.

A state is a formal polynomial in creation operators: each key is an
occupancy vector over ``2N`` modes (mode ``2*path + pol``, with ``pol = 0``
for V / logical 0 and ``pol = 1`` for H / logical 1) and each value is the
complex coefficient of that monomial.  Devices act as linear substitutions
on the creation operators, so bunching (HOM interference) falls out of the
algebra with no extra bookkeeping.

Coefficients are *not* Fock amplitudes when a mode is multiply occupied:
``c * (a^dag)^n |0>`` has Fock amplitude ``c * sqrt(n!)``.  :meth:`FockState.norm2`
takes this into account so that unitary devices preserve it.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Mapping

import numpy as np

V, H = 0, 1
PRUNE_TOL = 1e-12
DC_KINDS = ("DC00", "DC11", "DCBell")
SEQ_KINDS = ("BS", "PBS", "HWP", "QWP", "R")
TWO_PATH = {"DC00", "DC11", "DCBell", "BS", "PBS"}
ANGLED = {"HWP", "QWP"}
ALL_KINDS = DC_KINDS + SEQ_KINDS


class SetupError(ValueError):
    """Malformed device, setup or setup text."""


def path_name(p: int) -> str:
    return chr(ord("a") + p)


def path_index(name: str) -> int:
    name = name.strip()
    if len(name) != 1 or not name.isalpha() or not name.islower():
        raise SetupError(f"bad path name {name!r}")
    return ord(name) - ord("a")


@dataclass(frozen=True)
class Mode:
    path: int
    pol: int

    @property
    def index(self) -> int:
        return 2 * self.path + self.pol


@dataclass(frozen=True)
class Device:
    """One toolbox element.

    ``angle`` is stored exactly, in units of pi, reduced modulo 1 (both wave
    plates depend only on ``2*theta``, so the reduction is lossless).
    """

    kind: str
    paths: tuple[int, ...]
    angle: Fraction | None = None

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise SetupError(f"unknown device kind {self.kind!r}")
        paths = tuple(int(p) for p in self.paths)
        object.__setattr__(self, "paths", paths)
        want = 2 if self.kind in TWO_PATH else 1
        if len(paths) != want:
            raise SetupError(f"{self.kind} takes {want} path(s), got {len(paths)}")
        if want == 2 and paths[0] == paths[1]:
            raise SetupError(f"{self.kind} needs two distinct paths")
        if any(p < 0 for p in paths):
            raise SetupError(f"negative path index in {self.kind}")
        if self.kind in ANGLED:
            if self.angle is None:
                raise SetupError(f"{self.kind} needs an angle")
            object.__setattr__(self, "angle", Fraction(self.angle) % 1)
        elif self.angle is not None:
            raise SetupError(f"{self.kind} takes no angle")

    @property
    def radians(self) -> float | None:
        return None if self.angle is None else float(self.angle) * math.pi

    @property
    def is_source(self) -> bool:
        return self.kind in DC_KINDS

    def on_grid(self, q: int) -> bool:
        return self.angle is None or (self.angle * q).denominator == 1

    def grid_index(self, q: int) -> int:
        if not self.on_grid(q):
            raise SetupError(f"angle {self.angle}pi is off the pi/{q} grid")
        return int(self.angle * q)

    def __str__(self) -> str:
        return format_device(self)


@dataclass(frozen=True)
class OpticalSetup:
    """Down-conversion sources followed by an ordered device sequence."""

    n_photons: int
    sources: tuple[Device, ...]
    sequence: tuple[Device, ...] = ()
    q: int = 4
    max_length: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "sequence", tuple(self.sequence))
        n = self.n_photons
        if n <= 0 or n % 2:
            raise SetupError(f"photon number must be positive and even, got {n}")
        covered = sorted(p for d in self.sources for p in d.paths)
        if any(not d.is_source for d in self.sources) or covered != list(range(n)):
            raise SetupError("sources must be DC devices partitioning the paths")
        for d in self.sequence:
            if d.is_source:
                raise SetupError("DC devices belong in sources, not in the sequence")
            if max(d.paths) >= n:
                raise SetupError(f"path {path_name(max(d.paths))} out of range for {n} photons")
            if not d.on_grid(self.q):
                raise SetupError(f"{format_device(d)} is off the pi/{self.q} grid")
        if self.max_length is not None and len(self.sequence) > self.max_length:
            raise SetupError(f"sequence length {len(self.sequence)} exceeds {self.max_length}")

    @property
    def devices(self) -> tuple[Device, ...]:
        return self.sources + self.sequence

    def without(self, index: int) -> "OpticalSetup":
        seq = self.sequence[:index] + self.sequence[index + 1:]
        return OpticalSetup(self.n_photons, self.sources, seq, self.q, self.max_length)

    def __str__(self) -> str:
        return format_setup(self)


class FockState:
    """Sparse map from occupancy tuples to complex coefficients."""

    __slots__ = ("n_modes", "terms")

    def __init__(self, n_modes: int, terms: Mapping[tuple[int, ...], complex] | None = None):
        self.n_modes = n_modes
        self.terms: dict[tuple[int, ...], complex] = {}
        for k, v in (terms or {}).items():
            if len(k) != n_modes:
                raise ValueError("occupancy length does not match mode count")
            if abs(v) > PRUNE_TOL:
                self.terms[tuple(k)] = complex(v)

    @classmethod
    def vacuum(cls, n_paths: int) -> "FockState":
        return cls(2 * n_paths, {(0,) * (2 * n_paths): 1.0})

    @property
    def n_paths(self) -> int:
        return self.n_modes // 2

    @property
    def photon_count(self) -> int:
        counts = {sum(k) for k in self.terms}
        if len(counts) > 1:
            raise ValueError("state mixes photon numbers")
        return counts.pop() if counts else 0

    def norm2(self) -> float:
        """Fock-space squared norm (coefficients weighted by prod n_m!)."""
        total = 0.0
        for occ, c in self.terms.items():
            w = 1
            for n in occ:
                if n > 1:
                    w *= math.factorial(n)
            total += w * (c.real * c.real + c.imag * c.imag)
        return total

    def __len__(self) -> int:
        return len(self.terms)

    def __eq__(self, other) -> bool:
        return (isinstance(other, FockState) and self.n_modes == other.n_modes
                and self.terms == other.terms)

    def allclose(self, other: "FockState", atol: float = 1e-10) -> bool:
        keys = set(self.terms) | set(other.terms)
        return all(abs(self.terms.get(k, 0) - other.terms.get(k, 0)) <= atol for k in keys)

    def __repr__(self) -> str:
        parts = []
        for occ, c in sorted(self.terms.items()):
            ops = []
            for m, n in enumerate(occ):
                if n:
                    ops.append(f"{path_name(m // 2)}{'VH'[m % 2]}" + (f"^{n}" if n > 1 else ""))
            parts.append(f"({c:.6g}){'*'.join(ops) or '1'}")
        return "FockState(" + " + ".join(parts) + ")"


@dataclass(frozen=True)
class QubitState:
    amplitudes: np.ndarray
    success_prob: float

    @property
    def n_qubits(self) -> int:
        return int(self.amplitudes.size).bit_length() - 1

    @classmethod
    def from_vector(cls, vec) -> "QubitState":
        v = np.asarray(vec, dtype=complex)
        nrm = np.linalg.norm(v)
        if v.size & (v.size - 1) or nrm == 0:
            raise ValueError("need a nonzero vector of length 2^N")
        return cls(v / nrm, 1.0)


# ---------------------------------------------------------------- devices

def _mode_map(device: Device) -> tuple[tuple[int, ...], np.ndarray]:
    """Affected modes and the matrix sending each mode to a combination of them.

    Column ``j`` of the returned matrix is the image of ``modes[j]``.
    """
    if device.kind in ("HWP", "QWP", "R"):
        (p,) = device.paths
        modes = (2 * p, 2 * p + 1)
        if device.kind == "R":
            return modes, 1j * np.eye(2)
        t = 2 * device.radians
        c, s = math.cos(t), math.sin(t)
        if device.kind == "HWP":
            m = np.array([[c, s], [s, -c]], dtype=complex)
        else:
            m = np.array([[1 - 1j * c, -1j * s], [-1j * s, 1 + 1j * c]]) / math.sqrt(2)
        return modes, m
    p, r = device.paths
    modes = (2 * p, 2 * p + 1, 2 * r, 2 * r + 1)
    m = np.zeros((4, 4), dtype=complex)
    if device.kind == "BS":
        k = 1 / math.sqrt(2)
        for l in (V, H):
            m[l, l] = m[2 + l, 2 + l] = k
            m[2 + l, l] = m[l, 2 + l] = 1j * k
    elif device.kind == "PBS":
        m[0, 0] = m[2, 2] = 1
        m[3, 1] = m[1, 3] = 1
    else:
        raise SetupError(f"{device.kind} is not a mode transformation")
    return modes, m


def _snap(z: complex) -> complex:
    # exact zeros keep pruning and term counts stable across devices
    re_, im = z.real, z.imag
    return complex(0.0 if abs(re_) < 1e-15 else re_, 0.0 if abs(im) < 1e-15 else im)


def _expand(mat: np.ndarray, counts: tuple[int, ...]) -> dict[tuple[int, ...], complex]:
    poly: dict[tuple[int, ...], complex] = {(0,) * len(counts): 1.0}
    for j, n in enumerate(counts):
        col = [(i, _snap(mat[i, j])) for i in range(len(counts)) if mat[i, j] != 0]
        for _ in range(n):
            nxt: dict[tuple[int, ...], complex] = {}
            for occ, c in poly.items():
                for i, u in col:
                    o = list(occ)
                    o[i] += 1
                    o = tuple(o)
                    nxt[o] = nxt.get(o, 0) + c * u
            poly = nxt
    return poly


def _source_term(device: Device) -> list[tuple[tuple[int, int, int, int], float]]:
    if device.kind == "DC00":
        return [((1, 0, 1, 0), 1.0)]
    if device.kind == "DC11":
        return [((0, 1, 0, 1), 1.0)]
    return [((1, 0, 1, 0), 1.0), ((0, 1, 0, 1), 1.0)]


def apply_device(state: FockState, device: Device, q: int | None = None) -> FockState:
    """Apply one device; ``q`` (if given) enforces the angle grid."""
    if max(device.paths) >= state.n_paths:
        raise SetupError(f"{format_device(device)} touches a path outside 0..{state.n_paths - 1}")
    if q is not None and not device.on_grid(q):
        raise SetupError(f"{format_device(device)} is off the pi/{q} grid")

    out: dict[tuple[int, ...], complex] = {}
    if device.is_source:
        p, r = device.paths
        modes = (2 * p, 2 * p + 1, 2 * r, 2 * r + 1)
        adds = _source_term(device)
        for occ, c in state.terms.items():
            for delta, u in adds:
                o = list(occ)
                for m, d in zip(modes, delta):
                    o[m] += d
                o = tuple(o)
                out[o] = out.get(o, 0) + c * u
    else:
        modes, mat = _mode_map(device)
        expand = lru_cache(maxsize=None)(lambda counts: tuple(_expand(mat, counts).items()))
        for occ, c in state.terms.items():
            counts = tuple(occ[m] for m in modes)
            if not any(counts):
                out[occ] = out.get(occ, 0) + c
                continue
            base = list(occ)
            for m in modes:
                base[m] = 0
            for sub, u in expand(counts):
                o = base.copy()
                for m, n in zip(modes, sub):
                    o[m] = n
                o = tuple(o)
                out[o] = out.get(o, 0) + c * u
    return FockState(state.n_modes, out)


def run_setup(setup: OpticalSetup) -> FockState:
    state = FockState.vacuum(setup.n_photons)
    for d in setup.sources:
        state = apply_device(state, d)
    for d in setup.sequence:
        state = apply_device(state, d, setup.q)
    return state


def postselect(state: FockState) -> QubitState:
    """Project onto one photon per path and read polarizations as qubits."""
    n = state.n_paths
    amps = np.zeros(2 ** n, dtype=complex)
    total = state.norm2()
    for occ, c in state.terms.items():
        idx = 0
        for p in range(n):
            v, h = occ[2 * p], occ[2 * p + 1]
            if v + h != 1:
                break
            idx = (idx << 1) | h
        else:
            amps[idx] += c
    kept = float(np.vdot(amps, amps).real)
    if total <= 0 or kept <= PRUNE_TOL ** 2:
        return QubitState(np.zeros(2 ** n, dtype=complex), 0.0)
    return QubitState(amps / math.sqrt(kept), min(1.0, kept / total))


def embed(qs: QubitState) -> FockState:
    """One-photon-per-path Fock state carrying the given qubit amplitudes."""
    n = qs.n_qubits
    terms = {}
    for idx, a in enumerate(qs.amplitudes):
        occ = [0] * (2 * n)
        for p in range(n):
            bit = (idx >> (n - 1 - p)) & 1
            occ[2 * p + bit] = 1
        terms[tuple(occ)] = a
    return FockState(2 * n, terms)


def fidelity_up_to_phase(a: QubitState | np.ndarray, b: QubitState | np.ndarray) -> float:
    va = np.asarray(getattr(a, "amplitudes", a), dtype=complex)
    vb = np.asarray(getattr(b, "amplitudes", b), dtype=complex)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise ValueError("fidelity needs nonzero states")
    return float(min(1.0, abs(np.vdot(va, vb)) ** 2 / (na * nb) ** 2))


# ---------------------------------------------------------------- text I/O

_TOKEN = re.compile(r"^\s*([A-Za-z0-9]+)\s*\(([^()]*)\)\s*$")
_PI_ANGLE = re.compile(r"^([0-9.]+(?:/[0-9]+)?)?\s*\*?\s*pi$")


def parse_angle(text: str, q: int | None = None) -> Fraction:
    """Angle in units of pi: ``0.25pi``, ``1/45pi``, ``pi`` or bare radians."""
    t = text.strip().replace(" ", "").lower().replace("π", "pi")
    m = _PI_ANGLE.match(t)
    try:
        if m:
            return Fraction(m.group(1) or 1) % 1
        x = float(t) / math.pi
    except (ValueError, ZeroDivisionError):
        raise SetupError(f"bad angle {text!r}") from None
    denom = q or 360
    frac = Fraction(round(x * denom), denom)
    if abs(float(frac) - x) > 1e-9:
        raise SetupError(f"angle {text!r} is off the pi/{denom} grid")
    return frac % 1


def format_angle(a: Fraction) -> str:
    d = a.denominator
    while d % 2 == 0:
        d //= 2
    while d % 5 == 0:
        d //= 5
    if d == 1:
        s = repr(float(a))
        return ("0" if a == 0 else s.rstrip("0").rstrip(".") if "." in s else s) + "pi"
    return f"{a.numerator}/{a.denominator}pi"


def parse_device(token: str, q: int | None = None) -> Device:
    m = _TOKEN.match(token)
    if not m:
        raise SetupError(f"cannot parse device token {token.strip()!r}")
    kind, args = m.group(1), [a.strip() for a in m.group(2).split(",")]
    if kind not in ALL_KINDS:
        raise SetupError(f"unknown device kind {kind!r} in token {token.strip()!r}")
    if kind in ANGLED:
        if len(args) != 2:
            raise SetupError(f"{kind} expects (path,angle): {token.strip()!r}")
        return Device(kind, (path_index(args[0]),), parse_angle(args[1], q))
    return Device(kind, tuple(path_index(a) for a in args))


def format_device(d: Device) -> str:
    names = ",".join(path_name(p) for p in d.paths)
    if d.angle is not None:
        return f"{d.kind}({names},{format_angle(d.angle)})"
    return f"{d.kind}({names})"


def parse_setup(text: str, q: int = 4, max_length: int | None = None) -> OpticalSetup:
    """Parse ``DCBell(a,b) -> DCBell(c,d) -> R(b) -> PBS(b,c)``."""
    tokens = [t for t in re.split(r"->|\n", text) if t.strip() and not t.strip().startswith("#")]
    devices = [parse_device(t, q) for t in tokens]
    sources = [d for d in devices if d.is_source]
    seq = devices[len(sources):]
    if devices[:len(sources)] != sources:
        raise SetupError("DC sources must precede all other devices")
    if not sources:
        raise SetupError("setup has no DC sources")
    n = 2 * len(sources)
    return OpticalSetup(n, tuple(sources), tuple(seq), q, max_length)


def format_setup(setup: OpticalSetup) -> str:
    return " -> ".join(format_device(d) for d in setup.devices)


def bell_sources(n_photons: int, kinds: Iterable[str] | None = None) -> tuple[Device, ...]:
    """Sources on consecutive pairs (a,b), (c,d), ...; Bell pairs by default."""
    pairs = [(2 * i, 2 * i + 1) for i in range(n_photons // 2)]
    kinds = list(kinds) if kinds is not None else ["DCBell"] * len(pairs)
    return tuple(Device(k, p) for k, p in zip(kinds, pairs))
