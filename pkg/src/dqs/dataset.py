"""Random setup generation, exact QFI labelling and JSON-Lines persistence."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .optics import (DC_KINDS, SEQ_KINDS, Device, OpticalSetup, SetupError, format_setup,
                     postselect, run_setup)
from .sensing import Hamiltonian, hamiltonian, qfi_pure

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToolboxConfig:
    n_photons: int = 4
    q: int = 4
    kinds: tuple[str, ...] = SEQ_KINDS
    l_min: int = 1
    l_max: int = 15
    dc_kinds: tuple[str, ...] = DC_KINDS

    def __post_init__(self):
        if self.n_photons < 2 or self.n_photons % 2:
            raise ValueError("n_photons must be even and >= 2")
        if self.q < 1 or not 0 <= self.l_min <= self.l_max:
            raise ValueError("bad quantization or length bounds")
        if set(self.kinds) - set(SEQ_KINDS) or set(self.dc_kinds) - set(DC_KINDS):
            raise ValueError("unknown device kinds in toolbox")

    def toolbox(self) -> list[Device]:
        n, out = self.n_photons, []
        pairs = list(combinations(range(n), 2))
        for kind in SEQ_KINDS:
            if kind not in self.kinds:
                continue
            if kind in ("BS", "PBS"):
                out += [Device(kind, p) for p in pairs]
            elif kind in ("HWP", "QWP"):
                out += [Device(kind, (p,), Fraction(k, self.q)) for p in range(n) for k in range(self.q)]
            else:
                out += [Device(kind, (p,)) for p in range(n)]
        return out


@dataclass
class LabeledSetup:
    id: int
    setup: OpticalSetup
    qfi: float | None
    success_prob: float | None
    valid: bool | None
    hamiltonian: str | None = None

    def __post_init__(self):
        if self.valid is False and self.qfi not in (None, 0.0):
            raise ValueError("invalid setups carry qfi 0")


def sample_setup(config: ToolboxConfig, rng: np.random.Generator,
                 _toolbox: Sequence[Device] | None = None) -> OpticalSetup:
    tools = _toolbox if _toolbox is not None else config.toolbox()
    pairs = [(2 * i, 2 * i + 1) for i in range(config.n_photons // 2)]
    kinds = rng.integers(0, len(config.dc_kinds), size=len(pairs))
    sources = tuple(Device(config.dc_kinds[k], p) for k, p in zip(kinds, pairs))
    length = int(rng.integers(config.l_min, config.l_max + 1))
    slots = rng.integers(0, len(tools), size=length)
    return OpticalSetup(config.n_photons, sources, tuple(tools[i] for i in slots), config.q)


def oracle_qfi(setup: OpticalSetup, H: Hamiltonian) -> tuple[float, float]:
    """(qfi, success probability) of the post-selected probe."""
    qs = postselect(run_setup(setup))
    if qs.success_prob <= 0:
        return 0.0, 0.0
    return qfi_pure(qs, H), qs.success_prob


def label_setup(setup: OpticalSetup, H: Hamiltonian, id: int = 0) -> LabeledSetup:
    qfi, succ = oracle_qfi(setup, H)
    return LabeledSetup(id, setup, qfi, succ, succ > 0, H.name)


def canonical_key(setup: OpticalSetup) -> str:
    return format_setup(setup)


# ---------------------------------------------------------------- generation

def _label_job(args):
    i, setup, h_tag = args
    return label_setup(setup, hamiltonian(h_tag, setup.n_photons), i)


def generate(config: ToolboxConfig, count: int, seed: int, h_tag: str = "sumZ",
             label: bool = True, dedup: bool = True, threads: int = 1,
             max_draws: int | None = None) -> tuple[list[LabeledSetup], dict]:
    """Draw ``count`` setups; draw ``i`` uses the stream seeded by ``(seed, i)``.

    Returned records are ordered by id (the draw index), so the output does
    not depend on the worker count.
    """
    tools = config.toolbox()
    seen: set[str] = set()
    picked: list[tuple[int, OpticalSetup]] = []
    dupes, i = 0, 0
    max_draws = max_draws or 100 * count + 1000
    while len(picked) < count:
        if i >= max_draws:
            raise RuntimeError(f"only {len(picked)} unique setups after {i} draws")
        s = sample_setup(config, np.random.default_rng([seed, i]), tools)
        key = canonical_key(s)
        if dedup and key in seen:
            dupes += 1
        else:
            seen.add(key)
            picked.append((i, s))
        i += 1
    if label:
        jobs = [(j, s, h_tag) for j, s in picked]
        if threads > 1:
            with ProcessPoolExecutor(threads) as pool:
                records = list(pool.map(_label_job, jobs, chunksize=max(1, len(jobs) // (8 * threads))))
        else:
            records = [_label_job(j) for j in jobs]
    else:
        records = [LabeledSetup(j, s, None, None, None, None) for j, s in picked]
    stats = {"draws": i, "duplicates": dupes, "count": len(records)}
    log.info("generated %d setups (%d duplicates skipped)", len(records), dupes)
    return records, stats


# ---------------------------------------------------------------- JSON lines

class DatasetError(ValueError):
    pass


def _dev_to_json(d: Device) -> dict:
    out = {"kind": d.kind, "paths": list(d.paths)}
    if d.angle is not None:
        out["angle"] = d.radians
    return out


def _dev_from_json(obj: dict, q: int) -> Device:
    kind = obj["kind"]
    if kind not in DC_KINDS + SEQ_KINDS:
        raise SetupError(f"unknown device kind {kind!r}")
    angle = obj.get("angle")
    if angle is not None:
        x = float(angle) / math.pi
        angle = Fraction(round(x * q), q)
        if abs(float(angle) - x) > 1e-9:
            raise SetupError(f"angle {obj['angle']} is off the pi/{q} grid")
    return Device(kind, tuple(obj["paths"]), angle)


def record_to_json(r: LabeledSetup) -> dict:
    s = r.setup
    return {
        "id": r.id, "n": s.n_photons, "q": s.q,
        "sources": [_dev_to_json(d) for d in s.sources],
        "seq": [_dev_to_json(d) for d in s.sequence],
        "qfi": r.qfi, "succ": r.success_prob, "valid": r.valid, "h": r.hamiltonian,
    }


def record_from_json(obj: dict) -> LabeledSetup:
    q = int(obj.get("q", 4))
    setup = OpticalSetup(
        int(obj["n"]),
        tuple(_dev_from_json(d, q) for d in obj["sources"]),
        tuple(_dev_from_json(d, q) for d in obj["seq"]),
        q,
    )
    qfi = obj.get("qfi")
    succ = obj.get("succ")
    return LabeledSetup(int(obj["id"]), setup, None if qfi is None else float(qfi),
                        None if succ is None else float(succ), obj.get("valid"), obj.get("h"))


def write_jsonl(path: str | os.PathLike, records: Iterable[LabeledSetup]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r), separators=(",", ":")) + "\n")


def read_jsonl(path: str | os.PathLike) -> list[LabeledSetup]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(record_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{Path(path).name}:{lineno}: {exc}") from exc
    return out
