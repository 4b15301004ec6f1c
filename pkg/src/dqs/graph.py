"""DAG encoding of optical setups: node features X and adjacency A.

Node order is start, DC sources, sequence devices, end.  ``A[i, j] = 1``
means device ``j`` is the next device on some path that ``i`` also acts on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optics import DC_KINDS, Device, OpticalSetup


def kind_slots(q: int) -> list[str]:
    """Labels of the one-hot block, e.g. ``HWP@1`` for HWP at pi/q."""
    return (list(DC_KINDS) + ["BS", "PBS"]
            + [f"HWP@{k}" for k in range(q)] + [f"QWP@{k}" for k in range(q)]
            + ["R", "start", "end"])


def feature_dims(n_photons: int, q: int) -> tuple[int, int]:
    return len(kind_slots(q)), n_photons


def _slot(d: Device, q: int) -> str:
    if d.kind in ("HWP", "QWP"):
        return f"{d.kind}@{d.grid_index(q)}"
    return d.kind


@dataclass(frozen=True)
class SetupGraph:
    X: np.ndarray
    A: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    def to_csv(self) -> tuple[str, str]:
        fmt = lambda m: "\n".join(",".join(str(int(v)) for v in row) for row in m) + "\n"
        return fmt(self.X), fmt(self.A)


def encode_setup(setup: OpticalSetup, q: int | None = None) -> SetupGraph:
    q = q or setup.q
    slots = {name: i for i, name in enumerate(kind_slots(q))}
    d1, d2 = len(slots), setup.n_photons
    devices = setup.devices
    n = len(devices) + 2
    X = np.zeros((n, d1 + d2))
    A = np.zeros((n, n))
    X[0, slots["start"]] = 1
    X[n - 1, slots["end"]] = 1
    last: dict[int, int] = {}
    for node, d in enumerate(devices, start=1):
        X[node, slots[_slot(d, q)]] = 1
        X[node, [d1 + p for p in d.paths]] = 1
        if d.is_source:
            A[0, node] = 1
        for p in d.paths:
            if p in last:
                A[last[p], node] = 1
            last[p] = node
    for node in last.values():
        A[node, n - 1] = 1
    return SetupGraph(X, A)
