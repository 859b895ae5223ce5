"""Spin systems and the internal Hamiltonian of oriented spin-1/2 molecules.

Conventions used throughout the package:

* computational basis with ``Z|0> = +|0>``; tensor order follows the spin list;
* parameters (shifts, dipolar and scalar couplings) are in Hz;
* Hamiltonian matrices are in rad/s, so an eigenvalue difference divided by
  ``2*pi`` is a frequency in Hz.

The Hamiltonian is linear in its parameters, ``H(theta) = sum_i theta_i G_i``,
where each generator ``G_i`` is a fixed combination of Pauli strings. The
generators are cached per spin system and reused for both building ``H`` and
for its parameter derivatives.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MAX_SPINS = 10

_PAULI = {
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


class SpinModelError(ValueError):
    """Invalid spin system, parameter set or operator request."""


@dataclass(frozen=True)
class Spin:
    label: str
    species: str


@dataclass(frozen=True)
class SpinSystem:
    """Ordered collection of spin-1/2 nuclei.

    Two spins form a homonuclear pair iff their species tags are equal.
    """

    spins: tuple[Spin, ...]

    def __post_init__(self):
        spins = tuple(s if isinstance(s, Spin) else Spin(*s) for s in self.spins)
        object.__setattr__(self, "spins", spins)
        if not spins:
            raise SpinModelError("a spin system needs at least one spin")
        labels = [s.label for s in spins]
        if len(set(labels)) != len(labels):
            raise SpinModelError(f"duplicate spin labels in {labels}")
        for s in spins:
            if not s.label or not s.species:
                raise SpinModelError(f"empty label or species in {s!r}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "SpinSystem":
        return cls(tuple(Spin(label, species) for label, species in pairs))

    @property
    def n(self) -> int:
        return len(self.spins)

    @property
    def dim(self) -> int:
        return 2**self.n

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.spins]

    @property
    def species(self) -> list[str]:
        return [s.species for s in self.spins]

    def species_set(self) -> list[str]:
        """Distinct species in order of first appearance."""
        return list(dict.fromkeys(self.species))

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise SpinModelError(f"unknown spin label {label!r}") from None

    def is_homonuclear(self, j: int, k: int) -> bool:
        return self.spins[j].species == self.spins[k].species

    def sites_of(self, species: str) -> list[int]:
        return [i for i, s in enumerate(self.spins) if s.species == species]


@dataclass(frozen=True)
class HamiltonianParams:
    """Chemical shifts and coupling matrices, all in Hz."""

    shifts_hz: np.ndarray
    dipolar_hz: np.ndarray
    scalar_hz: np.ndarray

    def __post_init__(self):
        shifts = np.array(self.shifts_hz, dtype=float).reshape(-1)
        n = shifts.size
        mats = []
        for name in ("dipolar_hz", "scalar_hz"):
            m = np.array(getattr(self, name), dtype=float)
            if m.shape != (n, n):
                raise SpinModelError(f"{name} has shape {m.shape}, expected {(n, n)}")
            if not np.array_equal(m, m.T):
                raise SpinModelError(f"{name} is not symmetric")
            if np.any(np.diag(m) != 0):
                raise SpinModelError(f"{name} has a non-zero diagonal")
            mats.append(m)
        for arr in (shifts, *mats):
            if not np.all(np.isfinite(arr)):
                raise SpinModelError("parameters must be finite")
            arr.setflags(write=False)
        object.__setattr__(self, "shifts_hz", shifts)
        object.__setattr__(self, "dipolar_hz", mats[0])
        object.__setattr__(self, "scalar_hz", mats[1])

    @property
    def n(self) -> int:
        return self.shifts_hz.size

    @classmethod
    def zeros(cls, n: int) -> "HamiltonianParams":
        return cls(np.zeros(n), np.zeros((n, n)), np.zeros((n, n)))

    @classmethod
    def from_vector(cls, vec: Sequence[float], n: int) -> "HamiltonianParams":
        """Inverse of :meth:`to_vector`."""
        vec = np.asarray(vec, dtype=float)
        iu = np.triu_indices(n, 1)
        m = len(iu[0])
        if vec.size != n + 2 * m:
            raise SpinModelError(f"parameter vector has {vec.size} entries, expected {n + 2 * m}")
        d = np.zeros((n, n))
        j = np.zeros((n, n))
        d[iu] = vec[n:n + m]
        j[iu] = vec[n + m:]
        return cls(vec[:n], d + d.T, j + j.T)

    def to_vector(self) -> np.ndarray:
        """Canonical flat order: shifts, dipolar upper triangle, scalar upper triangle."""
        iu = np.triu_indices(self.n, 1)
        return np.concatenate([self.shifts_hz, self.dipolar_hz[iu], self.scalar_hz[iu]])

    def __add__(self, other):
        return HamiltonianParams(self.shifts_hz + other.shifts_hz,
                                 self.dipolar_hz + other.dipolar_hz,
                                 self.scalar_hz + other.scalar_hz)

    def __mul__(self, c):
        return HamiltonianParams(c * self.shifts_hz, c * self.dipolar_hz, c * self.scalar_hz)

    __rmul__ = __mul__


@dataclass(frozen=True)
class ParamRef:
    """Address of one Hamiltonian parameter: ``kind`` is shift, dipolar or scalar."""

    kind: str
    j: int
    k: int = -1

    def __post_init__(self):
        if self.kind not in ("shift", "dipolar", "scalar"):
            raise SpinModelError(f"unknown parameter kind {self.kind!r}")
        if self.kind != "shift":
            j, k = sorted((self.j, self.k))
            if j == k or j < 0:
                raise SpinModelError(f"invalid coupling indices ({self.j}, {self.k})")
            object.__setattr__(self, "j", j)
            object.__setattr__(self, "k", k)

    def flat_index(self, n: int) -> int:
        """Position of this parameter in :meth:`HamiltonianParams.to_vector`."""
        if self.kind == "shift":
            if not 0 <= self.j < n:
                raise SpinModelError(f"shift index {self.j} out of range")
            return self.j
        if self.k >= n:
            raise SpinModelError(f"coupling index {self.k} out of range")
        m = n * (n - 1) // 2
        pos = self.j * n - self.j * (self.j + 1) // 2 + (self.k - self.j - 1)
        return n + pos + (m if self.kind == "scalar" else 0)

    def name(self, sys: SpinSystem) -> str:
        if self.kind == "shift":
            return f"nu[{sys.labels[self.j]}]"
        tag = "D" if self.kind == "dipolar" else "J"
        return f"{tag}[{sys.labels[self.j]},{sys.labels[self.k]}]"

    @classmethod
    def parse(cls, text: str, sys: SpinSystem) -> "ParamRef":
        """Parse ``nu[H1]``, ``D[H1,F5]`` or ``J[H1,F5]``."""
        text = text.strip()
        head, _, rest = text.partition("[")
        if not rest.endswith("]"):
            raise SpinModelError(f"cannot parse parameter name {text!r}")
        args = [a.strip() for a in rest[:-1].split(",")]
        kind = {"nu": "shift", "D": "dipolar", "J": "scalar"}.get(head.strip())
        if kind is None or len(args) != (1 if kind == "shift" else 2):
            raise SpinModelError(f"cannot parse parameter name {text!r}")
        idx = [sys.index(a) for a in args]
        return cls(kind, *idx)


def all_param_refs(n: int) -> list[ParamRef]:
    """Every parameter in canonical flat order."""
    pairs = [(j, k) for j in range(n) for k in range(j + 1, n)]
    return ([ParamRef("shift", j) for j in range(n)]
            + [ParamRef("dipolar", j, k) for j, k in pairs]
            + [ParamRef("scalar", j, k) for j, k in pairs])


def pauli_embed(axis: str, site: int, n: int, max_spins: int = MAX_SPINS) -> np.ndarray:
    """Return ``I x ... x sigma_axis x ... x I`` with the Pauli matrix at ``site``."""
    if axis not in _PAULI:
        raise SpinModelError(f"axis must be one of X, Y, Z, got {axis!r}")
    if n < 1 or n > max_spins:
        raise SpinModelError(f"spin count {n} outside 1..{max_spins}")
    if not 0 <= site < n:
        raise SpinModelError(f"site {site} out of range for {n} spins")
    return np.kron(np.kron(np.eye(2**site), _PAULI[axis]), np.eye(2 ** (n - site - 1)))


def _diag_z(site: int, n: int) -> np.ndarray:
    # diagonal of Z_site: +1 where the site bit is 0
    idx = np.arange(2**n)
    return 1.0 - 2.0 * ((idx >> (n - 1 - site)) & 1)


def _flipflop(j: int, k: int, n: int) -> np.ndarray:
    """X_j X_k + Y_j Y_k = 2 (|01><10| + |10><01|) on sites j, k."""
    dim = 2**n
    out = np.zeros((dim, dim))
    bj, bk = 1 << (n - 1 - j), 1 << (n - 1 - k)
    idx = np.arange(dim)
    src = idx[((idx & bj) == 0) & ((idx & bk) != 0)]
    dst = src ^ bj ^ bk
    out[src, dst] = 2.0
    out[dst, src] = 2.0
    return out


@functools.lru_cache(maxsize=64)
def generators(species: tuple[str, ...]) -> np.ndarray:
    """Derivatives ``dH/dtheta`` (rad/s per Hz) in canonical parameter order.

    Returns a real array of shape ``(n_params, 2**n, 2**n)``; the Hamiltonian of
    this system is real symmetric in the computational basis.
    """
    n = len(species)
    if n > MAX_SPINS:
        raise SpinModelError(f"spin count {n} exceeds maximum {MAX_SPINS}")
    dim = 2**n
    refs = all_param_refs(n)
    out = np.zeros((len(refs), dim, dim))
    zd = [_diag_z(i, n) for i in range(n)]
    for p, ref in enumerate(refs):
        if ref.kind == "shift":
            out[p] = np.diag(np.pi * zd[ref.j])
            continue
        j, k = ref.j, ref.k
        zz = np.diag(np.pi * zd[j] * zd[k])
        if species[j] != species[k]:
            out[p] = zz
        elif ref.kind == "dipolar":
            out[p] = zz - 0.5 * np.pi * _flipflop(j, k, n)
        else:
            out[p] = zz + np.pi * _flipflop(j, k, n)
    out.setflags(write=False)
    return out


def build_hamiltonian(sys: SpinSystem, params: HamiltonianParams) -> np.ndarray:
    """Internal Hamiltonian (rad/s) of ``sys`` at ``params``.

    ``H = sum_j pi nu_j Z_j + sum_{j<k} pi (D_jk + J_jk) Z_j Z_k`` plus, for
    homonuclear pairs only, ``pi (J_jk - D_jk / 2) (X_j X_k + Y_j Y_k)``.
    """
    if params.n != sys.n:
        raise SpinModelError(f"parameters are for {params.n} spins, system has {sys.n}")
    gens = generators(tuple(sys.species))
    h = np.tensordot(params.to_vector(), gens, axes=1)
    return h.astype(complex)


def restrict_to_species(sys: SpinSystem, params: HamiltonianParams,
                        keep: Iterable[str]) -> tuple[SpinSystem, HamiltonianParams]:
    """Sub-system of the spins whose species is in ``keep`` (ideal decoupling)."""
    keep = set(keep)
    if not keep:
        raise SpinModelError("nothing to keep")
    missing = keep - set(sys.species)
    if missing:
        raise SpinModelError(f"species {sorted(missing)} not present in system")
    idx = [i for i, s in enumerate(sys.spins) if s.species in keep]
    sub = SpinSystem(tuple(sys.spins[i] for i in idx))
    ix = np.ix_(idx, idx)
    return sub, HamiltonianParams(params.shifts_hz[idx], params.dipolar_hz[ix],
                                  params.scalar_hz[ix])


def zero_cross_species(sys: SpinSystem, params: HamiltonianParams) -> HamiltonianParams:
    """Copy of ``params`` with every heteronuclear coupling set to zero."""
    same = np.array([[a == b for b in sys.species] for a in sys.species])
    return HamiltonianParams(params.shifts_hz, np.where(same, params.dipolar_hz, 0.0),
                             np.where(same, params.scalar_hz, 0.0))


@dataclass(frozen=True)
class SpinModel:
    """A spin system together with its parameters; convenience bundle for I/O."""

    system: SpinSystem
    params: HamiltonianParams = field(default=None)

    def __post_init__(self):
        if self.params is None:
            object.__setattr__(self, "params", HamiltonianParams.zeros(self.system.n))
        if self.params.n != self.system.n:
            raise SpinModelError("parameter count does not match spin count")
