"""Crystal model and spinor-valued Fourier components of the potential.

The potential seen by the neutron is a sum of Fermi pseudopotentials plus
the spin-orbit coupling of the moving neutron to the intra-crystal electric
field.  Its Fourier component at reciprocal vector H, for neutron wavevector
K, is the 2x2 spin matrix

    V(H, K) = (2 pi hbar^2 / m) (1/V_cell)
              * sum_j [ b_j - 2i gamma_j sigma.(K x H)/|H|^2 ] exp(i H.r_j)

with gamma_j = (mu e / hbar c) Z_j (1 - f_j(|H|)).  We normalise the lattice
sum per unit cell volume so V carries energy units and V(0) is the usual
neutron optical potential.

All operations here are pure functions over immutable inputs.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .constants import CONSTANTS, FM_TO_A, PhysicalConstants

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
SIGMA = np.stack([SIGMA_X, SIGMA_Y, SIGMA_Z])
IDENTITY2 = np.eye(2, dtype=complex)


class CrystalError(ValueError):
    """Invalid crystal data or an unusable reflection."""


@dataclass(frozen=True)
class FormFactor:
    """Isotropic electronic form factor, sum of Gaussians in s = |H|/4pi.

    Stored unnormalised (f_raw(0) ~ Z); evaluation returns f_raw(s)/f_raw(0)
    so that f(0) = 1 exactly and the spin-orbit strength vanishes at H -> 0.
    """

    a: tuple[float, ...]
    b: tuple[float, ...]
    c: float

    def __call__(self, h_mag: float | np.ndarray) -> float | np.ndarray:
        s2 = (np.asarray(h_mag) / (4.0 * np.pi)) ** 2
        raw = self.c + sum(ai * np.exp(-bi * s2) for ai, bi in zip(self.a, self.b))
        raw0 = self.c + sum(self.a)
        return raw / raw0


UNIT_FORM_FACTOR = FormFactor(a=(), b=(), c=1.0)  # f == 1: no spin-orbit term


@dataclass(frozen=True)
class AtomSite:
    element: str
    frac: tuple[float, float, float]
    b_fm: float
    Z: int
    form_factor: FormFactor = UNIT_FORM_FACTOR


@dataclass(frozen=True)
class CrystalModel:
    """Lattice plus atomic basis; the source of all structure factors.

    ``schwinger_scale`` multiplies every gamma_j; 0 switches the spin-orbit
    term off entirely (useful for scalar-theory limits and tests).
    """

    material_id: str
    lattice: tuple[tuple[float, float, float], ...]  # rows a1, a2, a3, in A
    sites: tuple[AtomSite, ...]
    schwinger_scale: float = 1.0

    def __post_init__(self):
        lat = np.asarray(self.lattice, dtype=float)
        if lat.shape != (3, 3):
            raise CrystalError("lattice must be three 3-vectors")
        if abs(float(np.linalg.det(lat))) < 1e-9:
            raise CrystalError("degenerate lattice")
        if not self.sites:
            raise CrystalError("crystal needs at least one site")

    @property
    def lattice_matrix(self) -> np.ndarray:
        return np.asarray(self.lattice, dtype=float)

    @property
    def cell_volume_A3(self) -> float:
        return abs(float(np.linalg.det(self.lattice_matrix)))

    @property
    def reciprocal_matrix(self) -> np.ndarray:
        """Rows b1, b2, b3 with a_i . b_j = 2 pi delta_ij."""
        return 2.0 * np.pi * np.linalg.inv(self.lattice_matrix).T

    def d_spacing(self, hkl) -> float:
        return 2.0 * np.pi / float(np.linalg.norm(reciprocal_vector(self, hkl)))

    def without_schwinger(self) -> "CrystalModel":
        return replace(self, schwinger_scale=0.0)


def reciprocal_vector(crystal: CrystalModel, hkl) -> np.ndarray:
    """Reciprocal lattice vector H for integer Miller indices, in 1/A.

    Satisfies H . a_i = 2 pi hkl_i.  hkl = (0,0,0) is rejected: the H = 0
    Fourier component goes through the dedicated V(0) path instead.
    """
    hkl = np.asarray(hkl, dtype=float)
    if hkl.shape != (3,):
        raise CrystalError("hkl must be a 3-tuple")
    if np.all(hkl == 0):
        raise CrystalError("hkl = (0,0,0) has no reciprocal vector")
    return hkl @ crystal.reciprocal_matrix


def schwinger_axis(K, H) -> tuple[np.ndarray, float]:
    """Spin quantization axis and geometric strength of the spin-orbit term.

    Returns (u_hat, w) with u_hat = (K x H)/|K x H| and w = |K x H|/|H|^2
    (dimensionless).  K parallel to H (or either zero) is an error: there the
    term is identically zero and the caller must treat gamma as absent.
    """
    K = np.asarray(K, dtype=float)
    H = np.asarray(H, dtype=float)
    if np.linalg.norm(K) == 0.0 or np.linalg.norm(H) == 0.0:
        raise CrystalError("schwinger_axis needs non-zero K and H")
    cross = np.cross(K, H)
    mag = float(np.linalg.norm(cross))
    if mag <= 1e-12 * np.linalg.norm(K) * np.linalg.norm(H):
        raise CrystalError("K parallel to H: spin-orbit axis undefined")
    return cross / mag, mag / float(np.dot(H, H))


def site_gammas(crystal: CrystalModel, h_mag: float,
                constants: PhysicalConstants = CONSTANTS) -> np.ndarray:
    """gamma_j = (mu e/hbar c) Z_j (1 - f_j(|H|)) per site, in fm."""
    g = np.array([
        constants.schwinger_gamma_fm * s.Z * (1.0 - float(s.form_factor(h_mag)))
        for s in crystal.sites
    ])
    return crystal.schwinger_scale * g


def structure_sums(crystal: CrystalModel, H) -> tuple[complex, complex, float]:
    """Nuclear and spin-orbit lattice sums A = sum b_j e^{iH.r_j},
    B = sum gamma_j e^{iH.r_j} (both fm), plus |H|."""
    H = np.asarray(H, dtype=float)
    h_mag = float(np.linalg.norm(H))
    lat = crystal.lattice_matrix
    phases = np.array([np.exp(1j * float(np.dot(H, np.asarray(s.frac) @ lat)))
                       for s in crystal.sites])
    b = np.array([s.b_fm for s in crystal.sites])
    gam = site_gammas(crystal, h_mag)
    return complex(np.sum(b * phases)), complex(np.sum(gam * phases)), h_mag


def mean_potential_meV(crystal: CrystalModel,
                       constants: PhysicalConstants = CONSTANTS) -> float:
    """V(0): the neutron optical potential, real and spin-independent."""
    b_sum = sum(s.b_fm for s in crystal.sites) * FM_TO_A
    return constants.two_pi_hbar2_over_m_meV_A3 * b_sum / crystal.cell_volume_A3


def potential_fourier(crystal: CrystalModel, H, K,
                      constants: PhysicalConstants = CONSTANTS) -> np.ndarray:
    """Spinor Fourier component V(H, K) as a 2x2 complex matrix in meV.

    H may be the zero vector, in which case the spin-orbit part vanishes
    identically (f(0) = 1) and the result is V(0) times the identity.
    """
    H = np.asarray(H, dtype=float)
    K = np.asarray(K, dtype=float)
    if np.linalg.norm(K) == 0.0:
        raise CrystalError("K must be non-zero")
    if np.linalg.norm(H) == 0.0:
        return mean_potential_meV(crystal, constants) * IDENTITY2

    A, B, _h = structure_sums(crystal, H)
    pref = constants.two_pi_hbar2_over_m_meV_A3 * FM_TO_A / crystal.cell_volume_A3
    nuclear = pref * A * IDENTITY2

    cross = np.cross(K, H)
    if np.linalg.norm(cross) == 0.0:
        return nuclear
    sigma_cross = np.einsum("k,kij->ij", cross / float(np.dot(H, H)), SIGMA)
    return nuclear - 2.0j * pref * B * sigma_cross


@dataclass(frozen=True)
class ChannelPotentials:
    """Scalar potentials of the two decoupled spin channels along u_hat.

    Channel s = +1 (-1) is the sigma.u_hat = +1 (-1) eigenstate.  For H = 0,
    or K parallel to H, both channels coincide with the optical potential.
    """

    v0: float
    vH: tuple[complex, complex]    # (s=+1, s=-1)
    vmH: tuple[complex, complex]
    u_hat: np.ndarray
    w: float


def channel_potentials(crystal: CrystalModel, H, K,
                       constants: PhysicalConstants = CONSTANTS) -> ChannelPotentials:
    """Diagonalise V(+-H, K) along the spin-orbit axis.

    In the sigma.u_hat eigenbasis V(H,K) is diagonal with entries
    v_H^s = pref * sum_j (b_j - 2i s gamma_j w) e^{iH.r_j}; the -H component
    follows from the same sums with conjugated phases and reversed cross
    product.
    """
    H = np.asarray(H, dtype=float)
    K = np.asarray(K, dtype=float)
    v0 = mean_potential_meV(crystal, constants)
    A, B, _h = structure_sums(crystal, H)
    pref = constants.two_pi_hbar2_over_m_meV_A3 * FM_TO_A / crystal.cell_volume_A3
    try:
        u_hat, w = schwinger_axis(K, H)
    except CrystalError:
        u_hat, w = np.array([0.0, 0.0, 1.0]), 0.0
    vH = tuple(pref * (A - 2.0j * s * w * B) for s in (+1.0, -1.0))
    vmH = tuple(pref * (np.conj(A) + 2.0j * s * w * np.conj(B)) for s in (+1.0, -1.0))
    return ChannelPotentials(v0=v0, vH=vH, vmH=vmH, u_hat=u_hat, w=w)


# ---------------------------------------------------------------------------
# Material file I/O
#
# Line-oriented text format (grammar documented in the README):
#   material <id>
#   lattice            followed by three "ax ay az" rows in Angstrom
#   sites              followed by "El fx fy fz b_fm Z" rows
#   formfactors        followed by "El a1 b1 a2 b2 a3 b3 a4 b4 c" rows
#   end
# '#' starts a comment; blank lines ignored.
# ---------------------------------------------------------------------------

def load_crystal(path: str | Path) -> CrystalModel:
    text = Path(path).read_text()
    return parse_crystal(text, material_hint=Path(path).stem)


def parse_crystal(text: str, material_hint: str = "unnamed") -> CrystalModel:
    material = material_hint
    lattice_rows: list[tuple[float, float, float]] = []
    site_rows: list[tuple[str, float, float, float, float, int]] = []
    ff_table: dict[str, FormFactor] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word = line.split()[0].lower()
        if word in ("lattice", "sites", "formfactors"):
            section = word
            continue
        if word == "material":
            material = line.split(None, 1)[1].strip() if " " in line else material
            continue
        if word == "end":
            section = None
            continue
        try:
            if section == "lattice":
                x, y, z = (float(t) for t in line.split())
                lattice_rows.append((x, y, z))
            elif section == "sites":
                tok = line.split()
                site_rows.append((tok[0], float(tok[1]), float(tok[2]),
                                  float(tok[3]), float(tok[4]), int(tok[5])))
            elif section == "formfactors":
                tok = line.split()
                vals = [float(t) for t in tok[1:]]
                if len(vals) != 9:
                    raise ValueError("need a1 b1 .. a4 b4 c")
                ff_table[tok[0]] = FormFactor(a=tuple(vals[0:8:2]),
                                              b=tuple(vals[1:8:2]), c=vals[8])
            else:
                raise ValueError(f"content outside any section: {line!r}")
        except (ValueError, IndexError) as exc:
            raise CrystalError(f"crystal file line {lineno}: {exc}") from exc

    if len(lattice_rows) != 3:
        raise CrystalError("crystal file must define exactly 3 lattice vectors")
    if not site_rows:
        raise CrystalError("crystal file defines no sites")
    sites = tuple(
        AtomSite(element=el, frac=(fx, fy, fz), b_fm=b, Z=z,
                 form_factor=ff_table.get(el, UNIT_FORM_FACTOR))
        for el, fx, fy, fz, b, z in site_rows
    )
    return CrystalModel(material_id=material, lattice=tuple(lattice_rows), sites=sites)


def reference_quartz() -> CrystalModel:
    """The shipped alpha-quartz model with d(110) anchored to 2d = 5.0279 A."""
    ref = importlib.resources.files("sodiff").joinpath("data/quartz110.crystal")
    return parse_crystal(ref.read_text(), material_hint="alpha-quartz-110-anchored")
