"""Measure-to-simulator parameter adaptation.

Two observables bridge the real and simulated garment: the shear fraction
(relative elongation when hung under gravity versus spread flat) and the
friction angle (table tilt at which the garment starts to slide). Stiffness
and friction coefficients are searched by bisection until the simulator
reproduces the measured observable; each probe is a full simulation, and
both observables are monotone in their knob, so bisection is the robust
choice.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import __version__
from .clothsim import SaturationError, SimParams, hang_lengths, tilt_table_slide_angle
from .mesh import TriangleMesh


@dataclass(frozen=True)
class MaterialMeasurement:
    """Raw measurements of one garment: hanging length L1, flat spread
    length L2, slide lift height H_s, and table length L_t (meters)."""

    L1: float
    L2: float
    H_s: float
    L_t: float

    def __post_init__(self):
        if not self.L1 >= self.L2 > 0.0:
            raise ValueError(f"need L1 >= L2 > 0, got L1={self.L1}, L2={self.L2}")
        if not 0.0 <= self.H_s <= self.L_t:
            raise ValueError(f"need 0 <= H_s <= L_t, got H_s={self.H_s}, L_t={self.L_t}")

    @property
    def shear_fraction(self) -> float:
        return shear_fraction(self.L1, self.L2)

    @property
    def friction_angle(self) -> float:
        return friction_angle(self.H_s, self.L_t)


def shear_fraction(l1: float, l2: float) -> float:
    """(L1 - L2) / L2, the relative elongation under gravity."""
    if l2 <= 0.0:
        raise ValueError("L2 must be positive")
    if l1 < l2:
        raise ValueError(f"hanging length L1={l1} shorter than spread length L2={l2}")
    return (l1 - l2) / l2

def friction_angle(h_s: float, l_t: float) -> float:
    """asin(H_s / L_t) in radians."""
    if l_t <= 0.0:
        raise ValueError("table length must be positive")
    if not 0.0 <= h_s <= l_t:
        raise ValueError(f"lift height H_s={h_s} outside [0, {l_t}]")
    return math.asin(h_s / l_t)


@dataclass(frozen=True)
class ShearCalibration:
    stretch_stiffness: float
    achieved_fraction: float
    saturated: bool
    probes: int


@dataclass(frozen=True)
class FrictionCalibration:
    friction_mu: float
    saturated: bool
    probes: int


def _hang_fraction(mesh: TriangleMesh, params: SimParams, pick_vertex: int, stiffness: float) -> float:
    p = replace(params, stretch_stiffness=stiffness)
    l1, l2 = hang_lengths(mesh, p, pick_vertex)
    return (l1 - l2) / l2


def calibrate_shear(
    target_fraction: float,
    mesh: TriangleMesh,
    pick_vertex: int,
    params: SimParams = SimParams(),
    lo: float = 1.0,
    hi: float = 1e9,
    rel_tol: float = 0.1,
    max_probes: int = 20,
) -> ShearCalibration:
    """Bisect stretch stiffness (log scale) until the simulated hang fraction
    matches the target within rel_tol relative. Monotone: softer cloth hangs
    longer."""
    if not 0.0 < target_fraction < 0.2:
        raise ValueError("target fraction must be in (0, 0.2)")
    f_lo = _hang_fraction(mesh, params, pick_vertex, lo)
    if f_lo < target_fraction:
        return ShearCalibration(lo, f_lo, True, 1)
    f_hi = _hang_fraction(mesh, params, pick_vertex, hi)
    if f_hi > target_fraction:
        return ShearCalibration(hi, f_hi, True, 2)
    a, b = math.log(lo), math.log(hi)
    probes = 2
    k, f_k = hi, f_hi
    for _ in range(max_probes):
        mid = 0.5 * (a + b)
        k = math.exp(mid)
        f_k = _hang_fraction(mesh, params, pick_vertex, k)
        probes += 1
        if abs(f_k - target_fraction) < rel_tol * target_fraction:
            return ShearCalibration(k, f_k, False, probes)
        if f_k > target_fraction:
            a = mid  # too soft, stiffen
        else:
            b = mid
    return ShearCalibration(k, f_k, True, probes)


def calibrate_friction(
    target_angle: float,
    mesh: TriangleMesh,
    params: SimParams = SimParams(),
    mu_hi: float = 2.0,
    rel_tol: float = 0.04,
    max_probes: int = 14,
) -> FrictionCalibration:
    """Tilt the virtual table to the measured friction angle, then bisect the
    friction coefficient down to the largest value at which the garment still
    slides."""
    if not 0.0 < target_angle < math.radians(45.0):
        raise ValueError("target angle must be in (0, 45 degrees)")

    from .clothsim import _slides

    def slides(mu: float) -> bool:
        return _slides(mesh, replace(params, friction_mu=mu), target_angle)

    if not slides(0.0):
        raise SaturationError("garment does not slide even frictionless")
    if slides(mu_hi):
        return FrictionCalibration(mu_hi, True, 2)
    lo, hi = 0.0, mu_hi
    probes = 2
    while probes < max_probes and (hi - lo) > rel_tol * max(hi, 1e-6):
        mid = 0.5 * (lo + hi)
        probes += 1
        if slides(mid):
            lo = mid
        else:
            hi = mid
    return FrictionCalibration(0.5 * (lo + hi), False, probes)


# ---------------------------------------------------------------------------
# material cards


@dataclass
class MaterialCard:
    """Persisted calibration result for one garment."""

    garment: str
    measurement: MaterialMeasurement
    shear_frac: float
    friction_angle_rad: float
    stretch_stiffness: float | None = None
    friction_mu: float | None = None
    simulator_version: str = __version__

    @classmethod
    def from_measurement(cls, garment: str, m: MaterialMeasurement) -> "MaterialCard":
        return cls(garment, m, m.shear_fraction, m.friction_angle)

    def to_json_dict(self) -> dict:
        d = {"garment": self.garment, "measurement": asdict(self.measurement)}
        d.update(
            shear_frac=self.shear_frac,
            friction_angle_rad=self.friction_angle_rad,
            stretch_stiffness=self.stretch_stiffness,
            friction_mu=self.friction_mu,
            simulator_version=self.simulator_version,
        )
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "MaterialCard":
        return cls(
            d["garment"],
            MaterialMeasurement(**d["measurement"]),
            d["shear_frac"],
            d["friction_angle_rad"],
            d.get("stretch_stiffness"),
            d.get("friction_mu"),
            d.get("simulator_version", "unknown"),
        )

    def sim_params(self, base: SimParams = SimParams()) -> SimParams:
        """SimParams with this card's calibrated values filled in."""
        p = base
        if self.stretch_stiffness is not None:
            p = replace(p, stretch_stiffness=self.stretch_stiffness)
        if self.friction_mu is not None:
            p = replace(p, friction_mu=self.friction_mu)
        return p


def save_card(path, card: MaterialCard) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(card.to_json_dict(), fh, indent=2)
        fh.write("\n")


def load_card(path) -> MaterialCard:
    with open(path, encoding="utf-8") as fh:
        return MaterialCard.from_json_dict(json.load(fh))
