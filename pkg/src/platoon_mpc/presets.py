"""Benchmark platoon families and their tuned weight schedules.

Three ten-vehicle families are shipped: "small" and "large" are
homogeneous, "medium" mixes four vehicle types.  Weight schedules are
generated from per-vehicle base vectors with horizon-dependent scaling;
longer horizons shift weight onto the first prediction stage and decay
the later stages quartically.
"""

from __future__ import annotations

import numpy as np

from .assembly import WeightSchedule
from .platoon import PlatoonConfig, VehicleParams

PLATOON_NAMES = ("small", "medium", "large")

_BASE_QZ = np.array([38.85, 40.20, 41.55, 42.90, 44.25,
                     45.60, 46.95, 48.30, 49.65, 51.00])
_BASE_QZP = np.array([130.61, 136.21, 141.82, 147.42, 153.03,
                      158.64, 164.24, 169.85, 175.46, 181.06])
_BASE_QW = np.array([62.0, 74.0, 90.0, 92.0, 106.0,
                     194.0, 298.0, 402.0, 454.0, 480.0])

_MEDIUM_HEADWAY = [1.21, 1.155, 0.99, 1.045, 1.21,
                   1.155, 0.99, 1.045, 1.155, 1.045]
_MEDIUM_AMIN = [-8.14, -7.77, -6.66, -7.03, -8.14,
                -7.77, -6.66, -7.03, -7.77, -7.03]
_MEDIUM_DRAG = [3.85e-4, 3.675e-4, 3.15e-4, 3.325e-4, 3.85e-4,
                3.675e-4, 3.15e-4, 3.325e-4, 3.675e-4, 3.325e-4]
_MEDIUM_ROLL = [1.155e-2, 1.103e-2, 0.945e-2, 0.998e-2, 1.155e-2,
                1.103e-2, 0.945e-2, 0.998e-2, 1.103e-2, 0.998e-2]


def platoon_preset(name: str, n: int = 10) -> PlatoonConfig:
    """Named benchmark platoon.  n can shrink the platoon for small tests;
    the medium family repeats its four vehicle types in the listed order."""
    if name == "small":
        veh = [VehicleParams(5.0, 1.0, -8.0, 1.4, 2.5e-4, 0.006)
               for _ in range(n)]
        leader = VehicleParams(5.0, 1.0, -8.0, 1.4)
        gap = 50.0
    elif name == "large":
        veh = [VehicleParams(10.0, 1.25, -6.8, 1.4, 4.5e-4, 0.015)
               for _ in range(n)]
        leader = VehicleParams(10.0, 1.25, -6.8, 1.4)
        gap = 65.0
    elif name == "medium":
        if n > 10:
            raise ValueError("medium preset defines ten vehicles")
        veh = [VehicleParams(7.0, _MEDIUM_HEADWAY[i], _MEDIUM_AMIN[i], 1.4,
                             _MEDIUM_DRAG[i], _MEDIUM_ROLL[i])
               for i in range(n)]
        leader = VehicleParams(7.0, _MEDIUM_HEADWAY[0], _MEDIUM_AMIN[0], 1.4)
        gap = 60.0
    else:
        raise ValueError(f"unknown platoon preset {name!r}")
    # two medium vehicle types quote a 0.99 s headway against the 1 s step,
    # so the benchmark table itself needs the relaxed validation
    strict = name != "medium"
    return PlatoonConfig(tau=1.0, gap=gap, speed_min=10.0, speed_max=27.78,
                         leader=leader, vehicles=veh, strict=strict)


def weight_preset(name: str, p: int, n: int = 10) -> WeightSchedule:
    """Stage weights for the named platoon at horizon p (1 <= p <= 5)."""
    if name not in PLATOON_NAMES:
        raise ValueError(f"unknown platoon preset {name!r}")
    if not 1 <= p <= 5:
        raise ValueError("horizon presets cover p = 1..5")
    qz_base = _BASE_QZ[:n]
    qzp_base = _BASE_QZP[:n]
    qw_base = _BASE_QW[:n]
    if len(qz_base) < n:
        raise ValueError("presets define ten vehicles")

    if p == 1:
        return WeightSchedule(qz=[6.0 * qz_base], qzp=[qzp_base],
                              qw=[0.5 * qw_base])

    first_gain = 6.0 if name == "large" else 9.0
    early_gain = 0.0684 if name == "large" else 0.1368
    qz = [first_gain * (qz_base - 1.0)]
    qzp = [qzp_base - 1.0]
    qw = [0.5 * (qw_base - 1.0)]
    for s in range(2, p + 1):
        decay = float(s - 1) ** 4
        if s <= 3:
            qz.append(early_gain / decay * qz_base)
            qw.append(0.0013 / decay * qw_base)
        else:
            qz.append(0.0228 / decay * qz_base)
            qw.append(0.0026 / decay * qw_base)
        qzp.append(0.044 / decay * qzp_base)
    return WeightSchedule(qz=qz, qzp=qzp, qw=qw)
