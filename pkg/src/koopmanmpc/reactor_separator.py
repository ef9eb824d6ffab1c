"""Two-CSTR + flash-separator benchmark process.

Two reactions in series (A -> B desired, B -> C side product) run in two
stirred reactors; the second reactor's effluent feeds a flash separator
whose overhead vapor, enriched in the volatile species, is condensed
and recycled to the first reactor. States are the A/B mass fractions
and the temperature in each vessel,

    x = [xA1, xB1, T1, xA2, xB2, T2, xA3, xB3, T3],

and the inputs are the three jacket heat duties u = [Q1, Q2, Q3] in
kJ/h. There are no exogenous disturbances.

The shipped parameter set (``data/reactor_separator.params``) was
calibrated so that the documented operating point in
``data/reactor_separator_operating_point.params`` is a locally stable
steady state of the ODEs at the documented steady input; the relaxation
check lives in the test suite.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .errors import ConfigError
from .plant import PlantModel, load_parameter_file

STATE_NAMES = ("xA1", "xB1", "T1", "xA2", "xB2", "T2", "xA3", "xB3", "T3")
INPUT_NAMES = ("Q1", "Q2", "Q3")

# heat duty bounds, kJ/h
INPUT_LOWER = np.zeros(3)
INPUT_UPPER = np.array([4.87e6, 1.68e6, 4.87e6])

_REQUIRED = (
    "F10", "F20", "Fr", "Fp", "V1", "V2", "V3", "T10", "T20",
    "xA10", "xB10", "xA20", "xB20", "k1", "k2", "E1R", "E2R",
    "dH1", "dH2", "Hvap", "cp", "rho", "alphaA", "alphaB", "alphaC",
)


def _data_path(name):
    return resources.files("koopmanmpc").joinpath("data", name)


def load_params(path=None):
    """Load and validate a reactor-separator parameter set."""
    if path is None:
        with resources.as_file(_data_path("reactor_separator.params")) as p:
            params = load_parameter_file(p)
    else:
        params = load_parameter_file(path)
    missing = [k for k in _REQUIRED if k not in params]
    if missing:
        raise ConfigError(f"parameter set is missing {missing}")
    return params


def load_operating_point():
    """Documented steady state (x_s, u_s) for the shipped parameter set."""
    with resources.as_file(_data_path("reactor_separator_operating_point.params")) as p:
        vals = load_parameter_file(p)
    x_s = np.array([vals[f"xs_{name}"] for name in STATE_NAMES])
    u_s = np.array([vals[f"us_{name}"] for name in INPUT_NAMES])
    return x_s, u_s


def make_rhs(params):
    """Build the ODE right-hand side for one parameter set."""
    F10, F20, Fr, Fp = params["F10"], params["F20"], params["Fr"], params["Fp"]
    V1, V2, V3 = params["V1"], params["V2"], params["V3"]
    T10, T20 = params["T10"], params["T20"]
    xA10, xB10 = params["xA10"], params["xB10"]
    xA20, xB20 = params["xA20"], params["xB20"]
    k1, k2 = params["k1"], params["k2"]
    E1R, E2R = params["E1R"], params["E2R"]
    dH1, dH2 = params["dH1"], params["dH2"]
    Hvap, cp, rho = params["Hvap"], params["cp"], params["rho"]
    aA, aB, aC = params["alphaA"], params["alphaB"], params["alphaC"]
    F1 = F10 + Fr          # reactor 1 effluent
    F2 = F1 + F20          # reactor 2 effluent
    Fov = Fr + Fp          # separator overhead (recycle + purge)

    def rhs(x, u, p):
        xA1, xB1, T1, xA2, xB2, T2, xA3, xB3, T3 = x
        Q1, Q2, Q3 = u
        # flash split: relative-volatility equilibrium for the overhead
        xC3 = 1.0 - xA3 - xB3
        denom = aA * xA3 + aB * xB3 + aC * xC3
        xAr = aA * xA3 / denom
        xBr = aB * xB3 / denom
        r11 = k1 * np.exp(-E1R / T1) * xA1
        r21 = k2 * np.exp(-E2R / T1) * xB1
        r12 = k1 * np.exp(-E1R / T2) * xA2
        r22 = k2 * np.exp(-E2R / T2) * xB2
        return np.array([
            (F10 * (xA10 - xA1) + Fr * (xAr - xA1)) / V1 - r11,
            (F10 * (xB10 - xB1) + Fr * (xBr - xB1)) / V1 + r11 - r21,
            (F10 * (T10 - T1) + Fr * (T3 - T1)) / V1
            + (-dH1 * r11 - dH2 * r21) / cp + Q1 / (rho * cp * V1),
            (F1 * (xA1 - xA2) + F20 * (xA20 - xA2)) / V2 - r12,
            (F1 * (xB1 - xB2) + F20 * (xB20 - xB2)) / V2 + r12 - r22,
            (F1 * (T1 - T2) + F20 * (T20 - T2)) / V2
            + (-dH1 * r12 - dH2 * r22) / cp + Q2 / (rho * cp * V2),
            (F2 * (xA2 - xA3) - Fov * (xAr - xA3)) / V3,
            (F2 * (xB2 - xB3) - Fov * (xBr - xB3)) / V3,
            F2 * (T2 - T3) / V3 - Fov * Hvap / (cp * V3) + Q3 / (rho * cp * V3),
        ])

    return rhs


def make_plant(path=None, name="reactor_separator_default"):
    """The benchmark plant with the shipped (or a user-supplied) parameter set."""
    params = load_params(path)
    return PlantModel(
        state_dim=9,
        input_dim=3,
        disturbance_dim=0,
        rhs=make_rhs(params),
        input_lower=INPUT_LOWER,
        input_upper=INPUT_UPPER,
        parameter_set_name=name,
    )
