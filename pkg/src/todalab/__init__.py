"""Numerical laboratory for multi-soliton solutions of the Toda lattice.

Modules:

- :mod:`todalab.lattice_core`: grids, states, tangent fields, weights, the
  symplectic pairing.
- :mod:`todalab.soliton_factory`: closed-form m-solitons, tangents, phase shifts.
- :mod:`todalab.backlund`: the Backlund transformation and its linearization.
- :mod:`todalab.dynamics`: integrators, projection onto ``X_m``, decay fits.
- :mod:`todalab.stability`: Gram matrix, modulation fits, perturbation runs.
- :mod:`todalab.cli`: config-driven experiment runner.
"""

__version__ = "0.1.0"

from .lattice_core import LatticeGrid, LatticeState, TangentField, WeightFrame  # noqa: E402
from .soliton_factory import SolitonParams, m_soliton, one_soliton  # noqa: E402

__all__ = [
    "__version__",
    "LatticeGrid",
    "LatticeState",
    "TangentField",
    "WeightFrame",
    "SolitonParams",
    "m_soliton",
    "one_soliton",
]
