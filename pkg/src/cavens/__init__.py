"""cavens: driven inhomogeneous emitter ensembles coupled to a lossy cavity.

Steady-state reflection spectra (dipole-induced reflectivity and the
collectively induced transparency dip), dissipative many-body emission
dynamics (superradiance, subradiance, the S-curve), and the accompanying
data-fitting pipeline.
"""

__version__ = "0.1.0"

from . import analysis, core, dicke, ensemble, lindblad, meanfield, units

__all__ = ["analysis", "core", "dicke", "ensemble", "lindblad", "meanfield",
           "units", "__version__"]
