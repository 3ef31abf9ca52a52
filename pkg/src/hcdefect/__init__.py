"""Spectral laboratory for high-contrast random media with a compact defect.

Subpackages and modules:

- ``geometry``: random inclusion configurations, ε-scaling, the defect region
- ``fem``: bilinear finite elements on structured grids
- ``eigensolver``: windowed shift-invert eigenpairs and inertia counts
- ``spectral``: Dirichlet mode tables, β and β∞, gap detection
- ``homogenization``: correctors, effective tensor, the nonlinear defect problem
- ``quasimode``: quasimodes of the ε-problem and eigenfunction diagnostics
- ``experiments``: configured campaigns, CSV/manifest output and the CLI
"""

__version__ = "0.1.0"
