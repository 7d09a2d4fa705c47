"""Semiclassical quasiparticle dynamics for the damped nonlocal NLSE.

The package has four layers:

* :mod:`semiqp.symbols` -- phase-space models (potential + nonlocal kernel)
  with hand-coded derivative tables and a finite-difference oracle.
* :mod:`semiqp.hamilton_ehrenfest` -- the K-particle moment hierarchy
  (trajectories, masses, central moments) and its fixed-step integrator.
* :mod:`semiqp.evolution` -- the Gaussian evolution operator: linearized
  flow matrices, complex action phases, Green kernel, closed-form leading
  term and the next-order Duhamel correction.
* :mod:`semiqp.reference_solver` -- an independent split-step spectral
  solver for the same equation, used as the validation oracle.

:mod:`semiqp.cli` wires everything into config-driven scenarios.
"""

__version__ = "0.1.0"

from .errors import (BoundaryLeak, CausticSingular, CollisionError,
                     ConfigError, DimensionMismatch, GridMismatch,
                     InsufficientOscillations, InterpolationOutOfRange,
                     NonFinite, QuadratureNotConverged, SemiqpError,
                     TruncationWarning, UnsupportedOrder)
from .symbols import (ANTIHERMITIAN, HERMITIAN, DipoleCosineModel,
                      DipoleCosineFarField, FreeParticleModel, HarmonicModel,
                      ModelSymbols, MultiIndex, PhasePoint, check_partials_fd,
                      kernel_partial, potential_partial)
from .hamilton_ehrenfest import (EnsembleState, GaussianPacket, HeTrajectory,
                                 MomentSet, QuasiparticleState, build_ensemble,
                                 gaussian_initial_moments, he_rhs, integrate_he,
                                 linearized_period, rest_width, symmetrize)
from .evolution import (AlseCoefficients, AsymptoticSolution, MMatrix,
                        MMatrixSeries, ActionPhase, ActionPhaseSeries,
                        alse_coefficients, assemble_solution, dispersion,
                        first_correction_1d, green_kernel, integrate_action,
                        integrate_m_matrix, leading_term_gaussian,
                        propagate_quadrature)
from .reference_solver import (ComplexField, Grid1D, Observables, RefSeries,
                               SolverParams, build_initial_field,
                               build_kernel_grid, compare_fields,
                               evolve_reference, mass_law_rate, observables,
                               split_step)
