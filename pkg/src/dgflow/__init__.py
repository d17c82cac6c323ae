"""Space-time discontinuous Galerkin discretisation of implicitly
constituted incompressible flow, with a measurement harness for the
discrete stability inequalities."""

__version__ = "0.1.0"
