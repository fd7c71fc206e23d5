"""Discrete-Hessian finite elements for non-divergence form elliptic PDEs
and Hamilton-Jacobi-Bellman equations on triangulations."""
