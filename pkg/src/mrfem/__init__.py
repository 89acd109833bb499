"""Multirate space-time finite elements for coupled transport / Stokes flow.

The package provides:

* quadtree spatial meshes with hanging-node constraints (``mesh``, ``dofs``),
* reference elements and quadrature (``fem``),
* slab-wise space-time tensor-product systems (``slabs``, ``tensor``),
* sparse linear algebra with constraint condensation (``linsys``),
* a time-dependent Stokes solver and a stabilized transport solver
  (``stokes``, ``transport``), coupled through interpolation operators
  (``fields``),
* a dual solver and goal-oriented error estimator driving space-time
  adaptivity (``dual``, ``estimator``, ``adaptivity``),
* benchmark problem definitions and a reporting CLI (``problems``,
  ``reports``, ``cli``, ``checks``).
"""

__version__ = "0.1.0"
