"""Second-order sequence training of neural network acoustic models.

Hessian-free (Gauss-Newton), natural-gradient and combined NGHF optimisers
driven by a preconditioned conjugate-gradient solver, with MMI, MPE and
cross-entropy losses over phone lattices.
"""

__version__ = "0.1.0"
