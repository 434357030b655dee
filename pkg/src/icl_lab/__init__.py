"""Linear-attention transformers trained in context on noisy linear regression.

Modules: ``linalg`` (small dense solvers), ``tasks`` (episode sampling),
``model`` (Full / Diag / GD++ forward passes), ``training`` (hand-derived
gradients and Adam), ``baselines`` (ridge family), ``analysis`` (implicit
linear models, constructions, evaluation) and ``cli``.
"""

__version__ = "0.1.0"
