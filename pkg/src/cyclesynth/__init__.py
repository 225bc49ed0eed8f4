"""Co-design of thermodynamic cycle structures and operating parameters.

Subpackages:
    fluids     analytic reference working fluid
    nn         dense-network machinery (MLPs, Adam, serialization)
    surrogate  neural property surrogate pipeline
    grammar    grammar-constrained cycle graphs
    decoder    simultaneous state-point solving and performance metrics
    worker     Bayesian-optimization parameter search (low-level Worker)
    agent      PPO structure search (high-level Manager) and baselines
    harness    experiment configuration, orchestration, exports
"""

__version__ = "0.1.0"
