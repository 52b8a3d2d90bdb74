"""Multi-step consistency sampling and consistency distillation on analytic targets.

Modules: ``forward_process`` (OU kernel, schedules), ``targets`` (Gaussian
mixtures and their noised marginals), ``score_field`` (exact and perturbed
scores), ``pf_ode`` (flow integration and consistency maps), ``sampler``
(multi-step generation and exact output laws), ``distillation`` (training
and gap measurement), ``metrics`` (KL estimators and bound formulas) and
``harness`` (config, experiments, CLI).
"""

__version__ = "0.1.0"
