"""Shared-policy multi-agent traffic signal control.

Modules: ``netmodel`` (road networks), ``simcore`` (queue-based simulator),
``encode`` (movement-based observations), ``autodiff`` (tensors and layers),
``unicornnet`` (the shared network), ``learn`` (PPO training), ``baselines``
(classical controllers) and ``cli`` (experiment runner).
"""

__version__ = "0.1.0"
