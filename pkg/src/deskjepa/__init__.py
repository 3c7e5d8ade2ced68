"""Desk-scale workbench for latent-prediction video pretraining.

Modules: ``tensor``/``optim``/``nn`` (autodiff engine), ``vit`` (tubelet encoder),
``jepa`` and ``mae`` (paired pretraining), ``probe`` (multi-view attentive probe),
``synth`` (synthetic cine clips), ``perturb`` (ultrasound artifacts), ``harness``
and ``cli`` (experiments).
"""

__version__ = "0.1.0"
