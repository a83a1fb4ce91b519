"""Desk-scale adversarial transfer learning: a numpy autodiff engine, a tiny
ViT, parameter-efficient finetuning, PGD attacks and the robust linear
initialisation pipeline."""

__version__ = "0.1.0"
