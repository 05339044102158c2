"""Prediction of FFR pullback curves along coronary arteries from per-point
artery characteristics, trained with positional (EMD) and histogram losses,
evaluated with AUPC and the pullback pressure gradient index."""

__version__ = "0.1.0"
