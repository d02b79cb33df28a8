"""Training-time structure heads for a small CNN classifier.

The package couples a from-scratch reverse-mode autodiff engine with a
compact convolutional classifier and two detachable training-time heads:
a mask head regressed onto correlation pseudo-masks built from same-class
positive images, and a context head predicting per-cell polar coordinates
around the mask's peak.  Both heads vanish at inference.
"""

__version__ = "0.1.0"
