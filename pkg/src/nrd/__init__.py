"""Two-stage SDF volume rendering and surface reconstruction lab.

A desk-scale numpy implementation of coarse-to-fine neural-SDF surface
reconstruction: a multi-resolution feature-grid field, SDF-to-density
conversions with a local scale factor, explicit rendering-bias correction,
stochastic-step gradient estimation, and mesh extraction with point-cloud
metrics — all differentiated through a small reverse-mode tape so every
training quantity is testable against finite differences and closed forms.
"""

__version__ = "0.1.0"
