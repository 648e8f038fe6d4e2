import math

import numpy as np

from fem_core import NodalField

COSH_ONE = math.cosh(1.0)


def constant_field(mesh, value, p=None):
    return NodalField(mesh, np.full(mesh.num_vertices, float(value)), label='constant', p=p)


def cosh_flux(curve):
    """du/dnu of u = cosh(x1) on the boundary of the unit disk."""
    def flux(s):
        x = curve.point(s)
        return np.sinh(x[..., 0]) * curve.normal(s)[..., 0]
    return flux


def bump_field(mesh, centers, heights, width=0.1, base=1.0, p=None):
    """base + sum_j height_j exp(-|x - c_j|^2 / width^2) at the vertices."""
    values = np.full(mesh.num_vertices, float(base))
    for center, height in zip(centers, heights):
        d2 = np.sum((mesh.vertices - np.asarray(center, dtype=float)) ** 2, axis=1)
        values += height * np.exp(-d2 / width ** 2)
    return NodalField(mesh, values, label='bumps', p=p)
