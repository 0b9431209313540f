"""Registration and morphing of shapes with divergence-free spectral flows.

A deformation is the time-one flow of a stationary velocity field built
from curls of Laplacian eigenfunctions on the unit cube, so it preserves
volume by construction.  Coefficients are estimated by expectation
maximization against a Gaussian mixture on the target points.
"""

__version__ = "0.1.0"

from .basis import (DeformationBasis, ModeIndex, dirichlet_energy, enumerate_basis,
                    evaluate_field, field_jacobian, sample_prior)
from .descriptors import (DescriptorSet, DistanceModel, build_distance_model,
                          compute_descriptors, estimate_normals, load_descriptors)
from .domain import (DomainTransform, Mesh, PointCloud, farthest_point_sample, fit_domain,
                     load_shape, pca_align, write_shape)
from .em import EmConfig, EmState, e_step, extract_correspondences, run_em
from .errors import MorphflowError
from .evaluation import GeodesicIndex, geodesic_distance, princeton_curve, surface_distance
from .flow import FlowConfig, endpoint_jacobians, extrapolate, integrate, sample_time

__all__ = [
    "DeformationBasis", "ModeIndex", "dirichlet_energy", "enumerate_basis", "evaluate_field",
    "field_jacobian", "sample_prior", "DescriptorSet", "DistanceModel", "build_distance_model",
    "compute_descriptors", "estimate_normals", "load_descriptors", "DomainTransform", "Mesh",
    "PointCloud", "farthest_point_sample", "fit_domain", "load_shape", "pca_align",
    "write_shape", "EmConfig", "EmState", "e_step", "extract_correspondences", "run_em",
    "MorphflowError", "GeodesicIndex", "geodesic_distance", "princeton_curve",
    "surface_distance", "FlowConfig", "endpoint_jacobians", "extrapolate", "integrate",
    "sample_time",
]
