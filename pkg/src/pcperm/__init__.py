"""Permeability prediction from pore-boundary point clouds.

Modules: ``mediagen`` (synthetic media), ``lbm`` (flow solver), ``pointcloud``
(boundary extraction), ``net`` (PointNet regressor), ``train``,
``evaluation``, ``harness`` (pipeline and manifests), ``cli``.
"""

__version__ = "0.1.0"
