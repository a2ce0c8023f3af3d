"""Exemplar-guided material assignment for part-segmented 3D shapes.

Stages: shape loading and UV normalization (``shapelib``), viewpoint grids
(``camera``), rasterization (``raster``), exemplar standardization
(``exemplar``), HOG retrieval (``hogindex``), silhouette flow
(``flowrefine``), dense CRF cleanup (``densecrf``), substance maps
(``substance``), material matching (``material``), multitask losses
(``multitask``), training-scene sampling (``synthgen``) and orchestration
(``pipeline``, ``cli``).
"""

__version__ = "0.1.0"
