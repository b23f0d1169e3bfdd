"""ibflow: immersed-boundary incompressible flow in vessel geometries.

Pipeline: triangulated vessel surface -> refined Cartesian tet mesh ->
marker-coupled fractional-step Navier-Stokes -> wall shear stress and
visualization output.
"""
from .errors import (
    ConfigError,
    CouplingError,
    InflowError,
    MeshError,
    PipelineError,
    PostError,
    SolverError,
    SurfaceError,
)
from .geometry import (
    Cap,
    MarkerSet,
    TriangleSurface,
    detect_caps,
    distance_band,
    load_surface,
    point_inside,
    resample_markers,
    surface_from_triangles,
    write_stl,
)
from .boxmesh import (
    BoundaryTags,
    TetMesh,
    bisect_tets,
    build_box_mesh,
    check_conforming,
    load_mesh,
    lumped_volumes,
    plan_box,
    refine_near_boundary,
    save_mesh,
    tag_boundary_nodes,
)

__version__ = "0.1.0"

__all__ = [
    "Cap",
    "MarkerSet",
    "TriangleSurface",
    "detect_caps",
    "distance_band",
    "load_surface",
    "point_inside",
    "resample_markers",
    "surface_from_triangles",
    "write_stl",
    "BoundaryTags",
    "TetMesh",
    "bisect_tets",
    "build_box_mesh",
    "check_conforming",
    "load_mesh",
    "lumped_volumes",
    "plan_box",
    "refine_near_boundary",
    "save_mesh",
    "tag_boundary_nodes",
    "PipelineError",
    "SurfaceError",
    "MeshError",
    "CouplingError",
    "SolverError",
    "InflowError",
    "PostError",
    "ConfigError",
    "__version__",
]
