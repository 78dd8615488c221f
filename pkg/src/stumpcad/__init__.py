"""stumpcad: three-layer CSG modeling, fitting and export.

Solids are primitives plus three binary connection matrices (complement,
intersection, union). The package converts arbitrary CSG trees into this
form exactly, fits the matrices to sampled occupancy by discrete and
continuous optimization, and exports editable OpenSCAD programs, meshes and
occupancy grids.
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    DEFAULT_ETA,
    DEFAULT_PSI,
    DEFAULT_WORLD_BOX,
    Kind,
    Pose,
    Primitive,
    Sharpness,
    box,
    cone,
    cylinder,
    from_local,
    occupancy_hard,
    occupancy_soft,
    sdf,
    sdf_box,
    sdf_cone,
    sdf_cylinder,
    sdf_sphere,
    sphere,
    to_local,
)
from .csg import (  # noqa: F401
    EMPTY,
    UNIVERSE,
    ColumnBudgetError,
    Complement,
    CsgExpr,
    Difference,
    Empty,
    Intersection,
    Leaf,
    SoftStump,
    Stump,
    Union,
    Universe,
    binarize,
    eval_tree_hard,
    simplify_stump,
    soft_lift,
    stump_as_tree,
    stump_eval_hard,
    stump_eval_soft,
    tree_to_stump,
)
from .dsl import CsgParseError, format_csg, parse_csg  # noqa: F401
from .fit import (  # noqa: F401
    AnnealConfig,
    BpInstance,
    BudgetExceededError,
    FitReport,
    NonFiniteLossError,
    OptimConfig,
    Solver,
    StumpMatrices,
    bp_objective,
    grad_check,
    instance_from_points,
    loss_primitive,
    loss_recon,
    loss_total,
    refine_continuous,
    solve_anneal,
    solve_exhaustive,
    solve_minterm,
)
from .sampling import (  # noqa: F401
    InfeasibleBalanceError,
    Provenance,
    TestPointSet,
    bbox_of_expr,
    chamfer_l2,
    sample_balanced,
    sample_surface,
    sample_uniform,
)
from .export import (  # noqa: F401
    Mesh,
    OccupancyGrid,
    ScadParseError,
    SchemaError,
    export_openscad,
    import_openscad,
    load_stump,
    marching_cubes,
    rasterize,
    save_stump,
    stump_from_json,
    stump_to_json,
)


def toy_shape_paths():
    """Paths of the bundled toy .csg programs, sorted by name."""
    from importlib import resources

    root = resources.files(__name__) / "data" / "toys"
    return sorted(p for p in root.iterdir() if p.name.endswith(".csg"))
