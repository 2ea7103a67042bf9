"""Event-driven intermittent control models of mouse pointing.

Design intermittent controllers for a neuromuscular + pointer plant,
identify their parameters from recorded pointing trajectories, simulate
banks of fitted controllers to reproduce human movement variability and
score the results with RMSE and Kullback-Leibler divergence.
"""

__version__ = "0.1.0"

from .ctrlmath import (
    DesignError,
    LqrDesign,
    StateSpaceModel,
    discretize,
    expm,
    lqr_gain,
    observer_gain,
    series_connect,
    solve_care,
    steady_state,
)
from .plant import Plant, PlantSpec, build_nms, build_plant
from .icore import (
    IcController,
    IcParams,
    IcRuntime,
    REDUCED_FIXED,
    TABLE1_BOUNDS,
    TABLE1_INITIAL,
    control_output,
    design_controller,
    form_xw,
    hold_step,
    ic_step,
    observer_step,
    predict,
    reset_hold,
    trigger_check,
)
from .sim import (
    CONDITIONS,
    BankEntry,
    ModelBank,
    TargetSignal,
    TaskCondition,
    Trajectory,
    make_target,
    run_ensemble,
    simulate_2ol,
    simulate_bank,
    simulate_ic,
    trajectory_from_csv,
    trajectory_to_csv,
)
from .ident import (
    FitResult,
    IngestionError,
    Recording,
    Slice,
    build_bank,
    cost_j,
    derive_kinematics,
    fit_2ol,
    fit_slice,
    load_recording,
    pattern_search,
    slice_recording,
    train_eval_split,
)
from .analysis import (
    DensityGrid,
    KlReport,
    OlIntervalStats,
    fitts_id,
    histogram2d,
    kde2d,
    kl_divergence,
    kl_pipeline,
    ol_interval_stats,
    rmse_summary,
)
