"""Multi-modal group-cohesion regression: per-modality epsilon-SVR, late
fusion (uniform or grid-searched weights), and an MSE evaluation matrix."""

from .dataset import (
    CohesionLabel,
    LabeledDataset,
    SynthConfig,
    balance_downsample,
    denormalize_prediction,
    normalize_label,
    synth_generate,
)
from .errors import CohesionError
from .evaluation import (
    EvaluationReport,
    MatrixConfig,
    ReportRow,
    mse,
    per_level_mse,
    render_report,
    run_experiment_matrix,
)
from .feature_store import (
    FACE,
    SCENE,
    SKELETON,
    FeatureRecord,
    ModalitySpec,
    Standardizer,
    apply_standardizer,
    average_face_vectors,
    fit_standardizer,
    parse_feature_file,
    write_feature_file,
)
from .fusion import (
    FusionWeights,
    ModalityPredictions,
    build_predictions,
    fuse_average,
    fuse_weighted,
    grid_candidates,
    grid_search_weights,
)
from .svr import (
    DualSolution,
    KernelSpec,
    SvrHyperparams,
    SvrModel,
    dual_objective,
    kernel_eval,
    predict_batch,
    predict_svr,
    solve_dual,
    solve_dual_projected,
    train_svr,
)

__version__ = "0.1.0"
