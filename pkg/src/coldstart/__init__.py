"""Budget-constrained rater selection and rating estimation for new items."""

from .data import (
    Rating,
    RatingDataset,
    RaterPool,
    load_ratings,
    save_ratings,
    split_items,
    rater_pool,
    reveal,
)
from .lfm import (
    LatentModel,
    TrainConfig,
    UserVariances,
    train_lfm,
    predict,
    augment,
    estimate_user_variances,
    save_model,
    load_model,
)
from .estimators import (
    ItemEstimate,
    RevealedRatings,
    build_revealed,
    least_squares_estimate,
    gls_estimate,
    similarity_estimate,
    predict_new_item,
)
from .design import (
    DesignObjective,
    SteepnessReport,
    objective_value,
    expected_mse,
    phi,
    steepness,
    check_supermodular,
)
from .selection import (
    SelectionRequest,
    SelectionResult,
    select,
    bgs1,
    bgs2,
    forward_greedy,
    cluster_select,
    random_select,
    frequent_raters,
    edgy_raters,
    early_birds,
    brute_force_optimal,
)
from .experiment import (
    SyntheticConfig,
    SweepConfig,
    SweepRow,
    generate_synthetic,
    monte_carlo_expected_mse,
    evaluate_rmse,
    run_sweep,
    write_sweep_csv,
)

__version__ = "0.1.0"
