"""nymrec: privacy-enhanced matrix factorization behind shared group identities.

Users adopt pseudonymous group identities (nyms); the server factorizes
only per-(nym, item) rating counts and means, never individual ratings.
"""

from .baseline import UserFactorModel, als_factorize, make_baseline_predictor, predict_baseline
from .driver import (AdaptiveConfig, AdaptiveStage, BlcResult, RunTrace,
                     Schedule, StagedResult, make_predictor, predict,
                     predict_local, run_blc, run_blc_adaptive, run_blc_grown)
from .factorization import (DivergenceError, FactorModel, Hyperparams,
                            aggregate_objective, factorize, full_objective,
                            init_model, load_model, save_model,
                            update_item_factors, update_nym_factors)
from .metrics import (PrivacyReport, association_probability,
                      guessing_probability, privacy_report, rmse)
from .nyms import (NymAggregates, NymAssignment, aggregate, choose_nym,
                   load_assignment, nym_residuals, random_assignment,
                   save_aggregates, save_assignment, update_all_nyms)
from .ratings import (DuplicateRatingError, ParseError, RatingsError,
                      SparseRatings, SplitSpec, load_ratings, load_triplets,
                      remove_entries, save_ratings, split)
from .synthetic import SyntheticInstance, SyntheticSpec, generate

__version__ = "0.1.0"
