"""The automated bidding engine: RTB = CPA * pcvr * AF * BF * CF * Alpha."""

from .alpha import (ACTIONS, N_ACTIONS, NEUTRAL_ACTION, AlphaPolicy, AlphaState, CpaTrackingMDP,
                    alpha_reward, alpha_step, alpha_to_factor, discretize, optimal_agreement,
                    pretrained_prior, train_on_mdp, value_iteration)
from .calibration import Calibrator, advertiser_scale, fit_calibrator, identity_calibrator, pool_adjacent_violators
from .factors import (AFKey, AFModel, Pacing, PacingState, af_table_from_arrays, compute_af, compute_bf,
                      compute_bf_many)
from .strategy import (BidContext, BidDecision, compute_rtb, quantize_bid, roi_at, roi_to_target_cpa,
                       skipped_decision, write_bid_log)

__all__ = [
    "ACTIONS", "N_ACTIONS", "NEUTRAL_ACTION", "AlphaPolicy", "AlphaState", "CpaTrackingMDP",
    "alpha_reward", "alpha_step", "alpha_to_factor", "discretize", "optimal_agreement",
    "pretrained_prior", "train_on_mdp", "value_iteration",
    "Calibrator", "advertiser_scale", "fit_calibrator", "identity_calibrator", "pool_adjacent_violators",
    "AFKey", "AFModel", "Pacing", "PacingState", "af_table_from_arrays", "compute_af", "compute_bf", "compute_bf_many",
    "BidContext", "BidDecision", "compute_rtb", "quantize_bid", "roi_at", "roi_to_target_cpa",
    "skipped_decision", "write_bid_log",
]
