"""Delta hedging with neural networks: learn the hedge directly, or learn a
correction on top of the Black-Scholes delta, and compare both against the
Black-Scholes benchmark on simulated or ingested option panels."""

__version__ = "0.1.0"

from .bs import EuroOptionTerms, GreekSet, black_scholes, bs_price, bs_price_greeks, implied_vol
from .data import (
    FEATURE_SETS, FeatureSpec, FilterPolicy, SampleSet, SplitPlan, apply_filters, assign_delta_bucket,
    assign_ttm_bucket, build_hedge_samples, ingest_csv, make_split, samples_from_panel,
)
from .evaluation import GainReport, bucketed_report, gain_ratio, ols_oracle
from .heston import HestonParams, heston_call_put, heston_price
from .learner import Objective, TrainPlan, TrainedModel, hedge_loss, load_model, predict_hedge, save_model, train
from .market import GbmParams, Lattice, MarketPanel, simulate_gbm_panel, simulate_heston_panel
from .neural import NetConfig, Network, OptimState, adam_step, backward, forward, init_network
