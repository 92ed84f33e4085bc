"""Test-time compensation for extreme multivariate traffic forecasting.

A periodic data bank of training records is queried at the slot one step
ahead of every input step; a spatial attention module turns the sampled
records into compensated features that are concatenated onto the input of
a forecasting head.
"""

from .bank import PeriodicDataBank, build_bank, impute_zeros, load_bank, sample_keys, save_bank
from .compformer import CompFormer, compensate, softmax
from .evaluation import bench_attention, compute_metrics, stratified_report
from .extremeness import ExtremenessConfig, ExtremenessScore, count_zeros, input_entropy, ppmcc, stratify
from .forecaster import Forecaster, ModelConfig, TrainConfig, mae_loss, predict, train
from .ingest import SplitSpec, SyntheticSpec, generate_synthetic, load_csv, split
from .series import InputWindow, PeriodConfig, SeriesFrame, make_windows, slot_of

__version__ = "0.1.0"
