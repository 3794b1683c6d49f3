"""Compressive coded random access: joint sparse activity detection,
channel estimation and data detection on an OFDM control band, coupled to
a coded-slotted-ALOHA MAC with successive interference cancellation, plus
the density-evolution and rate-bound analysis companions."""

from .config import (ConfigError, SystemConfig, centered_band, data_band,
                     data_slot_subcarriers, load_config, stream_rng,
                     validate, with_params)
from .signal import (ChannelRealization, PreambleSet, TxPayload, circ_apply,
                     fft_u, gen_channels, gen_patterns, gen_payload,
                     gen_preamble_set, ifft_u, synthesize_rx)
from .recovery import (ActivityEstimate, MeasurementOperator, SolverOptions,
                       bpdn_solve, calibrate_threshold, default_epsilon,
                       detect_activity, estimate_pmd_pfa, hicosamp_solve,
                       measure_control)
from .mac import (FrameOptions, FrameResult, SlotGraph, build_graph,
                  run_abstract_load_frame, run_frame, run_sic, throughput)
from .analysis import (CaptureTable, DEResult, and_or_tree, c1_of_delta,
                       capture_table_from_phy, de_for_load, de_threshold,
                       edge_from_node, expected_log_term,
                       rate_bound_collision, rate_bound_singleton,
                       rayleigh_bpsk_ser, slot_edge_dist, RateBoundInputs)

__version__ = "0.1.0"
