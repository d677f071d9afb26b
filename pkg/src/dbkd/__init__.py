"""Black-box backdoor scanner: simulated-annealing trigger search over
attack templates, driven only by forward-pass queries."""

__version__ = "0.1.0"

from .annealing import AnnealConfig, AnnealTrace, accept, run_annealing, temperature
from .detector import (DetectionReport, ScanConfig, TargetScanResult,
                       scan_all2one, scan_source_specific, verdict)
from .objective import (All2AllOneShift, All2One, ObjectiveConfig, One2One,
                        asr, casr, margin, phi)
from .oracle import ModelOracle, NativeNet, NativeOracle, load_net, predict_batch, save_net
from .tensors import (ImageTensor, LabeledSample, ProbVector, RandomSource,
                      ValidationBatch, clamp_image)
from .triggers import (BlendTrigger, NoiseTrigger, PatchTrigger, SearchSpaceConfig,
                       Trigger, WarpTrigger, apply_trigger, random_neighbor,
                       random_trigger, trigger_from_json, trigger_mask, trigger_to_json,
                       upsample_warp_field)

__all__ = [name for name in dir() if not name.startswith("_")]
