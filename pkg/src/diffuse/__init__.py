"""Dif-fuse: healthy counterfactuals by fusing DDPM (inside a saliency mask)
and DDIM (outside it) after DDIM inversion, with anomaly maps, an evaluation
harness and desk-scale phantoms."""

from .anomaly import AnomalyReport, build_report, difference_map, open_close, otsu_threshold, segment
from .denoiser import (GaussianDenoiser, GaussianPrior, GmmDenoiser, GmmPrior, MlpDenoiser, TrainConfig, eps_to_x0,
                       load_checkpoint, predict_eps_gaussian, predict_eps_gmm, save_checkpoint, train_denoiser)
from .errors import (ConsistencyError, DataError, DiffuseError, DimensionError, FormatError, ParameterError,
                     TrainingError)
from .grid import convolve_same, hadamard_mix, percentile_value, read_rfi, write_pgm, write_rfi
from .metrics import dice, extract_features, iou, kid
from .phantom import LabeledSample, PhantomParams, generate_sample, generate_split
from .saliency import LesionScorer, SaliencyConfig, load_mask, make_mask, occlusion_saliency, train_lesion_scorer
from .sampler import (SamplerRun, ablation_pipeline, ddim_invert, ddim_step, ddpm_step, diffuse_counterfactual)
from .schedule import NoiseSchedule, linear_schedule, q_sample

__version__ = "0.1.0"
