"""Joint brain-tumor and head-structure segmentation with convolutional RBM shape
priors, a constrained Gaussian-mixture likelihood with bias-field correction,
and a blocked Gibbs sampler."""
from .atlas import AtlasPrior, load_atlas, save_atlas
from .crbm import CrbmParams, TrainConfig, free_energy, load_checkpoint, save_checkpoint, train_crbm
from .gem import GemConfig, SimplifiedPriorConfig, run_gem
from .gibbs import ChainConfig, LabelProblem, SampleAccumulator, majority_vote, run_chain
from .kernels import BACKEND
from .labels import GMMS, LABELS, GmmMapping
from .likelihood import HyperPriors, Theta, build_constraints, build_dct_basis, default_hyperpriors
from .metrics import EvalReport, dice, evaluate, robust_hausdorff
from .mrf import MrfConfig, sample_labels_mrf
from .phantom import PhantomSpec, generate_phantom
from .pipeline import RunConfig, segment
from .volume import JointLabelState, MultiChannelImage

__version__ = "0.1.0"

__all__ = [
    "AtlasPrior", "BACKEND", "ChainConfig", "CrbmParams", "EvalReport", "GMMS", "GemConfig", "GmmMapping",
    "HyperPriors", "JointLabelState", "LABELS", "LabelProblem", "MrfConfig", "MultiChannelImage", "PhantomSpec",
    "RunConfig", "SampleAccumulator", "SimplifiedPriorConfig", "Theta", "TrainConfig", "build_constraints",
    "build_dct_basis", "default_hyperpriors", "dice", "evaluate", "free_energy", "generate_phantom", "load_atlas",
    "load_checkpoint", "majority_vote", "robust_hausdorff", "run_chain", "run_gem", "sample_labels_mrf",
    "save_atlas", "save_checkpoint", "segment", "train_crbm",
]
