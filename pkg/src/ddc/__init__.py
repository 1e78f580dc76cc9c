"""Deep divergence-based clustering on a small numpy autodiff engine."""
from .data import Dataset, kmeans, load_dense_csv, load_idx, load_mnist_dir, make_circle_ring
from .kernel import KernelMatrix, gaussian_kernel, hidden_kernel, pairwise_sq_dist, sigma_rule
from .loss import LossBreakdown, cs_term, ddc_loss, triu_term
from .metrics import acc, hungarian, nmi
from .network import Network, build_arch, guided_backprop, init_he, load_checkpoint, save_checkpoint
from .trainer import RunResult, TrainConfig, train_multi, train_once, vote_ensemble

__version__ = "0.1.0"

__all__ = [
    "Dataset", "KernelMatrix", "LossBreakdown", "Network", "RunResult", "TrainConfig",
    "acc", "build_arch", "cs_term", "ddc_loss", "gaussian_kernel", "guided_backprop",
    "hidden_kernel", "hungarian", "init_he", "kmeans", "load_checkpoint", "load_dense_csv",
    "load_idx", "load_mnist_dir", "make_circle_ring", "nmi", "pairwise_sq_dist",
    "save_checkpoint", "sigma_rule", "train_multi", "train_once", "triu_term", "vote_ensemble",
]
