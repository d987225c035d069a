"""Out-of-distribution benchmarking for materials property regression with
evidential uncertainty and Monte Carlo dropout."""

__version__ = "0.1.0"

from .dataio import parse_dataset, write_dataset
from .evidential import NIGParams, der_loss, der_loss_grad, digamma, eviu_per_sample, log_gamma, nll_loss, reg_loss
from .harness import RunConfig, read_passes, run_benchmark, score_external, write_passes
from .metrics import MetricReport, d_eviu, d_mae, d_unc, eviu, mae, score, spearman, summarize
from .model import DropoutMask, ModelConfig, Weights, backward, forward, init_weights, load_weights, save_weights
from .soap import SoapConfig, aggregate_material, compute_descriptors, load_external_descriptors, soap_atomic
from .splitting import (Scenario, SplitTask, embed_2d, kmeans, loco_split, optimize_cluster_count, sparse_x_cluster,
                        sparse_x_single, sparse_y_cluster, sparse_y_single)
from .structure import CrystalStructure, LabeledDataset, Lattice, NeighborList, neighbor_list
from .synthetic import generate_synthetic
from .training import PassTensor, TrainConfig, deterministic_infer, mcd_infer, train
