"""Person re-identification training toolkit with independently toggleable tricks."""
from .data import (AugmentConfig, DomainStyle, IdentityDataset, PKBatch, ReIDSample, augment_train,
                   generate_synthetic, make_benchmark, pk_sample, preprocess_eval, random_erase)
from .estimator import ReIDEstimator
from .evaluation import EvalResult, FeatureSet, cross_domain_eval, evaluate, export_embeddings, extract_features
from .losses import (ClassCenters, LossConfig, LossReport, center_loss, id_loss, pairwise_distances,
                     smooth_labels, total_loss, triplet_loss, update_centers)
from .nets import BackboneConfig, EmbeddingBundle, build_model, forward_infer, forward_train
from .schedule import LRSchedule, lr_at

__version__ = "0.1.0"
