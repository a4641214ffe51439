"""Model-heterogeneous one-shot federated learning at desk scale."""

from .client import ClientConfig, ClientKind, ClassifierUpdate, GenerativeUpdate
from .data import Dataset, dirichlet_partition, label_histogram, load_idx, make_blobs
from .metrics import EvalReport, top1_accuracy, tv_distance
from .models import ConditionalVAE, CVAEDecoder, MLPClassifier
from .server import (
    FusionConfig,
    GlobalModel,
    SyntheticDataset,
    SyntheticSampleFilter,
    Variant,
    fuse,
    generate_samples,
    init_global,
    optimize_samples,
)

__version__ = "0.1.0"
