"""Oracle-free incremental anomaly learning on frozen-backbone features.

Start from a small trusted seed of normal images, score candidates by k-NN
distance to a coreset memory of patch embeddings, admit new pseudo-normals
only through dual z-score gates (distance + posterior-variance uncertainty),
and grow both the memory and a lightweight adapter round by round.
"""

from .adapter import (AdamState, AdapterParams, PrototypeSet, ScaleParams,
                      forward, init_adapter, loss_gradient, prototype_loss,
                      warmup)
from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .config import RunConfig, make_config
from .dataio import (LABEL_ANOMALY, LABEL_NORMAL, FilterBank, Manifest,
                     ManifestEntry, MultiScaleFeatures, PatchEmbeddings,
                     SplitResult, featurize_builtin, load_image,
                     load_manifest, read_embeddings, split_seed_pool,
                     write_embeddings)
from .errors import (ConfigError, CoregateError, DataError, FormatError,
                     NumericError)
from .gating import Candidate, GateCalibration, GateVerdict, calibrate, gate, select
from .memory import MemoryBank, build_memory, coreset_greedy
from .metrics import EvalReport, aggregate, evaluate, pr_auc, roc_auc, youden_threshold
from .rounds import (ContaminationReport, RoundConfig, RoundState,
                     checkpoint_metric, run_rounds)
from .scoring import ScoreResult, heatmap, score_image
from .swag import SwagState, sample_adapter, snapshot, uncertainty
from .synthlab import (SynthData, SynthSpec, direction_of_effect, generate,
                       sweep_gate_rates, verify_strict_purity)

__version__ = "0.1.0"
