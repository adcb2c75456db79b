"""Test-time adaptation by feature redundancy elimination.

Two adaptation objectives over a frozen-architecture classifier:

* a direct one that minimizes the redundancy score of each test batch's
  embedding features, and
* a graph-based one that splits the feature relation graph into attention and
  redundancy parts, propagates both through a one-layer graph convolution, and
  jointly optimizes a center-contrastive representation loss and an
  entropy/negative-learning prediction loss over reliability-filtered samples.

Plus simple baselines (frozen source, batch-statistic recalibration, entropy
minimization), corruption/label-shift stream pipelines, and an experiment
harness with CLI.
"""

from .engine import (
    METHODS,
    AdaptationConfig,
    AdaptationRecord,
    adapt_step,
    baseline_bn_recal,
    baseline_entropy_min,
    init_state,
    run_stream,
)
from .data import (
    ArrayDataset,
    CorruptionSpec,
    LongTailSpec,
    StreamBatch,
    build_stream,
    corrupt,
    load_dataset,
    longtail_subsample,
    save_dataset,
)
from .filters import consistency_filter, entropy, soft_pseudo_labels, topk_per_class
from .model_adapter import ParamPolicy, SplitModel, split, trainable_params
from .objectives import (
    ClassCenters,
    LossBreakdown,
    class_centers,
    contrastive_loss,
    gfret_loss,
    prediction_loss,
)
from .redundancy import (
    NrsTrace,
    RedundancyScore,
    column_normalize,
    nrs_update,
    redundancy_score,
    sfret_loss,
)
from .relation_graph import (
    GraphPair,
    MaskMatrix,
    PropagatedBatch,
    decompose,
    feature_graph,
    identity_mask,
    normalize_graph,
    propagate,
)

__version__ = "0.1.0"
