"""depthbench: affine-invariant monocular depth evaluation with a toy
attention-preimage refiner, verified autodiff, and a batch CLI."""

from .combine import OracleSelection, image_oracle, pixel_average
from .errors import (DataError, DegenerateInputError, DepthbenchError,
                     FormatError, GraphError, SchemaError, ShapeError)
from .losses import (AlignResult, NormalizedDepth, TotalLoss, align_lsq,
                     loss_dice, loss_focal, loss_ssi, loss_total, normalize_gt)
from .metrics import (CategoryStats, DepthMap, ImageMetrics, ImageRecord,
                      MethodRanking, MetricReport, average_rank, build_report,
                      category_stats, compute_metrics, evaluate_dataset)
from .preimage import (CrossAttnMap, FeatureMap, FusionParams, PreimageStage,
                       SelfAttnMap, fold_cross_attention, fuse_stage,
                       pool_self_attention, synth_preimage,
                       unfold_cross_attention)
from .refiner import (RefinerConfig, RefinerParams, TrainResult, TrainStep,
                      init_params, refine_block, refine_stagewise, train_toy,
                      validation_delta1)
from .suite import gradient_suite
from .tensor import Graph, Tensor, backward, grad_check, primitive_forward

__version__ = "0.1.0"
