"""Mask-proposal selection toolkit.

Library layers:

- masks / proposals: binary-mask geometry, RLE codecs, everything-mode
  postprocessing, and ground-truth labeling
- nn / model: hand-differentiated kernels and the attention-fusion selection
  network with its IoU and IoP heads, losses, and selection strategies
- metrics: gIoU / cIoU / ncIoU evaluation reports
- datagen: the question/mask dataset generation pipeline with a deterministic
  mock text provider
- synth / train: desk-scale synthetic tasks plus the training, evaluation,
  and gradient-check harness
"""

from .masks import (
    BinaryMask,
    FeatureGrid,
    coverage_weights,
    iou,
    iop,
    mask_pool,
    overlap_counts,
    resize_nearest,
    rle_decode,
    rle_encode,
    union_masks,
)
from .proposals import (
    MaskProposal,
    ProposalSet,
    TargetVector,
    filter_by_predicted_iou,
    label_targets,
    load_proposal_set,
    nms,
    postprocess,
    save_proposal_set,
)
from .model import (
    ModelConfig,
    SelectionModel,
    SelectionOutput,
    load_checkpoint,
    loss_iou,
    loss_iop,
    predict_mask,
    save_checkpoint,
    select_threshold_from_top5,
    select_threshold_iop,
    select_top1_iou,
    select_union_top1_threshold,
    total_loss,
)
from .metrics import EvalSample, MetricsReport, build_report, ciou, giou, nciou
from .train import RunConfig, evaluate, gradcheck, train

__version__ = "0.1.0"
