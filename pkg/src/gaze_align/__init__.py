"""Gaze-supervised attention alignment and region-grounded report tooling."""

from .fixations import (FixationRecord, FixationSequence, ImageViewport, RawFixationRow,
                        Source, harmonize, normalize_reflacx, pupil_area)
from .losses import (LossBreakdown, LossConfig, ensemble_logit, focal_loss, gaze_loss,
                     gaze_loss_multiscale, info_nce, total_loss)
from .metrics import AlignmentReport, alignment_report, entropy_bits, jensen_shannon, nss, pearson
from .regions import RegionActivation, RegionAtlas, aggregate_bounds, load_atlas, match_keywords
from .saliency import (AttentionMap, DistributionView, center_of_mass, multiscale,
                       render_heatmap, to_distribution)

CONDITIONS = (
    "Atelectasis", "Cardiomegaly", "Edema", "Lung Opacity", "Pleural Effusion",
    "Pneumonia", "Support Devices", "No Finding",
)

__version__ = "0.1.0"
