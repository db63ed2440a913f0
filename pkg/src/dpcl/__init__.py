"""Domain-projected contrastive learning for generalized semantic segmentation.

The package trains a segmentation model on one synthetic source domain so it
holds up on unseen style-shifted domains: a self-supervised projection
autoencoder maps inputs back toward the source distribution, multi-level
contrastive losses (pixel-to-pixel via transition-probability-matrix matching,
pixel-to-class, instance-to-class) shape the features, and test-time
adaptation refines the projected input image with all networks frozen.
"""

from .config import RunConfig
from .metrics import ConfusionMatrix, miou
from .projection import (
    ProjectionNet,
    StyleCenters,
    StyleStats,
    adain_renormalize,
    fit_style_centers,
    instance_normalize,
    nearest_center,
    project,
    reconstruct,
)
from .prototypes import (
    InstancePrototype,
    PrototypeBank,
    class_prototypes_from_batch,
    connected_regions,
    divergence_loss,
    instance_prototypes,
    prototype_predict,
)
from .contrast import (
    SampledPixelSet,
    TransitionMatrices,
    build_transition_matrices,
    instance_to_class_loss,
    js_divergence,
    loss_landscape,
    mlcl_loss,
    pixel_to_class_loss,
    pixel_to_pixel_loss,
    sample_pixels,
    supervised_contrastive_loss,
)
from .scenes import (
    IGNORE,
    AugConfig,
    BenchmarkConfig,
    DomainData,
    DomainStyle,
    LabeledImage,
    SceneSpec,
    apply_domain_style,
    augment,
    build_benchmark,
    generate_scene,
)
from .segmenter import SegModel, fused_prediction, task_loss
from .training import TrainConfig, poly_lr, train_segmentation, train_ssdp
from .tta import TtaConfig, entropy_loss, pseudo_label, tta_refine
from .utils import ConfigError

__version__ = "0.1.0"
