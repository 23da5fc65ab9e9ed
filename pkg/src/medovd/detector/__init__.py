from .assign import assign_regions
from .losses import (
    LossBreakdown,
    contrastive_loss,
    dfl_loss,
    iou_loss,
    similarity,
    similarity_matrix,
    total_loss,
)
from .model import (
    ConfigurationError,
    DetectorConfig,
    HeadOutput,
    ImageTargets,
    ToyDetector,
    detection_loss,
    load_checkpoint,
    postprocess,
    predict,
    prepare_images,
    save_checkpoint,
)
