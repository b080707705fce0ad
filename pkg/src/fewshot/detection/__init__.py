"""Few-shot object detection on synthetic shape scenes: a toy anchor-grid detector and YOLOMAML."""
from .boxes import (
    AnnotationError,
    BoundingBox,
    Detection,
    F1Score,
    f1_score,
    iou,
    iou_matrix,
    kmeans_anchors,
    match_detections,
    nms,
)
from .model import (
    DetectorConfig,
    LossComponents,
    LossWeights,
    build_targets,
    decode_and_nms,
    decode_box,
    detect,
    detection_loss,
    detector_forward,
    detector_head_forward,
    encode_box,
    extract_features,
    fit_anchors,
    freeze,
    init_detector,
)
from .shapes import (
    DetectionDataset,
    DetectionEpisode,
    export_detection_dataset,
    format_annotation,
    generate_shapes_dataset,
    load_detection_directory,
    parse_annotation,
    sample_detection_episode,
)
from .train import (
    TELEMETRY_COLUMNS,
    NonFiniteLossError,
    YoloMamlConfig,
    adapt_and_evaluate,
    evaluate_f1,
    telemetry_csv,
    train_detector,
    write_telemetry,
    yolomaml_outer_gradient,
    yolomaml_train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
