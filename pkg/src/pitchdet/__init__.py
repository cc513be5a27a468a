"""Ball and player detection for long-shot soccer video.

A small fully-convolutional detector (five-block backbone, top-down feature
pyramid, three prediction heads) implemented on a from-scratch NCHW autodiff
engine. Import is lazy so the CLI can configure BLAS threading before numpy
loads; grab names directly from this package or from the submodules.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    # tensor engine
    "Tensor": "tensor",
    "Tape": "tensor",
    "ShapeError": "tensor",
    "TapeError": "tensor",
    "conv2d": "tensor",
    "conv2d_forward": "tensor",
    "conv2d_backward": "tensor",
    "maxpool2x2": "tensor",
    "batchnorm": "tensor",
    "relu": "tensor",
    "sigmoid": "tensor",
    "sigmoid_values": "tensor",
    "nearest_upsample2x": "tensor",
    "add": "tensor",
    "scale": "tensor",
    "sum_all": "tensor",
    "grad_check": "tensor",
    "GradCheckReport": "tensor",
    # network
    "ModelConfig": "model",
    "NetworkWeights": "model",
    "NetworkOutputs": "model",
    "WeightFormatError": "model",
    "build_network": "model",
    "forward": "model",
    "save_weights": "model",
    "load_weights": "model",
    "parameter_count": "model",
    # decoding
    "DecoderConfig": "decode",
    "BallDetection": "decode",
    "PlayerDetection": "decode",
    "nms": "decode",
    "decode_ball": "decode",
    "decode_players": "decode",
    "decode_outputs": "decode",
    # loss / target assignment
    "GroundTruthFrame": "data",
    "TargetAssignment": "loss",
    "LossWeights": "loss",
    "LossBreakdown": "loss",
    "build_targets": "loss",
    "bce_loss": "loss",
    "smooth_l1_loss": "loss",
    "hard_negative_mining": "loss",
    "total_loss": "loss",
    # training
    "TrainConfig": "training",
    "AugmentationSpec": "training",
    "AdamState": "training",
    "LossLogRow": "training",
    "TrainResult": "training",
    "NumericalError": "training",
    "adam_step": "training",
    "lr_schedule": "training",
    "bilinear_resize": "training",
    "augment": "training",
    "derived_crop_size": "training",
    "train": "training",
    "save_training_state": "training",
    "load_training_state": "training",
    # evaluation
    "EvaluationError": "evaluation",
    "MatchConfig": "evaluation",
    "PRCurve": "evaluation",
    "APReport": "evaluation",
    "iou": "evaluation",
    "corner_box": "evaluation",
    "match_frame": "evaluation",
    "average_precision": "evaluation",
    "evaluate": "evaluation",
    "write_eval_report": "evaluation",
    "write_pr_points": "evaluation",
    # dataset io
    "AnnotationError": "data",
    "ImageFormatError": "data",
    "Dataset": "data",
    "SyntheticSceneSpec": "data",
    "load_annotations": "data",
    "save_annotations": "data",
    "read_image": "data",
    "write_image": "data",
    "read_ppm": "data",
    "write_ppm": "data",
    "load_image": "data",
    "generate_synthetic_dataset": "data",
    "split_dataset": "data",
    "pad_to_stride": "data",
    # pipeline
    "FrameDetections": "pipeline",
    "detect_array": "pipeline",
    "detect_image": "pipeline",
    "write_detections": "pipeline",
    "read_detections": "pipeline",
    "dump_confidence_maps": "pipeline",
}


def __getattr__(name: str):
    module_name = _EXPORTS.get(name)
    if module_name is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(import_module(f".{module_name}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
