"""FullDeC / PartDeC architectures, unsupervised losses, training and inference."""

from .architectures import (PARTDEC_BOTTLENECK, ArchConfig, FullDeCModel, PartDeCModel, build_model,
                            decode_complex, encode_complex)
from .losses import ENUMERATION_CAP, EnumerationCapError, fdp_sum_rate, hbf_tuple_rates, loss_fdp, loss_hbf
from .training import (Evaluation, TrainConfig, TrainingDivergedError, TrainResult, assemble, deployed_sum_rate,
                       evaluate, features, infer_fulldec, infer_partdec, input_statistics, predict, train)

__all__ = [
    "ArchConfig", "ENUMERATION_CAP", "EnumerationCapError", "Evaluation", "FullDeCModel", "PARTDEC_BOTTLENECK",
    "PartDeCModel", "TrainConfig", "TrainResult", "TrainingDivergedError", "assemble", "build_model",
    "decode_complex", "deployed_sum_rate", "encode_complex", "evaluate", "fdp_sum_rate", "features",
    "hbf_tuple_rates", "infer_fulldec", "infer_partdec", "input_statistics", "loss_fdp", "loss_hbf",
    "predict", "train",
]
