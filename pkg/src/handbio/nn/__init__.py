"""Minimal NumPy network engine and the two-stream gender model."""
from .layers import (AvgPool1d, Conv2d, DepthConcat, Dropout, Flatten, Layer, Linear,
                     MaxPool2d, ParameterError, ReLU, ShapeError, SoftmaxCrossEntropy,
                     StateError)
from .model import (CLASSES, ConvSpec, LoadError, StreamSpec, TwoStreamConfig, TwoStreamModel,
                    build_two_stream, desk_config, forward_features, load_backbone, load_model,
                    luma_init_conv1, paper_config, predict_gender, preset_config, save_model,
                    to_nchw)
from .train import (SGD, DataError, TrainHyper, TrainingError, learning_rates, train_joint,
                    train_stage1, train_two_stage, write_log)
