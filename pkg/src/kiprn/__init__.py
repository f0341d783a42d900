"""Learned image-pyramid resizer with kernel-inversed residual branches,
a shared-weight multiscale classifier, and the numpy autodiff core they run on."""
from .checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from .classifier import Backbone, BackboneConfig, backbone_forward, cam, multiscale_predict
from .engine import PdrModel, TrainConfig, ablate, benchmark, evaluate, train
from .optim import AdamW, adamw_step
from .resizer import ImagePyramid, Kiprn, KiprnConfig, kernel_assignment, kiprn_forward, resize_pyramid
from .synthpave import DatasetManifest, DatasetSpec, render_sample, synth_generate
from .tensor import ShapeError, Tape, Tensor, backward

__version__ = "0.1.0"
