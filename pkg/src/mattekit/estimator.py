"""Scikit-learn style wrapper around model construction, training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import CompositeSample, DatasetConfig
from .guided_filter import guided_filter, parse_refine
from .losses import LossConfig
from .model import Stage1Config, Stage2Config, build_model, predict
from .training import TrainPlan, train
from .validation import check_image, check_sample_lists, check_trimap


def predict_matte(model, image, trimap, refine="stage2"):
    """Alpha for one image; ``refine`` is ``none``, ``stage2`` or ``guided[:r=..,eps=..]``."""
    mode, opts = parse_refine(refine) if isinstance(refine, str) else refine
    image = check_image(image)
    trimap = check_trimap(trimap, image.shape[:2])
    alpha = predict(model, image, trimap, refine=(mode == "stage2"))
    if mode == "guided":
        alpha = guided_filter(image, alpha, r=opts["r"], eps=opts["eps"]).astype(np.float32)
    return alpha


class DeepMattingEstimator(BaseEstimator):
    """Two-stage matting network with the fit / predict interface.

    ``fit`` takes a list of :class:`CompositeSample` (as produced by
    ``synthesize_dataset``); ``predict`` takes parallel lists of RGB images and
    label trimaps and returns a list of mattes.
    """

    def __init__(self, width_multiplier=1.0, stage1_steps=1000, stage2_steps=500,
                 finetune_steps=500, batch_size=4, lr=1e-5, w_l=0.5, eps=1e-6,
                 d_min=1, d_max=25, crop_sizes=(320, 480, 640), train_size=320,
                 refine="stage2", seed=0):
        self.width_multiplier = width_multiplier
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.finetune_steps = finetune_steps
        self.batch_size = batch_size
        self.lr = lr
        self.w_l = w_l
        self.eps = eps
        self.d_min = d_min
        self.d_max = d_max
        self.crop_sizes = crop_sizes
        self.train_size = train_size
        self.refine = refine
        self.seed = seed

    def _build(self):
        wm = self.width_multiplier
        return build_model(Stage1Config(width_multiplier=wm), Stage2Config(width_multiplier=wm),
                           seed=self.seed)

    def fit(self, X, y=None):
        samples = list(X)
        if not samples or not all(isinstance(s, CompositeSample) for s in samples):
            raise ValueError("fit expects a non-empty list of CompositeSample")
        check_sample_lists([s.image for s in samples], [s.trimap for s in samples],
                           [s.alpha for s in samples])
        parse_refine(self.refine)
        plan = TrainPlan(self.stage1_steps, self.stage2_steps, self.finetune_steps,
                         self.batch_size, self.lr, self.seed)
        data_cfg = DatasetConfig(d_min=self.d_min, d_max=self.d_max, crop_sizes=self.crop_sizes,
                                 train_size=self.train_size, seed=self.seed)
        model, history, optimizer = train(self._build(), samples, plan, data_cfg,
                                          LossConfig(self.eps, self.w_l))
        self.model_ = model
        self.history_ = history
        self.optimizer_ = optimizer
        return self

    def predict(self, images, trimaps):
        check_is_fitted(self, "model_")
        images, trimaps, _ = check_sample_lists(images, trimaps)
        return [predict_matte(self.model_, im, t, self.refine) for im, t in zip(images, trimaps)]
