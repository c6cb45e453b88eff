"""Shared synthetic fixtures for training-level tests."""
import numpy as np

from s2i import data as D
from s2i import model as M


def overfit_data(n=4, size=32, n_neurons=64, seed=0):
    imgs = D.stimulus_images(n, size, seed=seed)
    cfg = D.SynthConfig(n_neurons=n_neurons, image_size=(size, size), gain=100.0, seed=seed)
    ds = D.synth_generate(imgs, cfg)
    return ds, cfg


def overfit_model(cfg, seed=0):
    return M.build(M.default_config(cfg.n_neurons, cfg.n_bins, *cfg.image_size, stem_width=256, seed=seed))


def empty_like(ds):
    return ds.subset(np.zeros(0, dtype=np.int64), "test")
