"""Named bundles of config values.

``desk`` is the scale every acceptance experiment runs at: a narrow two-block
network on 32x32 phantoms with a learning rate plain SGD can use.  The
full-scale settings (sigma 1e-4 for 10 x 5 site-rounds) barely move a fresh
network in that many steps, and a full-size run takes hours on one core.
"""

DESK = {
    "model.blocks": "2",
    "model.channels": "8",
    "train.sigma": "0.05",
    "train.batch": "8",
    "train.transmissions": "8",
    "train.site_rounds": "2",
    "train.patch": "32",
    "train.stride": "32",
    "data.size": "32",
    "data.n_train": "48",
    "data.n_test": "16",
    "data.n_char": "16",
    "institutions": "1,2,3",
}

PRESETS = {"desk": DESK}
