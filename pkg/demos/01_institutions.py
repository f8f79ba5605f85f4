"""
Three synthetic institutions
============================

Each site draws ellipse phantoms in its own style and adds its own dose
noise.  The numbers below are what the denoiser has to beat.
"""
import numpy as np

from icp2pfl.data import make_institutions
from icp2pfl.metrics import psnr, ssim

sites = make_institutions((1, 2, 3), n_train=8, n_test=4, n_char=4, size=64, patch=64, stride=64)

for ds in sites:
    test = ds.split("test")
    p = np.mean([psnr(c, n) for c, n in zip(test.clean, test.noisy)])
    s = np.mean([ssim(c, n) for c, n in zip(test.clean, test.noisy)])
    print(f"institution {ds.k}: gain {ds.protocol.gain:.3f}  sigma {ds.protocol.sigma:.3f}  "
          f"noisy input {p:5.2f} dB / SSIM {s:.3f}")

# institution 3 is the noisiest; a model tuned only on site 1 will under-smooth it
