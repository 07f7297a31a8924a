"""
Band power and differential entropy
===================================

Per-band PSD and DE features on signals whose answers are known.
"""
import math

import numpy as np

from mmaffect import features as ft
from mmaffect.features import EEG_BANDS, SignalWindow
from mmaffect.numeric import RngStream

fs = 200.0
t = np.arange(int(2 * fs)) / fs
names = [b.name for b in EEG_BANDS]

# A 10 Hz sine lands in alpha.
psd = ft.psd_bands(SignalWindow(np.sin(2 * np.pi * 10 * t), fs))
print("10 Hz tone:", {n: round(float(v), 5) for n, v in zip(names, psd)})

# White noise has the same density in every band: 2/fs for unit variance.
noise = RngStream(0).normal(10_000)
print("white noise:", {n: round(float(v), 4) for n, v in zip(names, ft.psd_bands(SignalWindow(noise, fs)))}, "expected", 2 / fs)

# For Gaussian noise the DE of a band is 0.5*ln(2*pi*e*var). Doubling the
# amplitude adds ln 2 to every band.
de = ft.de_bands(SignalWindow(noise, fs))
de2 = ft.de_bands(SignalWindow(2 * noise, fs))
print("DE:", {n: round(float(v), 3) for n, v in zip(names, de)})
print("shift after doubling: %s (ln 2 = %.4f)" % (np.round(de2 - de, 4), math.log(2)))

# One second of 62 channels gives 310 PSD and 310 DE columns.
window = RngStream(1).normal((200, 62))
feats, cols = ft.eeg_window_features(window, fs, [f"ch{i}" for i in range(62)])
print(len(cols), "columns, e.g.", cols[:2], "...", cols[-1])
