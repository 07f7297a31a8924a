"""
Shared representations on synthetic bimodal data
================================================

Generates paired EEG-like and eye-like features from one latent and runs the
three evaluation protocols: both modalities in (BDAE), one modality in with
both reconstructed (DAE), and training on one modality's codes while testing
on the other's.

Takes about ten seconds.
"""
from mmaffect import experiments as ex

data = ex.generate_synthetic(ex.SynthSpec(seed=0))
print({k: v.shape for k, v in data.items()})
split = ex.SplitRule("seed")  # clips 1-9 train, 10-15 test

fac = ex.run_multimodal_facilitation(data, split, seed=0)
print(fac.to_text().split("\n\n")[1])

uni = ex.run_unimodal_enhancement(data, split, seed=0)
print(uni.to_text().split("\n\n")[1])

# The permuted rows train on shuffled labels and should sit near chance.
cross = ex.run_cross_modal(data, split, seed=0)
print(cross.to_text().split("\n\n")[1])
print("chance: %.2f%%" % (100 * cross.chance))
