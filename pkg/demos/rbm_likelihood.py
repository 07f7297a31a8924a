"""
Contrastive divergence on a model small enough to normalize
============================================================

A 3-visible, 2-hidden RBM has 32 joint states, so its log partition
function, log-likelihood and exact gradient can all be enumerated and used
to watch CD training do the right thing.
"""
import numpy as np

from mmaffect import rbm
from mmaffect.numeric import RngStream
from mmaffect.rbm import CdConfig, RbmParams

# Two patterns, ten copies each.
data = np.array([[1.0, 0.0, 1.0]] * 10 + [[0.0, 1.0, 0.0]] * 10)
params = RbmParams.init(3, 2, RngStream(0))
print("initial log-likelihood per row: %.4f" % rbm.exact_log_likelihood(data, params))

# At the small initial weights a long-chain CD estimate matches the enumerated gradient.
est = rbm.cd_gradient(np.tile(data, (500, 1)), params, CdConfig(k=200), RngStream(2))
print("initial model, max |CD-200 - exact| on dW: %.4f" % np.abs(est.dW - rbm.exact_gradient(data, params).dW).max())

# CD-1 in blocks of 400 epochs, checking the exact likelihood after each.
# The best possible value here is ln(1/2) = -0.693.
rng = RngStream(1)
for block in range(5):
    params = rbm.train(data, params, CdConfig(k=1, epochs=400, learning_rate=0.1), rng.child(block)).params
    print("after %4d epochs: %.4f" % (400 * (block + 1), rbm.exact_log_likelihood(data, params)))

# The model now puts most of its mass on the two training patterns.
V, logp = rbm.visible_log_probabilities(params)
p = np.exp(logp)
for v, pv in sorted(zip(V.tolist(), p), key=lambda t: -t[1])[:4]:
    print(v, "%.3f" % pv)

# Once the two modes are this sharp, Gibbs chains started at the data rarely
# cross between them, so even CD-200 is now biased.
est = rbm.cd_gradient(np.tile(data, (500, 1)), params, CdConfig(k=200), RngStream(2))
print("trained model, max |CD-200 - exact| on dW: %.4f" % np.abs(est.dW - rbm.exact_gradient(data, params).dW).max())
