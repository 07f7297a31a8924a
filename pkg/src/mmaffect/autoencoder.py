"""Stacked-RBM deep autoencoders producing shared representations.

Two architectures are built from pretrained RBMs:

``bdae``
    Both modalities in. One RBM per modality, then a joint RBM over the
    concatenated hidden probabilities. Unfolding ties every decoder weight to
    the transpose of its encoder weight.

``dae``
    One modality in, every modality out. Two stacked RBMs on the input
    modality. Only the bottom/top weight pair of the input modality is tied;
    the remaining decoder weights (including the whole pathway of the
    modality that is absent at the input) train freely.

A network is a small DAG of sigmoid layers. Each layer reads the
concatenation of named nodes and writes one or more named nodes, so the
BDAE split/merge and the DAE fan-out use the same forward/backward code.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import FeatureMatrix
from .numeric import RngStream, ShapeError, as_matrix, sigmoid
from .rbm import CdConfig, RbmParams, hidden_given_visible, reconstruction_error
from .rbm import train as train_rbm

FORMAT = "mmaffect.autoencoder"
FORMAT_VERSION = 1
SHARED = "shared"
LOSSES = ("cross_entropy", "mse")


class TieViolation(AssertionError):
    """A tied decoder weight drifted from its encoder transpose."""


@dataclass(frozen=True)
class StackSpec:
    """Layer sizes of a DAE/BDAE.

    ``modalities`` lists every modality in output order. For a DAE,
    ``input_modality`` names the one fed to the encoder; the others are only
    reconstructed.
    """

    kind: str
    modalities: tuple[tuple[str, int], ...]
    hidden_sizes: tuple[int, ...]
    shared_layer_size: int
    input_modality: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple((str(n), int(d)) for n, d in self.modalities))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        names = [n for n, _ in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError("modality names must be unique")
        if len(self.hidden_sizes) != len(self.modalities):
            raise ValueError("need exactly one hidden size per modality (stacks are two RBMs deep)")
        if min([d for _, d in self.modalities] + list(self.hidden_sizes) + [self.shared_layer_size]) < 1:
            raise ValueError("all layer sizes must be >= 1")
        if self.kind == "bdae":
            if len(self.modalities) != 2 or self.input_modality is not None:
                raise ValueError("a BDAE takes exactly two input modalities")
        elif self.kind == "dae":
            if self.input_modality not in names:
                raise ValueError("a DAE needs input_modality set to one of its modalities")
            if len(self.modalities) > 2:
                raise ValueError("a DAE reconstructs at most two modalities")
        else:
            raise ValueError(f"unknown autoencoder kind {self.kind!r}")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.modalities]

    @property
    def dims(self) -> dict[str, int]:
        return dict(self.modalities)

    @property
    def hidden(self) -> dict[str, int]:
        return dict(zip(self.names, self.hidden_sizes))

    @property
    def inputs(self) -> list[str]:
        return self.names if self.kind == "bdae" else [self.input_modality]


def default_stack_spec(kind: str, modalities: Sequence[tuple[str, int]],
                       input_modality: str | None = None) -> StackSpec:
    """Hidden size = input size rounded up to a multiple of 8; shared 64, or 128 for inputs over 1000 dims."""
    hidden = tuple(8 * math.ceil(d / 8) for _, d in modalities)
    shared = 128 if sum(d for _, d in modalities) > 1000 else 64
    return StackSpec(kind, tuple(modalities), hidden, shared, input_modality)


@dataclass
class FineTuneConfig:
    learning_rate: float = 0.05
    epochs: int = 100
    minibatch_size: int = 32
    loss: str = "cross_entropy"
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.minibatch_size < 1 or self.epochs < 0:
            raise ValueError("minibatch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class Layer:
    W: np.ndarray
    bias: np.ndarray
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]

    def copy(self) -> "Layer":
        return Layer(self.W.copy(), self.bias.copy(), self.inputs, self.outputs)


@dataclass
class DeepAutoencoder:
    kind: str
    modalities: tuple[tuple[str, int], ...]
    input_modalities: tuple[str, ...]
    node_sizes: dict[str, int]
    encoder_layers: list[Layer]
    decoder_layers: list[Layer]
    tie_map: list[tuple[int, int]]
    rbms: list[RbmParams] = field(default_factory=list)

    @property
    def layers(self) -> list[Layer]:
        return self.encoder_layers + self.decoder_layers

    def _layout(self, names) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for n in names:
            d = self.node_sizes[f"in:{n}"]
            out[n] = (start, start + d)
            start += d
        return out

    @property
    def input_layout(self) -> dict[str, tuple[int, int]]:
        return self._layout(self.input_modalities)

    @property
    def output_layout(self) -> dict[str, tuple[int, int]]:
        return self._layout([n for n, _ in self.modalities])

    @property
    def modality_layout(self) -> dict[str, dict[str, tuple[int, int]]]:
        return {"input": self.input_layout, "output": self.output_layout}

    @property
    def input_dim(self) -> int:
        return sum(self.node_sizes[f"in:{n}"] for n in self.input_modalities)

    @property
    def output_dim(self) -> int:
        return sum(d for _, d in self.modalities)

    @property
    def shared_size(self) -> int:
        return self.node_sizes[SHARED]

    def copy(self) -> "DeepAutoencoder":
        return DeepAutoencoder(self.kind, self.modalities, self.input_modalities,
                               dict(self.node_sizes), [l.copy() for l in self.encoder_layers],
                               [l.copy() for l in self.decoder_layers], list(self.tie_map),
                               [r.copy() for r in self.rbms])

    def check_ties(self) -> None:
        check_tie_rule(self)
        for e, d in self.tie_map:
            if not np.array_equal(self.decoder_layers[d].W, self.encoder_layers[e].W.T):
                raise TieViolation(f"decoder layer {d} is no longer the transpose of encoder layer {e}")

    def tied_decoders(self) -> set[int]:
        return {d for _, d in self.tie_map}


def check_tie_rule(net: DeepAutoencoder) -> None:
    """BDAE ties every layer; DAE ties only the input modality's bottom/top pair."""
    n_enc = len(net.encoder_layers)
    if net.kind == "bdae":
        if sorted(e for e, _ in net.tie_map) != list(range(n_enc)) or len(net.tie_map) != n_enc:
            raise TieViolation("a BDAE must tie every encoder layer to a decoder layer")
    elif net.kind == "dae":
        if len(net.tie_map) != 1 or net.tie_map[0][0] != 0:
            raise TieViolation("a DAE ties exactly its first encoder layer")
        d = net.tie_map[0][1]
        if net.decoder_layers[d].outputs != (f"out:{net.input_modalities[0]}",):
            raise TieViolation("a DAE's tied decoder layer must reconstruct its input modality")


# ----------------------------------------------------------------------------
# data plumbing

def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureMatrix) else as_matrix(x)


def _modality_arrays(data, names: Sequence[str], dims: Mapping[str, int]) -> dict[str, np.ndarray]:
    if not isinstance(data, Mapping):
        raise ShapeError("expected a mapping from modality name to rows")
    out = {}
    for n in names:
        if n not in data:
            raise ShapeError(f"missing modality {n!r}")
        x = _values(data[n])
        if x.shape[1] != dims[n]:
            raise ShapeError(f"modality {n!r} has {x.shape[1]} columns, expected {dims[n]}")
        out[n] = x
    rows = {x.shape[0] for x in out.values()}
    if len(rows) > 1:
        raise ShapeError("modalities have different row counts")
    return out


def _input_matrix(net: DeepAutoencoder, rows) -> np.ndarray:
    dims = {n: net.node_sizes[f"in:{n}"] for n in net.input_modalities}
    if isinstance(rows, Mapping):
        parts = _modality_arrays(rows, net.input_modalities, dims)
        return np.hstack([parts[n] for n in net.input_modalities])
    x = _values(rows)
    if x.shape[1] != net.input_dim:
        raise ShapeError(f"input has {x.shape[1]} columns, network expects {net.input_dim}")
    return x


def _target_matrix(net: DeepAutoencoder, data) -> np.ndarray:
    dims = {n: d for n, d in net.modalities}
    if isinstance(data, Mapping):
        parts = _modality_arrays(data, list(dims), dims)
        return np.hstack([parts[n] for n in dims])
    x = _values(data)
    if x.shape[1] != net.output_dim:
        raise ShapeError(f"targets have {x.shape[1]} columns, network outputs {net.output_dim}")
    return x


def _check_unit_interval(x: np.ndarray, what: str) -> None:
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError(f"{what} must be scaled to [0, 1]")


# ----------------------------------------------------------------------------
# pretraining and unfolding

def pretrain_stack(spec: StackSpec, data: Mapping, cfg: CdConfig, rng: RngStream) -> list[RbmParams]:
    """Greedy layer-wise RBM training.

    BDAE: ``[rbm_<m1>, rbm_<m2>, rbm_joint]``; DAE: ``[rbm_bottom, rbm_top]``.
    Each upper RBM is trained on hidden probabilities of the layer below.
    """
    arrays = _modality_arrays(data, spec.inputs, spec.dims)
    for n, x in arrays.items():
        _check_unit_interval(x, f"modality {n!r}")
    hidden = spec.hidden

    def fit(name, x, n_hidden):
        r = rng.child("pretrain", name)
        init = RbmParams.init(x.shape[1], n_hidden, r.child("init"))
        return train_rbm(x, init, cfg, r.child("cd")).params

    if spec.kind == "bdae":
        rbms, probs = [], []
        for n in spec.names:
            rbm = fit(n, arrays[n], hidden[n])
            rbms.append(rbm)
            probs.append(hidden_given_visible(arrays[n], rbm))
        rbms.append(fit("joint", np.hstack(probs), spec.shared_layer_size))
        return rbms
    m = spec.input_modality
    bottom = fit(m, arrays[m], hidden[m])
    top = fit(f"{m}_top", hidden_given_visible(arrays[m], bottom), spec.shared_layer_size)
    return [bottom, top]


def pretrain_errors(spec: StackSpec, data: Mapping, rbms: Sequence[RbmParams]) -> list[float]:
    """Reconstruction error of each RBM on the input it was trained on."""
    arrays = _modality_arrays(data, spec.inputs, spec.dims)
    if spec.kind == "bdae":
        errs, probs = [], []
        for n, rbm in zip(spec.names, rbms[:2]):
            errs.append(reconstruction_error(arrays[n], rbm))
            probs.append(hidden_given_visible(arrays[n], rbm))
        errs.append(reconstruction_error(np.hstack(probs), rbms[2]))
        return errs
    x = arrays[spec.input_modality]
    return [reconstruction_error(x, rbms[0]),
            reconstruction_error(hidden_given_visible(x, rbms[0]), rbms[1])]


def _glorot(rng: RngStream, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return (2.0 * rng.uniform((n_in, n_out)) - 1.0) * limit


def unfold(spec: StackSpec, rbms: Sequence[RbmParams], rng: RngStream | None = None) -> DeepAutoencoder:
    """Build the encoder from the RBMs bottom-up and the decoder from their transposes.

    Decoder biases start at the RBM visible biases. Weights with no RBM
    counterpart (the DAE pathway of the non-input modality) are drawn from a
    Glorot-uniform distribution using ``rng``.
    """
    rng = rng or RngStream(0).child("unfold")
    dims, hidden = spec.dims, spec.hidden
    sizes = {f"in:{n}": d for n, d in spec.modalities}
    sizes.update({f"out:{n}": d for n, d in spec.modalities})
    sizes.update({f"rh:{n}": hidden[n] for n in spec.names})
    sizes[SHARED] = spec.shared_layer_size

    def want(rbm, shape, what):
        if rbm.W.shape != shape:
            raise ShapeError(f"{what} RBM is {rbm.W.shape}, expected {shape}")

    if spec.kind == "bdae":
        if len(rbms) != 3:
            raise ShapeError("a BDAE needs three RBMs")
        (m1, m2), joint = spec.names, rbms[2]
        want(rbms[0], (dims[m1], hidden[m1]), m1)
        want(rbms[1], (dims[m2], hidden[m2]), m2)
        want(joint, (hidden[m1] + hidden[m2], spec.shared_layer_size), "joint")
        for n in spec.names:
            sizes[f"h:{n}"] = hidden[n]
        enc = [
            Layer(rbms[0].W.copy(), rbms[0].a.copy(), (f"in:{m1}",), (f"h:{m1}",)),
            Layer(rbms[1].W.copy(), rbms[1].a.copy(), (f"in:{m2}",), (f"h:{m2}",)),
            Layer(joint.W.copy(), joint.a.copy(), (f"h:{m1}", f"h:{m2}"), (SHARED,)),
        ]
        dec = [
            Layer(joint.W.T.copy(), joint.b.copy(), (SHARED,), (f"rh:{m1}", f"rh:{m2}")),
            Layer(rbms[0].W.T.copy(), rbms[0].b.copy(), (f"rh:{m1}",), (f"out:{m1}",)),
            Layer(rbms[1].W.T.copy(), rbms[1].b.copy(), (f"rh:{m2}",), (f"out:{m2}",)),
        ]
        tie_map = [(2, 0), (0, 1), (1, 2)]
        net = DeepAutoencoder("bdae", spec.modalities, (m1, m2), sizes, enc, dec, tie_map,
                              [r.copy() for r in rbms])
        net.check_ties()
        return net

    if len(rbms) != 2:
        raise ShapeError("a DAE needs two RBMs")
    m = spec.input_modality
    bottom, top = rbms
    want(bottom, (dims[m], hidden[m]), m)
    want(top, (hidden[m], spec.shared_layer_size), f"{m} top")
    sizes[f"h:{m}"] = hidden[m]
    enc = [
        Layer(bottom.W.copy(), bottom.a.copy(), (f"in:{m}",), (f"h:{m}",)),
        Layer(top.W.copy(), top.a.copy(), (f"h:{m}",), (SHARED,)),
    ]
    mid_w, mid_b = [], []
    for n in spec.names:
        if n == m:
            mid_w.append(top.W.T.copy())
            mid_b.append(top.b.copy())
        else:
            mid_w.append(_glorot(rng.child("mid", n), spec.shared_layer_size, hidden[n]))
            mid_b.append(np.zeros(hidden[n]))
    dec = [Layer(np.hstack(mid_w), np.concatenate(mid_b), (SHARED,),
                 tuple(f"rh:{n}" for n in spec.names))]
    tie_map = []
    for n in spec.names:
        if n == m:
            tie_map.append((0, len(dec)))
            dec.append(Layer(bottom.W.T.copy(), bottom.b.copy(), (f"rh:{n}",), (f"out:{n}",)))
        else:
            dec.append(Layer(_glorot(rng.child("out", n), hidden[n], dims[n]), np.zeros(dims[n]),
                             (f"rh:{n}",), (f"out:{n}",)))
    net = DeepAutoencoder("dae", spec.modalities, (m,), sizes, enc, dec, tie_map,
                          [r.copy() for r in rbms])
    net.check_ties()
    return net


# ----------------------------------------------------------------------------
# forward / backward

def _forward(net: DeepAutoencoder, x: np.ndarray):
    nodes: dict[str, np.ndarray] = {}
    for n, (lo, hi) in net.input_layout.items():
        nodes[f"in:{n}"] = x[:, lo:hi]
    cache = []
    for layer in net.layers:
        inp = np.hstack([nodes[k] for k in layer.inputs]) if len(layer.inputs) > 1 else nodes[layer.inputs[0]]
        act = sigmoid(inp @ layer.W + layer.bias)
        cache.append((inp, act))
        start = 0
        for k in layer.outputs:
            nodes[k] = act[:, start:start + net.node_sizes[k]]
            start += net.node_sizes[k]
    out = np.hstack([nodes[f"out:{n}"] for n, _ in net.modalities])
    return out, nodes, cache


def reconstruction_loss(y: np.ndarray, t: np.ndarray, loss: str = "cross_entropy") -> float:
    """Per-row sum over output dimensions, averaged over rows."""
    if loss == "cross_entropy":
        per = -(t * np.log(y) + (1.0 - t) * np.log1p(-y))
    elif loss == "mse":
        per = (y - t) ** 2
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return float(per.sum(axis=1).mean())


def loss_and_gradients(net: DeepAutoencoder, x: np.ndarray, t: np.ndarray,
                       loss: str = "cross_entropy"):
    """Loss plus per-layer ``(dW, dbias)`` for every layer of ``net.layers``.

    Gradients are taken with every weight treated as independent; tied pairs
    are combined by the caller.
    """
    y, nodes, cache = _forward(net, x)
    n = x.shape[0]
    value = reconstruction_loss(y, t, loss)
    out_layout = net.output_layout
    grad_nodes: dict[str, np.ndarray] = {}
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        inp, act = cache[i]
        if layer.outputs[0].startswith("out:"):
            lo, hi = out_layout[layer.outputs[0][4:]]
            diff = act - t[:, lo:hi]
            dz = diff / n if loss == "cross_entropy" else 2.0 * diff * act * (1.0 - act) / n
        else:
            da = np.hstack([grad_nodes.pop(k, np.zeros((n, net.node_sizes[k]))) for k in layer.outputs])
            dz = da * act * (1.0 - act)
        grads[i] = (inp.T @ dz, dz.sum(axis=0))
        dinp = dz @ layer.W.T
        start = 0
        for k in layer.inputs:
            part = dinp[:, start:start + net.node_sizes[k]]
            grad_nodes[k] = grad_nodes[k] + part if k in grad_nodes else part
            start += net.node_sizes[k]
    return value, grads


def training_loss(net: DeepAutoencoder, data, loss: str = "cross_entropy") -> float:
    x, t = _input_matrix(net, data), _target_matrix(net, data)
    return reconstruction_loss(_forward(net, x)[0], t, loss)


# ----------------------------------------------------------------------------
# fine-tuning

@dataclass
class FineTuneResult:
    net: DeepAutoencoder
    loss_trace: list[float]


def _slots_for(nets: Sequence[DeepAutoencoder], shared_decoder: bool):
    """Group parameter locations that must stay identical."""
    n_enc = [len(net.encoder_layers) for net in nets]
    groups: dict = {}
    order: list = []

    def add(key, loc):
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(loc)

    for k, net in enumerate(nets):
        for i in range(n_enc[k]):
            add(("enc", k, i, "W"), (k, i, "W", False))
            add(("enc", k, i, "bias"), (k, i, "bias", False))
        for d in range(len(net.decoder_layers)):
            li = n_enc[k] + d
            dkey = ("dec", d) if shared_decoder else ("dec", k, d)
            add(dkey + ("bias",), (k, li, "bias", False))
            add(dkey + ("W",), (k, li, "W", False))
    # fold tied decoder groups into their encoder group
    for k, net in enumerate(nets):
        for e, d in net.tie_map:
            dkey = (("dec", d) if shared_decoder else ("dec", k, d)) + ("W",)
            if dkey not in groups:
                raise ValueError(f"decoder layer {d} is tied in more than one coupled network")
            enc_key = ("enc", k, e, "W")
            for (kk, ll, f, _) in groups.pop(dkey):
                groups[enc_key].append((kk, ll, f, True))
            order.remove(dkey)
    return [groups[key] for key in order]


def _get(nets, loc) -> np.ndarray:
    k, li, f, tr = loc
    value = getattr(nets[k].layers[li], f)
    return value.T if tr else value


def _set(nets, loc, value: np.ndarray) -> None:
    k, li, f, tr = loc
    layer = nets[k].layers[li]
    setattr(layer, f, np.array(value.T if tr else value, copy=True))


def _check_coupling(nets: Sequence[DeepAutoencoder]) -> None:
    ref = nets[0]
    for net in nets[1:]:
        if net.modalities != ref.modalities:
            raise ShapeError("coupled networks must reconstruct the same modalities")
        if [(l.W.shape, l.inputs, l.outputs) for l in net.decoder_layers] != \
           [(l.W.shape, l.inputs, l.outputs) for l in ref.decoder_layers]:
            raise ShapeError("coupled networks must have identical decoder structure")


def couple_decoders(nets: Sequence[DeepAutoencoder]) -> list[DeepAutoencoder]:
    """Copies of ``nets`` that share one decoder.

    A decoder weight matrix comes from the network that ties it; a shared
    middle layer takes, for each modality's block of columns, the values of
    the network whose input is that modality.
    """
    nets = [net.copy() for net in nets]
    _check_coupling(nets)
    ref = nets[0]
    owner = {}
    for k, net in enumerate(nets):
        for n in net.input_modalities:
            owner.setdefault(n, k)
    merged = []
    for d, layer in enumerate(ref.decoder_layers):
        tie_owner = [k for k, net in enumerate(nets) if d in net.tied_decoders()]
        if len(tie_owner) > 1:
            raise ValueError(f"decoder layer {d} is tied in more than one network")
        if tie_owner:
            src = nets[tie_owner[0]].decoder_layers[d]
            merged.append(src.copy())
            continue
        if len(layer.outputs) == 1:
            name = layer.outputs[0].split(":", 1)[1]
            merged.append(nets[owner.get(name, 0)].decoder_layers[d].copy())
            continue
        new = layer.copy()
        start = 0
        for node in layer.outputs:
            size = ref.node_sizes[node]
            k = owner.get(node.split(":", 1)[1], 0)
            new.W[:, start:start + size] = nets[k].decoder_layers[d].W[:, start:start + size]
            new.bias[start:start + size] = nets[k].decoder_layers[d].bias[start:start + size]
            start += size
        merged.append(new)
    for net in nets:
        net.decoder_layers = [l.copy() for l in merged]
        net.check_ties()
    return nets


def fine_tune_coupled(nets: Sequence[DeepAutoencoder], data, cfg: FineTuneConfig,
                      rng: RngStream, shared_decoder: bool = True) -> list[FineTuneResult]:
    """Unsupervised backprop on the summed reconstruction loss of several networks.

    With ``shared_decoder`` the networks must already share decoder values
    (see :func:`couple_decoders`); their decoder gradients are pooled so the
    decoders stay identical. Every tied pair receives the sum of its
    encoder- and decoder-position gradients, and ties are verified after
    every epoch.
    """
    nets = [net.copy() for net in nets]
    if shared_decoder:
        _check_coupling(nets)
        for net in nets[1:]:
            for a, b in zip(net.decoder_layers, nets[0].decoder_layers):
                if not (np.array_equal(a.W, b.W) and np.array_equal(a.bias, b.bias)):
                    raise ValueError("shared-decoder training needs equal decoders; call couple_decoders first")
    xs = [_input_matrix(net, data) for net in nets]
    ts = [_target_matrix(net, data) for net in nets]
    for x in xs + ts:
        _check_unit_interval(x, "fine-tuning data")
    slots = _slots_for(nets, shared_decoder)
    n = xs[0].shape[0]
    bs = min(cfg.minibatch_size, n)
    velocity = [np.zeros_like(_get(nets, slot[0])) for slot in slots]

    def total_loss():
        return sum(reconstruction_loss(_forward(net, x)[0], t, cfg.loss)
                   for net, x, t in zip(nets, xs, ts))

    traces = [[reconstruction_loss(_forward(net, x)[0], t, cfg.loss)] for net, x, t in zip(nets, xs, ts)]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            rows = order[start:start + bs]
            per_net = [loss_and_gradients(net, x[rows], t[rows], cfg.loss)[1]
                       for net, x, t in zip(nets, xs, ts)]
            for j, slot in enumerate(slots):
                g = np.zeros_like(velocity[j])
                for (k, li, f, tr) in slot:
                    part = per_net[k][li][0 if f == "W" else 1]
                    g += part.T if tr else part
                velocity[j] = cfg.momentum * velocity[j] - cfg.learning_rate * g
                value = _get(nets, slot[0]) + velocity[j]
                for loc in slot:
                    _set(nets, loc, value)
        for net, x, t, trace in zip(nets, xs, ts, traces):
            net.check_ties()
            trace.append(reconstruction_loss(_forward(net, x)[0], t, cfg.loss))
    return [FineTuneResult(net, trace) for net, trace in zip(nets, traces)]


def fine_tune(net: DeepAutoencoder, data, cfg: FineTuneConfig, rng: RngStream) -> FineTuneResult:
    """Fine-tune one network; ``loss_trace[0]`` is the loss before the first epoch.

    ``data`` maps modality name to rows and must contain every modality the
    network reconstructs (for a DAE this includes the one it never sees as input).
    """
    return fine_tune_coupled([net], data, cfg, rng, shared_decoder=False)[0]


def flat_parameters(net: DeepAutoencoder) -> list[tuple[str, np.ndarray]]:
    """Named views of the free parameters (tied decoder weights excluded)."""
    tied = net.tied_decoders()
    out = []
    for i, l in enumerate(net.encoder_layers):
        out += [(f"enc{i}.W", l.W), (f"enc{i}.bias", l.bias)]
    for d, l in enumerate(net.decoder_layers):
        if d not in tied:
            out.append((f"dec{d}.W", l.W))
        out.append((f"dec{d}.bias", l.bias))
    return out


def parameter_gradients(net: DeepAutoencoder, data, loss: str = "cross_entropy") -> dict[str, np.ndarray]:
    """Analytic gradient for every entry of :func:`flat_parameters`."""
    x, t = _input_matrix(net, data), _target_matrix(net, data)
    _, grads = loss_and_gradients(net, x, t, loss)
    n_enc = len(net.encoder_layers)
    tied = {d: e for e, d in net.tie_map}
    out = {}
    for i in range(n_enc):
        out[f"enc{i}.W"] = grads[i][0].copy()
        out[f"enc{i}.bias"] = grads[i][1]
    for d in range(len(net.decoder_layers)):
        gW, gb = grads[n_enc + d]
        if d in tied:
            out[f"enc{tied[d]}.W"] += gW.T
        else:
            out[f"dec{d}.W"] = gW
        out[f"dec{d}.bias"] = gb
    return out


def sync_ties(net: DeepAutoencoder) -> None:
    """Copy every tied encoder weight into its decoder slot."""
    for e, d in net.tie_map:
        net.decoder_layers[d].W = net.encoder_layers[e].W.T.copy()


# ----------------------------------------------------------------------------
# inference

def encode(net: DeepAutoencoder, rows):
    """Shared-layer probabilities (deterministic); FeatureMatrix in -> FeatureMatrix out."""
    x = _input_matrix(net, rows)
    _, nodes, _ = _forward(net, x)
    h = nodes[SHARED].copy()
    ref = _reference_matrix(rows)
    if ref is None:
        return h
    return ref.with_values(h, [f"shared_{i}" for i in range(h.shape[1])])


def reconstruct(net: DeepAutoencoder, rows):
    """Decoder output over every modality, in ``net.output_layout`` order."""
    x = _input_matrix(net, rows)
    y = _forward(net, x)[0]
    ref = _reference_matrix(rows)
    if ref is None:
        return y
    cols = [f"{n}_{i}" for n, d in net.modalities for i in range(d)]
    return ref.with_values(y, cols)


def _reference_matrix(rows) -> FeatureMatrix | None:
    if isinstance(rows, FeatureMatrix):
        return rows
    if isinstance(rows, Mapping):
        for v in rows.values():
            if isinstance(v, FeatureMatrix):
                return v
    return None


# ----------------------------------------------------------------------------
# serialization

def _arr(a: np.ndarray) -> list[float]:
    return [float(x) for x in np.asarray(a).reshape(-1)]


def _rbm_dict(r: RbmParams) -> dict:
    return {"shape": list(r.W.shape), "W": _arr(r.W), "b": _arr(r.b), "a": _arr(r.a)}


def _layer_dict(l: Layer) -> dict:
    return {"inputs": list(l.inputs), "outputs": list(l.outputs), "shape": list(l.W.shape),
            "W": _arr(l.W), "bias": _arr(l.bias)}


def dumps(net: DeepAutoencoder) -> str:
    """Versioned JSON; floats use shortest round-trip repr, so dump/load/dump is byte-stable."""
    doc = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": net.kind,
        "modalities": [[n, d] for n, d in net.modalities],
        "input_modalities": list(net.input_modalities),
        "modality_layout": {k: {n: list(r) for n, r in v.items()} for k, v in net.modality_layout.items()},
        "node_sizes": dict(sorted(net.node_sizes.items())),
        "tie_map": [list(p) for p in net.tie_map],
        "encoder_layers": [_layer_dict(l) for l in net.encoder_layers],
        "decoder_layers": [_layer_dict(l) for l in net.decoder_layers],
        "rbms": [_rbm_dict(r) for r in net.rbms],
    }
    return json.dumps(doc, indent=1) + "\n"


def _load_layer(d: dict) -> Layer:
    shape = tuple(d["shape"])
    return Layer(np.array(d["W"], dtype=np.float64).reshape(shape),
                 np.array(d["bias"], dtype=np.float64), tuple(d["inputs"]), tuple(d["outputs"]))


def loads(text: str) -> DeepAutoencoder:
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise ValueError("not an autoencoder model file")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported autoencoder format version {doc.get('version')}")
    rbms = [RbmParams(np.array(r["W"]).reshape(tuple(r["shape"])), r["b"], r["a"]) for r in doc["rbms"]]
    net = DeepAutoencoder(doc["kind"], tuple((n, int(d)) for n, d in doc["modalities"]),
                          tuple(doc["input_modalities"]), dict(doc["node_sizes"]),
                          [_load_layer(l) for l in doc["encoder_layers"]],
                          [_load_layer(l) for l in doc["decoder_layers"]],
                          [tuple(p) for p in doc["tie_map"]], rbms)
    net.check_ties()
    return net
