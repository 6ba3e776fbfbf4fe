import math

import numpy as np
import torch
from torch.func import functional_call, vmap

from molbfn.network import Denoiser, NetworkConfig
from molbfn.schedule import beta


def toy_net(k=5, hidden=16, layers=2, heads=2, label_dim=0, dropout=0.0, seed=0, scramble=0.0):
    """Small float64 denoiser; ``scramble`` re-draws every parameter with that std."""
    torch.manual_seed(seed)
    net = Denoiser(NetworkConfig(k_categories=k, n_layers=layers, n_heads=heads, hidden_dim=hidden,
                                 dropout=dropout, label_dim=label_dim)).double()
    if scramble:
        with torch.no_grad():
            for p in net.parameters():
                p.normal_(0.0, scramble)
    return net


def finite_difference_errors(module, loss_of, h=1e-5, floor=1e-6):
    """Largest ``|fd - grad| / (|grad| + floor * max|grad|)`` per parameter tensor of ``module``.

    The floor is relative to the largest gradient entry over all parameters,
    which is the scale of the rounding noise in the differences.

    ``loss_of(call)`` must build a scalar loss where ``call(*args, **kw)`` runs
    the module with the parameters being perturbed.  Every scalar entry gets a
    central difference; perturbations are batched with ``vmap``.
    """
    base = {k: v.detach() for k, v in module.named_parameters()}

    def loss(params):
        return loss_of(lambda *a, **kw: functional_call(module, params, a, kw))

    live = {k: v.clone().requires_grad_() for k, v in base.items()}
    grads = dict(zip(live, torch.autograd.grad(loss(live), list(live.values()), allow_unused=True)))
    scale = max(float(g.abs().max()) for g in grads.values() if g is not None)
    errors = {}
    for name, value in base.items():
        n = value.numel()
        steps = torch.eye(n, dtype=value.dtype).view(n, *value.shape) * h

        def shifted(delta, name=name, value=value):
            return loss({**base, name: value + delta})

        fd = (vmap(shifted, chunk_size=1024)(steps) - vmap(shifted, chunk_size=1024)(-steps)) / (2 * h)
        g = grads[name]
        g = torch.zeros(n, dtype=value.dtype) if g is None else g.flatten()
        errors[name] = ((fd - g).abs() / (g.abs() + floor * scale)).max().item()
    return errors


class StubNet(torch.nn.Module):
    """Psi = scale * log(theta) + bias * (1 - t) (+ label offset)."""

    def __init__(self, k, scale=1.5, bias=None, label_shift=None):
        super().__init__()
        self.k = k
        self.scale = scale
        self.bias = torch.zeros(k) if bias is None else torch.as_tensor(bias, dtype=torch.float32)
        self.label_shift = label_shift
        self.calls = []

    def forward(self, theta, t, labels=None, uncond=None, attention_mask=None, generator=None):
        self.calls.append(labels)
        t = torch.as_tensor(t, dtype=theta.dtype).reshape(-1, 1, 1)
        psi = self.scale * torch.log(theta) + self.bias.to(theta.dtype) * (1 - t)
        if labels is not None and self.label_shift is not None:
            psi = psi + torch.as_tensor(self.label_shift, dtype=theta.dtype)
        return psi, psi


def quadrature_sampler_oracle(params, bias, scale, n_nodes=24):
    """Exact-by-quadrature output distribution of the K-category, D=1, n=2 sampler.

    With the stub network the first draw is ``softmax(bias)``, the second is
    ``softmax(scale * y1 + bias / 2)`` and the emitted token is
    ``argmax(y1 + y2)``.  ``y1`` is integrated on a tensor Gauss-Hermite grid;
    given ``y1`` and the second draw, the argmax probability is a smooth
    one-dimensional Gaussian integral, also done by Gauss-Hermite.
    """
    k = params.k_categories
    a1 = beta(params, 0.5)
    a2 = params.beta_one - a1
    z, wz = np.polynomial.hermite_e.hermegauss(n_nodes)
    wz = wz / wz.sum()
    grid = np.stack(np.meshgrid(*[z] * k, indexing="ij"), -1).reshape(-1, k)
    wgrid = np.prod(np.stack(np.meshgrid(*[wz] * k, indexing="ij"), -1).reshape(-1, k), -1)
    sigma2 = math.sqrt(a2 * k)
    eye = np.eye(k)
    p1 = np.exp(bias) / np.exp(bias).sum()
    out = np.zeros(k)
    for k1 in range(k):
        y1 = a1 * (k * eye[k1] - 1) + math.sqrt(a1 * k) * grid
        logits = scale * y1 + bias / 2
        p2 = np.exp(logits - logits.max(1, keepdims=True))
        p2 /= p2.sum(1, keepdims=True)
        for k2 in range(k):
            mean = y1 + a2 * (k * eye[k2] - 1)
            for j in range(k):
                # P(argmax = j) = E_u prod_{i != j} Phi((mean_j + sigma u - mean_i) / sigma)
                top = mean[:, j, None] + sigma2 * z[None, :]
                cdf = torch.special.ndtr(torch.from_numpy((top[:, None, :] - mean[:, :, None]) / sigma2)).numpy()
                cdf[:, j, :] = 1.0
                pj = (cdf.prod(1) * wz).sum(1)
                out[j] += p1[k1] * (wgrid * p2[:, k2] * pj).sum()
    return out
