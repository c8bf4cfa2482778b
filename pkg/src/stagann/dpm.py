"""Phase re-prediction over decoupled trend/residual components.

Each component is moved to the frequency domain, its strongest bins (by
amplitude, excluding DC and Nyquist) have their phases re-predicted by a GIN
that passes messages between frozen phase-bin embeddings, and the series is
rebuilt with the original amplitudes.  The rebuild is written as a
correction on top of the input so that a zero phase offset reproduces the
input exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import gin_layer
from .nn import MLP, Linear, Module
from .spectral import dft_matrices, moving_average_matrix


@dataclass
class DpmConfig:
    n_phase_bins: int = 64
    n_modified: int = 1
    mode: str = "offset"
    trend_width: int = 5
    depth: int = 2
    phase_dim: int = 16
    hidden: int = 32
    decouple: bool = True

    def validate(self, length: int) -> None:
        if self.n_phase_bins < 2:
            raise ValueError("need at least 2 phase bins")
        if not 1 <= self.n_modified <= length // 2:
            raise ValueError(f"modified-bin count must lie in 1..{length // 2}")
        if self.mode not in ("offset", "absolute"):
            raise ValueError(f"unknown phase mode {self.mode!r}")


def discretize_phase(phi, n_bins: int):
    """Index of the ``[-pi, pi]`` segment containing ``phi``."""
    phi = np.asarray(phi, dtype=np.float64)
    idx = np.floor((phi + np.pi) / (2.0 * np.pi / n_bins)).astype(np.int64)
    idx = np.clip(idx, 0, n_bins - 1)
    return idx if idx.ndim else int(idx)


def candidate_bins(length: int) -> np.ndarray:
    """Bins whose phase may be changed: no DC, no Nyquist."""
    top = length // 2 if length % 2 else length // 2 - 1
    return np.arange(1, top + 1)


def select_bins(amplitude: np.ndarray, length: int, n_modified: int) -> np.ndarray:
    """Top-``n_modified`` candidate bins per row, strongest first, ties to lower bin."""
    cands = candidate_bins(length)
    p = min(n_modified, cands.size)
    order = np.argsort(-amplitude[..., cands], axis=-1, kind="stable")[..., :p]
    return cands[order]


class DecoupledPhase(Module):
    def __init__(self, length: int, cfg: DpmConfig, rng: np.random.Generator, dropout: float = 0.0):
        cfg.validate(length)
        self.cfg = cfg
        self.length = length
        # frozen: never handed to the optimiser
        self.phase_table = ad.Tensor(rng.uniform(-0.5, 0.5, size=(cfg.n_phase_bins, cfg.phase_dim)))
        branches = ("trend", "residual") if cfg.decouple else ("series",)
        self.branches = branches
        for name in branches:
            mlps = [MLP(cfg.phase_dim, cfg.hidden, cfg.phase_dim, rng, dropout) for _ in range(cfg.depth)]
            setattr(self, f"{name}_gin", mlps)
            setattr(self, f"{name}_eps", ad.Tensor(np.zeros(cfg.depth), requires_grad=True))
            setattr(self, f"{name}_head", Linear(cfg.phase_dim, 1, rng, zero=True))
        self._cos, self._sin = dft_matrices(length)
        self._avg = moving_average_matrix(length, cfg.trend_width)

    def lookup(self, phases) -> np.ndarray:
        return self.phase_table.data[discretize_phase(phases, self.cfg.n_phase_bins)]

    def message_passing(self, bins, adjacency, branch: str) -> Tensor:
        """GIN over frozen phase embeddings; ``bins`` is ``(..., N)`` of table indices."""
        h = Tensor(self.phase_table.data[np.asarray(bins)])
        mlps = getattr(self, f"{branch}_gin")
        eps = getattr(self, f"{branch}_eps")
        for k, mlp in enumerate(mlps):
            h = gin_layer(h, adjacency, ad.getitem(eps, k), mlp)
        return h

    def head(self, hidden: Tensor, branch: str) -> Tensor:
        """Bounded phase ``pi * tanh(FC(hidden))``."""
        fc = getattr(self, f"{branch}_head")
        return ad.scale(ad.tanh(fc(hidden)), np.pi)

    def _branch(self, xb: Tensor, adjacency, branch: str, cache, override=None) -> Tensor:
        L = self.length
        re = ad.matmul(xb, self._cos)  # (B, N, nb)
        im = ad.negate(ad.matmul(xb, self._sin))
        amp = np.hypot(re.data, im.data)

        def compute():
            sel = select_bins(amp, L, self.cfg.n_modified)  # (B, N, P)
            onehot = np.zeros(sel.shape + (re.shape[-1],))
            np.put_along_axis(onehot, sel[..., None], 1.0, axis=-1)
            re_s = (re.data[..., None, :] * onehot).sum(-1)
            im_s = (im.data[..., None, :] * onehot).sum(-1)
            bins = discretize_phase(np.arctan2(im_s, re_s), self.cfg.n_phase_bins)
            return onehot, bins

        onehot, bins = cache(("dpm", branch), compute) if cache is not None else compute()
        re_sel = ad.tsum(ad.mul(ad.reshape(re, re.shape[:-1] + (1, re.shape[-1])), onehot), axis=-1)
        im_sel = ad.tsum(ad.mul(ad.reshape(im, im.shape[:-1] + (1, im.shape[-1])), onehot), axis=-1)

        # messages run over sensors, one graph pass per modified bin
        bins_t = np.moveaxis(bins, -1, -2)  # (B, P, N)
        a = adjacency
        if isinstance(a, Tensor):
            a = ad.reshape(a, a.shape[:-2] + (1,) + a.shape[-2:]) if a.ndim == 3 else a
        elif np.ndim(a) == 3:
            a = a[:, None]
        h = self.message_passing(bins_t, a, branch)  # (B, P, N, D)
        phi = ad.reshape(self.head(h, branch), h.shape[:-1])  # (B, P, N)
        phi = ad.transpose(phi, (0, 2, 1))  # (B, N, P)
        if override is not None:
            phi = ad.as_tensor(np.broadcast_to(override, phi.shape))

        if self.cfg.mode == "offset":
            c, s = ad.cos(phi), ad.sin(phi)
            re_new = ad.sub(ad.mul(re_sel, c), ad.mul(im_sel, s))
            im_new = ad.add(ad.mul(re_sel, s), ad.mul(im_sel, c))
        else:
            mag = ad.sqrt(ad.add(ad.add(ad.mul(re_sel, re_sel), ad.mul(im_sel, im_sel)), 1e-24))
            re_new = ad.mul(mag, ad.cos(phi))
            im_new = ad.mul(mag, ad.sin(phi))

        cos_sel = onehot @ self._cos.T  # (B, N, P, L)
        sin_sel = onehot @ self._sin.T
        d_re = ad.reshape(ad.sub(re_new, re_sel), re_sel.shape + (1,))
        d_im = ad.reshape(ad.sub(im_new, im_sel), im_sel.shape + (1,))
        corr = ad.tsum(ad.sub(ad.mul(d_re, cos_sel), ad.mul(d_im, sin_sel)), axis=-2)
        return ad.add(xb, ad.scale(corr, 2.0 / L))

    def __call__(self, x, adj_trend, adj_residual=None, cache=None, override=None) -> Tensor:
        """``(B, N, L)`` in and out.  ``override`` forces the head output (tests)."""
        x = ad.as_tensor(x)
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        if not self.cfg.decouple:
            return self._branch(x, adj_trend, "series", cache, override)
        trend = ad.matmul(x, self._avg)
        resid = ad.sub(x, trend)
        adj_residual = adj_trend if adj_residual is None else adj_residual
        out_t = self._branch(trend, adj_trend, "trend", cache, override)
        out_r = self._branch(resid, adj_residual, "residual", cache, override)
        return ad.add(out_t, out_r)
