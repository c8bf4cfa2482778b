"""Encoder, dual-flow decoder and patch discriminator assembled into one model."""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .d3mgm import D3MGM, CalendarConfig
from .dpm import DecoupledPhase, DpmConfig
from .graph import Adjacency, gin_layer, masked_gnn_layer, row_normalize
from .nn import MLP, Linear, Module


@dataclass
class ModelConfig:
    length: int = 24
    hidden: int = 100
    embed_dim: int = 12
    n_features: int = 20
    time_dim: int = 6
    digit_dim: int = 4
    heads: int = 2
    topk: int = 5
    encoder_depth: int = 2
    decoder_depth: int = 2
    dropout: float = 0.3
    patch_len: int = 6
    disc_hidden: int = 32
    step_minutes: int = 5
    dpm: DpmConfig = field(default_factory=DpmConfig)
    # ablation switches
    use_d3mgm: bool = True
    use_location: bool = True
    use_timestamp: bool = True
    use_dpm: bool = True
    phase_graph: str = "dynamic"
    use_revin: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        dpm = DpmConfig(**d.pop("dpm", {}))
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(dpm=dpm, **d)


@dataclass
class KrigeBatch:
    """Stack of ``B`` windows over the same ``N`` sensors.

    ``x`` holds the model input with unknown (and masked) rows zero;
    ``target`` keeps the true values where they exist.
    """

    x: np.ndarray
    adjacency: Adjacency
    timestamps: np.ndarray
    known: np.ndarray
    masked: np.ndarray
    coords: np.ndarray | None = None
    target: np.ndarray | None = None
    sensor_index: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 2:
            self.x = self.x[None]
        self.known = np.asarray(self.known, dtype=bool)
        self.masked = np.asarray(self.masked, dtype=bool)
        if self.adjacency.n != self.x.shape[1]:
            raise ad.DimensionError(
                f"series has {self.x.shape[1]} sensors but adjacency is {self.adjacency.weights.shape}"
            )
        if np.any(self.masked & ~self.known):
            raise ValueError("masked sensors must be known sensors")
        self.timestamps = np.atleast_1d(np.asarray(self.timestamps, dtype="datetime64[m]"))

    @property
    def observed(self) -> np.ndarray:
        """Sensors whose values the model may see."""
        return self.known & ~self.masked

    def observed_adjacency(self) -> Adjacency:
        """Adjacency whose rows average over observed senders only."""
        return row_normalize(self.adjacency.weights * self.observed[None, :].astype(np.float64))

    def with_mask(self, masked: np.ndarray) -> "KrigeBatch":
        masked = np.asarray(masked, dtype=bool)
        x = self.x.copy()
        x[:, masked] = 0.0
        target = self.target if self.target is not None else self.x
        return KrigeBatch(x, self.adjacency, self.timestamps, self.known, masked,
                          self.coords, target, self.sensor_index)


class RevIN(Module):
    """Per-sensor instance normalisation with a learnable scalar affine.

    Statistics are part of the graph, so gradients account for them.  A
    ``1e-12`` floor inside the square root keeps all-zero rows finite.
    """

    eps = 1e-5

    def __init__(self):
        self.gamma = ad.Tensor(np.ones(1), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(1), requires_grad=True)

    def normalize(self, x) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        x = ad.as_tensor(x)
        mu = ad.mean(x, axis=-1, keepdims=True)
        c = ad.sub(x, mu)
        sd = ad.add(ad.sqrt(ad.add(ad.mean(ad.mul(c, c), axis=-1, keepdims=True), 1e-12)), self.eps)
        y = ad.add(ad.mul(ad.div(c, sd), self.gamma), self.beta)
        return y, (mu, sd)

    def denormalize(self, y, stats) -> Tensor:
        mu, sd = stats
        y = ad.div(ad.sub(y, self.beta), ad.add(self.gamma, self.eps * self.eps))
        return ad.add(ad.mul(y, sd), mu)


class Convergence(Module):
    """Two 1x1 convolutions over the channel axis: C -> C -> 1."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Linear(channels, channels, rng)
        self.conv2 = Linear(channels, 1, rng)

    def __call__(self, stacked: Tensor) -> Tensor:
        y = self.conv2(self.conv1(stacked))
        return ad.reshape(y, y.shape[:-1])


def standardize(z: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance rows along the last axis, differentiated through."""
    c = ad.sub(z, ad.mean(z, axis=-1, keepdims=True))
    sd = ad.sqrt(ad.add(ad.mean(ad.mul(c, c), axis=-1, keepdims=True), eps))
    return ad.div(c, sd)


class Discriminator(Module):
    """Shared MLP scoring non-overlapping length-``l`` patches as known/unknown.

    Each sensor's series is standardised first.  The decoder is insensitive to
    the encoder's scale, so without this the reversed gradient could raise the
    discriminator loss without bound simply by inflating ``z``.
    """

    def __init__(self, patch_len: int, hidden: int, rng: np.random.Generator, dropout: float = 0.0,
                 normalize: bool = True):
        self.patch_len = patch_len
        self.normalize = normalize
        self.mlp = MLP(patch_len, hidden, 2, rng, dropout)

    def __call__(self, z) -> Tensor:
        z = ad.as_tensor(z)
        L = z.shape[-1]
        if not 1 <= self.patch_len <= L:
            raise ValueError(f"patch length {self.patch_len} outside 1..{L}")
        if self.normalize:
            z = standardize(z)
        c = L // self.patch_len
        if c * self.patch_len != L:
            z = ad.getitem(z, (Ellipsis, slice(0, c * self.patch_len)))
        patches = ad.reshape(z, z.shape[:-1] + (c, self.patch_len))
        logits = self.mlp(patches)  # (..., N, c, 2)
        return ad.swapaxes(logits, -1, -2)  # (..., N, 2, c)


class DiscreteCache:
    """Records discrete choices (top-k masks, selected bins) and replays them.

    Used by finite-difference checks so that a tiny perturbation cannot flip a
    piecewise-constant decision.
    """

    def __init__(self):
        self.store: dict = {}
        self.replay = False

    def __call__(self, key, compute):
        if self.replay and key in self.store:
            return self.store[key]
        val = compute()
        self.store[key] = val
        return val


class STAGANN(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        cfg = config or ModelConfig()
        self.config = cfg
        self.calendar = CalendarConfig(cfg.step_minutes)
        rng = np.random.default_rng(seed)
        L, H = cfg.length, cfg.hidden
        self.encoder = [MLP(L, H, L, rng, cfg.dropout) for _ in range(cfg.encoder_depth)]
        graphs = []
        if cfg.use_d3mgm:
            if cfg.use_dpm and cfg.phase_graph == "dynamic":
                graphs += ["trend", "residual"] if cfg.dpm.decouple else ["series"]
            graphs.append("decoder")
            self.d3mgm = D3MGM(
                rng, self.calendar.steps_per_day, cfg.embed_dim, cfg.n_features, cfg.time_dim,
                cfg.digit_dim, cfg.heads, tuple(graphs), cfg.use_location, cfg.use_timestamp, L,
            )
        if cfg.use_dpm:
            self.dpm = DecoupledPhase(L, cfg.dpm, rng, cfg.dropout)
        self.decoder_masked = [MLP(L, H, L, rng, cfg.dropout) for _ in range(cfg.decoder_depth)]
        self.decoder_gin = [MLP(L, H, L, rng, cfg.dropout) for _ in range(cfg.decoder_depth)]
        self.gin_eps = ad.Tensor(np.zeros(cfg.decoder_depth), requires_grad=True)
        if cfg.use_revin:
            self.revin_masked = [RevIN() for _ in range(cfg.decoder_depth)]
            self.revin_gin = [RevIN() for _ in range(cfg.decoder_depth)]
        self.convergence = Convergence(2 * cfg.decoder_depth + 1, rng)
        self.discriminator = Discriminator(cfg.patch_len, cfg.disc_hidden, rng, cfg.dropout)
        # data scaling travels with the checkpoint
        self.scaler_mean = ad.Tensor(np.zeros(1))
        self.scaler_std = ad.Tensor(np.ones(1))
        self._cache: DiscreteCache | None = None
        self.set_seed(seed)

    # -- bookkeeping --------------------------------------------------------
    def set_seed(self, seed: int) -> None:
        """Re-seed the dropout stream shared by every MLP."""
        rng = np.random.default_rng(seed + 1)
        for m in self.modules():
            if isinstance(m, MLP):
                m.set_rng(rng)

    def discriminator_parameter_names(self) -> list[str]:
        return [n for n in self.named_parameters() if n.startswith("discriminator.")]

    @contextlib.contextmanager
    def frozen_discrete(self):
        """Record discrete decisions on the first forward, replay them afterwards."""
        cache = DiscreteCache()
        self._cache = cache
        try:
            yield cache
        finally:
            self._cache = None

    def _cached(self):
        cache = self._cache
        if cache is not None and cache.store:
            cache.replay = True
        return cache

    # -- pieces ---------------------------------------------------------------
    def graphs(self, batch: KrigeBatch, cache=None) -> dict[str, object]:
        """Adjacencies used by DPM branches and the decoder GIN branch."""
        pre = batch.adjacency.weights
        cfg = self.config
        out = {name: pre for name in ("trend", "residual", "series", "decoder")}
        if not cfg.use_d3mgm:
            return out
        de = self.d3mgm(batch.x, batch.timestamps, self.calendar, batch.coords if cfg.use_location else None)
        for name in self.d3mgm.graph_names:
            out[name] = self.d3mgm.build_dynamic_graph(de, name, cfg.topk, cache)
        return out

    def encode(self, batch: KrigeBatch, graphs=None, override=None) -> Tensor:
        cache = self._cached()
        graphs = graphs if graphs is not None else self.graphs(batch, cache)
        z = Tensor(batch.x)
        # the first hop reads raw inputs, where unobserved rows are zero; between
        # hops observed rows are put back, otherwise a self-free stack only sees
        # paths of exactly K hops
        last = len(self.encoder) - 1
        for i, mlp in enumerate(self.encoder):
            z = masked_gnn_layer(z, batch.observed_adjacency() if i == 0 else batch.adjacency, mlp)
            if i < last:
                z = self._restore(z, batch)
        if self.config.use_dpm:
            if self.config.dpm.decouple:
                z = self.dpm(z, graphs["trend"], graphs["residual"], cache, override)
            else:
                z = self.dpm(z, graphs["series"], None, cache, override)
        return z

    def _restore(self, y: Tensor, batch: KrigeBatch) -> Tensor:
        keep = batch.observed.astype(np.float64)[:, None]
        return ad.add(ad.mul(y, 1.0 - keep), batch.x * keep)

    def _layer(self, h: Tensor, fn, revin: RevIN | None) -> Tensor:
        if revin is None:
            return fn(h)
        hn, stats = revin.normalize(h)
        return revin.denormalize(fn(hn), stats)

    def decode(self, z: Tensor, batch: KrigeBatch, graphs=None, return_channels: bool = False):
        cfg = self.config
        graphs = graphs if graphs is not None else self.graphs(batch, self._cached())
        z0 = self._restore(z, batch)
        channels = [z0]
        h = z0
        for i, mlp in enumerate(self.decoder_masked):
            rv = self.revin_masked[i] if cfg.use_revin else None
            h = self._restore(self._layer(h, lambda t, m=mlp: masked_gnn_layer(t, batch.adjacency, m), rv), batch)
            channels.append(h)
        h = z0
        for i, mlp in enumerate(self.decoder_gin):
            rv = self.revin_gin[i] if cfg.use_revin else None
            eps = ad.getitem(self.gin_eps, i)
            h = self._restore(
                self._layer(h, lambda t, m=mlp, e=eps: gin_layer(t, graphs["decoder"], e, m), rv), batch
            )
            channels.append(h)
        out = self.convergence(ad.stack(channels, axis=-1))
        return (out, channels) if return_channels else out

    def discriminate(self, z: Tensor, grl_lambda: float | None = 1.0) -> Tensor:
        if grl_lambda is not None:
            z = ad.gradient_reversal(z, grl_lambda)
        return self.discriminator(z)

    def forward(self, batch: KrigeBatch, with_discriminator: bool = True, grl_lambda: float | None = 1.0):
        """Returns ``(X_hat, Label_D)``; ``Label_D`` is ``None`` when skipped."""
        cache = self._cached()
        graphs = self.graphs(batch, cache)
        z = self.encode(batch, graphs)
        xhat = self.decode(z, batch, graphs)
        label_d = self.discriminate(z, grl_lambda) if with_discriminator else None
        return xhat, label_d

    __call__ = forward


def build_model(config: ModelConfig | None = None, seed: int = 0, has_coordinates: bool = True) -> STAGANN:
    """Model for a dataset; falls back to the linear embedding without coordinates."""
    cfg = config or ModelConfig()
    if not has_coordinates and cfg.use_location:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "use_location": False})
    return STAGANN(cfg, seed)
