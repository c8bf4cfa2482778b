"""Dynamic graph construction from frequency content plus timestamp/coordinate metadata.

Node embeddings are built from per-window spectra and metadata only, never
from per-sensor parameters, so a trained module runs on any sensor count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import topk_mask, topk_sparsify
from .nn import Linear, Module, xavier_uniform
from .spectral import rfft

# digits 0-9, then sign and decimal point
TOKENS = {**{str(d): d for d in range(10)}, "+": 10, "-": 11, ".": 12}
VOCAB_SIZE = len(TOKENS)
TOKENS_PER_COORD = 9  # sign, 3 integer digits, point, 4 fraction digits


@dataclass(frozen=True)
class CalendarConfig:
    step_minutes: int = 5

    def __post_init__(self):
        if self.step_minutes <= 0 or (24 * 60) % self.step_minutes:
            raise ValueError(f"step of {self.step_minutes} min does not divide a day")

    @property
    def steps_per_day(self) -> int:
        return 24 * 60 // self.step_minutes


def time_indices(timestamps, calendar: CalendarConfig) -> tuple[np.ndarray, np.ndarray]:
    """Time-of-day slot and day-of-week (Monday = 0) for each timestamp."""
    ts = np.asarray(timestamps, dtype="datetime64[m]")
    minutes = ts.astype(np.int64)
    minute_of_day = minutes % (24 * 60)
    tod = minute_of_day // calendar.step_minutes
    days = minutes // (24 * 60)
    dow = (days + 3) % 7  # 1970-01-01 was a Thursday
    return tod.astype(np.int64), dow.astype(np.int64)


def tokenize_coordinate(value: float) -> list[int]:
    """Fixed layout: sign, 3 zero-padded integer digits, point, 4 fraction digits."""
    if not np.isfinite(value):
        raise ValueError(f"coordinate must be finite, got {value}")
    mag = min(abs(float(value)), 999.9999)
    text = f"{mag:08.4f}"
    sign = "-" if value < 0 and text != "000.0000" else "+"
    return [TOKENS[ch] for ch in sign + text]


def frequency_features(x, n_features: int = 20) -> np.ndarray:
    """Amplitudes of the first ceil(F/2) bins then phases of the first floor(F/2)."""
    x = np.asarray(x, dtype=np.float64)
    n_amp = (n_features + 1) // 2
    n_phase = n_features // 2
    n_bins = x.shape[-1] // 2 + 1
    if n_amp > n_bins:
        raise ValueError(f"F={n_features} needs {n_amp} bins but L={x.shape[-1]} gives {n_bins}")
    spec = rfft(x)
    return np.concatenate([spec.amplitude[..., :n_amp], spec.phase[..., :n_phase]], axis=-1)


class D3MGM(Module):
    """Metadata tables, embedding networks and per-graph edge vectors."""

    def __init__(
        self,
        rng: np.random.Generator,
        steps_per_day: int = 288,
        embed_dim: int = 12,
        n_features: int = 20,
        time_dim: int = 6,
        digit_dim: int = 4,
        heads: int = 2,
        graphs: tuple[str, ...] = ("trend", "residual", "decoder"),
        use_location: bool = True,
        use_timestamp: bool = True,
        length: int = 24,
    ):
        if embed_dim % heads:
            raise ValueError("embedding dimension must be divisible by head count")
        self.embed_dim = embed_dim
        self.n_features = n_features
        self.heads = heads
        self.use_location = use_location
        self.use_timestamp = use_timestamp
        self.length = length
        self.graph_names = tuple(graphs)
        self.time_of_day = ad.Tensor(xavier_uniform(steps_per_day, time_dim, rng), requires_grad=True)
        self.day_of_week = ad.Tensor(xavier_uniform(7, time_dim, rng), requires_grad=True)
        t_dim = 2 * time_dim if use_timestamp else 0
        if use_location:
            self.digits = ad.Tensor(xavier_uniform(VOCAB_SIZE, digit_dim, rng), requires_grad=True)
            self.coord_proj = Linear(2 * TOKENS_PER_COORD * digit_dim, embed_dim, rng)
            self.query = Linear(t_dim + embed_dim, embed_dim, rng)
            self.key = Linear(n_features, embed_dim, rng)
            self.value = Linear(n_features, embed_dim, rng)
            self.out = Linear(embed_dim, embed_dim, rng)
        else:
            self.linear = Linear(t_dim + n_features, embed_dim, rng)
        for name in self.graph_names:
            setattr(self, f"edge_{name}", ad.Tensor(np.ones(embed_dim), requires_grad=True))

    # -- metadata ---------------------------------------------------------
    def embed_timestamps(self, timestamps, calendar: CalendarConfig) -> Tensor:
        """``(B, 2*time_dim)`` rows: time-of-day slot then day of week."""
        tod, dow = time_indices(np.atleast_1d(timestamps), calendar)
        if np.any(tod >= self.time_of_day.shape[0]):
            raise ValueError("calendar has more slots per day than the time-of-day table")
        return ad.concat([ad.take(self.time_of_day, tod), ad.take(self.day_of_week, dow)], axis=-1)

    def embed_coordinates(self, coords) -> Tensor:
        """``(N, E)`` embedding of ``(lat, lon)`` pairs via digit tokens."""
        coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
        tokens = np.array([tokenize_coordinate(c[0]) + tokenize_coordinate(c[1]) for c in coords])
        rows = ad.take(self.digits, tokens)  # (N, 18, digit_dim)
        flat = ad.reshape(rows, (coords.shape[0], -1))
        return self.coord_proj(flat)

    # -- embeddings and graphs ----------------------------------------------
    def build_embedding(self, freq, time_emb: Tensor | None, coord_emb: Tensor | None) -> Tensor:
        """Node embedding ``(B, N, E)``; attention when coordinates exist, else linear."""
        freq = ad.as_tensor(freq)
        if freq.ndim == 2:
            freq = ad.reshape(freq, (1,) + freq.shape)
        b, n, _ = freq.shape
        if time_emb is not None and time_emb.ndim == 1:
            time_emb = ad.reshape(time_emb, (1, -1))
        if coord_emb is None or not self.use_location:
            if self.use_location:
                raise ValueError("module was built for the coordinate (attention) path")
            parts = [freq]
            if self.use_timestamp:
                parts.insert(0, ad.broadcast_to(ad.reshape(time_emb, (b, 1, -1)), (b, n, time_emb.shape[-1])))
            return self.linear(ad.concat(parts, axis=-1))
        q_in = ad.broadcast_to(ad.reshape(coord_emb, (1, n, -1)), (b, n, coord_emb.shape[-1]))
        if self.use_timestamp:
            t = ad.broadcast_to(ad.reshape(time_emb, (b, 1, -1)), (b, n, time_emb.shape[-1]))
            q_in = ad.concat([t, q_in], axis=-1)
        d = self.embed_dim // self.heads

        def split(t):
            return ad.transpose(ad.reshape(t, (b, n, self.heads, d)), (0, 2, 1, 3))

        q_proj = self.query(q_in)
        q, k, v = split(q_proj), split(self.key(freq)), split(self.value(freq))
        att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d)))
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, n, self.embed_dim))
        # residual from the query keeps each sensor's own metadata in its embedding
        return ad.add(self.out(ctx), q_proj)

    def edge_scores(self, de: Tensor, name: str) -> Tensor:
        """``s_ij = sum_e W_e[e] DE_i[e] DE_j[e]``."""
        w = getattr(self, f"edge_{name}")
        return ad.matmul(ad.mul(de, w), ad.swapaxes(de, -1, -2))

    def build_dynamic_graph(self, de: Tensor, name: str, k: int, cache=None) -> Tensor:
        """Top-k sparsified, row-softmaxed adjacency from the edge scores."""
        scores = self.edge_scores(de, name)
        if cache is None:
            return topk_sparsify(scores, k)
        if scores.shape[-1] < 2:
            return Tensor(np.zeros(scores.shape))
        mask = cache(("topk", name), lambda: topk_mask(scores.data, k))
        return ad.softmax_rows(scores, mask=mask)

    def features(self, x: np.ndarray) -> np.ndarray:
        """Frequency features with amplitudes rescaled by 2/L (unit tone -> 1)."""
        f = frequency_features(x, self.n_features)
        n_amp = (self.n_features + 1) // 2
        f[..., :n_amp] *= 2.0 / self.length
        return f

    def __call__(self, x: np.ndarray, timestamps, calendar: CalendarConfig, coords=None) -> Tensor:
        """Node embeddings for a ``(B, N, L)`` window stack."""
        freq = self.features(x)
        time_emb = self.embed_timestamps(timestamps, calendar) if self.use_timestamp else None
        coord_emb = None
        if self.use_location:
            if coords is None:
                raise ValueError("coordinates required for the attention path; build with use_location=False")
            coord_emb = self.embed_coordinates(coords)
        return self.build_embedding(freq, time_emb, coord_emb)
