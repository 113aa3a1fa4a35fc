"""Per-model communication encoder/decoder around a shared message space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, DimensionError
from .nets import Dense, HiddenStates


@dataclass
class Message:
    """A batch of vectors in the shared message space.

    ``iteration`` is the communication round that produced it; the
    consistency losses only accept round-0 messages.
    """

    tensor: nk.Tensor
    iteration: int = 0

    @property
    def width(self):
        return self.tensor.shape[-1]


class DenseReluDense:
    """dense -> relu -> layer_norm -> dropout -> dense."""

    def __init__(self, in_dim, hidden, out_dim, rng, dropout=0.1, name="drd"):
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {dropout}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.fc1 = Dense(in_dim, hidden, rng, name=f"{name}.fc1")
        self.gamma = nk.parameter(np.ones(hidden), name=f"{name}.ln.gamma")
        self.beta = nk.parameter(np.zeros(hidden), name=f"{name}.ln.beta")
        self.fc2 = Dense(hidden, out_dim, rng, name=f"{name}.fc2")
        self.dropout = dropout

    def __call__(self, x, training=False, rng=None):
        h = nk.relu(self.fc1(x))
        h = nk.layer_norm(h, self.gamma, self.beta)
        h = nk.dropout(h, self.dropout, rng, training=training)
        return self.fc2(h)

    def named_parameters(self):
        return [*self.fc1.named_parameters(), (self.gamma.name, self.gamma),
                (self.beta.name, self.beta), *self.fc2.named_parameters()]


class CommChannel:
    """Encoder ``E`` and decoder ``D`` owned by one model.

    ``E`` maps ``{s; e}`` (s first) to the message space and ``D`` maps a
    message back to ``{s'; e'}``. ``decoder_in`` overrides the decoder's
    input width; FitNet feeds raw teacher states straight into ``D``.
    """

    def __init__(self, owner, s_width, e_width, msg_dim=128, hidden=256, dropout=0.1,
                 rng=None, decoder_in=None, with_encoder=True):
        rng = np.random.default_rng(0) if rng is None else rng
        self.owner = owner
        self.s_width, self.e_width = s_width, e_width
        self.msg_dim = msg_dim
        width = s_width + e_width
        self.encoder = (DenseReluDense(width, hidden, msg_dim, rng, dropout, name=f"E_{owner}")
                        if with_encoder else None)
        self.decoder = DenseReluDense(decoder_in or msg_dim, hidden, width, rng, dropout,
                                      name=f"D_{owner}")

    def encode(self, states: HiddenStates, iteration=0, training=False, rng=None) -> Message:
        if states.widths != (self.s_width, self.e_width):
            raise DimensionError(
                f"E_{self.owner}: expected state widths {(self.s_width, self.e_width)}, "
                f"got {states.widths}")
        return Message(self.encoder(states.cat(), training, rng), iteration)

    def decode(self, m, training=False, rng=None) -> HiddenStates:
        x = m.tensor if isinstance(m, Message) else m
        if x.shape[-1] != self.decoder.in_dim:
            raise DimensionError(
                f"D_{self.owner}: expected input width {self.decoder.in_dim}, got {x.shape}")
        out = self.decoder(x, training, rng)
        return HiddenStates(nk.take_cols(out, 0, self.s_width),
                            nk.take_cols(out, self.s_width, self.s_width + self.e_width))

    def named_parameters(self):
        """Names are prefixed ``E_<owner>.`` / ``D_<owner>.``."""
        enc = self.encoder.named_parameters() if self.encoder is not None else []
        return enc + self.decoder.named_parameters()

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def add_noise(s_prime, sigma, rng):
    """``s' + N(0, sigma^2 I)`` drawn from ``rng``; identity when sigma is 0."""
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return s_prime
    noise = rng.normal(0.0, sigma, size=s_prime.shape).astype(s_prime.data.dtype)
    return s_prime + nk.Tensor(noise, dtype=s_prime.data.dtype)
