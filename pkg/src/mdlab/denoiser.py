"""Conditional noise predictor with masked cross-attention and
background-restricted self-attention.

Two branches share one set of weights:

* the full branch sees ``z_t`` and contexts ``(C_def, C_bg)``; its
  self-attention is unrestricted;
* the masked branch sees ``z_t^m`` and contexts ``(C_m, C_bg)``; its
  self-attention only reads keys/values at background positions, so its
  background output is a function of background input alone.

Every cross-attention layer mixes ``m' * (M_fg V_fg) + (1 - m') * (M_bg V_bg)``
where ``m'`` is the mask at that layer's resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractViolationError, InvalidMaskError
from .schedule import check_binary, make_linear_schedule, resize_mask

NEG = -1e9


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 4
    size: int = 16
    widths: tuple[int, int] = (32, 64)
    d_c: int = 32
    tokens: int = 4
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    temb_dim: int = 64
    var_floor: float = 1e-8

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "size": self.size,
            "widths": list(self.widths),
            "d_c": self.d_c,
            "tokens": self.tokens,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "temb_dim": self.temb_dim,
            "var_floor": self.var_floor,
        }


class ContextSet(nn.Module):
    """Learned context embeddings. ``c1``/``c2`` hand out the shared parameter
    objects themselves, so updates to ``C_bg`` are seen by both."""

    def __init__(self, tokens: int = 4, d_c: int = 32, generator: torch.Generator | None = None):
        super().__init__()
        mk = lambda: nn.Parameter(torch.randn(tokens, d_c, generator=generator))
        self.c_def = mk()
        self.c_bg = mk()
        self.c_m = mk()

    @property
    def c1(self) -> tuple[nn.Parameter, nn.Parameter]:
        return self.c_def, self.c_bg

    @property
    def c2(self) -> tuple[nn.Parameter, nn.Parameter]:
        return self.c_m, self.c_bg


@dataclass
class AttentionRecord:
    """Cross-attention maps ``softmax(Q K_fg^T / tau)`` per layer, shape (B, N, tokens)."""

    branch: str
    maps: list[torch.Tensor] = field(default_factory=list)
    resolutions: list[tuple[int, int]] = field(default_factory=list)
    masks: list[torch.Tensor] = field(default_factory=list)
    t: int | None = None


def sinusoidal_table(T: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = torch.arange(T + 1, dtype=torch.float64)[:, None] * freqs[None]
    return torch.cat([ang.sin(), ang.cos()], dim=1).float()


class SelfAttention(nn.Module):
    def __init__(self, w: int):
        super().__init__()
        self.q = nn.Linear(w, w, bias=False)
        self.k = nn.Linear(w, w, bias=False)
        self.v = nn.Linear(w, w, bias=False)
        self.out = nn.Linear(w, w)
        self.tau = math.sqrt(w)
        self.last_values: torch.Tensor | None = None

    def forward(self, x, key_mask=None):
        # key_mask: (B, N, 1), 1 where keys/values are excluded
        if key_mask is not None:
            x_kv = torch.where(key_mask > 0, torch.zeros((), dtype=x.dtype), x)
        else:
            x_kv = x
        q, k, v = self.q(x), self.k(x_kv), self.v(x_kv)
        self.last_values = v
        logits = q @ k.transpose(1, 2) / self.tau
        if key_mask is not None:
            logits = torch.where(key_mask.transpose(1, 2) > 0, torch.full((), NEG, dtype=x.dtype), logits)
        return self.out(torch.softmax(logits, dim=-1) @ v)


class CrossAttention(nn.Module):
    def __init__(self, w: int, d_c: int):
        super().__init__()
        self.q = nn.Linear(w, w, bias=False)
        self.k = nn.Linear(d_c, w, bias=False)
        self.v = nn.Linear(d_c, w, bias=False)
        self.out = nn.Linear(w, w)
        self.tau = math.sqrt(w)

    def forward(self, x, c_fg, c_bg, m):
        q = self.q(x)
        m_fg = torch.softmax(q @ self.k(c_fg).T / self.tau, dim=-1)
        m_bg = torch.softmax(q @ self.k(c_bg).T / self.tau, dim=-1)
        mixed = torch.where(m > 0, m_fg @ self.v(c_fg), m_bg @ self.v(c_bg))
        return self.out(mixed), m_fg


class Block(nn.Module):
    def __init__(self, w: int, d_c: int, temb: int):
        super().__init__()
        self.t_proj = nn.Linear(temb, w)
        self.n1 = nn.LayerNorm(w)
        self.sa = SelfAttention(w)
        self.n2 = nn.LayerNorm(w)
        self.ca = CrossAttention(w, d_c)
        self.n3 = nn.LayerNorm(w)
        self.mlp = nn.Sequential(nn.Linear(w, 2 * w), nn.SiLU(), nn.Linear(2 * w, w))

    def forward(self, h, temb, c_fg, c_bg, m, restrict):
        h = h + self.t_proj(temb)[:, None, :]
        h = h + self.sa(self.n1(h), m if restrict else None)
        a, attn = self.ca(self.n2(h), c_fg, c_bg, m)
        h = h + a
        h = h + self.mlp(self.n3(h))
        return h, attn


def _tokens(x: torch.Tensor) -> torch.Tensor:
    b, c, hh, ww = x.shape
    return x.reshape(b, c, hh * ww).transpose(1, 2)


def _grid(x: torch.Tensor, hh: int, ww: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.transpose(1, 2).reshape(b, c, hh, ww)


class Denoiser(nn.Module):
    """Two-level encoder/decoder over latent grids built from per-position
    transforms plus attention.

    The network output is added to a closed-form baseline: the exact noise
    estimate for Gaussian data with mean ``prior_mean`` and per-channel
    variance ``prior_var`` (both fitted from training latents). With a single
    training latent the variance vanishes and the baseline is already the
    zero-loss predictor, so the learned part only has to model residual
    structure.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)
        w1, w2 = cfg.widths
        s1, s2 = cfg.size, cfg.size // 2
        self.resolutions = [(s1, s1), (s2, s2)]
        self.register_buffer("t_table", sinusoidal_table(cfg.T, cfg.temb_dim), persistent=False)
        sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.register_buffer("alpha_bar", torch.from_numpy(sched.alpha_bar).float(), persistent=False)
        self.register_buffer("prior_mean", torch.zeros(cfg.channels, cfg.size, cfg.size))
        self.register_buffer("prior_var", torch.ones(cfg.channels, 1, 1))
        self.t_mlp = nn.Sequential(nn.Linear(cfg.temb_dim, cfg.temb_dim), nn.SiLU(), nn.Linear(cfg.temb_dim, cfg.temb_dim))
        self.phi = nn.Sequential(nn.Linear(cfg.channels, w1), nn.SiLU(), nn.Linear(w1, w1))
        self.pos1 = nn.Parameter(0.02 * torch.randn(s1 * s1, w1, generator=g))
        self.pos2 = nn.Parameter(0.02 * torch.randn(s2 * s2, w2, generator=g))
        self.enc1 = Block(w1, cfg.d_c, cfg.temb_dim)
        self.down = nn.Linear(w1, w2)
        self.mid = Block(w2, cfg.d_c, cfg.temb_dim)
        self.up = nn.Linear(w1 + w2, w1)
        self.dec1 = Block(w1, cfg.d_c, cfg.temb_dim)
        self.head = nn.Sequential(nn.LayerNorm(w1), nn.SiLU(), nn.Linear(w1, cfg.channels))
        self._init(g)
        self.contexts = ContextSet(cfg.tokens, cfg.d_c, generator=g)

    def _init(self, g):
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                bound = 1.0 / math.sqrt(mod.in_features)
                with torch.no_grad():
                    mod.weight.uniform_(-bound, bound, generator=g)
                    if mod.bias is not None:
                        mod.bias.zero_()

    @torch.no_grad()
    def fit_prior(self, latents: torch.Tensor) -> None:
        """Set the Gaussian baseline from data: per-position mean, per-channel variance."""
        mu = latents.mean(dim=0)
        self.prior_mean.copy_(mu)
        self.prior_var.copy_((latents - mu).pow(2).mean(dim=(0, 2, 3))[:, None, None])

    def baseline(self, z, t):
        """Optimal noise estimate for Gaussian data N(prior_mean, prior_var)."""
        if isinstance(t, torch.Tensor) and t.dim() > 0:
            a = self.alpha_bar[t.long()].reshape(-1, 1, 1, 1)
        else:
            a = self.alpha_bar[int(t)].reshape(1, 1, 1, 1)
        a = a.double()
        var = self.prior_var.double().clamp_min(self.cfg.var_floor)
        gain = ((1 - a).sqrt() / (a * var + (1 - a))).to(z.dtype)
        return gain * (z - a.sqrt().to(z.dtype) * self.prior_mean)

    # ------------------------------------------------------------ masks
    def mask_chain(self, m_prime, batch: int) -> list[torch.Tensor]:
        """Per-level masks as (B, N, 1) token columns."""
        if isinstance(m_prime, (list, tuple)):
            chain = list(m_prime)
            if len(chain) != len(self.resolutions):
                raise InvalidMaskError(f"expected {len(self.resolutions)} mask levels, got {len(chain)}")
        else:
            m = m_prime
            if m.dim() == 2:
                m = m[None, None]
            elif m.dim() == 3:
                m = m[:, None]
            if m.shape[-2:] != self.resolutions[0]:
                raise InvalidMaskError(f"mask extents {tuple(m.shape[-2:])} != {self.resolutions[0]}")
            chain = [resize_mask(m, *r) for r in self.resolutions]
        out = []
        for m, r in zip(chain, self.resolutions):
            if m.dim() == 2:
                m = m[None, None]
            elif m.dim() == 3:
                m = m[:, None]
            if tuple(m.shape[-2:]) != r:
                raise InvalidMaskError(f"mask extents {tuple(m.shape[-2:])} do not match layer resolution {r}")
            check_binary(m)
            m = m.expand(batch, 1, *r)
            out.append(_tokens(m))
        return out

    def _temb(self, t, batch):
        if isinstance(t, torch.Tensor) and t.dim() > 0:
            idx = t.long()
        else:
            idx = torch.full((batch,), int(t), dtype=torch.long)
        return self.t_mlp(self.t_table[idx])

    def forward(self, z, t, c_fg, c_bg, m_prime, restrict: bool = False, capture: bool = False):
        b, c, hh, ww = z.shape
        masks = self.mask_chain(m_prime, b)
        temb = self._temb(t, b)
        (s1, _), (s2, _) = self.resolutions
        rec = AttentionRecord(branch="masked" if restrict else "full") if capture else None

        h1 = self.phi(_tokens(z)) + self.pos1
        h1, a = self.enc1(h1, temb, c_fg, c_bg, masks[0], restrict)
        if rec is not None:
            rec.maps.append(a)
            rec.resolutions.append((s1, s1))
            rec.masks.append(masks[0])

        h2 = F.avg_pool2d(_grid(h1, s1, s1), 2)
        h2 = self.down(_tokens(h2)) + self.pos2
        h2, a = self.mid(h2, temb, c_fg, c_bg, masks[1], restrict)
        if rec is not None:
            rec.maps.append(a)
            rec.resolutions.append((s2, s2))
            rec.masks.append(masks[1])

        up = _tokens(F.interpolate(_grid(h2, s2, s2), scale_factor=2, mode="nearest"))
        h = self.up(torch.cat([h1, up], dim=-1))
        h, a = self.dec1(h, temb, c_fg, c_bg, masks[0], restrict)
        if rec is not None:
            rec.maps.append(a)
            rec.resolutions.append((s1, s1))
            rec.masks.append(masks[0])

        eps = self.baseline(z, t) + _grid(self.head(h), hh, ww)
        return eps, rec


# ---------------------------------------------------------------- public ops


def forward_full(z_t, t, model: Denoiser, m_prime, ctx: ContextSet | None = None, capture: bool = False):
    """eps_theta(z_t, t, C_1); returns ``(eps_hat, record-or-None)``."""
    ctx = model.contexts if ctx is None else ctx
    c_def, c_bg = ctx.c1
    return model(z_t, t, c_def, c_bg, m_prime, restrict=False, capture=capture)


def forward_masked(z_t_m, t, model: Denoiser, m_prime, ctx: ContextSet | None = None, capture: bool = False):
    """eps_theta(z_t^m, t, C_2). Requires ``m' * z_t^m == 0`` at the latent resolution."""
    ctx = model.contexts if ctx is None else ctx
    m = m_prime[0] if isinstance(m_prime, (list, tuple)) else m_prime
    mm = m if m.dim() == z_t_m.dim() else (m[None, None] if m.dim() == 2 else m[:, None])
    if torch.any((mm * z_t_m).abs() > 1e-6):
        raise ContractViolationError("masked-branch input is nonzero inside the mask")
    c_m, c_bg = ctx.c2
    eps, rec = model(z_t_m, t, c_m, c_bg, m_prime, restrict=True, capture=capture)
    return (eps, rec) if capture else eps


def combined_eps(pair, model: Denoiser, ctx: ContextSet | None = None) -> torch.Tensor:
    """m * eps(z_t, C_1) + (1 - m) * eps(z_t^m, C_2)."""
    m = pair.m
    full, _ = forward_full(pair.z_t, pair.t, model, m, ctx)
    masked = forward_masked(pair.z_t_m, pair.t, model, m, ctx)
    return torch.where(m > 0, full, masked)


def save_denoiser(directory, model: Denoiser, extra: dict | None = None):
    from .io import save_state

    meta = {"kind": "denoiser", "config": model.cfg.to_dict(), **(extra or {})}
    return save_state(directory, model.state_dict(), meta)


def load_denoiser(directory) -> tuple[Denoiser, dict]:
    from .io import load_state

    state, meta = load_state(directory)
    c = dict(meta["config"])
    c["widths"] = tuple(c["widths"])
    model = Denoiser(DenoiserConfig(**c))
    model.load_state_dict(state)
    return model, meta
