"""The value learner: scene encoder, action fusion, and all loss heads.

Architecture (desk scale): a 4-block strided conv stack over a
multi-channel raster of the scene.  Action information enters one of two
ways, selected by ``action_repr``:

- ``film``: an action MLP produces per-channel (scale, shift) applied to
  the third block's feature map (``gamma = 1 + dgamma`` so a zeroed MLP is
  the identity), and the fourth block runs on the modulated features;
- ``render``: the action balls are drawn into the raster's agent channel
  and the plain conv stack is used end to end.

Heads on the pooled embedding ``e``:

- score: linear -> solved logit, trained with sigmoid BCE;
- pair head: projection -> combine (elementwise | concat | bilinear) ->
  bin logits over the quantized rollout similarity (or a scalar for the
  MSE regression variant).  The bilinear combiner averages both argument
  orders, making the head symmetric like its target;
- contrastive head: projection ``z`` matched against an embedding of
  ``contrast_frames`` consecutive rollout frames via InfoNCE.

Raster channels, in order: scenery, goal subject, goal target, agent
(action) balls.  Pixel (row, col) covers the world point
``x = (col + .5)/S``, ``y = 1 - (row + .5)/S``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .physics import (CIRCLE, ROLE_AGENT, ROLE_SCENERY, ROLE_SUBJECT,
                      ROLE_TARGET, Scene, scene_at_frame)

CHANNELS = (ROLE_SCENERY, ROLE_SUBJECT, ROLE_TARGET, ROLE_AGENT)
N_CHANNELS = len(CHANNELS)

COMBINERS = ("elementwise", "concat", "bilinear")
PROJECTIONS = ("none", "linear", "mlp2", "mlp3")
LOSS_MODES = ("baseline", "handcrafted", "selfsup")
ACTION_REPRS = ("auto", "film", "render")


@dataclass(frozen=True)
class ModelConfig:
    loss_mode: str = "handcrafted"
    action_repr: str = "auto"        # auto: film, except render in selfsup
    combiner: str = "bilinear"
    projection: str = "linear"
    bins: int = 20
    aux_target: str = "bins"         # "bins" | "mse"
    contrast_frames: int = 2
    temperature: float = 0.1
    negatives: int = 63
    aux_weight: float = 1.0
    window: str = "entire"
    raster_size: int = 64
    base_channels: int = 16          # conv widths: c, 2c, 4c, emb_dim
    emb_dim: int = 128
    p_dim: int = 256
    action_dim: int = 3
    act_hidden: int = 64

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if self.action_repr not in ACTION_REPRS:
            raise ConfigError(f"unknown action_repr {self.action_repr!r}")
        if self.combiner not in COMBINERS:
            raise ConfigError(f"unknown combiner {self.combiner!r}")
        if self.projection not in PROJECTIONS:
            raise ConfigError(f"unknown projection {self.projection!r}")
        if self.aux_target not in ("bins", "mse"):
            raise ConfigError(f"unknown aux_target {self.aux_target!r}")
        if self.bins < 2 or self.contrast_frames < 1:
            raise ConfigError("bins >= 2 and contrast_frames >= 1 required")
        if self.temperature <= 0 or self.aux_weight < 0:
            raise ConfigError("temperature > 0 and aux_weight >= 0 required")
        if self.raster_size < 8 or self.raster_size % 8:
            raise ConfigError("raster_size must be a multiple of 8, >= 8")
        if self.action_dim not in (3, 6):
            raise ConfigError("action_dim must be 3 or 6")

    @property
    def repr_mode(self) -> str:
        if self.action_repr != "auto":
            return self.action_repr
        return "render" if self.loss_mode == "selfsup" else "film"

    @property
    def conv_channels(self):
        c = self.base_channels
        return (c, 2 * c, 4 * c, self.emb_dim)


# ---------------------------------------------------------------------------
# rasterization (plain numpy; rasters are inputs, not differentiated)

_GRIDS: dict = {}


def _grid(size: int):
    if size not in _GRIDS:
        centers = (np.arange(size) + 0.5) / size
        xx = np.broadcast_to(centers[None, :], (size, size))
        yy = np.broadcast_to(centers[::-1][:, None], (size, size))
        _GRIDS[size] = (np.ascontiguousarray(xx), np.ascontiguousarray(yy))
    return _GRIDS[size]


def rasterize(scene: Scene, action=None, size: int = 64) -> np.ndarray:
    """(channels, size, size) float32 raster; row 0 is the top of the scene."""
    xx, yy = _grid(size)
    img = np.zeros((N_CHANNELS, size, size), dtype=np.float32)
    line_w = 0.6 / size
    bodies = list(scene.bodies)
    if action is not None:
        bodies += list(action.world_bodies() if hasattr(action, "world_bodies")
                       else action)
    for b in bodies:
        ch = CHANNELS.index(b.role)
        if b.shape == CIRCLE:
            mask = (xx - b.x) ** 2 + (yy - b.y) ** 2 <= b.radius ** 2
        else:
            abx, aby = b.x1 - b.x0, b.y1 - b.y0
            ab2 = abx * abx + aby * aby
            t = np.clip(((xx - b.x0) * abx + (yy - b.y0) * aby) / ab2, 0.0, 1.0)
            mask = (xx - (b.x0 + t * abx)) ** 2 + (yy - (b.y0 + t * aby)) ** 2 \
                <= line_w ** 2
        img[ch][mask] = 1.0
    return img


def rasterize_frames(scene: Scene, action, roll, frame_indices,
                     size: int = 64) -> np.ndarray:
    """Raster per rollout frame, action already merged into the world."""
    out = np.empty((len(frame_indices), N_CHANNELS, size, size), dtype=np.float32)
    for k, f in enumerate(frame_indices):
        out[k] = rasterize(scene_at_frame(scene, action, roll, int(f)), None, size)
    return out


# ---------------------------------------------------------------------------
# parameters

def _proj_layers(name, depth, d_in, d_out, hidden, specs):
    if depth == "none":
        return
    if depth == "linear":
        specs.append((f"{name}1.w", (d_in, d_out), d_in))
        specs.append((f"{name}1.b", (d_out,), None))
        return
    n = 2 if depth == "mlp2" else 3
    dims = [d_in] + [hidden] * (n - 1) + [d_out]
    for i in range(n):
        specs.append((f"{name}{i + 1}.w", (dims[i], dims[i + 1]), dims[i]))
        specs.append((f"{name}{i + 1}.b", (dims[i + 1],), None))


def param_specs(cfg: ModelConfig):
    """(name, shape, fan_in) for every tensor; fan_in None means zeros."""
    c1, c2, c3, c4 = cfg.conv_channels
    specs = []
    for i, (ci, co) in enumerate(zip((N_CHANNELS, c1, c2, c3), (c1, c2, c3, c4))):
        specs.append((f"enc{i + 1}.w", (co, ci, 3, 3), ci * 9))
        specs.append((f"enc{i + 1}.b", (co,), None))
    specs.append(("act1.w", (cfg.action_dim, cfg.act_hidden), cfg.action_dim))
    specs.append(("act1.b", (cfg.act_hidden,), None))
    specs.append(("act2.w", (cfg.act_hidden, 2 * c3), cfg.act_hidden))
    specs.append(("act2.b", (2 * c3,), None))
    specs.append(("score.w", (cfg.emb_dim, 1), cfg.emb_dim))
    specs.append(("score.b", (1,), None))

    p_dim = cfg.p_dim if cfg.projection != "none" else cfg.emb_dim
    _proj_layers("proj", cfg.projection, cfg.emb_dim, cfg.p_dim, cfg.p_dim, specs)
    k_out = cfg.bins if cfg.aux_target == "bins" else 1
    if cfg.combiner == "elementwise":
        specs.append(("bin.w", (p_dim, k_out), p_dim))
    elif cfg.combiner == "concat":
        specs.append(("bin.w", (2 * p_dim, k_out), 2 * p_dim))
    else:
        specs.append(("bin.w", (k_out, p_dim, p_dim), p_dim * p_dim))
    specs.append(("bin.b", (k_out,), None))

    _proj_layers("zproj", cfg.projection, cfg.emb_dim, cfg.emb_dim,
                 cfg.emb_dim, specs)
    specs.append(("roll1.w", (cfg.contrast_frames * cfg.emb_dim, cfg.emb_dim),
                  cfg.contrast_frames * cfg.emb_dim))
    specs.append(("roll1.b", (cfg.emb_dim,), None))
    specs.append(("roll2.w", (cfg.emb_dim, cfg.emb_dim), cfg.emb_dim))
    specs.append(("roll2.b", (cfg.emb_dim,), None))
    return specs


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Kaiming-uniform weights, zero biases, drawn in spec order."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
    params = {}
    for name, shape, fan_in in param_specs(cfg):
        if fan_in is None:
            params[name] = Tensor(np.zeros(shape, dtype=np.float32),
                                  requires_grad=True)
        else:
            params[name] = Tensor(ad.kaiming_uniform(shape, fan_in, rng),
                                  requires_grad=True)
    return params


def params_from_arrays(arrays: dict, requires_grad: bool = False) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


# ---------------------------------------------------------------------------
# forward pieces

def _mlp(params, name, x, depth):
    if depth == "none":
        return x
    n = {"linear": 1, "mlp2": 2, "mlp3": 3}[depth]
    for i in range(1, n + 1):
        x = ad.affine(x, params[f"{name}{i}.w"], params[f"{name}{i}.b"])
        if i < n:
            x = ad.relu(x)
    return x


def conv_to_block3(params, rasters) -> Tensor:
    h = ad.as_tensor(rasters)
    for i in (1, 2, 3):
        h = ad.relu(ad.conv2d(h, params[f"enc{i}.w"], params[f"enc{i}.b"],
                              stride=2, padding=1))
    return h


def block4_pool(params, h) -> Tensor:
    h = ad.relu(ad.conv2d(h, params["enc4.w"], params["enc4.b"],
                          stride=2, padding=1))
    return ad.mean_pool(h)


def encode_plain(params, rasters) -> Tensor:
    """Rasters (B, C, S, S) -> embeddings (B, emb) without FiLM."""
    return block4_pool(params, conv_to_block3(params, rasters))


def film_coeffs(params, actions) -> tuple:
    """Action vectors (B, adim) -> (gamma, beta), gamma = 1 + dgamma."""
    a = ad.as_tensor(actions)
    hid = ad.relu(ad.affine(a, params["act1.w"], params["act1.b"]))
    gb = ad.affine(hid, params["act2.w"], params["act2.b"])
    c3 = gb.shape[1] // 2
    dgamma = ad.reshape(gather_cols(gb, 0, c3), (gb.shape[0], c3))
    beta = ad.reshape(gather_cols(gb, c3, 2 * c3), (gb.shape[0], c3))
    ones = Tensor(np.ones_like(dgamma.data))
    return ad.add(dgamma, ones), beta


def gather_cols(t: Tensor, lo: int, hi: int) -> Tensor:
    """Column slice as an op (keeps the graph simple and testable)."""
    tt = ad.transpose(t)
    sl = ad.gather_rows(tt, np.arange(lo, hi))
    return ad.transpose(sl)


def embed_film(params, rasters, actions, task_idx=None) -> Tensor:
    """Scene-action embedding via FiLM fusion after the third block.

    ``rasters`` may be one raster per sample, or one per unique scene with
    ``task_idx`` mapping samples to raster rows (the conv prefix then runs
    once per scene).
    """
    h3 = conv_to_block3(params, rasters)
    if task_idx is not None:
        h3 = ad.gather_rows(h3, task_idx)
    gamma, beta = film_coeffs(params, actions)
    return block4_pool(params, ad.film(h3, gamma, beta))


def score(params, e) -> Tensor:
    """Linear scoring head: e (B, emb) -> logits (B,)."""
    out = ad.affine(e, params["score.w"], params["score.b"])
    return ad.reshape(out, (out.shape[0],))


def solved_loss(logits, labels) -> Tensor:
    return ad.sigmoid_bce(logits, labels)


def project_pair(params, cfg: ModelConfig, e) -> Tensor:
    return _mlp(params, "proj", e, cfg.projection)


def project_contrastive(params, cfg: ModelConfig, e) -> Tensor:
    return _mlp(params, "zproj", e, cfg.projection)


def pair_head(params, cfg: ModelConfig, p_a, p_b) -> Tensor:
    """Bin logits (B, K) for a batch of embedding pairs."""
    if cfg.combiner == "elementwise":
        j = ad.mul(p_a, p_b)
        return ad.affine(j, params["bin.w"], params["bin.b"])
    if cfg.combiner == "concat":
        j = ad.concat([p_a, p_b], axis=1)
        return ad.affine(j, params["bin.w"], params["bin.b"])
    u_ab = ad.bilinear_pairs(p_a, p_b, params["bin.w"], params["bin.b"])
    u_ba = ad.bilinear_pairs(p_b, p_a, params["bin.w"], params["bin.b"])
    return ad.scale(ad.add(u_ab, u_ba), 0.5)


def aux_loss_handcrafted(u, target_bins) -> Tensor:
    return ad.softmax_xent(u, target_bins)


def aux_loss_mse(v_hat, v) -> Tensor:
    return ad.mse(v_hat, v)


def rollout_embedding(params, cfg: ModelConfig, frame_rasters) -> Tensor:
    """Frame rasters (B * K_c, C, S, S), consecutive frames grouped per
    sample -> rollout embeddings (B, emb) via the shared plain encoder."""
    e = encode_plain(params, frame_rasters)
    b = e.shape[0] // cfg.contrast_frames
    flat = ad.reshape(e, (b, cfg.contrast_frames * cfg.emb_dim))
    hid = ad.relu(ad.affine(flat, params["roll1.w"], params["roll1.b"]))
    return ad.affine(hid, params["roll2.w"], params["roll2.b"])


def contrastive_loss(z, e_roll, temperature: float,
                     negatives: int | None = None) -> Tensor:
    """Mean InfoNCE matching each z row to its own rollout embedding.

    When ``negatives`` caps the pool below batch - 1, the batch is cut into
    consecutive chunks of (negatives + 1) rows contrasted independently; a
    trailing 1-row remainder is merged into the previous chunk.
    """
    b = z.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    chunk = b if negatives is None or negatives + 1 >= b else negatives + 1
    bounds = list(range(0, b, chunk))
    if b - bounds[-1] == 1:
        bounds.pop()
    losses = []
    for lo in bounds:
        hi = min(lo + chunk, b)
        zc = ad.gather_rows(z, np.arange(lo, hi))
        ec = ad.gather_rows(e_roll, np.arange(lo, hi))
        scores = ad.matmul(zc, ad.transpose(ec))
        losses.append(ad.infonce(scores, np.arange(hi - lo), temperature))
    if len(losses) == 1:
        return losses[0]
    total = losses[0]
    for piece in losses[1:]:
        total = ad.add(total, piece)
    return ad.scale(total, 1.0 / len(losses))
