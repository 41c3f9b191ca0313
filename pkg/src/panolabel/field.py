"""Dense multi-channel voxel field with S-density volume rendering.

Channels (in storage order): sdf (1), color (3), sem logits (K_s),
inst logits (K_i), feat (F'). Values live at voxel centres
``bmin + (i + 0.5) * cell`` and are interpolated trilinearly; outside the
centre lattice the nearest boundary value is used along that axis.

All maths is float64 in memory; files store float32. Gradients are written
by hand and checked against finite differences in the tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix

from .scene_io import UNKNOWN, UNLABELED, FormatError, Frame

FEAT_DIM = 8
DEFAULT_SAMPLES = 64

_MAGIC = b"PFLD"
_VERSION = 1


class DivergenceError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


# --------------------------------------------------------------------------
# Field


@dataclass(eq=False)
class VoxelField:
    bmin: np.ndarray  # (3,)
    bmax: np.ndarray  # (3,)
    data: np.ndarray  # (nx, ny, nz, C) float64
    channels: dict[str, tuple[int, int]]  # name -> (offset, size), in storage order

    @classmethod
    def create(
        cls,
        resolution,
        bmin,
        bmax,
        n_sem: int = 0,
        n_inst: int = 0,
        n_feat: int = FEAT_DIM,
        sdf_init: float = 0.0,
    ) -> "VoxelField":
        res = tuple(int(r) for r in resolution)
        if min(res) < 2:
            raise ValueError("every axis needs at least 2 voxels")
        bmin = np.asarray(bmin, dtype=np.float64)
        bmax = np.asarray(bmax, dtype=np.float64)
        if not np.all(bmax > bmin):
            raise ValueError("degenerate bounds")
        chans, off = {}, 0
        for name, size in (("sdf", 1), ("color", 3), ("sem", n_sem), ("inst", n_inst), ("feat", n_feat)):
            chans[name] = (off, size)
            off += size
        data = np.zeros(res + (off,))
        data[..., 0] = sdf_init
        return cls(bmin, bmax, data, chans)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def n_channels(self) -> int:
        return self.data.shape[3]

    @property
    def cell(self) -> np.ndarray:
        return (self.bmax - self.bmin) / np.array(self.resolution)

    def size(self, name: str) -> int:
        return self.channels[name][1]

    def sl(self, name: str) -> slice:
        off, size = self.channels[name]
        return slice(off, off + size)

    def centers(self) -> np.ndarray:
        axes = [self.bmin[a] + (np.arange(n) + 0.5) * self.cell[a] for a, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> "VoxelField":
        return VoxelField(self.bmin.copy(), self.bmax.copy(), self.data.copy(), dict(self.channels))

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.n_channels)


@dataclass(eq=False)
class Interp:
    idx: np.ndarray  # (P, 8) flat voxel index per corner
    w: np.ndarray  # (P, 8) trilinear weights
    dw: np.ndarray  # (P, 8, 3) d weight / d position (0 along clamped axes)
    inside: np.ndarray  # (P,) point within bounds

    def matrix(self, n_vox: int) -> csr_matrix:
        p = len(self.idx)
        return csr_matrix((self.w.reshape(-1), self.idx.reshape(-1), np.arange(0, 8 * p + 1, 8)), shape=(p, n_vox))


_CORNERS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)])


def interpolate(fld: VoxelField, points: np.ndarray) -> Interp:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    res = np.array(fld.resolution)
    cell = fld.cell
    g = (p - fld.bmin) / cell - 0.5
    gc = np.clip(g, 0.0, res - 1)
    free = g == gc
    i0 = np.clip(np.floor(gc), 0, res - 2).astype(np.int64)
    f = gc - i0
    inside = np.all((p >= fld.bmin) & (p <= fld.bmax), axis=1)

    ci = i0[:, None, :] + _CORNERS[None]  # (P, 8, 3)
    idx = (ci[..., 0] * res[1] + ci[..., 1]) * res[2] + ci[..., 2]
    fac = np.where(_CORNERS[None] == 1, f[:, None, :], 1.0 - f[:, None, :])  # (P, 8, 3)
    w = fac[..., 0] * fac[..., 1] * fac[..., 2]
    sign = np.where(_CORNERS == 1, 1.0, -1.0)[None]  # (1, 8, 3)
    dw = np.empty_like(fac)
    dw[..., 0] = sign[..., 0] * fac[..., 1] * fac[..., 2]
    dw[..., 1] = sign[..., 1] * fac[..., 0] * fac[..., 2]
    dw[..., 2] = sign[..., 2] * fac[..., 0] * fac[..., 1]
    dw *= (free / cell)[:, None, :]
    return Interp(idx, w, dw, inside)


def sample(fld: VoxelField, points: np.ndarray, channels: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear channel values (P, C) and an in-bounds flag per point."""
    it = interpolate(fld, points)
    vals = fld.flat() if channels is None else fld.flat()[:, fld.sl(channels)]
    out = np.einsum("pc,pck->pk", it.w, vals[it.idx])
    return out, it.inside


def sdf_normal(fld: VoxelField, points: np.ndarray) -> np.ndarray:
    """Spatial gradient of the interpolated sdf, not renormalised; (P, 3)."""
    it = interpolate(fld, points)
    s = fld.flat()[:, 0][it.idx]  # (P, 8)
    return np.einsum("pc,pcd->pd", s, it.dw)


# --------------------------------------------------------------------------
# Rendering maths


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def alpha(s_i, s_next, xi: float) -> np.ndarray:
    """max((Phi(s_i) - Phi(s_next)) / Phi(s_i), 0) with Phi the xi-sigmoid."""
    if not xi > 0:
        raise ValueError("xi must be positive")
    s_i = np.asarray(s_i, dtype=np.float64)
    s_next = np.asarray(s_next, dtype=np.float64)
    d = log_sigmoid(xi * s_next) - log_sigmoid(xi * s_i)
    return np.maximum(-np.expm1(np.minimum(d, 0.0)), 0.0)


def transmittance(a: np.ndarray) -> np.ndarray:
    """T_i = prod_{m<i} (1 - a_m) along the last axis."""
    t = np.ones_like(a)
    if a.shape[-1] > 1:
        t[..., 1:] = np.cumprod(1.0 - a[..., :-1], axis=-1)
    return t


def ray_alphas(s: np.ndarray, xi: float) -> np.ndarray:
    """Opacity per sample from sdf per sample (R, N); the last sample has none."""
    a = np.zeros_like(s)
    a[:, :-1] = alpha(s[:, :-1], s[:, 1:], xi)
    return a


def render_weights(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Transmittance and weights T_i a_i.

    The weights telescope to 1 - T_N <= 1, but rounding can push their float
    sum a few ulps above 1; such rows are shrunk until the sum is <= 1. The
    correction is far below the tolerance of any gradient check.
    """
    t = transmittance(a)
    w = t * a
    total = w.sum(axis=-1)
    over = total > 1.0
    if over.any():
        w[over] /= total[over][..., None]
        for _ in range(8):
            over = w.sum(axis=-1) > 1.0
            if not over.any():
                break
            w[over] *= 1.0 - 2.0**-52
    return t, w


def alpha_backward(g_w: np.ndarray, a: np.ndarray, t: np.ndarray) -> np.ndarray:
    """dL/d alpha from dL/d w, where w_i = T_i a_i.

    dL/da_k = T_k (h_k - R_k), R_k = a_{k+1} h_{k+1} + (1 - a_{k+1}) R_{k+1}.
    """
    n = a.shape[1]
    r = np.zeros_like(a)
    for k in range(n - 2, -1, -1):
        r[:, k] = a[:, k + 1] * g_w[:, k + 1] + (1.0 - a[:, k + 1]) * r[:, k + 1]
    return t * (g_w - r)


def sdf_from_alpha_grad(g_a: np.ndarray, s: np.ndarray, a: np.ndarray, xi: float) -> np.ndarray:
    """dL/ds from dL/da through the clamped sigmoid-ratio opacity.

    At the clamp (a == 0) the zero branch is taken.
    """
    g_s = np.zeros_like(s)
    si, sn = s[:, :-1], s[:, 1:]
    d = log_sigmoid(xi * sn) - log_sigmoid(xi * si)
    live = d < 0
    ga = g_a[:, :-1] * (1.0 - a[:, :-1]) * xi * live
    # d log_sigmoid(xi s) / ds = xi * sigmoid(-xi s)
    sig_i = np.exp(log_sigmoid(-xi * si))
    sig_n = np.exp(log_sigmoid(-xi * sn))
    g_s[:, :-1] += ga * sig_i
    g_s[:, 1:] -= ga * sig_n
    return g_s


# --------------------------------------------------------------------------
# Rays


@dataclass(eq=False)
class RayBatch:
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3) unit
    rho: np.ndarray  # (R, N) strictly increasing sample distances
    t_near: np.ndarray  # (R,)
    t_far: np.ndarray  # (R,)
    depth: np.ndarray | None = None  # (R,) distance along the ray, NaN where invalid
    color: np.ndarray | None = None  # (R, 3)
    sem: np.ndarray | None = None  # (R,) channel index, -1 masked
    inst: np.ndarray | None = None  # (R,) channel index, -1 masked
    feat: np.ndarray | None = None  # (R, F')

    def __len__(self) -> int:
        return len(self.origins)

    def points(self) -> np.ndarray:
        return self.origins[:, None, :] + self.rho[..., None] * self.dirs[:, None, :]


def ray_box(origins, dirs, bmin, bmax) -> tuple[np.ndarray, np.ndarray]:
    """Slab intersection; t_near clamped to 0. Missing rays get t_far <= t_near."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bmin - origins) * inv
        t1 = (bmax - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    return np.maximum(lo.max(axis=1), 0.0), hi.min(axis=1)


def stratified(t_near, t_far, n: int, rng: np.random.Generator | None) -> np.ndarray:
    """N samples per ray, one per equal bin; bin centres when rng is None."""
    u = np.full((len(t_near), n), 0.5) if rng is None else rng.random((len(t_near), n))
    step = (t_far - t_near)[:, None] / n
    return t_near[:, None] + (np.arange(n) + u) * step


@dataclass(eq=False)
class RayPool:
    """Every usable pixel ray of a frame set with its supervision targets."""

    origins: np.ndarray
    dirs: np.ndarray
    depth: np.ndarray  # along-ray distance, NaN where invalid
    color: np.ndarray | None
    sem: np.ndarray | None
    inst: np.ndarray | None
    feat: np.ndarray | None
    frame: np.ndarray  # source frame index per ray

    def __len__(self) -> int:
        return len(self.origins)

    def take(self, rows: np.ndarray, fld: VoxelField, n_samples: int, rng) -> RayBatch:
        o, d = self.origins[rows], self.dirs[rows]
        tn, tf = ray_box(o, d, fld.bmin, fld.bmax)
        hit = tf > tn
        rows, o, d, tn, tf = rows[hit], o[hit], d[hit], tn[hit], tf[hit]
        pick = lambda a: None if a is None else a[rows]
        return RayBatch(o, d, stratified(tn, tf, n_samples, rng), tn, tf, pick(self.depth), pick(self.color), pick(self.sem), pick(self.inst), pick(self.feat))


def pixel_rays(frame: Frame) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World origins, unit directions and camera-z-to-distance scale per pixel."""
    h, w = frame.height, frame.width
    col, row = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dc = np.stack([(col - frame.cx) / frame.fx, (row - frame.cy) / frame.fy, np.ones_like(col)], axis=-1).reshape(-1, 3)
    scale = np.linalg.norm(dc, axis=1)
    d = (dc / scale[:, None]) @ frame.rotation
    o = np.broadcast_to(frame.center(), d.shape).copy()
    return o, d, scale


def _lookup(table: dict[int, int], keys: np.ndarray, masked: int) -> np.ndarray:
    lut = np.full(max(int(keys.max(initial=0)), max(table, default=0)) + 1, -1, dtype=np.int64)
    for k, ch in table.items():
        lut[k] = ch
    lut[masked] = -1
    return lut[keys]


def build_pool(
    frames: list[Frame],
    sem_lut: dict[int, int] | None = None,
    inst_lut: dict[int, int] | None = None,
    feat_fn=None,
    stride: int = 1,
) -> RayPool:
    """Rays of every frame pixel that has a depth target.

    ``sem_lut`` maps class ids to sem channels and ``inst_lut`` instance ids to
    inst channels; unmapped or UNKNOWN pixels are masked. ``feat_fn(frame)``
    returns (H*W, F') feature targets.
    """
    parts = {k: [] for k in ("o", "d", "depth", "color", "sem", "inst", "feat", "frame")}
    for k, f in enumerate(frames):
        o, d, scale = pixel_rays(f)
        sel = np.zeros((f.height, f.width), dtype=bool)
        sel[::stride, ::stride] = True
        sel = sel.reshape(-1)
        if f.depth is not None:
            z = np.asarray(f.depth, dtype=np.float64).reshape(-1)
            sel &= z > 0
            depth = z * scale
        else:
            depth = np.full(len(o), np.nan)
        parts["o"].append(o[sel])
        parts["d"].append(d[sel])
        parts["depth"].append(depth[sel])
        parts["frame"].append(np.full(int(sel.sum()), k))
        parts["color"].append(None if f.color is None else np.asarray(f.color, dtype=np.float64).reshape(-1, 3)[sel])
        if sem_lut is not None and f.labels is not None:
            cls = f.labels.class_id.reshape(-1)[sel].astype(np.int64)
            parts["sem"].append(_lookup(sem_lut, cls, UNKNOWN))
        if inst_lut is not None and f.labels is not None:
            ins = f.labels.instance_id.reshape(-1)[sel].astype(np.int64)
            parts["inst"].append(_lookup(inst_lut, ins, UNLABELED))
        if feat_fn is not None:
            parts["feat"].append(np.asarray(feat_fn(f), dtype=np.float64)[sel])

    def cat(key):
        v = parts[key]
        if not v or any(x is None for x in v):
            return None
        return np.concatenate(v)

    return RayPool(cat("o"), cat("d"), cat("depth"), cat("color"), cat("sem"), cat("inst"), cat("feat"), cat("frame"))


# --------------------------------------------------------------------------
# Losses


@dataclass
class LossConfig:
    xi: float = 20.0
    tau: float = 0.1  # meters; callers usually pass 4 cells
    beta: float = 5.0
    w_sdf: float = 1.0
    w_eik: float = 1.0
    w_depth: float = 1.0
    w_color: float = 1.0
    w_sem: float = 1.0
    w_inst: float = 1.0
    w_feat: float = 1.0

    def __post_init__(self):
        for k in ("xi", "tau", "beta"):
            if not getattr(self, k) > 0:
                raise ConfigurationError(f"{k} must be positive")

    @classmethod
    def stage1(cls, **kw) -> "LossConfig":
        return cls(w_sem=0.0, w_inst=0.0, w_feat=0.0, **kw)


TERMS = ("sdf", "eik", "depth", "color", "sem", "inst", "feat")


def sdf_loss(s: np.ndarray, b: np.ndarray, tau: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample truncated sdf loss and d/ds (lowest-index branch at ties)."""
    near = np.abs(b) <= tau
    diff = s - b
    e = np.expm1(-beta * s)
    val = np.where(near, np.abs(diff), np.maximum(np.maximum(0.0, e), diff))
    g_near = np.sign(diff)
    zero_wins = (0.0 >= e) & (0.0 >= diff)
    exp_wins = ~zero_wins & (e >= diff)
    g_far = np.where(zero_wins, 0.0, np.where(exp_wins, -beta * (e + 1.0), 1.0))
    return val, np.where(near, g_near, g_far)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class LossResult:
    terms: dict[str, float]
    total: float
    grad: np.ndarray | None = None  # (n_vox, C)
    rendered: dict[str, np.ndarray] = dc_field(default_factory=dict)


def _require(batch: RayBatch, name: str, weight: float):
    if weight != 0 and getattr(batch, name) is None:
        raise ConfigurationError(f"loss term {name!r} is enabled but the batch has no {name} targets")


def evaluate(fld: VoxelField, batch: RayBatch, cfg: LossConfig, want_grad: bool = True) -> LossResult:
    """All loss terms for a ray batch, optionally with the exact voxel gradient."""
    _require(batch, "color", cfg.w_color)
    _require(batch, "sem", cfg.w_sem)
    _require(batch, "inst", cfg.w_inst)
    _require(batch, "feat", cfg.w_feat)
    if cfg.w_sem and fld.size("sem") == 0 or cfg.w_inst and fld.size("inst") == 0:
        raise ConfigurationError("semantic or instance loss enabled on a field without those channels")

    r, n = batch.rho.shape
    pts = batch.points().reshape(-1, 3)
    it = interpolate(fld, pts)
    flat = fld.flat()
    vals = np.einsum("pc,pck->pk", it.w, flat[it.idx])  # (P, C)
    s = vals[:, 0].reshape(r, n)
    a = ray_alphas(s, cfg.xi)
    t, w = render_weights(a)

    g_vals = np.zeros_like(vals) if want_grad else None  # dL / d sample value
    g_w = np.zeros((r, n))  # dL / d render weight
    terms = {k: 0.0 for k in TERMS}
    rendered = {}

    depth_t = batch.depth if batch.depth is not None else np.full(r, np.nan)
    has_depth = np.isfinite(depth_t)

    # sdf: per sample on rays with a depth target
    if cfg.w_sdf and has_depth.any():
        b = depth_t[:, None] - batch.rho
        lv, lg = sdf_loss(s, b, cfg.tau, cfg.beta)
        m = np.broadcast_to(has_depth[:, None], lv.shape)
        cnt = m.sum()
        terms["sdf"] = float(lv[m].sum() / cnt)
        if want_grad:
            g_vals[:, 0] += cfg.w_sdf * (lg * m / cnt).reshape(-1)

    # eikonal on every sample
    grad_s = np.einsum("pc,pcd->pd", flat[:, 0][it.idx], it.dw)
    gn = np.linalg.norm(grad_s, axis=1)
    terms["eik"] = float(((1.0 - gn) ** 2).mean())
    q = None
    if cfg.w_eik and want_grad:
        unit = np.divide(grad_s, gn[:, None], out=np.zeros_like(grad_s), where=gn[:, None] > 0)
        q = cfg.w_eik * (-2.0 * (1.0 - gn) / len(gn))[:, None] * unit  # dL / d grad_s

    # depth
    u_d = (w * batch.rho).sum(axis=1)
    rendered["depth"] = u_d
    in_box = has_depth & (depth_t >= batch.t_near) & (depth_t <= batch.t_far)
    if cfg.w_depth and in_box.any():
        diff = depth_t - u_d
        cnt = in_box.sum()
        terms["depth"] = float(np.abs(diff[in_box]).sum() / cnt)
        g_w += cfg.w_depth * (np.where(in_box, -np.sign(diff), 0.0) / cnt)[:, None] * batch.rho

    def per_ray_quantity(name, target_fn):
        """Render channel group ``name`` and add its loss via target_fn."""
        sl = fld.sl(name)
        v = vals[:, sl].reshape(r, n, -1)
        u = np.einsum("rn,rnk->rk", w, v)
        rendered[name] = u
        val, g_u = target_fn(u)
        if want_grad and g_u is not None:
            g_w[:] += np.einsum("rk,rnk->rn", g_u, v)
            g_vals[:, sl] += (w[:, :, None] * g_u[:, None, :]).reshape(r * n, -1)
        return val

    if batch.color is not None or cfg.w_color:
        def color_t(u):
            if batch.color is None:
                return 0.0, None
            d = u - batch.color
            return float((d**2).sum(axis=1).mean()), cfg.w_color * 2.0 * d / r

        terms["color"] = per_ray_quantity("color", color_t)

    for name, target, weight in (("sem", batch.sem, cfg.w_sem), ("inst", batch.inst, cfg.w_inst)):
        if fld.size(name) == 0:
            continue

        def ce(u, target=target, weight=weight):
            if target is None:
                return 0.0, None
            m = target >= 0
            if not m.any():
                return 0.0, np.zeros_like(u)
            lp = _log_softmax(u[m])
            cnt = m.sum()
            val = float(-lp[np.arange(cnt), target[m]].sum() / cnt)
            g = np.zeros_like(u)
            p = np.exp(lp)
            p[np.arange(cnt), target[m]] -= 1.0
            g[m] = weight * p / cnt
            return val, g

        terms[name] = per_ray_quantity(name, ce)

    if fld.size("feat") and (batch.feat is not None or cfg.w_feat):
        def feat_t(u):
            if batch.feat is None:
                return 0.0, None
            d = u - batch.feat
            return float((d**2).sum(axis=1).mean()), cfg.w_feat * 2.0 * d / r

        terms["feat"] = per_ray_quantity("feat", feat_t)

    weights = {"sdf": cfg.w_sdf, "eik": cfg.w_eik, "depth": cfg.w_depth, "color": cfg.w_color, "sem": cfg.w_sem, "inst": cfg.w_inst, "feat": cfg.w_feat}
    total = float(sum(weights[k] * terms[k] for k in TERMS))
    if not want_grad:
        return LossResult(terms, total, None, rendered)

    g_a = alpha_backward(g_w, a, t)
    g_vals[:, 0] += sdf_from_alpha_grad(g_a, s, a, cfg.xi).reshape(-1)
    n_vox = flat.shape[0]
    grad = np.asarray(it.matrix(n_vox).T @ g_vals)
    if q is not None:
        c = np.einsum("pcd,pd->pc", it.dw, q)
        grad[:, 0] += np.bincount(it.idx.reshape(-1), weights=c.reshape(-1), minlength=n_vox)
    return LossResult(terms, total, grad, rendered)


def losses(fld: VoxelField, batch: RayBatch, cfg: LossConfig) -> LossResult:
    return evaluate(fld, batch, cfg, want_grad=False)


def loss_gradient(fld: VoxelField, batch: RayBatch, cfg: LossConfig) -> np.ndarray:
    return evaluate(fld, batch, cfg, want_grad=True).grad.reshape(fld.data.shape)


# --------------------------------------------------------------------------
# Fitting


@dataclass
class FitConfig:
    iters: int = 2000
    lr: float = 0.01
    batch_rays: int = 512
    n_samples: int = DEFAULT_SAMPLES
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class FitLog:
    total: list[float] = dc_field(default_factory=list)
    terms: list[dict[str, float]] = dc_field(default_factory=list)


def fit(
    fld: VoxelField,
    pool: RayPool,
    stage: int,
    loss_cfg: LossConfig,
    fit_cfg: FitConfig = FitConfig(),
    callback=None,
) -> tuple[VoxelField, FitLog]:
    """Adam on the sum of enabled loss terms. Stage 1 only updates sdf and color."""
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if stage == 1:
        loss_cfg = LossConfig(**{**vars(loss_cfg), "w_sem": 0.0, "w_inst": 0.0, "w_feat": 0.0})
    fld = fld.copy()
    log = FitLog()
    if fit_cfg.iters <= 0 or len(pool) == 0:
        return fld, log
    trainable = np.zeros(fld.n_channels, dtype=bool)
    trainable[fld.sl("sdf")] = True
    trainable[fld.sl("color")] = True
    if stage == 2:
        trainable[:] = True

    rng = np.random.default_rng(fit_cfg.seed)
    flat = fld.flat()
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    b1, b2 = fit_cfg.beta1, fit_cfg.beta2
    for step in range(1, fit_cfg.iters + 1):
        rows = rng.integers(0, len(pool), fit_cfg.batch_rays)
        batch = pool.take(rows, fld, fit_cfg.n_samples, rng)
        res = evaluate(fld, batch, loss_cfg, want_grad=True)
        if not np.isfinite(res.total) or not np.all(np.isfinite(res.grad)):
            raise DivergenceError(f"stage {stage} loss became non-finite at iteration {step}: {res.terms}")
        g = res.grad * trainable
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**step)
        vh = v / (1 - b2**step)
        flat -= fit_cfg.lr * mh / (np.sqrt(vh) + fit_cfg.eps)
        log.total.append(res.total)
        log.terms.append(res.terms)
        if callback is not None:
            callback(step, res)
    return fld, log


# --------------------------------------------------------------------------
# Image rendering


@dataclass(eq=False)
class Rendered:
    depth: np.ndarray  # (H, W) camera z, 0 where the ray misses the bounds
    color: np.ndarray  # (H, W, 3)
    sem: np.ndarray | None  # (H, W, K_s) rendered logits
    inst: np.ndarray | None
    feat: np.ndarray | None
    opacity: np.ndarray  # (H, W) sum of weights


def render(fld: VoxelField, frame: Frame, n_samples: int = DEFAULT_SAMPLES, xi: float = 20.0, chunk: int = 4096) -> Rendered:
    """Deterministic (bin-centre) rendering of every pixel of ``frame``."""
    o, d, scale = pixel_rays(frame)
    h, w = frame.height, frame.width
    tn, tf = ray_box(o, d, fld.bmin, fld.bmax)
    hit = np.flatnonzero(tf > tn)
    out = {k: np.zeros((h * w, fld.size(k))) for k in ("color", "sem", "inst", "feat")}
    depth = np.zeros(h * w)
    opac = np.zeros(h * w)
    for s in range(0, len(hit), chunk):
        rows = hit[s : s + chunk]
        rho = stratified(tn[rows], tf[rows], n_samples, None)
        pts = o[rows, None, :] + rho[..., None] * d[rows, None, :]
        vals, _ = sample(fld, pts.reshape(-1, 3))
        vals = vals.reshape(len(rows), n_samples, -1)
        _, wt = render_weights(ray_alphas(vals[..., 0], xi))
        depth[rows] = (wt * rho).sum(axis=1) / scale[rows]
        opac[rows] = wt.sum(axis=1)
        for k in out:
            if fld.size(k):
                out[k][rows] = np.einsum("rn,rnk->rk", wt, vals[..., fld.sl(k)])
    shape = lambda k: out[k].reshape(h, w, -1) if fld.size(k) else None
    return Rendered(depth.reshape(h, w), out["color"].reshape(h, w, 3), shape("sem"), shape("inst"), shape("feat"), opac.reshape(h, w))


# --------------------------------------------------------------------------
# Persistence


def save_field(path, fld: VoxelField) -> None:
    head = bytearray(_MAGIC)
    head += struct.pack("<I", _VERSION)
    head += struct.pack("<3I", *fld.resolution)
    head += struct.pack("<6d", *fld.bmin, *fld.bmax)
    head += struct.pack("<I", len(fld.channels))
    for name, (_, size) in fld.channels.items():
        raw = name.encode("ascii")
        head += struct.pack("<B", len(raw)) + raw + struct.pack("<I", size)
    Path(path).write_bytes(bytes(head) + fld.data.astype("<f4").tobytes())


def load_field(path) -> VoxelField:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a field file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: field version {version}, expected {_VERSION}")
    res = struct.unpack_from("<3I", data, 8)
    bounds = struct.unpack_from("<6d", data, 20)
    (nch,) = struct.unpack_from("<I", data, 68)
    pos = 72
    chans, off = {}, 0
    for _ in range(nch):
        ln = data[pos]
        name = data[pos + 1 : pos + 1 + ln].decode("ascii")
        (size,) = struct.unpack_from("<I", data, pos + 1 + ln)
        pos += 5 + ln
        chans[name] = (off, size)
        off += size
    expect = int(np.prod(res)) * off * 4
    if len(data) - pos != expect:
        raise FormatError(f"{path}: payload is {len(data) - pos} bytes, expected {expect}")
    arr = np.frombuffer(data, dtype="<f4", offset=pos).astype(np.float64).reshape(tuple(res) + (off,))
    return VoxelField(np.array(bounds[:3]), np.array(bounds[3:]), arr, chans)
