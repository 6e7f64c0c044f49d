"""Batched forward and hand-written backward passes for the adapter.

This is the training path: every op from `ops.py` reimplemented over a batch
axis with explicit reverse-mode gradients, verified against the reference
ops (equality tests) and against central finite differences (gradcheck).

Shape legend: B batch, N objects, L frames, Hp/Wp patch grid, Dp patch dim,
Dh hidden dim, K frequencies, W omega (modulation vector) dim.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ValidationError
from .ops import GELU_CUBIC, SQRT_2_OVER_PI, sigmoid
from .params import AdapterState


def gelu_fwd(x: np.ndarray):
    """Returns (gelu(x), tanh term) so the backward pass can reuse the tanh."""
    t = np.tanh(SQRT_2_OVER_PI * (x + GELU_CUBIC * x**3))
    return 0.5 * x * (1.0 + t), t


def gelu_grad(x: np.ndarray, t: Optional[np.ndarray] = None) -> np.ndarray:
    if t is None:
        t = np.tanh(SQRT_2_OVER_PI * (x + GELU_CUBIC * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (
        1.0 + 3.0 * GELU_CUBIC * x * x
    )


@dataclass
class AdapterBatch:
    """Inputs for a batched condition forward pass.

    vel entries at undefined frames are ignored (any finite filler); the
    vel_defined mask decides which frames use the occlusion token.
    """

    V: np.ndarray            # (B, L, Hp, Wp, Dp)
    masks: np.ndarray        # (B, N, L, Hp, Wp)
    mass: np.ndarray         # (B, N)
    vel: np.ndarray          # (B, N, L)
    vel_defined: np.ndarray  # (B, N, L) bool

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        self.vel = np.asarray(self.vel, dtype=np.float64)
        self.vel_defined = np.asarray(self.vel_defined, dtype=bool)
        if np.any(self.mass < 0) or not np.isfinite(self.mass).all():
            raise ValidationError("mass: must be finite and non-negative")

    @property
    def size(self) -> int:
        return self.V.shape[0]


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _fourier_fwd(x: np.ndarray, freqs: np.ndarray):
    ang = 2.0 * np.pi * freqs * x[..., None]          # (..., K)
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*x.shape, -1)


def _mlp_fwd(x: np.ndarray, p: dict, prefix: str):
    a1 = x @ p[f"{prefix}.w1"].T + p[f"{prefix}.b1"]
    g1, t1 = gelu_fwd(a1)
    out = g1 @ p[f"{prefix}.w2"].T + p[f"{prefix}.b2"]
    return out, (x, a1, t1, g1)


def _mlp_bwd(dout, cache, p: dict, prefix: str, grads: dict, need_input_grad=False):
    x, a1, t1, g1 = cache
    dout2 = dout.reshape(-1, dout.shape[-1])
    grads[f"{prefix}.w2"] += dout2.T @ g1.reshape(-1, g1.shape[-1])
    grads[f"{prefix}.b2"] += dout2.sum(axis=0)
    da1 = (dout @ p[f"{prefix}.w2"]) * gelu_grad(a1, t1)
    da12 = da1.reshape(-1, da1.shape[-1])
    grads[f"{prefix}.w1"] += da12.T @ x.reshape(-1, x.shape[-1])
    grads[f"{prefix}.b1"] += da12.sum(axis=0)
    if need_input_grad:
        return da1 @ p[f"{prefix}.w1"]
    return None


def forward_condition(state: AdapterState, batch: AdapterBatch):
    """Compute pooled physics conditions (c_mass, c_vel), each (B, L, Dh)."""
    cfg, p, buf = state.config, state.params, state.buffers
    cache: dict = {}

    # Object features: masked summation -> projection -> layer norm.
    f = np.einsum("bnlhw,blhwd->bnld", batch.masks, batch.V)
    z = f @ p["proj.w"].T + p["proj.b"]
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + cfg.ln_eps)
    xhat = xc * inv
    h_vis = xhat * p["ln.gain"] + p["ln.bias"]
    visible = batch.masks.any(axis=(3, 4))            # (B, N, L)
    h = np.where(visible[..., None], h_vis, p["obj_occ"])
    cache.update(f=f, xhat=xhat, inv=inv, visible=visible, h=h)

    # Mass branch: normalize -> fourier -> MLP -> broadcast over frames.
    mhat = (np.log1p(batch.mass) - buf["mu_mass"]) / buf["sigma_mass"]
    phi_m = _fourier_fwd(mhat, buf["mass_freqs"])     # (B, N, 2K)
    e_m, mlp_m_cache = _mlp_fwd(phi_m, p, "mass_mlp")
    gamma_m, beta_m, head_m_cache = _film_head_fwd(state, "mass", e_m, None)
    tgm, tbm = np.tanh(gamma_m), np.tanh(beta_m)
    h_mass = (1.0 + 0.5 * tgm) * h + 0.5 * tbm
    cache.update(mlp_m_cache=mlp_m_cache, head_m_cache=head_m_cache, tgm=tgm, tbm=tbm)

    # Velocity branch: per-frame embedding, occlusion token where undefined.
    vhat = np.where(batch.vel_defined, (batch.vel - buf["mu_vel"]) / buf["sigma_vel"], 0.0)
    phi_v = _fourier_fwd(vhat, buf["vel_freqs"])      # (B, N, L, 2K)
    e_v_raw, mlp_v_cache = _mlp_fwd(phi_v, p, "vel_mlp")
    e_v = np.where(batch.vel_defined[..., None], e_v_raw, p["vel_occ"])
    gamma_v, beta_v, head_v_cache = _film_head_fwd(state, "vel", None, e_v)
    tgv, tbv = np.tanh(gamma_v), np.tanh(beta_v)
    h_vel = (1.0 + 0.5 * tgv) * h + 0.5 * tbv
    cache.update(
        mlp_v_cache=mlp_v_cache, head_v_cache=head_v_cache, tgv=tgv, tbv=tbv,
        vel_defined=batch.vel_defined, h_mass=h_mass, h_vel=h_vel,
    )

    c_mass, pool_m_cache = _pool_fwd(state, "mass", h_mass)
    c_vel, pool_v_cache = _pool_fwd(state, "vel", h_vel)
    cache.update(pool_m_cache=pool_m_cache, pool_v_cache=pool_v_cache)
    return c_mass, c_vel, cache


def _film_head_fwd(state: AdapterState, branch: str, e_m, e_v):
    """FiLM coefficients from either the broadcast mass embedding (B, N, Dh)
    or per-frame velocity embeddings (B, N, L, Dh)."""
    cfg, p = state.config, state.params
    ell, dh = cfg.frames, cfg.hidden_dim
    w, b = p[f"{branch}_head.w"], p[f"{branch}_head.b"]
    if cfg.film_mode == "flattened":
        if branch == "mass":
            # The head input is the embedding tiled L times, so the matmul
            # collapses: W @ tile(e) = (sum of the L column blocks of W) @ e.
            w_sum = w.reshape(2 * ell * dh, ell, dh).sum(axis=1)
            gb = e_m @ w_sum.T + b                             # (B, N, 2*L*Dh)
            gamma = gb[..., : ell * dh].reshape(*gb.shape[:2], ell, dh)
            beta = gb[..., ell * dh:].reshape(*gb.shape[:2], ell, dh)
            return gamma, beta, (e_m, w_sum)
        e_flat = e_v.reshape(*e_v.shape[:2], ell * dh)
        gb = e_flat @ w.T + b                                  # (B, N, 2*L*Dh)
        gamma = gb[..., : ell * dh].reshape(*gb.shape[:2], ell, dh)
        beta = gb[..., ell * dh:].reshape(*gb.shape[:2], ell, dh)
        return gamma, beta, (e_flat,)
    # time-shared: one (Dh -> 2Dh) affine per frame
    if branch == "mass":
        gb = e_m @ w.T + b                                     # (B, N, 2Dh)
        gamma = np.broadcast_to(gb[..., None, :dh], (*gb.shape[:2], ell, dh))
        beta = np.broadcast_to(gb[..., None, dh:], (*gb.shape[:2], ell, dh))
        return gamma, beta, (e_m,)
    gb = e_v @ w.T + b                                         # (B, N, L, 2Dh)
    return gb[..., :dh], gb[..., dh:], (e_v,)


def _film_head_bwd(state: AdapterState, branch: str, dgamma, dbeta, cache, grads):
    """Returns the gradient w.r.t. the embedding that fed the head."""
    cfg, p = state.config, state.params
    ell, dh = cfg.frames, cfg.hidden_dim
    w = p[f"{branch}_head.w"]
    if cfg.film_mode == "flattened":
        dgb = np.concatenate(
            [dgamma.reshape(*dgamma.shape[:2], ell * dh),
             dbeta.reshape(*dbeta.shape[:2], ell * dh)], axis=-1
        )
        dgb2 = dgb.reshape(-1, dgb.shape[-1])
        if branch == "mass":
            e_m, w_sum = cache
            dw_sum = dgb2.T @ e_m.reshape(-1, dh)              # (2*L*Dh, Dh)
            grads[f"{branch}_head.w"] += np.tile(dw_sum, (1, ell))
            grads[f"{branch}_head.b"] += dgb2.sum(axis=0)
            return dgb @ w_sum                                 # (B, N, Dh)
        (e_flat,) = cache
        grads[f"{branch}_head.w"] += dgb2.T @ e_flat.reshape(-1, e_flat.shape[-1])
        grads[f"{branch}_head.b"] += dgb2.sum(axis=0)
        de_flat = dgb @ w
        return de_flat.reshape(*de_flat.shape[:2], ell, dh)    # (B, N, L, Dh)
    if branch == "mass":
        (e_m,) = cache
        dgb = np.concatenate([dgamma.sum(axis=2), dbeta.sum(axis=2)], axis=-1)  # (B, N, 2Dh)
        dgb2 = dgb.reshape(-1, dgb.shape[-1])
        grads[f"{branch}_head.w"] += dgb2.T @ e_m.reshape(-1, dh)
        grads[f"{branch}_head.b"] += dgb2.sum(axis=0)
        return dgb @ w
    (e_v,) = cache
    dgb = np.concatenate([dgamma, dbeta], axis=-1)             # (B, N, L, 2Dh)
    dgb2 = dgb.reshape(-1, dgb.shape[-1])
    grads[f"{branch}_head.w"] += dgb2.T @ e_v.reshape(-1, dh)
    grads[f"{branch}_head.b"] += dgb2.sum(axis=0)
    return dgb @ w


def _pool_fwd(state: AdapterState, branch: str, feats: np.ndarray):
    """Sigmoid-gated convex pooling over the object axis."""
    s, mlp_cache = _mlp_fwd(feats, state.params, f"{branch}_gate")  # (B, N, L, 1)
    gates = sigmoid(s)
    denom = gates.sum(axis=1)                                       # (B, L, 1)
    pooled = (gates * feats).sum(axis=1) / denom                    # (B, L, Dh)
    return pooled, (feats, mlp_cache, gates, denom, pooled)


def _pool_bwd(state: AdapterState, branch: str, dpooled, cache, grads):
    feats, mlp_cache, gates, denom, pooled = cache
    dfeats = (gates / denom[:, None]) * dpooled[:, None]            # (B, N, L, Dh)
    dgates = ((feats - pooled[:, None]) * dpooled[:, None]).sum(axis=-1, keepdims=True)
    dgates = dgates / denom[:, None]
    ds = dgates * gates * (1.0 - gates)
    dfeats += _mlp_bwd(ds, mlp_cache, state.params, f"{branch}_gate", grads,
                       need_input_grad=True)
    return dfeats


def backward_condition(
    state: AdapterState,
    cache: dict,
    dc_mass: np.ndarray,
    dc_vel: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients for a forward_condition pass."""
    p = state.params
    h = cache["h"]

    dh_mass = _pool_bwd(state, "mass", dc_mass, cache["pool_m_cache"], grads)
    dh_vel = _pool_bwd(state, "vel", dc_vel, cache["pool_v_cache"], grads)

    # FiLM backward, both branches feed dh.
    tgm, tbm = cache["tgm"], cache["tbm"]
    dh = dh_mass * (1.0 + 0.5 * tgm)
    dgamma_m = dh_mass * h * 0.5 * (1.0 - tgm * tgm)
    dbeta_m = dh_mass * 0.5 * (1.0 - tbm * tbm)
    tgv, tbv = cache["tgv"], cache["tbv"]
    dh += dh_vel * (1.0 + 0.5 * tgv)
    dgamma_v = dh_vel * h * 0.5 * (1.0 - tgv * tgv)
    dbeta_v = dh_vel * 0.5 * (1.0 - tbv * tbv)

    de_m = _film_head_bwd(state, "mass", dgamma_m, dbeta_m, cache["head_m_cache"], grads)
    _mlp_bwd(de_m, cache["mlp_m_cache"], p, "mass_mlp", grads)

    de_v = _film_head_bwd(state, "vel", dgamma_v, dbeta_v, cache["head_v_cache"], grads)
    defined = cache["vel_defined"]
    if not defined.all():
        grads["vel_occ"] += de_v[~defined].sum(axis=0)
        de_v = np.where(defined[..., None], de_v, 0.0)
    _mlp_bwd(de_v, cache["mlp_v_cache"], p, "vel_mlp", grads)

    # Object feature backward: occluded rows feed the occlusion token only.
    visible = cache["visible"]
    if not visible.all():
        grads["obj_occ"] += dh[~visible].sum(axis=0)
        dh = np.where(visible[..., None], dh, 0.0)
    xhat, inv = cache["xhat"], cache["inv"]
    grads["ln.gain"] += (dh * xhat).sum(axis=(0, 1, 2))
    grads["ln.bias"] += dh.sum(axis=(0, 1, 2))
    dxhat = dh * p["ln.gain"]
    dz = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    f = cache["f"]
    grads["proj.w"] += dz.reshape(-1, dz.shape[-1]).T @ f.reshape(-1, f.shape[-1])
    grads["proj.b"] += dz.sum(axis=(0, 1, 2))


def apply_dropout(
    state: AdapterState,
    c_mass: np.ndarray,
    c_vel: np.ndarray,
    dropped: Optional[np.ndarray],
):
    """Replace dropped samples' conditions with the learnable empty tokens."""
    if dropped is None or not dropped.any():
        return c_mass, c_vel, dropped
    sel = dropped[:, None, None]
    c_mass = np.where(sel, state.params["empty_mass"], c_mass)
    c_vel = np.where(sel, state.params["empty_vel"], c_vel)
    return c_mass, c_vel, dropped


def dropout_backward(
    dropped: Optional[np.ndarray],
    dc_mass: np.ndarray,
    dc_vel: np.ndarray,
    grads: dict[str, np.ndarray],
):
    """Split condition gradients between the pipeline and the empty tokens."""
    if dropped is None or not dropped.any():
        return dc_mass, dc_vel
    sel = dropped[:, None, None]
    grads["empty_mass"] += dc_mass[dropped].sum(axis=(0, 1))
    grads["empty_vel"] += dc_vel[dropped].sum(axis=(0, 1))
    return np.where(sel, 0.0, dc_mass), np.where(sel, 0.0, dc_vel)


def delta_forward(state: AdapterState, omega: np.ndarray, c_mass, c_vel):
    """omega + alpha_m * mix(mean_l c_mass) + alpha_v * mix(mean_l c_vel)."""
    p = state.params
    if omega.shape[-1] != state.config.omega_dim:
        raise ValidationError(
            f"delta_forward: omega dim {omega.shape[-1]} != {state.config.omega_dim}"
        )
    cm = c_mass.mean(axis=-2)
    cv = c_vel.mean(axis=-2)
    r_m, mix_m_cache = _mlp_fwd(cm, p, "mix_mass")
    r_v, mix_v_cache = _mlp_fwd(cv, p, "mix_vel")
    omega_t = omega + p["alpha_m"] * r_m + p["alpha_v"] * r_v
    return omega_t, (r_m, r_v, mix_m_cache, mix_v_cache, c_mass.shape[-2])


def delta_backward(state: AdapterState, domega_t: np.ndarray, cache, grads):
    """Returns (domega, dc_mass, dc_vel)."""
    p = state.params
    r_m, r_v, mix_m_cache, mix_v_cache, ell = cache
    grads["alpha_m"] += (domega_t * r_m).sum()
    grads["alpha_v"] += (domega_t * r_v).sum()
    dcm = _mlp_bwd(p["alpha_m"] * domega_t, mix_m_cache, p, "mix_mass", grads,
                   need_input_grad=True)
    dcv = _mlp_bwd(p["alpha_v"] * domega_t, mix_v_cache, p, "mix_vel", grads,
                   need_input_grad=True)
    dc_mass = np.repeat(dcm[..., None, :] / ell, ell, axis=-2)
    dc_vel = np.repeat(dcv[..., None, :] / ell, ell, axis=-2)
    return domega_t, dc_mass, dc_vel
