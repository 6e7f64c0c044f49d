"""Reference forward operations of the physics conditioning adapter.

These are the readable, single-object formulations; `net.py` carries the
batched forward/backward used for training and is tested to agree with the
compositions here.

Pipeline per object i over L frames:

    f[l]  = sum_{h,w} M[l,h,w] * V[l,h,w,:]            (masked summation)
    h[l]  = LayerNorm(proj(f[l]))                      (occluded -> obj_occ)
    e_m   = MLP(fourier((log1p(m) - mu_m)/sig_m))      (broadcast over time)
    e_v[l]= MLP(fourier((v[l] - mu_v)/sig_v))          (undefined -> vel_occ)
    (gamma, beta) = head(flatten(e))                   per branch
    h_b   = (1 + tanh(gamma)/2) * h + tanh(beta)/2     (FiLM, both branches)
    c_b   = sum_i G_i h_b_i / sum_i G_i                (gated pooling)
    omega~ = omega + alpha_m * mix(c_mass) + alpha_v * mix(c_vel)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import ValidationError
from .params import AdapterState

SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))
GELU_CUBIC = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh approximation of GELU; smooth everywhere, exact gradient in net.py."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(SQRT_2_OVER_PI * (x + GELU_CUBIC * x**3)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def _mlp(x: np.ndarray, p: dict, prefix: str) -> np.ndarray:
    h = gelu(x @ p[f"{prefix}.w1"].T + p[f"{prefix}.b1"])
    return h @ p[f"{prefix}.w2"].T + p[f"{prefix}.b2"]


@dataclass
class PhysicsCondition:
    """Pooled physics conditioning, one (frames, hidden) grid per branch."""

    c_mass: np.ndarray
    c_vel: np.ndarray
    present: bool = True


def object_feature(V: np.ndarray, mask: np.ndarray, state: AdapterState) -> np.ndarray:
    """Masked patch summation -> projection -> layer norm for one frame.

    An all-zero mask returns the object-occlusion token verbatim (the token
    is the final feature; projection and norm are bypassed).
    """
    V = np.asarray(V, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if V.ndim != 3 or mask.shape != V.shape[:2]:
        raise ValidationError(
            f"object_feature: mask {mask.shape} does not match patch grid {V.shape[:2]}"
        )
    if not mask.any():
        return state.params["obj_occ"].copy()
    f = np.einsum("hw,hwd->d", mask, V)
    z = state.params["proj.w"] @ f + state.params["proj.b"]
    return layer_norm(z, state.params["ln.gain"], state.params["ln.bias"], state.config.ln_eps)


def normalize_mass(m: float, state: AdapterState) -> float:
    """(log(1+m) - mu_mass) / sigma_mass."""
    sigma = float(state.buffers["sigma_mass"])
    if not sigma > 0:
        raise ValidationError("sigma_mass: must be positive")
    if m < 0 or not np.isfinite(m):
        raise ValidationError("mass: must be finite and non-negative")
    return (np.log1p(m) - float(state.buffers["mu_mass"])) / sigma


def normalize_velocity(v: float, state: AdapterState) -> float:
    """(v - mu_vel) / sigma_vel."""
    sigma = float(state.buffers["sigma_vel"])
    if not sigma > 0:
        raise ValidationError("sigma_vel: must be positive")
    return (v - float(state.buffers["mu_vel"])) / sigma


def fourier_features(s: float, freqs: np.ndarray) -> np.ndarray:
    """[sin(2*pi*w_k*s), cos(2*pi*w_k*s)] interleaved per frequency, length 2K."""
    freqs = np.asarray(freqs, dtype=np.float64)
    ang = 2.0 * np.pi * freqs * s
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(-1)


def film_modulate(h: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """(1 + tanh(gamma)/2) * h + tanh(beta)/2, elementwise."""
    h = np.asarray(h, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != h.shape or beta.shape != h.shape:
        raise ValidationError(
            f"film_modulate: shapes h={h.shape} gamma={gamma.shape} beta={beta.shape} differ"
        )
    return (1.0 + 0.5 * np.tanh(gamma)) * h + 0.5 * np.tanh(beta)


def _film_coeffs(e_flat: np.ndarray, state: AdapterState, branch: str, frames: int):
    """FiLM head: flattened mode consumes the (L*Dh) vector, time-shared mode
    applies one (Dh -> 2Dh) map per frame."""
    p = state.params
    dh = state.config.hidden_dim
    if state.config.film_mode == "flattened":
        gb = p[f"{branch}_head.w"] @ e_flat + p[f"{branch}_head.b"]
        gamma = gb[: frames * dh].reshape(frames, dh)
        beta = gb[frames * dh:].reshape(frames, dh)
    else:
        per_frame = e_flat.reshape(frames, dh) @ p[f"{branch}_head.w"].T + p[f"{branch}_head.b"]
        gamma, beta = per_frame[:, :dh], per_frame[:, dh:]
    return gamma, beta


def modulate_object(
    h: np.ndarray,
    mass: float,
    velocities: Sequence[Optional[float]],
    state: AdapterState,
) -> tuple[np.ndarray, np.ndarray]:
    """FiLM-modulate one object's (L, Dh) features by mass and velocity.

    The mass embedding is broadcast over time; the velocity embedding is
    per-frame, with the velocity-occlusion token substituted at frames whose
    velocity is undefined.
    """
    h = np.asarray(h, dtype=np.float64)
    frames, dh = state.config.frames, state.config.hidden_dim
    if h.shape != (frames, dh):
        raise ValidationError(f"modulate_object: h must be ({frames}, {dh}), got {h.shape}")
    if len(velocities) != frames:
        raise ValidationError(f"modulate_object: expected {frames} velocity entries")
    p, b = state.params, state.buffers

    e_mass = _mlp(fourier_features(normalize_mass(mass, state), b["mass_freqs"]), p, "mass_mlp")
    e_mass_flat = np.tile(e_mass, frames)
    gamma_m, beta_m = _film_coeffs(e_mass_flat, state, "mass", frames)
    h_mass = film_modulate(h, gamma_m, beta_m)

    e_vel = np.empty((frames, dh))
    for li, v in enumerate(velocities):
        if v is None:
            e_vel[li] = p["vel_occ"]
        else:
            e_vel[li] = _mlp(
                fourier_features(normalize_velocity(v, state), b["vel_freqs"]), p, "vel_mlp"
            )
    gamma_v, beta_v = _film_coeffs(e_vel.reshape(-1), state, "vel", frames)
    h_vel = film_modulate(h, gamma_v, beta_v)
    return h_mass, h_vel


def gated_pool(
    features: np.ndarray,
    state: AdapterState,
    branch: str,
    empty_token: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Sigmoid-gated convex pooling over objects, per frame.

    ``features`` is (N, L, Dh). With zero objects the configured empty token
    (broadcast over frames) is returned instead of raising.
    """
    features = np.asarray(features, dtype=np.float64)
    frames, dh = state.config.frames, state.config.hidden_dim
    if features.size == 0:
        token = state.params[f"empty_{branch}"] if empty_token is None else empty_token
        return np.tile(token, (frames, 1))
    if features.ndim != 3 or features.shape[1:] != (frames, dh):
        raise ValidationError(f"gated_pool: features must be (N, {frames}, {dh})")
    gates = sigmoid(_mlp(features, state.params, f"{branch}_gate"))  # (N, L, 1)
    return (gates * features).sum(axis=0) / gates.sum(axis=0)


def delta_modulation(
    omega: np.ndarray, c_mass: np.ndarray, c_vel: np.ndarray, state: AdapterState
) -> np.ndarray:
    """omega + alpha_m * mix(c_mass) + alpha_v * mix(c_vel).

    The mixers consume the time-mean of each (L, Dh) condition; with their
    zero-initialized output layers the result equals omega bit-exactly.
    """
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape[-1] != state.config.omega_dim:
        raise ValidationError(
            f"delta_modulation: omega dim {omega.shape[-1]} != mixer output "
            f"{state.config.omega_dim}"
        )
    p = state.params
    r_m = _mlp(np.asarray(c_mass, dtype=np.float64).mean(axis=-2), p, "mix_mass")
    r_v = _mlp(np.asarray(c_vel, dtype=np.float64).mean(axis=-2), p, "mix_vel")
    return omega + p["alpha_m"] * r_m + p["alpha_v"] * r_v


def physics_dropout(
    cond: PhysicsCondition, p: float, rng: np.random.Generator, state: AdapterState
) -> PhysicsCondition:
    """With probability p (one draw per sample) replace both branches with
    their learnable empty tokens."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError("dropout probability must lie in [0, 1]")
    if rng.uniform() < p:
        frames = cond.c_mass.shape[0]
        return PhysicsCondition(
            c_mass=np.tile(state.params["empty_mass"], (frames, 1)),
            c_vel=np.tile(state.params["empty_vel"], (frames, 1)),
            present=False,
        )
    return cond


def compute_condition(
    state: AdapterState,
    V: np.ndarray,
    masks: np.ndarray,
    masses: Sequence[float],
    velocities: Sequence[Sequence[Optional[float]]],
) -> PhysicsCondition:
    """Full reference pipeline for one sample with N objects.

    V is (L, Hp, Wp, Dp); masks is (N, L, Hp, Wp); one mass and one list of
    L optional velocities per object.
    """
    n_objects = len(masses)
    frames, dh = state.config.frames, state.config.hidden_dim
    if n_objects == 0:
        return PhysicsCondition(
            c_mass=np.tile(state.params["empty_mass"], (frames, 1)),
            c_vel=np.tile(state.params["empty_vel"], (frames, 1)),
            present=False,
        )
    h_mass_all = np.empty((n_objects, frames, dh))
    h_vel_all = np.empty((n_objects, frames, dh))
    for i in range(n_objects):
        h = np.stack([object_feature(V[li], masks[i, li], state) for li in range(frames)])
        h_mass_all[i], h_vel_all[i] = modulate_object(h, masses[i], velocities[i], state)
    return PhysicsCondition(
        c_mass=gated_pool(h_mass_all, state, "mass"),
        c_vel=gated_pool(h_vel_all, state, "vel"),
        present=True,
    )
