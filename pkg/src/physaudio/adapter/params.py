"""Parameter container for the physics conditioning adapter.

All parameters live in one ordered dict of float64 arrays so the optimizer,
the gradient checker and JSON serialization walk the same names. Buffers
(Fourier frequencies and dataset normalization stats) are kept separately
and never trained.

Parameter names, in serialization order:

    proj.w (Dh, Dp)   proj.b (Dh,)     affine projection of summed patches
    ln.gain (Dh,)     ln.bias (Dh,)    layer norm after projection
    obj_occ (Dh,)                      object-occlusion token
    vel_occ (Dh,)                      velocity-occlusion token
    empty_mass (Dh,)  empty_vel (Dh,)  empty tokens for dropped conditions
    mass_mlp.w1 (Mh, 2K) .b1 .w2 (Dh, Mh) .b2   mass embedding MLP
    vel_mlp.w1  (Mh, 2K) .b1 .w2 (Dh, Mh) .b2   velocity embedding MLP
    mass_head.w  vel_head.w  (+ .b)    FiLM coefficient heads; flattened mode
                                       maps L*Dh -> 2*L*Dh, time-shared mode
                                       maps Dh -> 2*Dh applied per frame
    mass_gate.w1 (Gh, Dh) .b1 .w2 (1, Gh) .b2   pooling gate MLPs
    vel_gate.w1  ...
    mix_mass.w1 (Xh, Dh) .b1 .w2 (W, Xh) .b2    residual mixers; final layer
    mix_vel.w1  ...                             zero-initialized
    alpha_m ()   alpha_v ()            scalar gates on the mixer residuals
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class AdapterConfig:
    patch_dim: int = 16        # Dp
    hidden_dim: int = 32       # Dh
    frames: int = 8            # L
    n_freqs: int = 8           # K
    mlp_hidden: int = 32       # Mh
    gate_hidden: int = 16      # Gh
    mixer_hidden: int = 32     # Xh
    omega_dim: int = 128       # size of the modulation vector the mixers feed
    film_mode: str = "flattened"   # "flattened" or "time_shared"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.film_mode not in ("flattened", "time_shared"):
            raise ValidationError(f"film_mode: unknown mode '{self.film_mode}'")


@dataclass
class AdapterState:
    config: AdapterConfig
    params: dict[str, np.ndarray]
    # mass_freqs/vel_freqs (K,) and mu_mass/sigma_mass/mu_vel/sigma_vel ()
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def set_stats(self, mu_mass: float, sigma_mass: float, mu_vel: float, sigma_vel: float):
        if not sigma_mass > 0 or not sigma_vel > 0:
            raise ValidationError("stats: sigma_mass and sigma_vel must be positive")
        self.buffers["mu_mass"] = np.array(float(mu_mass))
        self.buffers["sigma_mass"] = np.array(float(sigma_mass))
        self.buffers["mu_vel"] = np.array(float(mu_vel))
        self.buffers["sigma_vel"] = np.array(float(sigma_vel))

    def clone(self) -> "AdapterState":
        return AdapterState(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: np.copy(v) for k, v in self.buffers.items()},
        )


def _dense(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    return rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)


def init_adapter(config: AdapterConfig, rng: np.random.Generator) -> AdapterState:
    """Fresh adapter parameters; mixer output layers start at exact zero."""
    dp, dh, ell = config.patch_dim, config.hidden_dim, config.frames
    k, mh, gh, xh = config.n_freqs, config.mlp_hidden, config.gate_hidden, config.mixer_hidden
    w = config.omega_dim
    if config.film_mode == "flattened":
        head_in, head_out = ell * dh, 2 * ell * dh
    else:
        head_in, head_out = dh, 2 * dh

    p: dict[str, np.ndarray] = {}
    p["proj.w"] = _dense(rng, dh, dp)
    p["proj.b"] = np.zeros(dh)
    p["ln.gain"] = np.ones(dh)
    p["ln.bias"] = np.zeros(dh)
    p["obj_occ"] = 0.1 * rng.standard_normal(dh)
    p["vel_occ"] = 0.1 * rng.standard_normal(dh)
    p["empty_mass"] = 0.1 * rng.standard_normal(dh)
    p["empty_vel"] = 0.1 * rng.standard_normal(dh)
    for branch in ("mass", "vel"):
        p[f"{branch}_mlp.w1"] = _dense(rng, mh, 2 * k)
        p[f"{branch}_mlp.b1"] = np.zeros(mh)
        p[f"{branch}_mlp.w2"] = _dense(rng, dh, mh)
        p[f"{branch}_mlp.b2"] = np.zeros(dh)
    for branch in ("mass", "vel"):
        p[f"{branch}_head.w"] = _dense(rng, head_out, head_in)
        p[f"{branch}_head.b"] = np.zeros(head_out)
    for branch in ("mass", "vel"):
        p[f"{branch}_gate.w1"] = _dense(rng, gh, dh)
        p[f"{branch}_gate.b1"] = np.zeros(gh)
        p[f"{branch}_gate.w2"] = _dense(rng, 1, gh)
        p[f"{branch}_gate.b2"] = np.zeros(1)
    for branch in ("mass", "vel"):
        p[f"mix_{branch}.w1"] = _dense(rng, xh, dh)
        p[f"mix_{branch}.b1"] = np.zeros(xh)
        p[f"mix_{branch}.w2"] = np.zeros((w, xh))   # exact zero: transparent at init
        p[f"mix_{branch}.b2"] = np.zeros(w)
    p["alpha_m"] = np.array(1.0)
    p["alpha_v"] = np.array(1.0)

    # Octave ladder centered on the unit frequency, 2^(k - 1 - K//2). The
    # inputs are z-scored (span several units), so the ladder must reach
    # below 1: integer-only octaves are 1-periodic in the input and cannot
    # tell s from s + 1.
    freqs = 2.0 ** np.arange(k, dtype=np.float64) / 2.0 ** (k // 2)
    buffers = {
        "mass_freqs": freqs.copy(),
        "vel_freqs": freqs.copy(),
        "mu_mass": np.array(0.0),
        "sigma_mass": np.array(1.0),
        "mu_vel": np.array(0.0),
        "sigma_vel": np.array(1.0),
    }
    return AdapterState(config=config, params=p, buffers=buffers)


def state_to_payload(state: AdapterState) -> dict:
    """Flat JSON payload: named float arrays plus shapes, insertion order."""
    return {
        "config": asdict(state.config),
        "params": {
            name: {"shape": list(arr.shape), "data": np.ravel(arr).tolist()}
            for name, arr in state.params.items()
        },
        "buffers": {
            name: {"shape": list(np.shape(arr)), "data": np.ravel(arr).tolist()}
            for name, arr in state.buffers.items()
        },
    }


def state_from_payload(payload: dict) -> AdapterState:
    config = AdapterConfig(**payload["config"])

    def unpack(entry):
        return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])

    params = {name: unpack(entry) for name, entry in payload["params"].items()}
    buffers = {name: unpack(entry) for name, entry in payload["buffers"].items()}
    return AdapterState(config=config, params=params, buffers=buffers)


def save_state(state: AdapterState, path: str | Path) -> None:
    Path(path).write_text(json.dumps(state_to_payload(state)) + "\n", encoding="utf-8")


def load_state(path: str | Path) -> AdapterState:
    return state_from_payload(json.loads(Path(path).read_text(encoding="utf-8")))
