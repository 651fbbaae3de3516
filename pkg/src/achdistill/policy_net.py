"""Shared-encoder agent network.

``encode`` maps observations to latents phi(s). ``heads`` turns a latent
and the achievement memory into a categorical policy and a value (in
normalised-target space). ``achievement_repr`` is nu(g), the unit
difference of consecutive latents, and ``state_action_repr`` is psi(s, a,
g^-): FiLM-modulate phi(s) by the action, concatenate the memory, run a
two-layer MLP and normalise.

Layer norm sits in front of every dense and conv layer. Parameters live in
a flat ``{name: Tensor}`` store; every function also accepts an explicit
store so frozen snapshots can be evaluated with the same code.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import ndauto as nd
from .ndauto import Tensor

DEGENERATE_EPS = 1e-6

CHECKPOINT_MAGIC = b"ACHDCKPT"
CHECKPOINT_VERSION = 1


class DegenerateRepresentationError(ValueError):
    """phi(s') - phi(s) is (numerically) zero, so nu has no direction."""


@dataclass(frozen=True)
class SizeProfile:
    name: str
    conv_channels: tuple[int, ...] = ()
    dense: tuple[int, ...] = (256, 256)
    film_hidden: int = 256
    proj_hidden: int = 256
    kernel: int = 3

    @property
    def latent_size(self) -> int:
        return self.dense[-1]


PROFILES = {
    "tiny": SizeProfile("tiny", dense=(6, 5), film_hidden=4, proj_hidden=4),
    "tiny_conv": SizeProfile("tiny_conv", conv_channels=(3,), dense=(6,), film_hidden=6, proj_hidden=6),
    "desk": SizeProfile("desk", dense=(256, 256)),
    "desk_small": SizeProfile("desk_small", dense=(128, 128), film_hidden=128, proj_hidden=128),
    "desk_conv": SizeProfile("desk_conv", conv_channels=(16, 32), dense=(256,)),
    # two readings of the large model: [64, 64, 128] and [64, 128, 128]
    "full": SizeProfile("full", conv_channels=(64, 64, 128), dense=(256, 1024), film_hidden=1024, proj_hidden=1024),
    "full_wide": SizeProfile("full_wide", conv_channels=(64, 128, 128), dense=(256, 1024), film_hidden=1024, proj_hidden=1024),
}


def get_profile(profile: str | SizeProfile) -> SizeProfile:
    if isinstance(profile, SizeProfile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown size profile {profile!r}; known: {sorted(PROFILES)}") from None


def _ln_params(store, rng, prefix, d, dtype):
    store[f"{prefix}.ln.gain"] = np.ones(d, dtype=dtype)
    store[f"{prefix}.ln.bias"] = np.zeros(d, dtype=dtype)


def _dense_params(store, rng, prefix, d_in, d_out, dtype, gain=None):
    _ln_params(store, rng, prefix, d_in, dtype)
    if gain is None:
        store[f"{prefix}.w"] = nd.fan_in_init(rng, d_in, (d_in, d_out), dtype=dtype)
    else:
        store[f"{prefix}.w"] = nd.orthogonal_init(rng, (d_in, d_out), gain=gain, dtype=dtype)
    store[f"{prefix}.b"] = np.zeros(d_out, dtype=dtype)


def init_params(obs_shape, n_actions: int, profile: SizeProfile, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    obs_shape = tuple(obs_shape)
    if profile.conv_channels:
        if len(obs_shape) != 3:
            raise ValueError("conv encoder needs (H, W, C) observations")
        h, w, c = obs_shape
        k = profile.kernel
        for i, out_c in enumerate(profile.conv_channels):
            _ln_params(p, rng, f"enc.conv{i}", c, dtype)
            p[f"enc.conv{i}.w"] = nd.fan_in_init(rng, c * k * k, (out_c, c, k, k), dtype=dtype)
            p[f"enc.conv{i}.b"] = np.zeros(out_c, dtype=dtype)
            c = out_c
        d = h * w * c
    else:
        d = int(np.prod(obs_shape))
    for i, out in enumerate(profile.dense):
        _dense_params(p, rng, f"enc.dense{i}", d, out, dtype)
        d = out
    hdim = profile.latent_size
    _dense_params(p, rng, "pi", 2 * hdim, n_actions, dtype, gain=0.01)
    _dense_params(p, rng, "v", 2 * hdim, 1, dtype, gain=0.1)
    for net in ("film.eta", "film.delta"):
        _dense_params(p, rng, f"{net}.0", n_actions, profile.film_hidden, dtype)
        _dense_params(p, rng, f"{net}.1", profile.film_hidden, hdim, dtype)
    _dense_params(p, rng, "proj.0", 2 * hdim, profile.proj_hidden, dtype)
    _dense_params(p, rng, "proj.1", profile.proj_hidden, hdim, dtype)
    return p


def _dense(p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    x = nd.layer_norm(x, p[f"{prefix}.ln.gain"], p[f"{prefix}.ln.bias"])
    return nd.linear(x, p[f"{prefix}.w"], p[f"{prefix}.b"])


def _mlp2(p, prefix, x):
    return _dense(p, f"{prefix}.1", nd.relu(_dense(p, f"{prefix}.0", x)))


class AgentNet:
    """Agent network over a named parameter store.

    ``dtype`` is float64 for gradient checks and float32 for training.
    """

    def __init__(self, obs_shape, n_actions: int, profile: str | SizeProfile = "desk", seed: int = 0, dtype=np.float32):
        self.obs_shape = tuple(int(s) for s in obs_shape)
        self.n_actions = int(n_actions)
        self.profile = get_profile(profile)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        arrays = init_params(self.obs_shape, self.n_actions, self.profile, seed, self.dtype)
        self.params: dict[str, Tensor] = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}

    @property
    def latent_size(self) -> int:
        return self.profile.latent_size

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    # -- snapshots ---------------------------------------------------------------
    def snapshot(self) -> dict[str, Tensor]:
        """Frozen copy of the parameters (for pi_old / V_old)."""
        return {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise ValueError(f"parameter names differ: {sorted(missing)}")
        for k, t in self.params.items():
            a = np.asarray(arrays[k])
            if a.shape != t.shape:
                raise ValueError(f"{k}: shape {a.shape} != {t.shape}")
            t.data = a.astype(self.dtype, copy=True)

    # -- forward pieces ------------------------------------------------------------
    def _obs(self, obs) -> Tensor:
        x = obs.data if isinstance(obs, Tensor) else np.asarray(obs)
        if x.shape[1:] != self.obs_shape:
            if x.shape == self.obs_shape:
                x = x[None]
            else:
                raise ValueError(f"observation shape {x.shape[1:]} != configured {self.obs_shape}")
        if isinstance(obs, Tensor) and obs.requires_grad:
            return obs if obs.shape[1:] == self.obs_shape else obs.reshape(1, *self.obs_shape)
        return Tensor(x.astype(self.dtype, copy=False))

    def encode(self, obs, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """(N, *obs_shape) -> (N, h) latents."""
        p = self.params if params is None else params
        x = self._obs(obs)
        n = x.shape[0]
        if self.profile.conv_channels:
            # x: (N, H, W, C); layer norm over channels, conv in NCHW
            pad = self.profile.kernel // 2
            for i in range(len(self.profile.conv_channels)):
                x = nd.layer_norm(x, p[f"enc.conv{i}.ln.gain"], p[f"enc.conv{i}.ln.bias"])
                x = nd.conv2d(x.transpose(0, 3, 1, 2), p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], padding=pad)
                x = nd.relu(x).transpose(0, 2, 3, 1)
        x = x.reshape(n, -1)
        for i in range(len(self.profile.dense)):
            x = nd.relu(_dense(p, f"enc.dense{i}", x))
        return x

    def _memory(self, memory, n: int) -> Tensor:
        h = self.latent_size
        if memory is None:
            return Tensor(np.zeros((n, h), dtype=self.dtype))
        if not isinstance(memory, Tensor):
            memory = Tensor(np.asarray(memory, dtype=self.dtype))
        if memory.ndim == 1:
            memory = memory.reshape(1, -1)
        if memory.shape != (n, h):
            raise ValueError(f"memory shape {memory.shape} != ({n}, {h})")
        return memory

    def heads(self, latent: Tensor, memory=None, params: Mapping[str, Tensor] | None = None):
        """Returns (Categorical policy, value (N,)). ``memory=None`` is the
        zero sentinel."""
        p = self.params if params is None else params
        if latent.ndim != 2 or latent.shape[1] != self.latent_size:
            raise ValueError(f"latent shape {latent.shape} incompatible with h={self.latent_size}")
        x = nd.concat([latent, self._memory(memory, latent.shape[0])], axis=-1)
        logits = _dense(p, "pi", x)
        value = _dense(p, "v", x).reshape(-1)
        return nd.Categorical(logits), value

    def forward(self, obs, memory=None, params=None):
        z = self.encode(obs, params)
        dist, value = self.heads(z, memory, params)
        return dist, value, z

    def nu_from_latents(self, z0: Tensor, z1: Tensor) -> Tensor:
        """Training-path nu: unit difference, zero rows where degenerate."""
        diff = nd.sub(z1, z0)
        norm = np.sqrt((diff.data.astype(np.float64) ** 2).sum(-1))
        out = nd.l2_normalize(diff)
        bad = norm < DEGENERATE_EPS
        if bad.any():
            out = nd.mul(out, Tensor((~bad).astype(self.dtype)[:, None]))
        return out

    def achievement_repr(self, obs, next_obs, params=None, strict: bool = True) -> Tensor:
        """nu(g) for g = (s, a, s'); raises on a zero difference when strict."""
        z0 = self.encode(obs, params)
        z1 = self.encode(next_obs, params)
        if strict:
            norm = np.sqrt(((z1.data.astype(np.float64) - z0.data) ** 2).sum(-1))
            if np.any(norm < DEGENERATE_EPS):
                raise DegenerateRepresentationError(
                    f"{int(np.sum(norm < DEGENERATE_EPS))} achievement(s) with |phi(s') - phi(s)| < {DEGENERATE_EPS}"
                )
        return self.nu_from_latents(z0, z1)

    def film(self, latent: Tensor, actions, params=None) -> Tensor:
        p = self.params if params is None else params
        actions = np.asarray(actions).reshape(-1)
        if actions.shape[0] != latent.shape[0]:
            raise ValueError("one action per latent required")
        if np.any((actions < 0) | (actions >= self.n_actions)) or not np.issubdtype(actions.dtype, np.integer):
            raise ValueError(f"invalid action index in {actions}")
        onehot = Tensor(np.eye(self.n_actions, dtype=self.dtype)[actions])
        eta = _mlp2(p, "film.eta", onehot)
        delta = _mlp2(p, "film.delta", onehot)
        return nd.add(nd.mul(nd.add(eta, 1.0), latent), delta)

    def state_action_repr(self, latent: Tensor, actions, memory=None, params=None) -> Tensor:
        """psi(s, a, g^-) as unit rows."""
        p = self.params if params is None else params
        f = self.film(latent, actions, p)
        x = nd.concat([f, self._memory(memory, latent.shape[0])], axis=-1)
        return nd.l2_normalize(_mlp2(p, "proj", x))

    # -- fast inference ----------------------------------------------------------------
    def act_batch(self, obs, memory, rng: np.random.Generator, deterministic: bool = False):
        """No-grad forward for rollouts: (actions, log_probs, values, latents)."""
        with nd.no_grad():
            dist, value, z = self.forward(obs, memory)
            actions = dist.mode() if deterministic else dist.sample(rng)
            logp = dist.log_prob(actions).data
        return actions, logp, value.data, z.data

    # -- checkpoints ----------------------------------------------------------------------
    def config_dict(self) -> dict:
        return {
            "obs_shape": list(self.obs_shape),
            "n_actions": self.n_actions,
            "profile": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.profile).items()},
            "seed": self.seed,
            "dtype": self.dtype.name,
        }

    def save(self, path, metadata: dict | None = None) -> None:
        save_checkpoint(path, self.config_dict(), self.state_dict(), metadata)

    @classmethod
    def load(cls, path) -> tuple["AgentNet", dict]:
        config, arrays, metadata = load_checkpoint(path)
        net = cls.from_config(config)
        net.load_state_dict(arrays)
        return net, metadata

    @classmethod
    def from_config(cls, config: dict) -> "AgentNet":
        prof = dict(config["profile"])
        prof = SizeProfile(**{k: tuple(v) if isinstance(v, list) else v for k, v in prof.items()})
        return cls(config["obs_shape"], config["n_actions"], prof, config.get("seed", 0), np.dtype(config["dtype"]))


def save_checkpoint(path, config: dict, arrays: Mapping[str, np.ndarray], metadata: dict | None = None) -> None:
    """Layout: magic, u32 version, u64 header length, JSON header, raw arrays.

    The header lists each array's name, dtype, shape and byte offset into
    the payload that follows it.
    """
    entries, offset = [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "config": config, "arrays": entries, "metadata": metadata or {}},
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for name, a in arrays.items():
        buf.write(np.ascontiguousarray(a).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos : pos + hlen])
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw[start : start + e["nbytes"]], dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["config"], arrays, header["metadata"]
