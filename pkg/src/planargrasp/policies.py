"""Policy kinds: geometry-unaware base policies, the residual + MoE-weight
hyper-policy, the point-cloud student, observation masking, and the action
combination rule.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import checkpoint
from .env import ACTION_DIM, EnvConfig, Observation, layer_dims
from .numerics import (DimensionError, Mlp, gaussian_entropy, gaussian_logprob,
                       gaussian_sample, rng_stream, softplus)

WEIGHT_FLOOR = 1e-6


@dataclass(frozen=True)
class ObservationMask:
    """Which observation layers a policy may see. Disabled layers are absent
    from the flattened vector, not zeroed."""

    proprio: bool = True
    object_pos: bool = True
    object_rot: bool = False
    object_code: bool = False
    point_cloud: bool = False
    prev_action: bool = True
    target_pos: bool = True

    @classmethod
    def base(cls) -> "ObservationMask":
        return cls()

    @classmethod
    def hyper(cls) -> "ObservationMask":
        return cls(object_rot=True, object_code=True)

    @classmethod
    def vision(cls) -> "ObservationMask":
        return cls(object_pos=False, point_cloud=True)

    @classmethod
    def full(cls) -> "ObservationMask":
        return cls(object_rot=True, object_code=True, point_cloud=True)

    def enabled_layers(self):
        return [f.name for f in fields(self) if getattr(self, f.name)]

    def flat_dim(self, cfg: EnvConfig | None = None) -> int:
        dims = layer_dims(cfg or EnvConfig())
        return sum(dims[name] for name in self.enabled_layers())

    def to_record(self) -> dict:
        return {f.name: bool(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_record(cls, rec: dict) -> "ObservationMask":
        return cls(**rec)


def mask_observation(obs: Observation, mask: ObservationMask) -> np.ndarray:
    """Concatenate enabled layers in field-declaration order."""
    return np.concatenate([obs.layer(name) for name in mask.enabled_layers()], axis=1)


def _scale_mean_columns(mlp: Mlp, n_mean: int, gain: float = 0.01) -> None:
    # small init for action-mean outputs, standard-gain for the value column
    w = mlp.params[f"w{mlp.num_layers - 1}"]
    w[:, :n_mean] *= gain


class GaussianActorCritic:
    """MLP trunk emitting [action mean, value], with state-independent
    learnable per-dimension log standard deviations."""

    def __init__(self, obs_dim: int, action_dim: int, hidden=(256, 256, 128, 128),
                 init_std: float = 0.8, rng=None, extra_outputs: int = 0):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.extra_outputs = extra_outputs
        n_mean = action_dim + extra_outputs
        self.mlp = Mlp((obs_dim, *hidden, n_mean + 1), rng=rng)
        _scale_mean_columns(self.mlp, n_mean)
        self.params = dict(self.mlp.params)
        self.params["log_std"] = np.full(n_mean, np.log(init_std))
        self.mlp.params = self.params  # shared storage, single source of truth

    @property
    def n_mean(self) -> int:
        return self.action_dim + self.extra_outputs

    def forward(self, x: np.ndarray):
        out = self.mlp.forward(x)
        return out[:, :self.n_mean], out[:, self.n_mean]

    def sample(self, x: np.ndarray, rng, deterministic: bool = False):
        mean, value = self.forward(x)
        raw = gaussian_sample(mean, self.params["log_std"], rng, deterministic)
        lp = gaussian_logprob(mean, self.params["log_std"], raw)
        return raw, lp, value

    def evaluate(self, x: np.ndarray, raw: np.ndarray):
        out, cache = self.mlp.forward_cached(x)
        mean = out[:, :self.n_mean]
        value = out[:, self.n_mean]
        lp = gaussian_logprob(mean, self.params["log_std"], raw)
        return lp, value, (cache, mean, raw)

    def backward(self, eval_cache, dlp: np.ndarray, dvalue: np.ndarray,
                 dentropy: float = 0.0):
        """Gradients given dL/dlogprob and dL/dvalue per row plus the
        coefficient on the entropy of the action distribution."""
        cache, mean, raw = eval_cache
        log_std = self.params["log_std"]
        inv_var = np.exp(-2.0 * log_std)
        z = raw - mean
        upstream = np.empty((len(mean), self.n_mean + 1))
        upstream[:, :self.n_mean] = dlp[:, None] * z * inv_var
        upstream[:, self.n_mean] = dvalue
        grads, _ = self.mlp.backward(cache, upstream)
        g_ls = np.sum(dlp[:, None] * (z * z * inv_var - 1.0), axis=0)
        grads["log_std"] = g_ls + dentropy * np.ones_like(log_std)
        return grads

    def entropy(self) -> float:
        return gaussian_entropy(self.params["log_std"])


class BasePolicy:
    """Frozen geometry-unaware expert trained on a single object."""

    KIND = "base"

    def __init__(self, net: GaussianActorCritic, mask: ObservationMask,
                 trained_object_id: int = -1):
        self.net = net
        self.mask = mask
        self.trained_object_id = trained_object_id

    def act(self, obs: Observation) -> np.ndarray:
        """Deterministic action: the Gaussian mean, clipped to [-1, 1]."""
        x = mask_observation(obs, self.mask)
        if x.shape[1] != self.net.obs_dim:
            raise DimensionError(
                f"masked obs dim {x.shape[1]} != policy input {self.net.obs_dim}")
        mean, _ = self.net.forward(x)
        return np.clip(mean, -1.0, 1.0)

    def save(self, path, hidden) -> None:
        checkpoint.save_tensors(path, self.net.params, manifest={
            "kind": self.KIND, "mask": self.mask.to_record(),
            "trained_object_id": int(self.trained_object_id),
            "obs_dim": self.net.obs_dim, "action_dim": self.net.action_dim,
            "hidden": list(hidden)})

    @classmethod
    def load(cls, path) -> "BasePolicy":
        tensors, man = checkpoint.load_tensors(path)
        if man is None or man.get("kind") != cls.KIND:
            raise ValueError(f"{path}: not a base-policy checkpoint")
        net = GaussianActorCritic(man["obs_dim"], man["action_dim"],
                                  hidden=tuple(man["hidden"]))
        _assign_params(net.params, tensors)
        return cls(net, ObservationMask.from_record(man["mask"]),
                   man["trained_object_id"])


@dataclass
class HyperOutput:
    residual: np.ndarray     # (N, A)
    weights: np.ndarray      # (N, k), non-negative
    raw: np.ndarray          # pre-transform Gaussian sample used for PPO
    logprob: np.ndarray      # (N,)
    value: np.ndarray        # (N,)


class HyperPolicy:
    """Residual head + MoE weight head + critic on the full state mask.

    Both heads are Gaussian; weights pass through softplus with a floor.
    PPO log-probabilities are computed on the pre-transform sample with the
    same transform at sampling and evaluation, so ratios are consistent.
    When use_residual is False the residual dimensions are dropped from the
    sampled vector entirely (weights-only ablation).
    """

    KIND = "hyper"

    def __init__(self, obs_dim: int, action_dim: int, k: int,
                 hidden=(256, 256, 128, 128), init_std: float = 0.8, rng=None,
                 use_residual: bool = True):
        self.k = k
        self.use_residual = use_residual
        self.net = GaussianActorCritic(obs_dim, action_dim, hidden=hidden,
                                       init_std=init_std, rng=rng, extra_outputs=k)
        self.action_dim = action_dim
        self.obs_dim = obs_dim

    @property
    def params(self) -> dict:
        return self.net.params

    def _raw_slice(self):
        a = self.action_dim
        return slice(0, a + self.k) if self.use_residual else slice(a, a + self.k)

    @property
    def raw_dim(self) -> int:
        return self.action_dim + self.k if self.use_residual else self.k

    def act(self, obs_flat: np.ndarray, rng, deterministic: bool = False) -> HyperOutput:
        mean, value = self.net.forward(obs_flat)
        sl = self._raw_slice()
        log_std = self.params["log_std"][sl]
        raw = gaussian_sample(mean[:, sl], log_std, rng, deterministic)
        lp = gaussian_logprob(mean[:, sl], log_std, raw)
        if self.use_residual:
            residual = raw[:, :self.action_dim]
            wraw = raw[:, self.action_dim:]
        else:
            residual = np.zeros((len(raw), self.action_dim))
            wraw = raw
        weights = softplus(wraw) + WEIGHT_FLOOR
        return HyperOutput(residual=residual, weights=weights, raw=raw,
                           logprob=lp, value=value)

    def evaluate(self, obs_flat: np.ndarray, raw: np.ndarray):
        out, cache = self.net.mlp.forward_cached(obs_flat)
        sl = self._raw_slice()
        mean = out[:, sl]
        value = out[:, self.net.n_mean]
        lp = gaussian_logprob(mean, self.params["log_std"][sl], raw)
        return lp, value, (cache, mean, raw)

    def backward(self, eval_cache, dlp, dvalue, dentropy: float = 0.0):
        cache, mean, raw = eval_cache
        sl = self._raw_slice()
        log_std = self.params["log_std"][sl]
        inv_var = np.exp(-2.0 * log_std)
        z = raw - mean
        upstream = np.zeros((len(mean), self.net.n_mean + 1))
        upstream[:, sl] = dlp[:, None] * z * inv_var
        upstream[:, self.net.n_mean] = dvalue
        grads, _ = self.net.mlp.backward(cache, upstream)
        g_ls = np.zeros_like(self.params["log_std"])
        g_ls[sl] = np.sum(dlp[:, None] * (z * z * inv_var - 1.0), axis=0) + dentropy
        grads["log_std"] = g_ls
        return grads

    def entropy(self) -> float:
        return gaussian_entropy(self.params["log_std"][self._raw_slice()])

    def save(self, path, hidden, mask: ObservationMask, stage: int = 0) -> None:
        checkpoint.save_tensors(path, self.params, manifest={
            "kind": self.KIND, "mask": mask.to_record(), "k": self.k,
            "obs_dim": self.obs_dim, "action_dim": self.action_dim,
            "hidden": list(hidden), "use_residual": self.use_residual,
            "stage": stage})

    @classmethod
    def load(cls, path) -> tuple:
        tensors, man = checkpoint.load_tensors(path)
        if man is None or man.get("kind") != cls.KIND:
            raise ValueError(f"{path}: not a hyper-policy checkpoint")
        policy = cls(man["obs_dim"], man["action_dim"], man["k"],
                     hidden=tuple(man["hidden"]), use_residual=man["use_residual"])
        _assign_params(policy.params, tensors)
        return policy, ObservationMask.from_record(man["mask"])


def combine_actions(base_actions: np.ndarray, residual: np.ndarray,
                    weights: np.ndarray) -> np.ndarray:
    """Residual plus the L1-normalized weighted sum of base actions.

    base_actions (k, N, A), residual (N, A), weights (N, k) >= 0. If every
    weight sits at the floor the MoE term degrades to the unweighted mean.
    The result is clipped to [-1, 1].
    """
    base_actions = np.asarray(base_actions, dtype=np.float64)
    k = base_actions.shape[0]
    if weights.shape[1] != k:
        raise DimensionError(f"{weights.shape[1]} weights for {k} base actions")
    norm = weights.sum(axis=1)
    floored = norm < k * WEIGHT_FLOOR * (1.0 + 1e-9)
    w = np.where(floored[:, None], 1.0 / k, weights / norm[:, None])
    moe = np.einsum("nk,kna->na", w, base_actions)
    return np.clip(residual + moe, -1.0, 1.0)


class VisionPolicy:
    """Point-cloud student: shared per-point MLP with coordinate-wise max
    pooling, concatenated with the non-geometric layers, then an MLP trunk.
    Deterministic by construction (trained by regression)."""

    KIND = "vision"

    def __init__(self, cfg: EnvConfig | None = None, hidden=(256, 256, 128, 128),
                 encoder_hidden=(64,), encoder_dim: int = 64, rng=None):
        cfg = cfg or EnvConfig()
        rng = rng if rng is not None else rng_stream(0)
        self.mask = ObservationMask.vision()
        dims = layer_dims(cfg)
        self.n_points = dims["point_cloud"] // 2
        self.encoder_dim = encoder_dim
        self.encoder_hidden = tuple(encoder_hidden)
        self.hidden = tuple(hidden)
        self.flat_extra = dims["proprio"] + dims["prev_action"] + dims["target_pos"]
        self.encoder = Mlp((2, *encoder_hidden, encoder_dim), rng=rng)
        self.trunk = Mlp((encoder_dim + self.flat_extra, *hidden, ACTION_DIM),
                         rng=rng, out_gain=0.01)
        self.params: dict[str, np.ndarray] = {}
        for name, arr in self.encoder.params.items():
            self.params["enc_" + name] = arr
        for name, arr in self.trunk.params.items():
            self.params["trunk_" + name] = arr

    def _split(self, obs: Observation):
        points = obs.point_cloud
        if points.size == 0:
            raise DimensionError("empty point cloud")
        n = points.shape[0]
        pts = points.reshape(n * self.n_points, 2)
        extra = np.concatenate([obs.proprio, obs.prev_action, obs.target_pos], axis=1)
        return pts, extra, n

    def forward_cached(self, obs: Observation):
        pts, extra, n = self._split(obs)
        feat, enc_cache = self.encoder.forward_cached(pts)
        feat = feat.reshape(n, self.n_points, self.encoder_dim)
        arg = np.argmax(feat, axis=1)                    # (n, E)
        pooled = np.take_along_axis(feat, arg[:, None, :], axis=1)[:, 0, :]
        x = np.concatenate([pooled, extra], axis=1)
        out, trunk_cache = self.trunk.forward_cached(x)
        action = np.clip(out, -1.0, 1.0)
        return action, (enc_cache, trunk_cache, arg, out, n)

    def act(self, obs: Observation) -> np.ndarray:
        action, _ = self.forward_cached(obs)
        return action

    def backward(self, cache, d_action: np.ndarray) -> dict:
        enc_cache, trunk_cache, arg, out, n = cache
        d_out = np.where(np.abs(out) < 1.0, d_action, 0.0)
        trunk_grads, dx = self.trunk.backward(trunk_cache, d_out)
        d_pooled = dx[:, :self.encoder_dim]
        d_feat = np.zeros((n, self.n_points, self.encoder_dim))
        np.put_along_axis(d_feat, arg[:, None, :], d_pooled[:, None, :], axis=1)
        enc_grads, _ = self.encoder.backward(
            enc_cache, d_feat.reshape(n * self.n_points, self.encoder_dim))
        grads = {"enc_" + k: v for k, v in enc_grads.items()}
        grads.update({"trunk_" + k: v for k, v in trunk_grads.items()})
        return grads

    def save(self, path) -> None:
        checkpoint.save_tensors(path, self.params, manifest={
            "kind": self.KIND, "mask": self.mask.to_record(),
            "hidden": list(self.hidden), "encoder_hidden": list(self.encoder_hidden),
            "encoder_dim": self.encoder_dim})

    @classmethod
    def load(cls, path) -> "VisionPolicy":
        tensors, man = checkpoint.load_tensors(path)
        if man is None or man.get("kind") != cls.KIND:
            raise ValueError(f"{path}: not a vision-policy checkpoint")
        policy = cls(hidden=tuple(man["hidden"]),
                     encoder_hidden=tuple(man["encoder_hidden"]),
                     encoder_dim=man["encoder_dim"])
        _assign_params(policy.params, tensors)
        return policy


def _assign_params(params: dict, tensors: dict) -> None:
    if set(params) != set(tensors):
        raise ValueError("checkpoint parameter names do not match the model")
    for name, arr in tensors.items():
        if params[name].shape != arr.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        params[name][...] = arr


class MoeTeacher:
    """Frozen hyper-policy plus its base policies; produces the combined
    deterministic action used for distillation labels and evaluation."""

    def __init__(self, hyper: HyperPolicy, bases: list, mask: ObservationMask):
        if len(bases) != hyper.k:
            raise DimensionError(f"{len(bases)} bases for k={hyper.k}")
        self.hyper = hyper
        self.bases = bases
        self.mask = mask

    def base_actions(self, obs: Observation) -> np.ndarray:
        return np.stack([b.act(obs) for b in self.bases])

    def act(self, obs: Observation, rng=None, deterministic: bool = True):
        x = mask_observation(obs, self.mask)
        out = self.hyper.act(x, rng, deterministic=deterministic)
        action = combine_actions(self.base_actions(obs), out.residual, out.weights)
        return action, out
