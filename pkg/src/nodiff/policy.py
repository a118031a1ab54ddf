"""NO-Diffusion policy: shared observation encoder, NOAM heads, denoiser.

Parameter groups (names used in checkpoints and gradient vectors):

``psi``       observation encoder feeding the denoiser (and NOAM when shared)
``psi_noam``  second encoder, only in the separated-encoder setup (III)
``theta``     denoiser
``eta``       mean head (or a trainable constant in the static setup)
``xi``        scale head (or a trainable constant in the static setup)

The denoiser predicts the clean motion. The isotropic baseline stands in for
a standard Diffusion Policy: it starts from N(0, I), predicts the added
noise, and converts that to a clean-motion estimate before each DDIM step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, NumericError, StructuralError
from .ndmath import (
    DenseNet,
    ParamSlot,
    RngStream,
    init_dense_net,
    net_apply,
    net_gradients,
    sigmoid,
    softplus,
)
from .schedule import Schedule, forward_noise, make_step_plan, run_sampler


@dataclass(frozen=True)
class SetupSpec:
    loss: str = "total"  # total | diff
    encoder: str = "shared"  # shared | separated
    sigma: str = "anisotropic"  # anisotropic | isotropic | fixed
    conditioning: str = "observation"  # observation | static | none
    prediction: str = "sample"  # sample | epsilon


SETUPS: dict[str, SetupSpec] = {
    "I": SetupSpec(),
    "II": SetupSpec(loss="diff"),
    "III": SetupSpec(encoder="separated"),
    "IV": SetupSpec(sigma="isotropic"),
    "V": SetupSpec(conditioning="static"),
    "ISO-BASELINE": SetupSpec(loss="diff", sigma="fixed", conditioning="none", prediction="epsilon"),
}


def setup_spec(name: str) -> SetupSpec:
    try:
        return SETUPS[name]
    except KeyError:
        raise ConfigError(f"unknown setup {name!r}; expected one of {list(SETUPS)}", component="policy") from None


@dataclass(frozen=True)
class ModelConfig:
    T_o: int = 2
    T_p: int = 16
    state_dim: int = 3
    action_dim: int = 3
    image_shape: tuple[int, int, int, int] = (1, 16, 16, 1)  # (N_i, H, W, C)
    feature_dim: int = 128
    encoder_hidden: int = 256
    denoiser_hidden: tuple[int, ...] = (512, 512)
    head_hidden: int = 64
    k_embed_dim: int = 32
    sigma_floor: float = 1e-3
    w_mu: float = 1.0
    w_sigma: float = 0.1
    sigma_loss: str = "squared"  # squared | literal
    clip_sample: bool = True

    def __post_init__(self):
        if self.sigma_loss not in ("squared", "literal"):
            raise ConfigError(f"sigma_loss must be 'squared' or 'literal', got {self.sigma_loss!r}", component="policy")
        if self.k_embed_dim % 2:
            raise ConfigError("k_embed_dim must be even", component="policy")
        if self.T_o < 1 or self.T_p < 1:
            raise ConfigError("T_o and T_p must be >= 1", component="policy")
        if self.sigma_floor <= 0:
            raise ConfigError("sigma_floor must be positive", component="policy")

    @property
    def image_size(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def obs_dim(self) -> int:
        return self.T_o * (self.state_dim + self.image_size)

    @property
    def motion_size(self) -> int:
        return self.T_p * self.action_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["denoiser_hidden"] = list(self.denoiser_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "image_shape" in d:
            d["image_shape"] = tuple(d["image_shape"])
        if "denoiser_hidden" in d:
            d["denoiser_hidden"] = tuple(d["denoiser_hidden"])
        return cls(**d)


@dataclass
class NormStats:
    action_min: np.ndarray
    action_max: np.ndarray
    state_mean: np.ndarray
    state_std: np.ndarray

    def __post_init__(self):
        for name in ("action_min", "action_max", "state_mean", "state_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not np.all(self.action_min < self.action_max):
            raise ConfigError("NormStats needs action_min < action_max in every dimension", component="policy")

    @classmethod
    def fit(cls, actions: np.ndarray, states: np.ndarray) -> "NormStats":
        """Per-dimension action min/max and state mean/std.

        Constant action dimensions get their range widened by 1 on both sides
        (they normalise to 0); constant state dimensions get std 1.
        """
        lo, hi = actions.min(axis=0), actions.max(axis=0)
        flat = hi - lo < 1e-8
        lo, hi = np.where(flat, lo - 1.0, lo), np.where(flat, hi + 1.0, hi)
        mean, std = states.mean(axis=0), states.std(axis=0)
        std = np.where(std < 1e-6, 1.0, std)
        return cls(lo, hi, mean, std)

    def normalize_actions(self, a: np.ndarray) -> np.ndarray:
        return 2.0 * (a - self.action_min) / (self.action_max - self.action_min) - 1.0

    def denormalize_actions(self, n: np.ndarray) -> np.ndarray:
        return (n + 1.0) * 0.5 * (self.action_max - self.action_min) + self.action_min

    def normalize_states(self, s: np.ndarray) -> np.ndarray:
        return (s - self.state_mean) / self.state_std

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("action_min", "action_max", "state_mean", "state_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.array(v, dtype=np.float64) for k, v in d.items()})

    @classmethod
    def identity(cls, action_dim: int, state_dim: int) -> "NormStats":
        return cls(-np.ones(action_dim), np.ones(action_dim), np.zeros(state_dim), np.ones(state_dim))


@dataclass
class ObservationWindow:
    states: np.ndarray  # (T_o, D_s)
    images: np.ndarray  # (T_o, N_i, H, W, C)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise StructuralError(f"states must be (T_o, D_s), got {self.states.shape}", component="policy")
        if self.images.ndim != 5 or self.images.shape[0] != self.states.shape[0]:
            raise StructuralError(
                f"images must be (T_o, N_i, H, W, C) with T_o={self.states.shape[0]}, got {self.images.shape}",
                component="policy",
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise StructuralError("pixel intensities must lie in [0, 1]", component="policy")


@dataclass
class NoamDistribution:
    mu: np.ndarray  # (T_p, D_a), or (B, T_p, D_a)
    sigma: np.ndarray  # (D_a,) or (1,), or batched (B, D_a) / (B, 1)


def sample_initial_motion(dist: NoamDistribution, eps: np.ndarray) -> np.ndarray:
    """``mu + sigma * eps`` with sigma broadcast over the prediction horizon."""
    sigma = dist.sigma[..., None, :]
    return dist.mu + sigma * eps


def flatten_window(window: ObservationWindow, norm: NormStats) -> np.ndarray:
    """Normalised states and raw pixels of every frame, concatenated frame by frame."""
    s = norm.normalize_states(window.states)
    return np.concatenate([s, window.images.reshape(len(s), -1)], axis=1).ravel()


def k_embedding(k, dim: int) -> np.ndarray:
    """Sinusoidal embedding ``[sin(k f_i), cos(k f_i)]`` with ``f_i = 10000^(-i/half)``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = np.asarray(k, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


@dataclass
class Batch:
    obs: np.ndarray  # (B, obs_dim), already normalised
    M0: np.ndarray  # (B, T_p, D_a), normalised


@dataclass
class Draws:
    k: np.ndarray  # (B,) ints in [1, K_m]
    eps: np.ndarray  # (B, T_p, D_a) standard normal


@dataclass
class LossResult:
    total: float
    l_diff: float
    l_mu: float
    l_sigma: float
    grad: np.ndarray | None = None

    def breakdown(self) -> dict[str, float]:
        return {"L_diff": self.l_diff, "L_mu": self.l_mu, "L_sigma": self.l_sigma, "total": self.total}


GROUP_ORDER = ("psi", "psi_noam", "theta", "eta", "xi")


@dataclass
class Policy:
    """A NO-Diffusion model: parameters, normalisation and schedule.

    All groups share one flat parameter vector ``params``; networks hold views
    into it.
    """

    config: ModelConfig
    setup: str
    schedule: Schedule
    norm: NormStats
    params: np.ndarray = None
    nets: dict[str, DenseNet] = field(default_factory=dict)
    consts: dict[str, np.ndarray] = field(default_factory=dict)
    group_slices: dict[str, slice] = field(default_factory=dict)
    denoise_calls: int = 0
    encode_calls: int = 0

    # -- construction -----------------------------------------------------

    @property
    def spec(self) -> SetupSpec:
        return setup_spec(self.setup)

    def group_shapes(self) -> dict[str, list[tuple[str, tuple[int, ...]]] | tuple]:
        """Architecture of each active group: ``("net", sizes, activations)`` or ``("const", shape)``."""
        c, s = self.config, self.spec
        enc = ("net", (c.obs_dim, c.encoder_hidden, c.feature_dim), ("tanh", "tanh"))
        den_sizes = (c.motion_size + c.feature_dim + c.k_embed_dim, *c.denoiser_hidden, c.motion_size)
        den = ("net", den_sizes, ("relu",) * len(c.denoiser_hidden) + ("identity",))
        out = {"psi": enc}
        if s.encoder == "separated":
            out["psi_noam"] = enc
        out["theta"] = den
        if s.conditioning == "observation":
            out["eta"] = ("net", (c.feature_dim, c.head_hidden, c.motion_size), ("relu", "identity"))
            width = 1 if s.sigma == "isotropic" else c.action_dim
            out["xi"] = ("net", (c.feature_dim, c.head_hidden, width), ("relu", "identity"))
        elif s.conditioning == "static":
            out["eta"] = ("const", (c.T_p, c.action_dim))
            out["xi"] = ("const", (1 if s.sigma == "isotropic" else c.action_dim,))
        return out

    @classmethod
    def create(cls, config: ModelConfig, setup: str, schedule: Schedule, norm: NormStats, rng: RngStream) -> "Policy":
        setup_spec(setup)
        pol = cls(config, setup, schedule, norm)
        pieces = {}
        for name, arch in pol.group_shapes().items():
            if arch[0] == "net":
                pieces[name] = init_dense_net(arch[1], arch[2], rng).params
            else:
                pieces[name] = np.zeros(int(np.prod(arch[1])))
        pol._bind(pieces)
        return pol

    @classmethod
    def from_groups(
        cls, config: ModelConfig, setup: str, schedule: Schedule, norm: NormStats, groups: dict[str, np.ndarray]
    ) -> "Policy":
        pol = cls(config, setup, schedule, norm)
        expected = pol.group_shapes()
        if set(groups) != set(expected):
            raise StructuralError(
                f"parameter groups {sorted(groups)} do not match setup {setup}: {sorted(expected)}", component="policy"
            )
        pol._bind(groups)
        return pol

    def _bind(self, pieces: dict[str, np.ndarray]) -> None:
        archs = self.group_shapes()
        names = [g for g in GROUP_ORDER if g in archs]
        sizes = {}
        for g in names:
            arch = archs[g]
            n = DenseNet(arch[1], arch[2]).n_params if arch[0] == "net" else int(np.prod(arch[1]))
            if np.asarray(pieces[g]).shape != (n,):
                raise StructuralError(
                    f"group {g}: expected {n} parameters, got shape {np.asarray(pieces[g]).shape}", component="policy"
                )
            sizes[g] = n
        self.params = np.concatenate([np.asarray(pieces[g], dtype=np.float64) for g in names])
        off = 0
        for g in names:
            sl = slice(off, off + sizes[g])
            self.group_slices[g] = sl
            arch = archs[g]
            if arch[0] == "net":
                self.nets[g] = DenseNet(arch[1], arch[2], params=self.params[sl])
            else:
                self.consts[g] = self.params[sl].reshape(arch[1])
            off += sizes[g]

    def layout(self) -> list[ParamSlot]:
        """Qualified layout of the flat parameter vector (``group.slot``)."""
        out = []
        for g, sl in self.group_slices.items():
            if g in self.nets:
                for s in self.nets[g].layout:
                    out.append(ParamSlot(f"{g}.{s.name}", sl.start + s.offset, s.shape))
            else:
                out.append(ParamSlot(f"{g}.value", sl.start, self.consts[g].shape))
        return out

    def group_params(self, name: str) -> np.ndarray:
        return self.params[self.group_slices[name]]

    def param_count(self, group: str | None = None) -> int:
        if group is None:
            return int(self.params.size)
        sl = self.group_slices[group]
        return sl.stop - sl.start

    # -- observation handling ---------------------------------------------

    def observation_vector(self, window: ObservationWindow) -> np.ndarray:
        c = self.config
        if window.states.shape != (c.T_o, c.state_dim):
            raise StructuralError(
                f"window states {window.states.shape} != ({c.T_o}, {c.state_dim})", component="policy"
            )
        if window.images.shape[1:] != tuple(c.image_shape):
            raise StructuralError(
                f"window images {window.images.shape[1:]} != {tuple(c.image_shape)}", component="policy"
            )
        return flatten_window(window, self.norm)

    # -- forward pieces ---------------------------------------------------

    def encode(self, window: ObservationWindow, group: str = "psi") -> np.ndarray:
        return self.encode_obs(self.observation_vector(window), group)

    def encode_obs(self, obs: np.ndarray, group: str = "psi") -> np.ndarray:
        self.encode_calls += 1
        X, _ = net_apply(self.nets[group], obs)
        return X

    def noam_estimate(self, X: np.ndarray) -> NoamDistribution:
        """Initial-motion distribution for feature(s) ``X`` (1-D or batched)."""
        c, s = self.config, self.spec
        batched = np.ndim(X) == 2
        lead = (X.shape[0],) if batched else ()
        if s.conditioning == "none":
            return NoamDistribution(np.zeros(lead + (c.T_p, c.action_dim)), np.ones(lead + (1,)))
        if s.conditioning == "static":
            mu = np.broadcast_to(self.consts["eta"], lead + (c.T_p, c.action_dim)).copy()
            sigma = c.sigma_floor + softplus(np.broadcast_to(self.consts["xi"], lead + self.consts["xi"].shape))
            return NoamDistribution(mu, sigma)
        if not np.isfinite(X).all():
            raise NumericError("non-finite observation feature", component="policy")
        mu, _ = net_apply(self.nets["eta"], X)
        pre, _ = net_apply(self.nets["xi"], X)
        if not np.isfinite(mu).all():
            raise NumericError("mean head produced non-finite output", component="policy")
        if not np.isfinite(pre).all():
            raise NumericError("scale head produced non-finite output", component="policy")
        return NoamDistribution(mu.reshape(lead + (c.T_p, c.action_dim)), c.sigma_floor + softplus(pre))

    def _denoiser_input(self, Mk: np.ndarray, X: np.ndarray, k) -> np.ndarray:
        c = self.config
        batched = Mk.ndim == 3
        if Mk.shape[-2:] != (c.T_p, c.action_dim):
            raise StructuralError(f"motion shape {Mk.shape} != (..., {c.T_p}, {c.action_dim})", component="policy")
        if X.shape[-1] != c.feature_dim:
            raise StructuralError(f"feature width {X.shape[-1]} != {c.feature_dim}", component="policy")
        if batched:
            return np.concatenate([Mk.reshape(len(Mk), -1), X, k_embedding(k, c.k_embed_dim)], axis=1)
        return np.concatenate([Mk.ravel(), X, k_embedding(k, c.k_embed_dim)])

    def denoise(self, Mk: np.ndarray, X: np.ndarray, k, *, clip: bool = False) -> np.ndarray:
        """Clean-motion estimate for noisy motion ``Mk`` at diffusion index ``k``."""
        if np.any(np.asarray(k) < 1) or np.any(np.asarray(k) > self.schedule.K_m):
            raise ConfigError(f"diffusion index {k} outside [1, {self.schedule.K_m}]", component="policy")
        self.denoise_calls += 1
        out, _ = net_apply(self.nets["theta"], self._denoiser_input(Mk, X, k))
        out = out.reshape(Mk.shape)
        if self.spec.prediction == "epsilon":
            ab = self.schedule.alpha_bar[k]
            if np.ndim(k):
                ab = ab.reshape((-1,) + (1,) * (Mk.ndim - 1))
            out = (Mk - np.sqrt(1.0 - ab) * out) / np.sqrt(ab)
        if clip:
            out = np.clip(out, -1.0, 1.0)
        return out

    # -- training objective -----------------------------------------------

    def loss_weights(self) -> tuple[float, float]:
        s = self.spec
        if s.loss == "diff" or s.conditioning == "none":
            return 0.0, 0.0
        return self.config.w_mu, self.config.w_sigma

    def loss_total(
        self, batch: Batch, draws: Draws, *, need_grad: bool = True, detached_mu: np.ndarray | None = None
    ) -> LossResult:
        """Joint loss ``L_diff + w_sigma L_sigma + w_mu L_mu`` and its gradient over ``params``.

        In the squared-residual scale loss the mean enters as a constant (no
        gradient). ``detached_mu`` pins that constant to a given value, which
        lets a finite-difference check reproduce the stop-gradient exactly.
        """
        c, s, sched = self.config, self.spec, self.schedule
        M0, eps, k = batch.M0, draws.eps, np.asarray(draws.k)
        B = M0.shape[0]
        if M0.shape != (B, c.T_p, c.action_dim) or eps.shape != M0.shape or k.shape != (B,):
            raise StructuralError(
                f"batch shapes M0 {M0.shape}, eps {eps.shape}, k {k.shape} inconsistent", component="policy"
            )
        if k.min() < 1 or k.max() > sched.K_m:
            raise ConfigError(f"diffusion index outside [1, {sched.K_m}]", component="policy")
        N = M0.size
        w_mu, w_sigma = self.loss_weights()

        X, c_enc = net_apply(self.nets["psi"], batch.obs)
        Xn, c_enc2 = (net_apply(self.nets["psi_noam"], batch.obs) if s.encoder == "separated" else (X, None))

        c_eta = c_xi = pre = None
        if s.conditioning == "none":
            mu = np.zeros_like(M0)
            sigma = np.ones((B, 1))
        elif s.conditioning == "static":
            mu = np.broadcast_to(self.consts["eta"], M0.shape)
            pre = self.consts["xi"][None, :]
            sigma = c.sigma_floor + softplus(pre)
        else:
            mu_flat, c_eta = net_apply(self.nets["eta"], Xn)
            pre, c_xi = net_apply(self.nets["xi"], Xn)
            mu = mu_flat.reshape(M0.shape)
            sigma = c.sigma_floor + softplus(pre)
        sig3 = sigma[:, None, :]

        z = mu + sig3 * eps
        Mk = forward_noise(sched, M0, k, z)
        out, c_den = net_apply(self.nets["theta"], self._denoiser_input(Mk, X, k))
        target = M0 if s.prediction == "sample" else z
        diff = out - target.reshape(B, -1)
        l_diff = float(np.mean(diff * diff))

        l_mu = l_sigma = 0.0
        if s.conditioning != "none":
            res = M0 - mu
            l_mu = float(np.mean(res * res))
            r2, s2 = res * res, np.broadcast_to(sig3 * sig3, M0.shape)
            if c.sigma_loss == "squared":
                if detached_mu is not None:
                    r2 = (M0 - detached_mu) ** 2
                l_sigma = float(np.mean((r2 - s2) ** 2))
            else:
                l_sigma = float(np.mean(r2 - s2))
        total = l_diff + w_sigma * l_sigma + w_mu * l_mu
        if not math.isfinite(total):
            raise NumericError(
                f"non-finite loss: L_diff={l_diff}, L_mu={l_mu}, L_sigma={l_sigma}", component="policy"
            )
        result = LossResult(total, l_diff, l_mu, l_sigma)
        if not need_grad:
            return result

        grad = np.zeros_like(self.params)
        g_out = (2.0 / N) * diff
        g_theta, g_inp = net_gradients(self.nets["theta"], c_den, g_out)
        grad[self.group_slices["theta"]] = g_theta
        P = c.motion_size
        g_Mk = g_inp[:, :P].reshape(M0.shape)
        g_X = g_inp[:, P : P + c.feature_dim]

        if s.conditioning != "none":
            g_z = sched.sqrt_one_minus_ab[k][:, None, None] * g_Mk
            if s.prediction == "epsilon":
                g_z = g_z - g_out.reshape(M0.shape)
            res = M0 - mu
            g_mu = g_z - (2.0 * w_mu / N) * res
            g_sig3 = g_z * eps
            if c.sigma_loss == "squared":
                # residual target uses mu detached: no mu gradient from this term
                r2 = res * res if detached_mu is None else (M0 - detached_mu) ** 2
                g_sig3 = g_sig3 - (4.0 * w_sigma / N) * sig3 * (r2 - sig3 * sig3)
            else:
                g_mu = g_mu - (2.0 * w_sigma / N) * res
                g_sig3 = g_sig3 - (2.0 * w_sigma / N) * np.broadcast_to(sig3, M0.shape)
            g_sigma = g_sig3.sum(axis=1)
            if sigma.shape[-1] == 1:
                g_sigma = g_sigma.sum(axis=-1, keepdims=True)
            g_pre = g_sigma * sigmoid(pre)
            if s.conditioning == "static":
                grad[self.group_slices["eta"]] = g_mu.sum(axis=0).ravel()
                grad[self.group_slices["xi"]] = g_pre.sum(axis=0)
            else:
                g_eta, g_Xa = net_gradients(self.nets["eta"], c_eta, g_mu.reshape(B, -1))
                g_xi, g_Xb = net_gradients(self.nets["xi"], c_xi, g_pre)
                grad[self.group_slices["eta"]] = g_eta
                grad[self.group_slices["xi"]] = g_xi
                g_Xn = g_Xa + g_Xb
                if s.encoder == "separated":
                    g_psi2, _ = net_gradients(self.nets["psi_noam"], c_enc2, g_Xn, need_input_grad=False)
                    grad[self.group_slices["psi_noam"]] = g_psi2
                else:
                    g_X = g_X + g_Xn
        g_psi, _ = net_gradients(self.nets["psi"], c_enc, g_X, need_input_grad=False)
        grad[self.group_slices["psi"]] = g_psi
        result.grad = grad
        return result

    # -- inference --------------------------------------------------------

    def infer(self, window: ObservationWindow, K: int, rng: RngStream, *, normalized: bool = False) -> np.ndarray:
        """Predict a ``(T_p, D_a)`` motion from one observation window with ``K`` denoising steps."""
        c = self.config
        plan = make_step_plan(self.schedule, K)
        obs = self.observation_vector(window)
        X = self.encode_obs(obs)
        Xn = self.encode_obs(obs, "psi_noam") if self.spec.encoder == "separated" else X
        dist = self.noam_estimate(Xn)
        eps = rng.normal(c.motion_size).reshape(c.T_p, c.action_dim)
        init = sample_initial_motion(dist, eps)
        M0 = run_sampler(self.schedule, plan, lambda M, k: self.denoise(M, X, k, clip=c.clip_sample), init)
        return M0 if normalized else self.norm.denormalize_actions(M0)
