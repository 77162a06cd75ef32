"""Return/cost-conditioned causal transformer with factored Gaussian heads.

Each timestep contributes six tokens in the fixed order::

    [a_{t-1}, C_t, R_t, s_t^ego, s_t^beam, s_t^nav]      index(t, k) = 6 t + k

Heads (all diagonal Gaussians, mean and log-std):

* action ``a_t``   - transformer hidden state at the ``s_t^nav`` token;
* next-state factors ``s_{t+1}^i`` - the same hidden state concatenated
  with the taken action ``a_t``;
* reward-to-go / cost-to-go values - the state encoder latent ``phi(s_t)``
  only, so the values can be queried online before the step's return tokens
  are written.

The state encoder ``phi`` embeds each observation block into its token and
fuses the three blocks into the latent used by the value heads and the
bisimulation regulariser.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dataset import ACTION_DIM, FACTORS, Batch
from .env import FACTOR_DIMS, HORIZON
from .policies import ACCEL_LIMIT

TOKENS_PER_STEP = 6
TOKEN_NAMES = ("action", "ctg", "rtg", "ego", "beam", "nav")
LOSS_TERMS = ("rtg", "ctg", "act", "dyn")


@dataclass
class ModelConfig:
    embed_dim: int = 64
    n_layers: int = 3
    n_heads: int = 4
    context_len: int = 20
    dropout: float = 0.1
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")


def token_index(t: int, k: int) -> int:
    return TOKENS_PER_STEP * t + k


def causal_mask(n_tokens: int) -> np.ndarray:
    """``mask[i, j]`` is True when token ``i`` may attend to token ``j``."""
    return np.tril(np.ones((n_tokens, n_tokens), dtype=bool))


def default_norm() -> dict:
    return {"rtg_mean": 0.0, "rtg_std": 1.0, "ctg_mean": 0.0, "ctg_std": 1.0}


@dataclass
class Tokens:
    embeddings: Tensor  # (B, 6H, d)
    attn_mask: np.ndarray  # (B, 1, 6H, 6H)
    attn_bias: np.ndarray  # additive form of attn_mask
    valid: np.ndarray  # (B, 6H) token-level pad mask
    step_valid: np.ndarray  # (B, H)
    latent: Tensor  # (B, H, d) encoder latent phi(s_t)


@dataclass
class ModelOutput:
    action: tuple[Tensor, Tensor]  # (B, H, 2) each
    rtg: tuple[Tensor, Tensor]  # (B, H, 1)
    ctg: tuple[Tensor, Tensor]
    dyn: dict[str, tuple[Tensor, Tensor]] | None
    attention: list[np.ndarray] = field(default_factory=list)  # per layer (B, heads, T, T)
    hidden: Tensor | None = None


class CausalTransformer:
    """Parameters live in ``self.params`` (name -> Tensor)."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, norm: dict | None = None):
        self.cfg = cfg
        self.norm = dict(norm or default_norm())
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim

        def w(name, shape, std=0.02):
            self.params[name] = ag.parameter(rng.normal(0.0, std, size=shape), name)

        def zeros(name, shape):
            self.params[name] = ag.parameter(np.zeros(shape), name)

        def ones(name, shape):
            self.params[name] = ag.parameter(np.ones(shape), name)

        # state encoder phi
        for f in FACTORS:
            w(f"enc.{f}.W", (FACTOR_DIMS[f], d), 1.0 / math.sqrt(FACTOR_DIMS[f]))
            zeros(f"enc.{f}.b", (d,))
        w("enc.fuse.W", (3 * d, d), 1.0 / math.sqrt(3 * d))
        zeros("enc.fuse.b", (d,))
        # conditioning token embeddings
        w("emb.action.W", (ACTION_DIM, d), 0.5)
        zeros("emb.action.b", (d,))
        for name in ("ctg", "rtg"):
            w(f"emb.{name}.W", (1, d), 0.5)
            zeros(f"emb.{name}.b", (d,))
        w("emb.step", (cfg.context_len, d))
        # transformer blocks
        for i in range(cfg.n_layers):
            p = f"blk{i}."
            ones(p + "ln1.g", (d,))
            zeros(p + "ln1.b", (d,))
            for m in ("q", "k", "v", "o"):
                w(p + f"attn.{m}.W", (d, d), 0.02 if m != "o" else 0.02 / math.sqrt(2 * cfg.n_layers))
                zeros(p + f"attn.{m}.b", (d,))
            ones(p + "ln2.g", (d,))
            zeros(p + "ln2.b", (d,))
            w(p + "mlp.fc.W", (d, cfg.mlp_ratio * d))
            zeros(p + "mlp.fc.b", (cfg.mlp_ratio * d,))
            w(p + "mlp.proj.W", (cfg.mlp_ratio * d, d), 0.02 / math.sqrt(2 * cfg.n_layers))
            zeros(p + "mlp.proj.b", (d,))
        ones("ln_f.g", (d,))
        zeros("ln_f.b", (d,))
        # heads; output projections start at zero
        zeros("head.action.W", (d, 2 * ACTION_DIM))
        zeros("head.action.b", (2 * ACTION_DIM,))
        for f in FACTORS:
            zeros(f"head.dyn.{f}.W", (d + ACTION_DIM, 2 * FACTOR_DIMS[f]))
            zeros(f"head.dyn.{f}.b", (2 * FACTOR_DIMS[f],))
        w("head.value.hid.W", (d, d), 1.0 / math.sqrt(d))
        zeros("head.value.hid.b", (d,))
        for name in ("rtg", "ctg"):
            zeros(f"head.{name}.W", (d, 2))
            zeros(f"head.{name}.b", (2,))

    # -- parameter groups ----------------------------------------------------
    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("enc.")}

    def head_params(self, term: str) -> dict[str, Tensor]:
        prefix = {"act": "head.action.", "dyn": "head.dyn.", "rtg": "head.rtg.", "ctg": "head.ctg."}[term]
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    def hyperparameters(self) -> dict:
        return {"model": asdict(self.cfg), "norm": self.norm}

    # -- helpers ---------------------------------------------------------------
    def _lin(self, x, name: str) -> Tensor:
        return x @ self.params[name + ".W"] + self.params[name + ".b"]

    def _gauss(self, x, name: str, dim: int) -> tuple[Tensor, Tensor]:
        y = self._lin(x, name)
        return y[..., :dim], y[..., dim:]

    def normalize_rtg(self, r):
        return (np.asarray(r, dtype=float) - self.norm["rtg_mean"]) / self.norm["rtg_std"]

    def normalize_ctg(self, c):
        return (np.asarray(c, dtype=float) - self.norm["ctg_mean"]) / self.norm["ctg_std"]

    def denormalize_rtg(self, r):
        return np.asarray(r) * self.norm["rtg_std"] + self.norm["rtg_mean"]

    def denormalize_ctg(self, c):
        return np.asarray(c) * self.norm["ctg_std"] + self.norm["ctg_mean"]

    @staticmethod
    def normalize_action(a) -> np.ndarray:
        a = np.array(a, dtype=float)
        a[..., 0] = a[..., 0] / ACCEL_LIMIT
        return a

    # -- encoder ---------------------------------------------------------------
    def embed_states(self, obs: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {f: self._lin(ag.ensure(obs[f]), f"enc.{f}") for f in FACTORS}

    def fuse(self, blocks: dict[str, Tensor]) -> Tensor:
        h = ag.concat([blocks[f] for f in FACTORS], axis=-1).tanh()
        return self._lin(h, "enc.fuse")

    def encode(self, obs: dict[str, np.ndarray]) -> Tensor:
        """phi(s): latent for arbitrary leading shape."""
        return self.fuse(self.embed_states(obs))

    def value_heads(self, latent: Tensor) -> tuple[tuple[Tensor, Tensor], tuple[Tensor, Tensor]]:
        h = self._lin(latent, "head.value.hid").gelu()
        return self._gauss(h, "head.rtg", 1), self._gauss(h, "head.ctg", 1)

    def predict_values(self, obs: dict[str, np.ndarray]) -> tuple[float, float]:
        """Denormalised (R_hat, C_hat) means for a single state."""
        (rmu, _), (cmu, _) = self.value_heads(self.encode(obs))
        return float(self.denormalize_rtg(rmu.data.reshape(-1)[0])), float(self.denormalize_ctg(cmu.data.reshape(-1)[0]))

    # -- sequence model ----------------------------------------------------------
    def tokenize(self, batch: Batch) -> Tokens:
        B, H = batch.mask.shape
        if H > self.cfg.context_len:
            raise ValueError(f"window length {H} exceeds context length {self.cfg.context_len}")
        for f in FACTORS:
            if batch.obs[f].shape[-1] != FACTOR_DIMS[f]:
                raise ValueError(f"{f} block has dim {batch.obs[f].shape[-1]}, expected {FACTOR_DIMS[f]}")
        if batch.prev_actions.shape[-1] != ACTION_DIM:
            raise ValueError("action dimension mismatch")
        blocks = self.embed_states(batch.obs)
        latent = self.fuse(blocks)
        a_tok = self._lin(ag.Tensor(self.normalize_action(batch.prev_actions)), "emb.action")
        c_tok = self._lin(ag.Tensor(self.normalize_ctg(batch.ctg)[..., None]), "emb.ctg")
        r_tok = self._lin(ag.Tensor(self.normalize_rtg(batch.rtg)[..., None]), "emb.rtg")
        seq = ag.stack([a_tok, c_tok, r_tok, blocks["ego"], blocks["beam"], blocks["nav"]], axis=2)
        step = self.params["emb.step"][-H:]  # (H, d), last row is the newest step
        seq = seq + step.reshape(1, H, 1, self.cfg.embed_dim)
        T = TOKENS_PER_STEP * H
        emb = seq.reshape(B, T, self.cfg.embed_dim)
        valid = np.repeat(batch.mask, TOKENS_PER_STEP, axis=1)
        attn = causal_mask(T)[None] & (valid[:, None, :] | np.eye(T, dtype=bool)[None])
        attn = attn[:, None]
        return Tokens(emb, attn, ag.mask_bias(attn), valid, batch.mask.copy(), latent)

    def forward(self, tokens: Tokens, actions: np.ndarray | None = None, training: bool = False,
                rng: np.random.Generator | None = None) -> ModelOutput:
        cfg = self.cfg
        B, T, d = tokens.embeddings.shape
        H = T // TOKENS_PER_STEP
        nh, dh = cfg.n_heads, d // cfg.n_heads
        x = ag.dropout(tokens.embeddings, cfg.dropout, rng, training)
        maps = []
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.n_layers):
            p = f"blk{i}."
            h = ag.layer_norm(x, self.params[p + "ln1.g"], self.params[p + "ln1.b"])
            q = (self._lin(h, p + "attn.q") * scale).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            k = self._lin(h, p + "attn.k").reshape(B, T, nh, dh).transpose(0, 2, 3, 1)
            v = self._lin(h, p + "attn.v").reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            att = ag.masked_softmax(q @ k, bias=tokens.attn_bias)
            maps.append(att.data)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
            x = x + ag.dropout(self._lin(y, p + "attn.o"), cfg.dropout, rng, training)
            h = ag.layer_norm(x, self.params[p + "ln2.g"], self.params[p + "ln2.b"])
            h = self._lin(self._lin(h, p + "mlp.fc").gelu(), p + "mlp.proj")
            x = x + ag.dropout(h, cfg.dropout, rng, training)
        x = ag.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        state_h = x.reshape(B, H, TOKENS_PER_STEP, d)[:, :, TOKENS_PER_STEP - 1]  # (B, H, d)
        act = self._gauss(state_h, "head.action", ACTION_DIM)
        dyn = None
        if actions is not None:
            inp = ag.concat([state_h, ag.Tensor(self.normalize_action(actions))], axis=-1)
            dyn = {f: self._gauss(inp, f"head.dyn.{f}", FACTOR_DIMS[f]) for f in FACTORS}
        rtg, ctg = self.value_heads(tokens.latent)
        return ModelOutput(act, rtg, ctg, dyn, maps, x)

    def __call__(self, batch: Batch, training: bool = False, rng=None, with_dynamics: bool = True) -> ModelOutput:
        return self.forward(self.tokenize(batch), batch.actions if with_dynamics else None, training, rng)


def masked_mean(rows: Tensor, mask: np.ndarray) -> Tensor:
    m = mask.astype(float)
    return (rows * Tensor(m)).sum() * (1.0 / max(m.sum(), 1.0))


def traj_loss(model: CausalTransformer, out: ModelOutput, batch: Batch, terms=LOSS_TERMS) -> tuple[Tensor, dict]:
    """Sum of masked Gaussian NLL terms; ``terms`` selects which ones are active.

    ``dyn`` is the sum over the state factors.  The breakdown reports 0.0 for
    inactive terms and the per-factor dynamics parts under ``dyn.<factor>``.
    """
    unknown = set(terms) - set(LOSS_TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    mask = batch.mask
    parts: dict[str, Tensor] = {}
    br: dict[str, float] = {t: 0.0 for t in LOSS_TERMS}
    if "rtg" in terms:
        parts["rtg"] = masked_mean(ag.gaussian_nll(model.normalize_rtg(batch.rtg)[..., None], *out.rtg, reduce=False), mask)
    if "ctg" in terms:
        parts["ctg"] = masked_mean(ag.gaussian_nll(model.normalize_ctg(batch.ctg)[..., None], *out.ctg, reduce=False), mask)
    if "act" in terms:
        parts["act"] = masked_mean(ag.gaussian_nll(model.normalize_action(batch.actions), *out.action, reduce=False), mask)
    if "dyn" in terms:
        if out.dyn is None:
            raise ValueError("dynamics term requested but the forward pass had no actions")
        dparts = []
        for f in FACTORS:
            t = masked_mean(ag.gaussian_nll(batch.next_obs[f], *out.dyn[f], reduce=False), mask)
            br[f"dyn.{f}"] = t.item()
            dparts.append(t)
        parts["dyn"] = ag.sum_all(dparts)
    total = ag.sum_all(parts[k] for k in LOSS_TERMS if k in parts)
    for k, v in parts.items():
        br[k] = v.item()
    br["total"] = total.item()
    return total, br


def row_entropy(att: np.ndarray, support: np.ndarray | None = None) -> np.ndarray:
    """Shannon entropy (nats) of each attention row over its support."""
    p = att if support is None else np.where(support, att, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def attention_entropy(model: CausalTransformer, batch: Batch) -> list[float]:
    """Mean row entropy per layer, over all heads and real (unpadded) query tokens.

    Each window is averaged first, then windows are averaged, so every
    trajectory weighs the same.
    """
    out = model.forward(model.tokenize(batch), None, training=False)
    valid = np.repeat(batch.mask, TOKENS_PER_STEP, axis=1)  # (B, T)
    result = []
    for att in out.attention:
        ent = row_entropy(att).mean(axis=1)  # (B, T) averaged over heads
        per_window = (ent * valid).sum(axis=1) / valid.sum(axis=1)
        result.append(float(per_window.mean()))
    return result


def mean_attention_maps(model: CausalTransformer, batch: Batch) -> list[np.ndarray]:
    """Head- and batch-averaged attention matrix per layer (for figures/export)."""
    out = model.forward(model.tokenize(batch), None, training=False)
    return [a.mean(axis=(0, 1)) for a in out.attention]


def entropy_windows(dataset, n_episodes: int, H: int) -> Batch:
    """Opening windows (first H steps) of the first ``n_episodes`` episodes."""
    n = min(n_episodes, len(dataset))
    index = np.array([[i, min(H, len(dataset.episodes[i])) - 1] for i in range(n)], dtype=int)
    return dataset.make_batch(index, H)


__all__ = [
    "ModelConfig", "CausalTransformer", "ModelOutput", "Tokens", "traj_loss", "attention_entropy",
    "row_entropy", "causal_mask", "token_index", "TOKENS_PER_STEP", "HORIZON",
]
