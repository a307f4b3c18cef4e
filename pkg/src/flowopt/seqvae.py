"""Sequence VAE over toy token strings.

Encoder: token+position embeddings, a per-position feature layer, and
attention pooling with K learned queries producing K latent tokens, each
parameterizing a diagonal Gaussian posterior. Mean pooling to a single
vector (projected to K tokens) is available as a config fallback.

Decoder: teacher-forced, autoregressive in the previous token, conditioned
on the latent by concatenating the flattened K×d code to every position
("concat-flat-z" conditioning, recorded in checkpoint headers).

Training follows the staged protocol: ELBO pretraining with linear KL
warmup, then joint property-supervised fine-tuning where the surrogate loss
backpropagates through the encoder and reshapes the latent geometry.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import toyset
from .autodiff import Tensor
from .errors import ContractViolation, NumericFailure
from .nn import AdamState, optimizer_step, clip_grad_norm
from .rng import Rng

LOG_SIGMA_CLAMP = (-8.0, 4.0)


@dataclass
class VaeConfig:
    K: int = 4
    d: int = 16
    embed_dim: int = 24
    enc_hidden: int = 64
    dec_hidden: int = 64
    pooling: str = "attention"  # or "mean"
    beta_max: float = 0.1
    kl_warmup_frac: float = 0.35
    lambda_prop: float = 1.0
    lr: float = 1e-3
    finetune_lr: float = 1e-3
    batch_size: int = 64
    pretrain_epochs: int = 10
    finetune_epochs: int = 6
    clip_norm: float = 5.0
    max_len: int = toyset.MAX_LEN
    seed: int = 0

    def __post_init__(self):
        if min(self.K, self.d, self.embed_dim, self.enc_hidden, self.dec_hidden) < 1:
            raise ContractViolation("all architecture dimensions must be >= 1")
        if self.beta_max < 0 or not (0.0 <= self.kl_warmup_frac <= 1.0):
            raise ContractViolation("beta_max >= 0 and warmup fraction in [0,1] required")
        if self.lambda_prop < 0:
            raise ContractViolation("lambda_prop must be >= 0")
        if self.pooling not in ("attention", "mean"):
            raise ContractViolation(f"unknown pooling {self.pooling!r}")


@dataclass
class PosteriorParams:
    mu: np.ndarray        # (K, d) or (B, K, d)
    log_sigma: np.ndarray


@dataclass
class LatentState:
    """K×d latent tokens plus flow time; pooled vector is always recomputed."""

    z: np.ndarray
    t: float

    @property
    def pooled(self) -> np.ndarray:
        return self.z.mean(axis=-2)


def mean_pool(z):
    """The pooling the surrogate consumes: mean over latent tokens."""
    if isinstance(z, Tensor):
        return z.mean(axis=-2)
    return np.asarray(z).mean(axis=-2)


class SeqVae:
    """Parameter container plus differentiable encode/decode graphs."""

    def __init__(self, config: VaeConfig, rng: Rng):
        self.config = config
        c = config
        V = len(toyset.VOCAB)
        r = rng.split("vae-init")
        def init(shape, key, scale=None):
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            s = scale if scale is not None else (2.0 / (shape[0] + shape[-1])) ** 0.5
            return Tensor(r.split(key).normal(shape) * s, requires_grad=True)

        self.p = {
            "tok_emb": init((V, c.embed_dim), "tok", 0.1),
            "pos_emb": init((c.max_len + 1, c.embed_dim), "pos", 0.1),
            "enc_w": init((c.embed_dim, c.enc_hidden), "encw"),
            "enc_b": Tensor(np.zeros(c.enc_hidden), requires_grad=True),
            "mu_w": init((c.enc_hidden, c.d), "muw"),
            "mu_b": Tensor(np.zeros(c.d), requires_grad=True),
            "ls_w": init((c.enc_hidden, c.d), "lsw"),
            "ls_b": Tensor(np.zeros(c.d) - 1.0, requires_grad=True),
            "dec_w1": init((c.embed_dim + c.K * c.d, c.dec_hidden), "dw1"),
            "dec_b1": Tensor(np.zeros(c.dec_hidden), requires_grad=True),
            "dec_w2": init((c.dec_hidden, V), "dw2"),
            "dec_b2": Tensor(np.zeros(V), requires_grad=True),
        }
        if c.pooling == "attention":
            self.p["queries"] = init((c.K, c.enc_hidden), "attq", 0.5)
        else:
            self.p["pool_w"] = init((c.enc_hidden, c.K * c.enc_hidden), "poolw")

    def params(self) -> list:
        return [self.p[k] for k in sorted(self.p)]

    # -- batching ---------------------------------------------------------
    def prepare_batch(self, sequences):
        """Pad to a common length; returns (enc_ids, dec_in, dec_tgt, mask)."""
        c = self.config
        for s in sequences:
            for tok in s:
                if tok not in toyset.TOKEN_ID:
                    raise ContractViolation(f"unknown token {tok!r}")
        seqs = [list(s)[: c.max_len - 1] for s in sequences]
        L = max(len(s) for s in seqs) + 1  # room for EOS
        pad, bos, eos = (toyset.TOKEN_ID[t] for t in (toyset.PAD, toyset.BOS, toyset.EOS))
        enc = np.full((len(seqs), L), pad, dtype=np.int64)
        dec_in = np.full((len(seqs), L), pad, dtype=np.int64)
        tgt = np.full((len(seqs), L), pad, dtype=np.int64)
        mask = np.zeros((len(seqs), L))
        for i, s in enumerate(seqs):
            ids = [toyset.TOKEN_ID[t] for t in s]
            enc[i, : len(ids)] = ids
            dec_in[i, 0] = bos
            dec_in[i, 1 : len(ids) + 1] = ids
            tgt[i, : len(ids)] = ids
            tgt[i, len(ids)] = eos
            mask[i, : len(ids) + 1] = 1.0
        return enc, dec_in, tgt, mask

    # -- graphs -----------------------------------------------------------
    def encode_graph(self, enc_ids: np.ndarray):
        """Posterior parameters as graph tensors: mu, log_sigma of (B, K, d)."""
        c = self.config
        B, L = enc_ids.shape
        emb = ad.embedding(self.p["tok_emb"], enc_ids.reshape(-1))
        pos = ad.embedding(self.p["pos_emb"], np.tile(np.arange(L), B))
        h = ((emb + pos) @ self.p["enc_w"] + self.p["enc_b"]).tanh()  # (B*L, H)
        pad_mask = (enc_ids != toyset.TOKEN_ID[toyset.PAD]).astype(np.float64)
        # Fully padded rows (empty structures) still need one attended slot.
        pad_mask[:, 0] = 1.0
        if c.pooling == "attention":
            neg = Tensor((1.0 - pad_mask.reshape(-1, 1)) * -1e9)
            h3 = h.reshape(B, L, c.enc_hidden)
            scores = (h @ self.p["queries"].transpose() + neg).reshape(B, L, c.K)
            attn = ad.softmax(scores, axis=1)  # over positions
            # (B, L, K) x (B, L, H) -> (B, K, H)
            pooled = (attn.reshape(B, L, c.K, 1) * h3.reshape(B, L, 1, c.enc_hidden)).sum(axis=1)
            pooled = pooled.reshape(B * c.K, c.enc_hidden)
        else:
            m = pad_mask / pad_mask.sum(axis=1, keepdims=True)
            mean = (h.reshape(B, L, c.enc_hidden) * Tensor(m.reshape(B, L, 1))).sum(axis=1)
            pooled = (mean @ self.p["pool_w"]).tanh().reshape(B * c.K, c.enc_hidden)
        mu = (pooled @ self.p["mu_w"] + self.p["mu_b"]).reshape(B, c.K, c.d)
        ls = (pooled @ self.p["ls_w"] + self.p["ls_b"]).clamp(*LOG_SIGMA_CLAMP)
        return mu, ls.reshape(B, c.K, c.d)

    def decode_graph(self, dec_in: np.ndarray, z: Tensor):
        """Teacher-forced logits for every position; z is (B, K, d)."""
        c = self.config
        B, L = dec_in.shape
        emb = ad.embedding(self.p["tok_emb"], dec_in.reshape(-1))
        pos = ad.embedding(self.p["pos_emb"], np.tile(np.arange(L), B))
        zf = z.reshape(B, 1, c.K * c.d) * Tensor(np.ones((1, L, 1)))
        x = ad.concat([(emb + pos).reshape(B, L, c.embed_dim), zf], axis=2)
        h = (x.reshape(B * L, c.embed_dim + c.K * c.d) @ self.p["dec_w1"] + self.p["dec_b1"]).tanh()
        return h @ self.p["dec_w2"] + self.p["dec_b2"]  # (B*L, V)

    # -- public operations ------------------------------------------------
    def encode(self, x) -> PosteriorParams:
        """Deterministic posterior parameters for one token string."""
        enc, _, _, _ = self.prepare_batch([x])
        mu, ls = self.encode_graph(enc)
        return PosteriorParams(mu=mu.data[0], log_sigma=ls.data[0])

    def encode_batch(self, xs) -> PosteriorParams:
        enc, _, _, _ = self.prepare_batch(xs)
        mu, ls = self.encode_graph(enc)
        return PosteriorParams(mu=mu.data, log_sigma=ls.data)

    def decode_greedy(self, state: LatentState):
        return self.decode_greedy_batch(state.z[None])[0]

    def decode_greedy_batch(self, Z: np.ndarray):
        """Greedy autoregressive decoding; deterministic in z."""
        c = self.config
        B = Z.shape[0]
        zf = Z.reshape(B, c.K * c.d)
        pad, bos, eos = (toyset.TOKEN_ID[t] for t in (toyset.PAD, toyset.BOS, toyset.EOS))
        prev = np.full(B, bos, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out = [[] for _ in range(B)]
        tok_emb, pos_emb = self.p["tok_emb"].data, self.p["pos_emb"].data
        w1, b1 = self.p["dec_w1"].data, self.p["dec_b1"].data
        w2, b2 = self.p["dec_w2"].data, self.p["dec_b2"].data
        for pos in range(c.max_len):
            x = np.concatenate([tok_emb[prev] + pos_emb[pos], zf], axis=1)
            logits = np.tanh(x @ w1 + b1) @ w2 + b2
            logits[:, pad] = -np.inf
            logits[:, bos] = -np.inf
            nxt = logits.argmax(axis=1)
            for i in range(B):
                if not done[i]:
                    if nxt[i] == eos:
                        done[i] = True
                    else:
                        out[i].append(toyset.VOCAB[nxt[i]])
            if done.all():
                break
            prev = np.where(done, eos, nxt)
        return [tuple(s) for s in out]

    # -- checkpointing ----------------------------------------------------
    def arrays(self) -> dict:
        return {f"vae.{k}": v.data for k, v in self.p.items()}

    def meta(self, stage: str) -> dict:
        return {
            "model_kind": "seqvae",
            "stage": stage,
            "vocab_hash": toyset.vocab_hash(),
            "conditioning": "concat-flat-z",
            "log_sigma_clamp": list(LOG_SIGMA_CLAMP),
            "config": asdict(self.config),
        }

    @classmethod
    def from_checkpoint(cls, arrays: dict, meta: dict) -> "SeqVae":
        if meta.get("vocab_hash") != toyset.vocab_hash():
            raise ContractViolation("checkpoint vocabulary does not match this build")
        cfg = VaeConfig(**meta["config"])
        model = cls.__new__(cls)
        model.config = cfg
        model.p = {k[len("vae."):]: Tensor(v, requires_grad=True)
                   for k, v in arrays.items() if k.startswith("vae.")}
        return model


def reparameterize(post: PosteriorParams, rng: Rng) -> LatentState:
    """z = mu + exp(log_sigma) * eps with eps ~ N(0, I); returns t=1 state."""
    eps = rng.normal(post.mu.shape)
    return LatentState(z=post.mu + np.exp(post.log_sigma) * eps, t=1.0)


def kl_standard_normal(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Closed-form KL(q || N(0, I)) summed over latent entries, mean over batch.

    Inputs are (B, K, d); always >= 0, exactly 0 iff mu=0 and log_sigma=0.
    """
    var = (log_sigma * 2.0).exp()
    per = (var + mu * mu - 1.0 - log_sigma * 2.0) * 0.5
    return per.sum(axis=2).sum(axis=1).mean()


def beta_schedule(progress: float, beta_max: float, warmup_frac: float) -> float:
    """Linear warmup of the KL weight from 0 to beta_max."""
    if warmup_frac <= 0:
        return beta_max
    return beta_max * min(1.0, progress / warmup_frac)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1


def elbo_loss(model: SeqVae, batch_seqs, rng: Rng, beta: float):
    """Negative ELBO graph for a batch: token cross-entropy + beta * KL.

    Returns (loss tensor, z tensor, components dict). Reconstruction is the
    masked mean token cross-entropy under teacher forcing.
    """
    enc, dec_in, tgt, mask = model.prepare_batch(batch_seqs)
    mu, ls = model.encode_graph(enc)
    eps = Tensor(rng.normal(mu.shape))
    z = mu + ls.exp() * eps
    logits = model.decode_graph(dec_in, z)
    recon = ad.softmax_cross_entropy(logits, tgt.reshape(-1), mask.reshape(-1))
    kl = kl_standard_normal(mu, ls)
    loss = recon + beta * kl
    return loss, z, {"recon": recon.item(), "kl": kl.item()}


def _epoch_batches(n, batch_size, rng: Rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate_elbo(model: SeqVae, entries, beta: float, rng: Rng, batch_size=128) -> float:
    total, count = 0.0, 0
    for i in range(0, len(entries), batch_size):
        batch = [e[0] for e in entries[i:i + batch_size]]
        loss, _, _ = elbo_loss(model, batch, rng.split(i), beta)
        total += loss.item() * len(batch)
        count += len(batch)
    return total / max(count, 1)


def train_vae(model: SeqVae, dataset, rng: Rng) -> TrainHistory:
    """Stage-one ELBO training; keeps the epoch with best validation loss."""
    c = model.config
    train = dataset.subset("train")
    val = dataset.subset("val")
    params = model.params()
    opt = AdamState.create(params, lr=c.lr, weight_decay=1e-5)
    hist = TrainHistory()
    total_steps = max(1, c.pretrain_epochs * ((len(train) + c.batch_size - 1) // c.batch_size))
    best = (np.inf, None)
    step = 0
    for epoch in range(c.pretrain_epochs):
        erng = rng.split(("epoch", epoch))
        losses = []
        for b, idx in enumerate(_epoch_batches(len(train), c.batch_size, erng.split("order"))):
            beta = beta_schedule(step / total_steps, c.beta_max, c.kl_warmup_frac)
            loss, _, _ = elbo_loss(model, [train[i][0] for i in idx], erng.split(("b", b)), beta)
            grads = ad.gradients(loss, params)
            grads, _ = clip_grad_norm(grads, c.clip_norm)
            optimizer_step(opt, params, grads)
            losses.append(loss.item())
            step += 1
        hist.train_loss.append(float(np.mean(losses)))
        v = evaluate_elbo(model, val, c.beta_max, rng.split(("val", epoch)))
        hist.val_loss.append(v)
        if v < best[0]:
            best = (v, copy.deepcopy([p.data for p in params]))
            hist.best_epoch = epoch
    if best[1] is not None:
        for p, data in zip(params, best[1]):
            p.data = data
    if not np.isfinite(hist.train_loss[-1]):
        raise NumericFailure("divergent VAE training loss", where="stage=vae")
    return hist


def joint_finetune_step(model: SeqVae, surrogate, batch, rng: Rng, lam: float,
                        beta: float, opt: AdamState, params) -> dict:
    """One combined VAE + property-supervision update.

    ``batch`` is a list of (tokens, Properties). With lam == 0 the surrogate
    branch is skipped entirely and gradients equal the pure-VAE gradients.
    """
    seqs = [e[0] for e in batch]
    loss, z, comps = elbo_loss(model, seqs, rng, beta)
    if lam > 0:
        y = np.stack([e[1].as_array() for e in batch])
        pred = surrogate.predict_graph(mean_pool(z))
        ploss = ((pred - Tensor(y)) ** 2).mean()
        loss = loss + lam * ploss
        comps["prop"] = ploss.item()
    grads = ad.gradients(loss, params)
    grads, _ = clip_grad_norm(grads, model.config.clip_norm)
    optimizer_step(opt, params, grads)
    comps["total"] = loss.item()
    return comps


def finetune(model: SeqVae, surrogate, dataset, rng: Rng) -> TrainHistory:
    """Stage-two joint fine-tuning (encoder+decoder+surrogate, lam weighting)."""
    c = model.config
    train = dataset.subset("train")
    val = dataset.subset("val")
    params = model.params() + surrogate.params()
    opt = AdamState.create(params, lr=c.finetune_lr, weight_decay=1e-5)
    hist = TrainHistory()
    best = (np.inf, None)
    for epoch in range(c.finetune_epochs):
        erng = rng.split(("ft-epoch", epoch))
        losses = []
        for b, idx in enumerate(_epoch_batches(len(train), c.batch_size, erng.split("order"))):
            comps = joint_finetune_step(
                model, surrogate, [train[i] for i in idx], erng.split(("b", b)),
                c.lambda_prop, c.beta_max, opt, params)
            losses.append(comps["total"])
        hist.train_loss.append(float(np.mean(losses)))
        v = evaluate_elbo(model, val, c.beta_max, rng.split(("ft-val", epoch)))
        hist.val_loss.append(v)
        if v < best[0]:
            best = (v, copy.deepcopy([p.data for p in params]))
            hist.best_epoch = epoch
    if best[1] is not None:
        for p, data in zip(params, best[1]):
            p.data = data
    if not np.isfinite(hist.train_loss[-1]):
        raise NumericFailure("divergent fine-tune loss", where="stage=finetune")
    return hist
