"""Small decoder-only transformer whose K/V path routes through the gate.

Pre-norm blocks with GELU MLPs and rotary attention. Key and value states are
projected into the spectral basis before caching; the soft (training) path
multiplies them by the differentiable mask, the hard (inference) path
truncates them into the ragged cache and reconstructs on every decode step.
The composite training objective is cross-entropy plus a squared retain-rate
penalty.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dynakv import autodiff as ad
from dynakv import gate as gate_mod
from dynakv import linalg, serialization
from dynakv.autodiff import Tensor
from dynakv.errors import ConfigError, DimensionError, NumericError
from dynakv.gate import GateParams, RetainStats
from dynakv.kvcache import RaggedKVCache, rope_rotate
from dynakv.spectral import ORTHO_TOL, STREAMS, SpectralBasis

BOS_ID = 256
VOCAB_SIZE = 257

NEG_MASK = -1e30


def tokenize(text):
    """Byte-level ids with a leading BOS marker."""
    raw = text.encode("utf-8")
    return np.concatenate([[BOS_ID], np.frombuffer(raw, dtype=np.uint8)]).astype(np.int64)


def detokenize(ids):
    ids = np.asarray(ids)
    payload = ids[ids != BOS_ID]
    return bytes(payload.astype(np.uint8)).decode("utf-8", errors="replace")


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    d_model: int = 128
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 512
    rope_base: float = 10000.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even")

    @property
    def d_kv(self):
        return self.n_heads * self.head_dim


@dataclass
class TrainConfig:
    alpha: float = 0.0            # compression-penalty weight
    threshold: float = 0.1        # hard-mask cutoff tau
    lr: float = 3e-4
    steps: int = 2000
    batch: int = 4
    seq_len: int = 64
    seed: int = 0
    mode: str = "soft-train"
    trainable_U: bool = True
    freeze_base: bool = False
    gate_lr_mult: float = 10.0
    gate_init_peak: float = gate_mod.DEFAULT_INIT_PEAK
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.mode not in ("soft-train", "hard-eval"):
            raise ConfigError(f"unknown mode {self.mode!r}")


def _ln_np(x, gain, bias, eps):
    y, _, _ = ad.layer_norm_np(x, gain, bias, eps)
    return y


class ToyTransformer:
    """Decoder-only byte model with a compressible K/V path."""

    def __init__(self, config=None, seed=0, gate_init_peak=gate_mod.DEFAULT_INIT_PEAK):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.init_seed = seed
        d, dkv, hidden = cfg.d_model, cfg.d_kv, 4 * cfg.d_model

        def w(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        params = {"tok_emb": w(cfg.vocab_size, d)}
        for l in range(cfg.n_layers):
            pre = f"layers.{l}."
            params[pre + "ln1.gain"] = Tensor(np.ones(d), requires_grad=True)
            params[pre + "ln1.bias"] = Tensor(np.zeros(d), requires_grad=True)
            params[pre + "attn.wq"] = w(d, dkv)
            params[pre + "attn.wk"] = w(d, dkv)
            params[pre + "attn.wv"] = w(d, dkv)
            params[pre + "attn.wo"] = w(dkv, d)
            params[pre + "ln2.gain"] = Tensor(np.ones(d), requires_grad=True)
            params[pre + "ln2.bias"] = Tensor(np.zeros(d), requires_grad=True)
            params[pre + "mlp.fc_in"] = w(d, hidden)
            params[pre + "mlp.fc_out"] = w(hidden, d)
        params["ln_f.gain"] = Tensor(np.ones(d), requires_grad=True)
        params["ln_f.bias"] = Tensor(np.zeros(d), requires_grad=True)
        params["lm_head"] = w(d, cfg.vocab_size)

        self.gates = {}
        self.basis_meta = {}
        for l in range(cfg.n_layers):
            for stream in STREAMS:
                params[f"layers.{l}.basis_{stream}"] = Tensor(np.eye(dkv), requires_grad=True)
                gp = GateParams.fresh(dkv, layer_id=l, stream=stream,
                                      init_peak=gate_init_peak)
                params[f"layers.{l}.gate_{stream}.weight"] = gp.weight
                params[f"layers.{l}.gate_{stream}.bias"] = gp.bias
                self.gates[(l, stream)] = gp
                self.basis_meta[(l, stream)] = {
                    "eigenvalues": np.ones(dkv), "orthonormal": True}
        self.params = params
        self._frozen_inverse = {}

    # -- parameter plumbing --------------------------------------------------

    def basis_param(self, layer, stream):
        return self.params[f"layers.{layer}.basis_{stream}"]

    def parameters(self, trainable_u=True, freeze_base=False):
        """Named trainable subset; basis matrices and base weights optional."""
        out = {}
        for name, p in self.params.items():
            is_basis = ".basis_" in name
            is_gate = ".gate_" in name
            if is_basis and not trainable_u:
                continue
            if freeze_base and not (is_basis or is_gate):
                continue
            out[name] = p
        return out

    def install_basis(self, basis):
        """Load a calibrated basis into the matching layer/stream slot."""
        key = (basis.layer_id, basis.stream)
        if key not in self.basis_meta:
            raise DimensionError(f"no basis slot for layer={key[0]} stream={key[1]}")
        param = self.basis_param(*key)
        if basis.matrix.shape != param.shape:
            raise DimensionError(f"basis shape {basis.matrix.shape} != {param.shape}")
        param.data = basis.matrix.copy()
        self.basis_meta[key] = {
            "eigenvalues": basis.eigenvalues.copy(),
            "orthonormal": basis.orthonormal,
        }
        self._frozen_inverse.pop(key, None)

    def current_basis(self, layer, stream):
        """Snapshot the live basis parameter with a freshly computed inverse."""
        matrix = self.basis_param(layer, stream).data.copy()
        gram = matrix.T @ matrix
        ortho = bool(np.abs(gram - np.eye(matrix.shape[0])).max() <= ORTHO_TOL)
        inverse = matrix.T.copy() if ortho else linalg.invert(matrix)[0]
        meta = self.basis_meta[(layer, stream)]
        return SpectralBasis(matrix=matrix, inverse=inverse,
                             eigenvalues=meta["eigenvalues"].copy(),
                             orthonormal=ortho, layer_id=layer, stream=stream)

    def current_bases(self):
        return {(l, s): self.current_basis(l, s)
                for l in range(self.config.n_layers) for s in STREAMS}

    def _inverse_node(self, layer, stream, trainable_u):
        param = self.basis_param(layer, stream)
        if trainable_u:
            return ad.matinv(param)
        key = (layer, stream)
        if key not in self._frozen_inverse:
            self._frozen_inverse[key] = Tensor(self.current_basis(layer, stream).inverse)
        return self._frozen_inverse[key]

    # -- differentiable forward (training path) -------------------------------

    def forward_soft(self, tokens, trainable_u=True):
        """Batched causal forward with soft-masked K/V compression.

        Returns (logits [B,T,V], mean soft retain rate as a scalar Tensor,
        per layer/stream rate floats for logging).
        """
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        cfg = self.config
        b, t = tokens.shape
        if t > cfg.max_seq_len:
            raise DimensionError(f"sequence length {t} > max_seq_len {cfg.max_seq_len}")
        h_dim = cfg.head_dim
        positions = np.arange(t)
        causal = Tensor(np.triu(np.full((t, t), NEG_MASK), k=1))
        h = ad.embedding_lookup(self.params["tok_emb"], tokens)
        rate_nodes = []
        rate_log = {}
        for l in range(cfg.n_layers):
            pre = f"layers.{l}."
            x = ad.layer_norm(h, self.params[pre + "ln1.gain"],
                              self.params[pre + "ln1.bias"], cfg.ln_eps)
            q = ad.matmul(x, self.params[pre + "attn.wq"])
            k = ad.matmul(x, self.params[pre + "attn.wk"])
            v = ad.matmul(x, self.params[pre + "attn.wv"])
            k_rec, k_rate = self._compress_soft(l, "K", k, trainable_u)
            v_rec, v_rate = self._compress_soft(l, "V", v, trainable_u)
            rate_nodes.extend([k_rate, v_rate])
            rate_log[f"L{l}.K"] = k_rate.item()
            rate_log[f"L{l}.V"] = v_rate.item()

            def heads(z):
                return ad.transpose(ad.reshape(z, (b, t, cfg.n_heads, h_dim)), (0, 2, 1, 3))

            q4 = _rope_node(heads(q), positions, cfg.rope_base)
            k4 = _rope_node(heads(k_rec), positions, cfg.rope_base)
            v4 = heads(v_rec)
            att = ad.scale(ad.matmul(q4, ad.transpose(k4, (0, 1, 3, 2))),
                           1.0 / math.sqrt(h_dim))
            weights = ad.softmax(ad.add(att, causal))
            out = ad.matmul(weights, v4)
            out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, cfg.d_kv))
            h = ad.add(h, ad.matmul(out, self.params[pre + "attn.wo"]))
            x2 = ad.layer_norm(h, self.params[pre + "ln2.gain"],
                               self.params[pre + "ln2.bias"], cfg.ln_eps)
            mlp = ad.matmul(ad.gelu(ad.matmul(x2, self.params[pre + "mlp.fc_in"])),
                            self.params[pre + "mlp.fc_out"])
            h = ad.add(h, mlp)
        x = ad.layer_norm(h, self.params["ln_f.gain"], self.params["ln_f.bias"], cfg.ln_eps)
        logits = ad.matmul(x, self.params["lm_head"])
        rate = ad.scale(_sum_nodes(rate_nodes), 1.0 / len(rate_nodes))
        return logits, rate, rate_log

    def _compress_soft(self, layer, stream, state, trainable_u):
        spec = ad.matmul(state, self.basis_param(layer, stream))
        p = gate_mod.cutoff_distribution(self.gates[(layer, stream)], spec)
        mask = gate_mod.soft_mask(p)
        masked = ad.mul(spec, mask)
        rec = ad.matmul(masked, self._inverse_node(layer, stream, trainable_u))
        return rec, ad.mean_all(mask)

    # -- plain numpy forwards (inference paths) --------------------------------

    def forward_full_np(self, tokens, collect_kv=False):
        """Uncompressed batched forward. Optionally collects pre-RoPE K/V."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        cfg = self.config
        b, t = tokens.shape
        collected = [{s: None for s in STREAMS} for _ in range(cfg.n_layers)] \
            if collect_kv else None
        logits = self._forward_np(tokens, compression=None, collected=collected)
        return (logits, collected) if collect_kv else logits

    def forward_soft_np(self, tokens):
        """Soft-compressed forward without graph construction (evaluation)."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        stats = RetainStats()
        logits = self._forward_np(tokens, compression="soft", stats=stats)
        return logits, stats

    def _forward_np(self, tokens, compression=None, collected=None, stats=None):
        cfg = self.config
        b, t = tokens.shape
        if t > cfg.max_seq_len:
            raise DimensionError(f"sequence length {t} > max_seq_len {cfg.max_seq_len}")
        p = self.params
        h_dim = cfg.head_dim
        positions = np.arange(t)
        causal = np.triu(np.full((t, t), NEG_MASK), k=1)
        h = p["tok_emb"].data[tokens]
        inverses = None
        if compression == "soft":
            inverses = {key: self.current_basis(*key).inverse
                        for key in self.basis_meta}
        for l in range(cfg.n_layers):
            pre = f"layers.{l}."
            x = _ln_np(h, p[pre + "ln1.gain"].data, p[pre + "ln1.bias"].data, cfg.ln_eps)
            q = x @ p[pre + "attn.wq"].data
            k = x @ p[pre + "attn.wk"].data
            v = x @ p[pre + "attn.wv"].data
            if collected is not None:
                collected[l]["K"] = k.reshape(-1, cfg.d_kv).copy()
                collected[l]["V"] = v.reshape(-1, cfg.d_kv).copy()
            if compression == "soft":
                k = self._compress_soft_np(l, "K", k, inverses, stats)
                v = self._compress_soft_np(l, "V", v, inverses, stats)
            q4 = q.reshape(b, t, cfg.n_heads, h_dim).transpose(0, 2, 1, 3)
            k4 = k.reshape(b, t, cfg.n_heads, h_dim).transpose(0, 2, 1, 3)
            v4 = v.reshape(b, t, cfg.n_heads, h_dim).transpose(0, 2, 1, 3)
            q4 = rope_rotate(q4, positions, base=cfg.rope_base)
            k4 = rope_rotate(k4, positions, base=cfg.rope_base)
            att = q4 @ np.swapaxes(k4, -1, -2) / math.sqrt(h_dim) + causal
            weights = ad.softmax_np(att)
            out = (weights @ v4).transpose(0, 2, 1, 3).reshape(b, t, cfg.d_kv)
            h = h + out @ p[pre + "attn.wo"].data
            x2 = _ln_np(h, p[pre + "ln2.gain"].data, p[pre + "ln2.bias"].data, cfg.ln_eps)
            h = h + ad._gelu_np(x2 @ p[pre + "mlp.fc_in"].data) @ p[pre + "mlp.fc_out"].data
        x = _ln_np(h, p["ln_f.gain"].data, p["ln_f.bias"].data, cfg.ln_eps)
        return x @ p["lm_head"].data

    def _compress_soft_np(self, layer, stream, state, inverses, stats):
        spec = state @ self.basis_param(layer, stream).data
        _, mask = gate_mod.gate_forward_np(self.gates[(layer, stream)], spec)
        if stats is not None:
            stats.add(layer, stream, mask.reshape(-1, mask.shape[-1]).mean(axis=-1))
        return (spec * mask) @ inverses[(layer, stream)]

    # -- hard decode over the ragged cache -------------------------------------

    def decode_hard(self, token_ids, threshold, cache=None, bases=None,
                    stats=None, collect_attn_last=0, trace=None):
        """Sequential decode storing thresholded spectral prefixes.

        Returns (logits [T, vocab], cache). Retain-rate samples are added to
        `stats`, per-token trace rows to `trace`, and when collect_attn_last
        is set, the last N attention rows per layer are kept for eviction
        scoring (retrievable via the returned cache's `attn_window` attr).
        """
        cfg = self.config
        p = self.params
        token_ids = np.asarray(token_ids).reshape(-1)
        if cache is None:
            cache = RaggedKVCache(cfg.n_layers, cfg.n_heads, cfg.head_dim, cfg.rope_base)
        if bases is None:
            bases = self.current_bases()
        attn_rows = None
        if collect_attn_last > 0:
            attn_rows = getattr(cache, "attn_window", None)
            if attn_rows is None:
                attn_rows = [[] for _ in range(cfg.n_layers)]
        logits = np.zeros((token_ids.shape[0], cfg.vocab_size))
        for i, tok in enumerate(token_ids):
            pos = cache._next_position[0]
            h = p["tok_emb"].data[int(tok)][None, :]
            for l in range(cfg.n_layers):
                pre = f"layers.{l}."
                x = _ln_np(h, p[pre + "ln1.gain"].data, p[pre + "ln1.bias"].data, cfg.ln_eps)
                q = x @ p[pre + "attn.wq"].data
                k_spec = (x @ p[pre + "attn.wk"].data) @ bases[(l, "K")].matrix
                v_spec = (x @ p[pre + "attn.wv"].data) @ bases[(l, "V")].matrix
                masks = {}
                lengths = {}
                for stream, spec in (("K", k_spec), ("V", v_spec)):
                    _, mask = gate_mod.gate_forward_np(self.gates[(l, stream)], spec)
                    masks[stream] = mask[0]
                    lengths[stream] = gate_mod.harden(mask[0], threshold)
                k_entry, v_entry = cache.append_truncated(
                    l, k_spec[0], lengths["K"], v_spec[0], lengths["V"], position=pos)
                if stats is not None or trace is not None:
                    for stream, entry in (("K", k_entry), ("V", v_entry)):
                        hard_rate = entry.retained_len / cfg.d_kv
                        if stats is not None:
                            stats.add(l, stream, hard_rate)
                        if trace is not None:
                            trace.append({
                                "token_index": pos,
                                "layer": l,
                                "stream": stream,
                                "soft_rate": float(np.mean(masks[stream])),
                                "hard_rate": hard_rate,
                            })
                k_all = cache.reconstructed_keys_with_rope(l, bases[(l, "K")])
                _, v_all = cache.reconstruct_all(l, bases[(l, "K")], bases[(l, "V")])
                v_all = v_all.reshape(-1, cfg.n_heads, cfg.head_dim)
                q3 = rope_rotate(q.reshape(cfg.n_heads, cfg.head_dim), float(pos),
                                 base=cfg.rope_base)
                scores = np.einsum("hd,thd->ht", q3, k_all) / math.sqrt(cfg.head_dim)
                weights = ad.softmax_np(scores)
                if attn_rows is not None:
                    attn_rows[l].append(weights.copy())
                    if len(attn_rows[l]) > collect_attn_last > 0:
                        attn_rows[l].pop(0)
                out = np.einsum("ht,thd->hd", weights, v_all).reshape(1, cfg.d_kv)
                h = h + out @ p[pre + "attn.wo"].data
                x2 = _ln_np(h, p[pre + "ln2.gain"].data, p[pre + "ln2.bias"].data, cfg.ln_eps)
                h = h + ad._gelu_np(x2 @ p[pre + "mlp.fc_in"].data) @ p[pre + "mlp.fc_out"].data
            x = _ln_np(h, p["ln_f.gain"].data, p["ln_f.bias"].data, cfg.ln_eps)
            logits[i] = (x @ p["lm_head"].data)[0]
        if attn_rows is not None:
            cache.attn_window = attn_rows
        return logits, cache

    def forward(self, tokens, mode, threshold=0.1):
        """Mode-dispatched forward returning numpy logits.

        "full": no compression; "soft": continuous masks (the training path's
        values without a graph); "hard": thresholded ragged-cache decode of a
        single sequence.
        """
        tokens = np.asarray(tokens)
        if mode == "full":
            return self.forward_full_np(tokens)
        if mode == "soft":
            logits, _ = self.forward_soft_np(tokens)
            return logits
        if mode == "hard":
            if tokens.ndim != 1:
                raise DimensionError("hard mode decodes one sequence at a time")
            logits, _ = self.decode_hard(tokens, threshold)
            return logits
        raise ConfigError(f"unknown forward mode {mode!r}")

    def decode_full(self, token_ids, cache=None):
        """Uncompressed sequential decode (throughput baseline).

        Keys are cached post-rotation as a real full cache would; returns
        (logits [T, vocab], (key_rows, value_rows, next_position)).
        """
        cfg = self.config
        p = self.params
        token_ids = np.asarray(token_ids).reshape(-1)
        if cache is None:
            cache = ([[] for _ in range(cfg.n_layers)],
                     [[] for _ in range(cfg.n_layers)], 0)
        key_rows, value_rows, pos = cache
        logits = np.zeros((token_ids.shape[0], cfg.vocab_size))
        for i, tok in enumerate(token_ids):
            h = p["tok_emb"].data[int(tok)][None, :]
            for l in range(cfg.n_layers):
                pre = f"layers.{l}."
                x = _ln_np(h, p[pre + "ln1.gain"].data, p[pre + "ln1.bias"].data, cfg.ln_eps)
                q = x @ p[pre + "attn.wq"].data
                k = (x @ p[pre + "attn.wk"].data).reshape(cfg.n_heads, cfg.head_dim)
                v = (x @ p[pre + "attn.wv"].data).reshape(cfg.n_heads, cfg.head_dim)
                key_rows[l].append(rope_rotate(k, float(pos), base=cfg.rope_base))
                value_rows[l].append(v)
                k_all = np.stack(key_rows[l])
                v_all = np.stack(value_rows[l])
                q3 = rope_rotate(q.reshape(cfg.n_heads, cfg.head_dim), float(pos),
                                 base=cfg.rope_base)
                scores = np.einsum("hd,thd->ht", q3, k_all) / math.sqrt(cfg.head_dim)
                weights = ad.softmax_np(scores)
                out = np.einsum("ht,thd->hd", weights, v_all).reshape(1, cfg.d_kv)
                h = h + out @ p[pre + "attn.wo"].data
                x2 = _ln_np(h, p[pre + "ln2.gain"].data, p[pre + "ln2.bias"].data, cfg.ln_eps)
                h = h + ad._gelu_np(x2 @ p[pre + "mlp.fc_in"].data) @ p[pre + "mlp.fc_out"].data
            x = _ln_np(h, p["ln_f.gain"].data, p["ln_f.bias"].data, cfg.ln_eps)
            logits[i] = (x @ p["lm_head"].data)[0]
            pos += 1
        return logits, (key_rows, value_rows, pos)


def _rope_node(x, positions, base):
    y = rope_rotate(x.data, positions, base=base)
    out = ad._make(y, (x,), None)

    def backward(g):
        if x.requires_grad:
            ad._accumulate(x, rope_rotate(g, positions, base=base, inverse=True))

    if out._parents:
        out._backward = backward
    return out


def _sum_nodes(nodes):
    total = nodes[0]
    for node in nodes[1:]:
        total = ad.add(total, node)
    return total


def composite_loss(logits, targets, soft_rate, alpha):
    """Cross-entropy plus alpha times the squared soft retain rate."""
    b, t, v = logits.shape
    flat = ad.reshape(logits, (b * t, v))
    ce = ad.cross_entropy(flat, np.asarray(targets).reshape(-1))
    penalty = ad.scale(ad.mul(soft_rate, soft_rate), alpha)
    return ad.add(ce, penalty), ce


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def sample_batch(ids, batch, seq_len, rng):
    """Random corpus windows, each BOS-prefixed; returns (inputs, targets)."""
    if len(ids) < seq_len + 1:
        raise ConfigError(f"corpus has {len(ids)} bytes, need > {seq_len}")
    offsets = rng.integers(0, len(ids) - seq_len, size=batch)
    x = np.empty((batch, seq_len), dtype=np.int64)
    y = np.empty((batch, seq_len), dtype=np.int64)
    for i, off in enumerate(offsets):
        window = ids[off:off + seq_len]
        x[i, 0] = BOS_ID
        x[i, 1:] = window[:-1]
        y[i] = window
    return x, y


def train(model, ids, cfg, step_writer=None, checkpoint_fn=None):
    """Optimize the composite objective; returns the per-step log rows.

    Deterministic given (model init, corpus, cfg): batches come from a seeded
    generator and every reduction has a fixed order. Aborts with NumericError
    if the loss stops being finite.
    """
    ids = np.asarray(ids)
    trainable = model.parameters(trainable_u=cfg.trainable_U, freeze_base=cfg.freeze_base)
    for name, p in model.params.items():
        p.requires_grad = name in trainable
    opt = ad.Adam(trainable, lr=cfg.lr, lr_scales={".gate_": cfg.gate_lr_mult})
    rng = np.random.default_rng(cfg.seed)
    log_rows = []
    for step in range(cfg.steps):
        x, y = sample_batch(ids, cfg.batch, cfg.seq_len, rng)
        try:
            logits, rate, _ = model.forward_soft(x, trainable_u=cfg.trainable_U)
            total, ce = composite_loss(logits, y, rate, cfg.alpha)
        except ValueError as exc:  # checked-mode NaN/Inf rejection
            raise NumericError(f"non-finite activations at step {step}: {exc}") from exc
        if not np.isfinite(total.data):
            raise NumericError(f"loss diverged at step {step}")
        opt.zero_grad()
        total.backward()
        if cfg.grad_clip:
            ad.clip_grad_norm(trainable, cfg.grad_clip)
        opt.step()
        row = {"step": step, "l_ce": ce.item(), "r_soft": rate.item(),
               "total": total.item()}
        log_rows.append(row)
        if step_writer is not None:
            step_writer(row)
    if checkpoint_fn is not None:
        checkpoint_fn(model, cfg.steps, log_rows[-1] if log_rows else {})
    return log_rows


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def corpus_windows(ids, seq_len, max_windows=None):
    """Consecutive non-overlapping windows for evaluation."""
    ids = np.asarray(ids)
    windows = []
    for start in range(0, len(ids) - 1, seq_len):
        chunk = ids[start:start + seq_len]
        if len(chunk) < 2:
            break
        windows.append(chunk)
        if max_windows is not None and len(windows) >= max_windows:
            break
    return windows


def _window_io(window):
    x = np.concatenate([[BOS_ID], window[:-1]]).astype(np.int64)
    return x, window.astype(np.int64)


def _nll_from_logits(logits, targets):
    m = logits.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=-1))
    rows = np.arange(logits.shape[0])
    return float((lse - logits[rows, targets]).sum())


def evaluate_ppl(model, ids, mode, seq_len=128, threshold=0.1, max_windows=None,
                 workers=1):
    """exp(mean token NLL) over held-out windows in the requested mode.

    Modes: "full" (no compression), "soft" (continuous masks), "hard"
    (thresholded ragged cache). Hard mode also returns the exact memory
    report aggregated over windows.
    """
    windows = corpus_windows(ids, seq_len, max_windows)
    if not windows:
        raise ConfigError("empty evaluation corpus")
    total_nll = 0.0
    total_tokens = 0
    extras = {}
    if mode in ("full", "soft"):
        stats = RetainStats()
        for window in windows:
            x, y = _window_io(window)
            if mode == "full":
                logits = model.forward_full_np(x[None, :])
            else:
                logits, wstats = model.forward_soft_np(x[None, :])
                stats.merge(wstats)
            total_nll += _nll_from_logits(logits[0], y)
            total_tokens += len(y)
        if mode == "soft":
            extras["soft_retain_rate"] = stats.mean_rate
    elif mode == "hard":
        bases = model.current_bases()
        stats = RetainStats()
        total_floats = 0
        capacity = 0
        clamped = 0

        def run(window):
            x, y = _window_io(window)
            wstats = RetainStats()
            logits, cache = model.decode_hard(x, threshold, bases=bases, stats=wstats)
            report = cache.memory_report()
            return _nll_from_logits(logits, y), len(y), wstats, report

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, windows))
        else:
            results = [run(w) for w in windows]
        for nll, n, wstats, report in results:
            total_nll += nll
            total_tokens += n
            stats.merge(wstats)
            total_floats += report["total_floats"]
            capacity += report["capacity_floats"]
            clamped += report["clamped_zero_rank"]
        extras["hard_retain_rate"] = total_floats / capacity
        extras["memory"] = {"total_floats": total_floats, "capacity_floats": capacity,
                            "rate_overall": total_floats / capacity}
        extras["clamped_zero_rank"] = clamped
        extras["stats_mean_rate"] = stats.mean_rate
    else:
        raise ConfigError(f"unknown eval mode {mode!r}")
    ppl = math.exp(total_nll / total_tokens)
    return {"mode": mode, "ppl": ppl, "tokens": total_tokens, **extras}


# ---------------------------------------------------------------------------
# calibration data collection
# ---------------------------------------------------------------------------

def collect_calibration(model, ids, n_tokens=100_000, seq_len=128, workers=1):
    """Accumulate pre-RoPE K/V statistics from full-cache forwards.

    Shards windows round-robin over workers, each with its own accumulators,
    merged in shard order so the result is independent of scheduling.
    """
    from dynakv.spectral import CovarianceAccumulator

    cfg = model.config
    windows = []
    budget = 0
    for window in corpus_windows(ids, seq_len):
        windows.append(window)
        budget += len(window)
        if budget >= n_tokens:
            break
    if not windows:
        raise ConfigError("calibration corpus too small")
    workers = max(1, workers)
    shards = [windows[i::workers] for i in range(workers)]
    shards = [s for s in shards if s]

    def run_shard(shard):
        accs = {(l, s): CovarianceAccumulator(cfg.d_kv)
                for l in range(cfg.n_layers) for s in STREAMS}
        for window in shard:
            x, _ = _window_io(window)
            _, collected = model.forward_full_np(x[None, :], collect_kv=True)
            for l in range(cfg.n_layers):
                for s in STREAMS:
                    accs[(l, s)].accumulate(collected[l][s])
        return accs

    if len(shards) > 1:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            shard_accs = list(pool.map(run_shard, shards))
    else:
        shard_accs = [run_shard(shards[0])]
    merged = shard_accs[0]
    for accs in shard_accs[1:]:
        for key in merged:
            merged[key].merge(accs[key])
    return merged


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory, model, manifest_extra=None):
    directory = Path(directory)
    params_dir = directory / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    for name, p in model.params.items():
        serialization.write_tensor(params_dir / f"{name}.dkvt", p.data)
    manifest = {
        "schema_version": 1,
        "model_config": asdict(model.config),
        "init_seed": model.init_seed,
        "basis_meta": {
            f"{l}.{s}": {
                "eigenvalues": meta["eigenvalues"].tolist(),
                "orthonormal": bool(meta["orthonormal"]),
            }
            for (l, s), meta in model.basis_meta.items()
        },
    }
    manifest.update(manifest_extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    config = ModelConfig(**manifest["model_config"])
    model = ToyTransformer(config, seed=manifest.get("init_seed", 0))
    for name, p in model.params.items():
        p.data = serialization.read_tensor(directory / "params" / f"{name}.dkvt")
    for key, meta in manifest["basis_meta"].items():
        l, s = key.split(".")
        model.basis_meta[(int(l), s)] = {
            "eigenvalues": np.asarray(meta["eigenvalues"], dtype=np.float64),
            "orthonormal": bool(meta["orthonormal"]),
        }
    model._frozen_inverse.clear()
    return model, manifest
