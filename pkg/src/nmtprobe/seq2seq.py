"""LSTM encoder-decoder with additive attention.

One model class covers translation, autoencoding (target = source) and
word-to-tag sequence training; they differ only in the corpus fed in. After
training, the encoder doubles as a feature generator: ``encode`` returns the
per-token output of every layer, with layer 0 being the word embeddings.

Implementation notes, fixed for reproducibility:
  * weights initialized uniformly in [-0.1, 0.1], biases zero
  * LSTM gate order in the fused 4H-wide parameters: input, forget,
    candidate, output
  * batches are padded; recurrent states are frozen past each sentence's
    true length, so batched states match single-sentence processing (up to
    BLAS rounding differences between batch shapes)
  * bidirectional encoders run each direction at width hidden_dim/2 and
    concatenate, keeping every layer's output width at hidden_dim
  * residual connections add a layer's input to its output, from layer 2 up
  * attention is additive (one hidden layer of scores over encoder states)
  * training is SGD with gradient-norm clipping at 5.0 and a halve-on-plateau
    learning-rate schedule; the best-dev-loss epoch's parameters are kept
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import BOS, EOS, PAD, ParallelCorpus, Vocab

INIT_SCALE = 0.1
CLIP_NORM = 5.0
NEG_INF = -1e9


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class NmtConfig:
    embed_dim: int = 500
    hidden_dim: int = 500
    num_layers: int = 4
    direction: str = "uni"        # uni | bi
    residual: bool = False
    dropout: float = 0.3
    epochs: int = 20
    lr: float = 1.0
    lr_decay: float = 0.5         # multiplier applied when dev loss stalls
    batch_size: int = 32
    clip_norm: float = CLIP_NORM
    seed: int = 0

    def validate(self) -> None:
        if self.num_layers not in (2, 3, 4):
            raise ValueError(f"num_layers must be 2, 3 or 4, got {self.num_layers}")
        if self.direction not in ("uni", "bi"):
            raise ValueError(f"direction must be 'uni' or 'bi', got {self.direction!r}")
        if self.direction == "bi" and self.hidden_dim % 2:
            raise ValueError("bidirectional encoders need an even hidden_dim")
        if self.residual and self.hidden_dim != self.embed_dim:
            raise ValueError("residual connections require hidden_dim == embed_dim")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("embed_dim and hidden_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class LayerStates:
    """Per-layer encoder outputs for one sentence; states[k] is (len, width)."""
    states: list

    @property
    def num_layers(self) -> int:
        return len(self.states) - 1

    def layer(self, k: int) -> np.ndarray:
        if not 0 <= k <= self.num_layers:
            raise ValueError(f"layer {k} out of range 0..{self.num_layers}")
        return self.states[k]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_loss: float
    lr: float


@dataclass
class TrainResult:
    model: "Seq2SeqModel"
    history: list
    best_epoch: int


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              wx: Tensor, wh: Tensor, b: Tensor):
    """One LSTM cell update; returns (h, c). Gate order: i, f, g, o."""
    hidden = wh.shape[0]
    if x.shape[1] != wx.shape[0] or h_prev.shape[1] != hidden:
        raise ValueError(
            f"lstm_step width mismatch: x {x.shape}, h {h_prev.shape}, "
            f"wx {wx.shape}, wh {wh.shape}")
    pre = ad.add(ad.add(ad.matmul(x, wx), ad.matmul(h_prev, wh)), b)
    i = ad.sigmoid(pre[:, 0 * hidden:1 * hidden])
    f = ad.sigmoid(pre[:, 1 * hidden:2 * hidden])
    g = ad.tanh(pre[:, 2 * hidden:3 * hidden])
    o = ad.sigmoid(pre[:, 3 * hidden:4 * hidden])
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def attention_context(state: Tensor, enc_states: list, wh_proj: Tensor,
                      ws: Tensor, b: Tensor, v: Tensor,
                      src_mask: np.ndarray | None = None,
                      enc_proj: list | None = None):
    """Additive attention over encoder states; returns (context, weights).

    Weights are non-negative and sum to 1 across source positions; masked
    (padding) positions get effectively zero weight. `enc_proj` may carry the
    precomputed per-position projections `enc_states[t] @ wh_proj`.
    """
    if not enc_states:
        raise ValueError("attention needs at least one encoder state")
    if enc_proj is None:
        enc_proj = [ad.matmul(h, wh_proj) for h in enc_states]
    state_proj = ad.matmul(state, ws)
    scores = [ad.matmul(ad.tanh(ad.add(ad.add(state_proj, proj), b)), v)
              for proj in enc_proj]
    score_row = ad.concat(scores, axis=1)
    if src_mask is not None:
        score_row = ad.add(score_row, Tensor((1.0 - src_mask) * NEG_INF))
    weights = ad.softmax(score_row, axis=1)
    parts = [ad.mul(weights[:, t:t + 1], enc_states[t]) for t in range(len(enc_states))]
    context = parts[0]
    for part in parts[1:]:
        context = ad.add(context, part)
    return context, weights


class Seq2SeqModel:
    """All parameters of an L-layer attentional encoder-decoder."""

    def __init__(self, config: NmtConfig, src_vocab: Vocab, tgt_vocab: Vocab):
        config.validate()
        self.config = config
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.trained = False
        self.model_id = "untrained"
        self.params: dict[str, Parameter] = {}
        self._init_params(np.random.default_rng(config.seed))

    # -- parameters ---------------------------------------------------
    def _add(self, name: str, shape, rng, zero=False) -> None:
        data = np.zeros(shape) if zero else rng.uniform(-INIT_SCALE, INIT_SCALE, shape)
        self.params[name] = Parameter(name, data)

    def _init_params(self, rng) -> None:
        cfg = self.config
        e, h = cfg.embed_dim, cfg.hidden_dim
        self._add("src_embed", (len(self.src_vocab), e), rng)
        self._add("tgt_embed", (len(self.tgt_vocab), e), rng)
        h_dir = h // 2 if cfg.direction == "bi" else h
        dirs = ("fwd", "bwd") if cfg.direction == "bi" else ("fwd",)
        for k in range(1, cfg.num_layers + 1):
            d_in = e if k == 1 else h
            for d in dirs:
                self._add(f"enc.l{k}.{d}.Wx", (d_in, 4 * h_dir), rng)
                self._add(f"enc.l{k}.{d}.Wh", (h_dir, 4 * h_dir), rng)
                self._add(f"enc.l{k}.{d}.b", (4 * h_dir,), rng, zero=True)
            self._add(f"dec.l{k}.Wx", (e if k == 1 else h, 4 * h), rng)
            self._add(f"dec.l{k}.Wh", (h, 4 * h), rng)
            self._add(f"dec.l{k}.b", (4 * h,), rng, zero=True)
        self._add("att.Ws", (h, h), rng)
        self._add("att.Wh", (h, h), rng)
        self._add("att.b", (h,), rng, zero=True)
        self._add("att.v", (h, 1), rng)
        self._add("att_out.W", (2 * h, h), rng)
        self._add("att_out.b", (h,), rng, zero=True)
        self._add("proj.W", (h, len(self.tgt_vocab)), rng)
        self._add("proj.b", (len(self.tgt_vocab),), rng, zero=True)

    def parameters(self) -> list:
        return list(self.params.values())

    def snapshot(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def restore(self, snapshot: dict) -> None:
        for name, p in self.params.items():
            p.data = snapshot[name].copy()

    # -- persistence ----------------------------------------------------
    def save(self, path) -> None:
        meta = {
            "config": asdict(self.config),
            "src_vocab": self.src_vocab.id_to_token,
            "tgt_vocab": self.tgt_vocab.id_to_token,
            "trained": self.trained,
            "model_id": self.model_id,
        }
        ad.save_checkpoint(path, {n: p.data for n, p in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "Seq2SeqModel":
        arrays, meta = ad.load_checkpoint(path)
        config = NmtConfig(**meta["config"])
        src_vocab = Vocab.__new__(Vocab)
        src_vocab.id_to_token = list(meta["src_vocab"])
        src_vocab.token_to_id = {t: i for i, t in enumerate(src_vocab.id_to_token)}
        tgt_vocab = Vocab.__new__(Vocab)
        tgt_vocab.id_to_token = list(meta["tgt_vocab"])
        tgt_vocab.token_to_id = {t: i for i, t in enumerate(tgt_vocab.id_to_token)}
        model = cls(config, src_vocab, tgt_vocab)
        for name, p in model.params.items():
            if p.data.shape != arrays[name].shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            p.data = arrays[name]
        model.trained = bool(meta["trained"])
        model.model_id = meta.get("model_id", "model")
        return model

    # -- forward passes --------------------------------------------------
    def _run_direction(self, inputs: list, k: int, direction: str,
                       mask: np.ndarray | None):
        """Run one LSTM direction over `inputs`; returns (outputs, h_final, c_final).

        With a mask, states freeze once a sentence is past its true length,
        so padded batches reproduce single-sentence states.
        """
        wx = self.params[f"enc.l{k}.{direction}.Wx"]
        wh = self.params[f"enc.l{k}.{direction}.Wh"]
        b = self.params[f"enc.l{k}.{direction}.b"]
        batch = inputs[0].shape[0]
        h_dir = wh.shape[0]
        h = Tensor(np.zeros((batch, h_dir)))
        c = Tensor(np.zeros((batch, h_dir)))
        steps = range(len(inputs)) if direction == "fwd" else range(len(inputs) - 1, -1, -1)
        outputs = [None] * len(inputs)
        for t in steps:
            h_new, c_new = lstm_step(inputs[t], h, c, wx, wh, b)
            if mask is not None:
                m = Tensor(mask[:, t:t + 1])
                keep = Tensor(1.0 - mask[:, t:t + 1])
                h = ad.add(ad.mul(m, h_new), ad.mul(keep, h))
                c = ad.add(ad.mul(m, c_new), ad.mul(keep, c))
            else:
                h, c = h_new, c_new
            outputs[t] = h
        return outputs, h, c

    def _encoder_forward(self, src_ids: np.ndarray, mask: np.ndarray | None,
                         train: bool, rng=None):
        """Shared encoder pass. Returns (per-layer outputs, final (h, c) per layer).

        Layer index 0 of the outputs is the embedding sequence.
        """
        cfg = self.config
        seq_len = src_ids.shape[1]
        embeds = [ad.embedding(self.params["src_embed"], src_ids[:, t])
                  for t in range(seq_len)]
        layers = [embeds]
        finals = []
        inputs = embeds
        for k in range(1, cfg.num_layers + 1):
            if train and cfg.dropout > 0 and k >= 2:
                fed = [ad.dropout(x, cfg.dropout, rng, train=True) for x in inputs]
            else:
                fed = inputs
            if cfg.direction == "bi":
                f_out, fh, fc = self._run_direction(fed, k, "fwd", mask)
                b_out, bh, bc = self._run_direction(fed, k, "bwd", mask)
                out = [ad.concat([f_out[t], b_out[t]], axis=1) for t in range(seq_len)]
                h_fin = ad.concat([fh, bh], axis=1)
                c_fin = ad.concat([fc, bc], axis=1)
            else:
                out, h_fin, c_fin = self._run_direction(fed, k, "fwd", mask)
            if cfg.residual and k >= 2:
                out = [ad.add(out[t], inputs[t]) for t in range(seq_len)]
            layers.append(out)
            finals.append((h_fin, c_fin))
            inputs = out
        return layers, finals

    def _decoder_step(self, x: Tensor, states: list, enc_top: list,
                      enc_proj: list, src_mask: np.ndarray | None,
                      train: bool, rng=None):
        """One decoder time step; mutates `states` in place. Returns logits."""
        cfg = self.config
        inp = x
        for k in range(1, cfg.num_layers + 1):
            fed = inp
            if train and cfg.dropout > 0 and k >= 2:
                fed = ad.dropout(inp, cfg.dropout, rng, train=True)
            h, c = lstm_step(fed, states[k - 1][0], states[k - 1][1],
                             self.params[f"dec.l{k}.Wx"],
                             self.params[f"dec.l{k}.Wh"],
                             self.params[f"dec.l{k}.b"])
            states[k - 1] = (h, c)
            out = ad.add(h, inp) if cfg.residual and k >= 2 else h
            inp = out
        context, _ = attention_context(
            inp, enc_top, self.params["att.Wh"], self.params["att.Ws"],
            self.params["att.b"], self.params["att.v"],
            src_mask=src_mask, enc_proj=enc_proj)
        fused = ad.tanh(ad.add(ad.matmul(ad.concat([inp, context], axis=1),
                                         self.params["att_out.W"]),
                               self.params["att_out.b"]))
        logits = ad.add(ad.matmul(fused, self.params["proj.W"]), self.params["proj.b"])
        return logits

    def batch_loss(self, src: np.ndarray, src_mask: np.ndarray,
                   dec_in: np.ndarray, targets: np.ndarray,
                   tgt_mask: np.ndarray, train: bool, rng=None):
        """Summed token NLL over one padded batch; returns (loss, token count)."""
        layers, finals = self._encoder_forward(src, src_mask, train, rng)
        enc_top = layers[-1]
        enc_proj = [ad.matmul(h, self.params["att.Wh"]) for h in enc_top]
        states = [(h, c) for h, c in finals]
        total = None
        for t in range(dec_in.shape[1]):
            x = ad.embedding(self.params["tgt_embed"], dec_in[:, t])
            logits = self._decoder_step(x, states, enc_top, enc_proj,
                                        src_mask, train, rng)
            step = ad.cross_entropy(logits, targets[:, t],
                                    mask=tgt_mask[:, t], reduction="sum")
            total = step if total is None else ad.add(total, step)
        return total, float(tgt_mask.sum())

    # -- public inference -------------------------------------------------
    def encode(self, src_ids, allow_untrained: bool = False) -> LayerStates:
        """Per-layer encoder states for one sentence; dropout disabled.

        Returns states[k] of shape (len, embed_dim) for k=0 and
        (len, hidden_dim) for k >= 1.
        """
        if not self.trained and not allow_untrained:
            raise ValueError("model is untrained; pass allow_untrained=True "
                             "to extract features anyway")
        ids = np.asarray(src_ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("cannot encode an empty sentence")
        with ad.no_grad():
            layers, _ = self._encoder_forward(ids[None, :], None, train=False)
        stacked = [np.concatenate([step.data for step in layer], axis=0)
                   for layer in layers]
        return LayerStates(states=stacked)

    def translate_greedy(self, src_ids, max_len: int = 50) -> list:
        """Greedy decode to target ids until EOS or the length cap.

        Always emits at least one real token: EOS is suppressed at the first
        step so the empty translation can never be returned.
        """
        ids = np.asarray(src_ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("cannot translate an empty sentence")
        out: list[int] = []
        with ad.no_grad():
            layers, finals = self._encoder_forward(ids[None, :], None, train=False)
            enc_top = layers[-1]
            enc_proj = [ad.matmul(h, self.params["att.Wh"]) for h in enc_top]
            states = [(h, c) for h, c in finals]
            current = BOS
            for step in range(max_len):
                x = ad.embedding(self.params["tgt_embed"], np.array([current]))
                logits = self._decoder_step(x, states, enc_top, enc_proj,
                                            None, train=False)
                row = logits.data[0].copy()
                row[PAD] = row[BOS] = -np.inf
                if step == 0:
                    row[EOS] = -np.inf
                current = int(row.argmax())
                if current == EOS:
                    break
                out.append(current)
        return out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def encode_pairs(corpus: ParallelCorpus, src_vocab: Vocab, tgt_vocab: Vocab) -> list:
    return [(np.array(src_vocab.encode(src), dtype=np.int64),
             np.array(tgt_vocab.encode(tgt), dtype=np.int64))
            for src, tgt in corpus.pairs]


def _pad_batch(pairs: list):
    """Pack encoded pairs into padded arrays plus 0/1 masks."""
    batch = len(pairs)
    src_len = max(len(s) for s, _ in pairs)
    tgt_len = max(len(t) for _, t in pairs)
    src = np.full((batch, src_len), PAD, dtype=np.int64)
    src_mask = np.zeros((batch, src_len))
    dec_in = np.full((batch, tgt_len + 1), PAD, dtype=np.int64)
    targets = np.full((batch, tgt_len + 1), PAD, dtype=np.int64)
    tgt_mask = np.zeros((batch, tgt_len + 1))
    for i, (s, t) in enumerate(pairs):
        src[i, :len(s)] = s
        src_mask[i, :len(s)] = 1.0
        dec_in[i, 0] = BOS
        dec_in[i, 1:len(t) + 1] = t
        targets[i, :len(t)] = t
        targets[i, len(t)] = EOS
        tgt_mask[i, :len(t) + 1] = 1.0
    return src, src_mask, dec_in, targets, tgt_mask


def _dataset_loss(model: Seq2SeqModel, encoded: list, batch_size: int) -> float:
    """Per-token NLL over a dataset, evaluation mode."""
    total, tokens = 0.0, 0.0
    with ad.no_grad():
        for start in range(0, len(encoded), batch_size):
            chunk = encoded[start:start + batch_size]
            src, src_mask, dec_in, targets, tgt_mask = _pad_batch(chunk)
            loss, n = model.batch_loss(src, src_mask, dec_in, targets,
                                       tgt_mask, train=False)
            total += float(loss.data)
            tokens += n
    return total / tokens


def train_nmt(model: Seq2SeqModel, train_corpus: ParallelCorpus,
              dev_corpus: ParallelCorpus, config: NmtConfig | None = None) -> TrainResult:
    """SGD training; returns the checkpoint with minimum dev loss.

    History records per-epoch train/dev per-token loss and the learning rate
    used that epoch. Raises TrainingDiverged on a non-finite loss.
    """
    cfg = config or model.config
    cfg.validate()
    train_enc = encode_pairs(train_corpus, model.src_vocab, model.tgt_vocab)
    dev_enc = encode_pairs(dev_corpus, model.src_vocab, model.tgt_vocab)
    if not train_enc or not dev_enc:
        raise ValueError("empty training or dev corpus")

    rng = np.random.default_rng(cfg.seed + 1)
    optimizer = ad.SGD(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    history: list[EpochStats] = []
    best_dev = np.inf
    best_epoch = -1
    best_snapshot = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_enc))
        epoch_nll, epoch_tokens = 0.0, 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_enc[i] for i in order[start:start + cfg.batch_size]]
            src, src_mask, dec_in, targets, tgt_mask = _pad_batch(chunk)
            optimizer.zero_grad()
            loss, n_tokens = model.batch_loss(src, src_mask, dec_in, targets,
                                              tgt_mask, train=True, rng=rng)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch)
            scaled = ad.mul(loss, 1.0 / n_tokens)
            ad.backward(scaled)
            optimizer.step()
            epoch_nll += float(loss.data)
            epoch_tokens += n_tokens
        dev_loss = _dataset_loss(model, dev_enc, cfg.batch_size)
        if not np.isfinite(dev_loss):
            raise TrainingDiverged(epoch)
        history.append(EpochStats(epoch=epoch, train_loss=epoch_nll / epoch_tokens,
                                  dev_loss=dev_loss, lr=optimizer.lr))
        if dev_loss < best_dev:
            best_dev = dev_loss
            best_epoch = epoch
            best_snapshot = model.snapshot()
        else:
            optimizer.lr *= cfg.lr_decay
    model.restore(best_snapshot)
    model.trained = True
    return TrainResult(model=model, history=history, best_epoch=best_epoch)


def write_history_csv(history: list, path) -> None:
    """Training log: epoch, train loss, dev loss, lr."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,dev_loss,lr\n")
        for row in history:
            fh.write(f"{row.epoch},{row.train_loss!r},{row.dev_loss!r},{row.lr!r}\n")
