"""The fragment-retrieval conversion network.

Source features go through a two-layer MLP; target mels go through three
convolution layers whose outputs are all kept. A stack of extractors
(self-attention, cross-attention onto a target-encoder tap, convolutional
feed-forward) and smoothers (same minus cross-attention) turns the source
sequence into a mel spectrogram one output frame per source frame. With the
default U-Net-like wiring the first extractor reads the deepest tap and the
last extractor the shallowest; the first extractor has no residual path
around its cross-attention, so everything it passes on has been retrieved
from the target side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ParameterStore, Tensor


@dataclass
class ModelConfig:
    """Architecture hyper-parameters. Defaults are desk scale.

    The smoother count and the feed-forward expansion ratio are assumptions;
    the reference architecture leaves both unstated.
    """

    d_model: int = 64
    n_heads: int = 2
    upstream_dim: int = 768
    n_mel: int = 80
    n_extractors: int = 3
    n_smoothers: int = 3
    ffn_kernel: int = 9
    ffn_expansion: int = 2
    tgt_kernel: int = 5
    postnet_layers: int = 5
    postnet_kernel: int = 5
    ln_eps: float = 1e-5
    dropout: float = 0.0  # hook only; never applied
    # ablations
    no_cross_attention: bool = False
    keep_extractor1_residual: bool = False
    flat_wiring: bool = False

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        return cls(**{"d_model": 512, **overrides})

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not self.flat_wiring and not self.no_cross_attention and self.n_extractors != 3:
            raise ValueError("U-Net wiring is defined for exactly three extractors")
        if self.n_extractors < 1:
            raise ValueError("need at least one extractor")
        for name in ("ffn_kernel", "tgt_kernel", "postnet_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ValueError(f"{name} must be odd")
        if self.postnet_layers < 2:
            raise ValueError("postnet needs at least two layers")


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars for ``cfg``."""
    d, M, D = cfg.d_model, cfg.n_mel, cfg.upstream_dim
    h = cfg.ffn_expansion * d
    mha = 4 * d * d + 3 * d  # no key bias
    ln = 2 * d
    ffn = cfg.ffn_kernel * d * h + h + h * d + d
    source = D * d + d + d * d + d
    target = cfg.tgt_kernel * M * d + d + 2 * (cfg.tgt_kernel * d * d + d)
    extractor = 2 * mha + 3 * ln + ffn
    smoother = mha + 2 * ln + ffn
    projection = d * M + M
    k = cfg.postnet_kernel
    postnet = (k * M * d + d) + (cfg.postnet_layers - 2) * (k * d * d + d) + (k * d * M + M)
    return (source + target + cfg.n_extractors * extractor + cfg.n_smoothers * smoother
            + projection + postnet)


@dataclass
class ForwardResult:
    mel_pre: Tensor
    mel_post: Tensor
    attention: list[np.ndarray] = field(default_factory=list)  # per extractor, H x T x S


class FragmentVC:
    """Parameters plus the forward computation.

    Weights are Xavier-uniform, biases zero, layer-norm gains one; the last
    PostNet layer starts at zero so ``mel_post == mel_pre`` before training.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or ModelConfig()
        self.cfg.validate()
        self.dtype = np.dtype(dtype)
        self.params = ParameterStore()
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def _xavier(self, shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self._rng.uniform(-limit, limit, size=shape).astype(self.dtype)

    def _zeros(self, *shape):
        return np.zeros(shape, dtype=self.dtype)

    def _linear(self, prefix, din, dout, group):
        self.params.add(f"{prefix}.w", self._xavier((din, dout), din, dout), group)
        self.params.add(f"{prefix}.b", self._zeros(dout), group)

    def _conv(self, prefix, k, cin, cout, group, zero=False):
        w = self._zeros(k, cin, cout) if zero else self._xavier((k, cin, cout), k * cin, k * cout)
        self.params.add(f"{prefix}.w", w, group)
        self.params.add(f"{prefix}.b", self._zeros(cout), group)

    def _norm(self, prefix, group):
        self.params.add(f"{prefix}.gain", np.ones(self.cfg.d_model, dtype=self.dtype), group)
        self.params.add(f"{prefix}.bias", self._zeros(self.cfg.d_model), group)

    def _attention(self, prefix, group):
        d = self.cfg.d_model
        for p in ("q", "k", "v", "o"):
            self.params.add(f"{prefix}.w{p}", self._xavier((d, d), d, d), group)
            if p != "k":
                self.params.add(f"{prefix}.b{p}", self._zeros(d), group)

    def _ffn(self, prefix, group):
        d, h = self.cfg.d_model, self.cfg.ffn_expansion * self.cfg.d_model
        self._conv(f"{prefix}.conv1", self.cfg.ffn_kernel, d, h, group)
        self._conv(f"{prefix}.conv2", 1, h, d, group)

    def _build(self):
        c = self.cfg
        d = c.d_model
        self._linear("source.fc1", c.upstream_dim, d, "source_encoder")
        self._linear("source.fc2", d, d, "source_encoder")
        self._conv("target.conv1", c.tgt_kernel, c.n_mel, d, "target_encoder")
        self._conv("target.conv2", c.tgt_kernel, d, d, "target_encoder")
        self._conv("target.conv3", c.tgt_kernel, d, d, "target_encoder")
        for i in range(c.n_extractors):
            p = f"extractor{i + 1}"
            self._attention(f"{p}.self_attn", "extractors")
            self._norm(f"{p}.norm1", "extractors")
            self._attention(f"{p}.cross_attn", "extractors")
            self._norm(f"{p}.norm2", "extractors")
            self._ffn(f"{p}.ffn", "extractors")
            self._norm(f"{p}.norm3", "extractors")
        for i in range(c.n_smoothers):
            p = f"smoother{i + 1}"
            self._attention(f"{p}.self_attn", "other")
            self._norm(f"{p}.norm1", "other")
            self._ffn(f"{p}.ffn", "other")
            self._norm(f"{p}.norm2", "other")
        self._linear("projection", d, c.n_mel, "other")
        for i in range(c.postnet_layers):
            cin = c.n_mel if i == 0 else d
            cout = c.n_mel if i == c.postnet_layers - 1 else d
            self._conv(f"postnet.conv{i + 1}", c.postnet_kernel, cin, cout, "other",
                       zero=(i == c.postnet_layers - 1))

    # ------------------------------------------------------------------
    # blocks
    # ------------------------------------------------------------------

    def _as_tensor(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(getattr(x, "frames", x)), dtype=self.dtype)

    def _attn_params(self, prefix) -> dict[str, Tensor]:
        return {k: self.params[f"{prefix}.{k}"] for k in
                ("wq", "bq", "wk", "wv", "bv", "wo", "bo")}

    def _ln(self, x, prefix):
        return ag.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"],
                             self.cfg.ln_eps)

    def _conv_ffn(self, x, prefix):
        p = self.params
        hid = ag.relu(ag.conv1d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"]))
        return ag.conv1d(hid, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])

    def source_encoder(self, feats) -> Tensor:
        x = self._as_tensor(feats)
        if x.data.ndim != 2 or x.shape[1] != self.cfg.upstream_dim:
            raise ValueError(f"source features must be T x {self.cfg.upstream_dim}, got {x.shape}")
        p = self.params
        h = ag.relu(ag.linear(x, p["source.fc1.w"], p["source.fc1.b"]))
        return ag.relu(ag.linear(h, p["source.fc2.w"], p["source.fc2.b"]))

    def _encode_one(self, mel: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        p = self.params
        c1 = ag.relu(ag.conv1d(mel, p["target.conv1.w"], p["target.conv1.b"]))
        c2 = ag.relu(ag.conv1d(c1, p["target.conv2.w"], p["target.conv2.b"]))
        c3 = ag.relu(ag.conv1d(c2, p["target.conv3.w"], p["target.conv3.b"]))
        return c1, c2, c3

    def target_encoder(self, mels) -> tuple[Tensor, Tensor, Tensor]:
        """Encode target mels and concatenate the Conv1d 1/2/3 taps along time.

        Each utterance is convolved with its own zero padding, so no
        convolution window straddles two utterances and the result does not
        depend on the order in which targets are listed (up to row order).
        """
        if isinstance(mels, (Tensor, np.ndarray)):
            mels = [mels]
        if len(mels) == 0:
            raise ValueError("at least one target mel is required")
        taps = [self._encode_one(self._as_tensor(m)) for m in mels]
        for m in taps:
            if m[0].shape[1] != self.cfg.d_model:
                raise ValueError("target encoder produced the wrong width")
        if len(taps) == 1:
            return taps[0]
        return tuple(ag.concat_rows([t[i] for t in taps]) for i in range(3))

    def extractor(self, index: int, x: Tensor, memory: Tensor,
                  cross_residual: bool) -> tuple[Tensor, Tensor]:
        """Extractor ``index`` (1-based). Returns output and cross-attention weights."""
        p = f"extractor{index}"
        h = self.cfg.n_heads
        sa, _ = ag.multi_head_attention(x, x, self._attn_params(f"{p}.self_attn"), h)
        x = self._ln(ag.add(x, sa), f"{p}.norm1")
        ca, weights = ag.multi_head_attention(x, memory, self._attn_params(f"{p}.cross_attn"), h)
        x = self._ln(ag.add(x, ca) if cross_residual else ca, f"{p}.norm2")
        x = self._ln(ag.add(x, self._conv_ffn(x, f"{p}.ffn")), f"{p}.norm3")
        return x, weights

    def smoother(self, index: int, x: Tensor) -> Tensor:
        p = f"smoother{index}"
        sa, _ = ag.multi_head_attention(x, x, self._attn_params(f"{p}.self_attn"), self.cfg.n_heads)
        x = self._ln(ag.add(x, sa), f"{p}.norm1")
        return self._ln(ag.add(x, self._conv_ffn(x, f"{p}.ffn")), f"{p}.norm2")

    def postnet(self, mel_pre: Tensor) -> Tensor:
        """Residual refinement; the caller adds the result to ``mel_pre``."""
        n = self.cfg.postnet_layers
        y = mel_pre
        for i in range(1, n + 1):
            y = ag.conv1d(y, self.params[f"postnet.conv{i}.w"], self.params[f"postnet.conv{i}.b"])
            if i < n:
                y = ag.tanh(y)
        return y

    def memories(self, taps: tuple[Tensor, Tensor, Tensor]) -> list[Tensor]:
        c1, c2, c3 = taps
        n = self.cfg.n_extractors
        if self.cfg.no_cross_attention:
            return [ag.mean_rows(c3)] * n
        if self.cfg.flat_wiring:
            return [c3] * n
        return [c3, c2, c1]

    # ------------------------------------------------------------------

    def forward(self, src, tgt_mels) -> ForwardResult:
        if isinstance(tgt_mels, (Tensor, np.ndarray)):
            tgt_mels = [tgt_mels]
        if not tgt_mels:
            raise ValueError("at least one target mel is required")
        mems = self.memories(self.target_encoder(tgt_mels))
        x = self.source_encoder(src)
        attention = []
        for i, memory in enumerate(mems, start=1):
            residual = i > 1 or self.cfg.keep_extractor1_residual
            x, w = self.extractor(i, x, memory, cross_residual=residual)
            attention.append(w.data)
        for i in range(1, self.cfg.n_smoothers + 1):
            x = self.smoother(i, x)
        mel_pre = ag.linear(x, self.params["projection.w"], self.params["projection.b"])
        mel_post = ag.add(mel_pre, self.postnet(mel_pre))
        return ForwardResult(mel_pre, mel_post, attention)

    __call__ = forward

    def convert(self, src, tgt_mels) -> tuple[np.ndarray, list[np.ndarray]]:
        """Inference helper returning the refined mel and attention maps as arrays."""
        out = self.forward(src, tgt_mels)
        return out.mel_post.data.copy(), out.attention
