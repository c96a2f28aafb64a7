"""Model parameters and the visual / textual encoding paths.

The visual path is a small 4-block strided conv backbone (stands in for a
pretrained CNN) followed by global mean pooling + FC for the global feature
and stripe pooling + shared 1x1 conv for part features. The textual path is
word embedding -> shared Bi-GRU -> separate FC heads for the sentence and
for each noun phrase.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter, Tensor, concat, conv2d, stack
from .config import ModelConfig


def _glorot(rng, shape):
    fan_in = shape[-1] if len(shape) > 1 else shape[0]
    fan_out = shape[0]
    if len(shape) == 4:  # conv kernel (O, C, K, K)
        rcf = shape[2] * shape[3]
        fan_in = shape[1] * rcf
        fan_out = shape[0] * rcf
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class MiaModel:
    """All learnable parameters plus the encoder forward passes."""

    def __init__(self, config: ModelConfig, vocab_size: int, num_ids: int,
                 freeze_backbone_step1: bool = False):
        if num_ids < 2:
            raise ValueError("need at least 2 identities for the identity objective")
        self.config = config
        self.vocab_size = vocab_size
        self.num_ids = num_ids
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(config.seed)
        c = config

        def add(name, shape, steps, init="glorot", scale=1.0):
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name}")
            value = np.zeros(shape) if init == "zeros" else scale * _glorot(rng, shape)
            self.params[name] = Parameter(name, value, trainable_in_steps=steps)

        E, H, G = c.embed_dim, c.hidden_dim, c.global_dim
        global_steps = (1, 2)
        add("text.embedding", (vocab_size, E), global_steps)
        for d in ("fwd", "bwd"):
            for gate in ("z", "r", "h"):
                add(f"gru.{d}.w_{gate}", (H, E), global_steps)
                add(f"gru.{d}.u_{gate}", (H, H), global_steps)
                add(f"gru.{d}.b_{gate}", (H,), global_steps, init="zeros")
        add("text.sentence_fc.weight", (G, 2 * H), global_steps,
            scale=c.head_init_scale)
        add("text.sentence_fc.bias", (G,), global_steps, init="zeros")
        add("text.phrase_fc.weight", (G, 2 * H), (2,))
        add("text.phrase_fc.bias", (G,), (2,), init="zeros")

        backbone_steps = (2,) if freeze_backbone_step1 else (1, 2)
        chans = (c.image_channels,) + tuple(c.backbone_channels)
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            add(f"backbone.conv{i}.weight", (cout, cin, 3, 3), backbone_steps)
            add(f"backbone.conv{i}.bias", (cout,), backbone_steps, init="zeros")
        cf = chans[-1]
        add("visual.global_fc.weight", (G, cf), global_steps,
            scale=c.head_init_scale)
        add("visual.global_fc.bias", (G,), global_steps, init="zeros")
        add("visual.part_fc.weight", (c.part_dim, cf), (2,))
        add("visual.part_fc.bias", (c.part_dim,), (2,), init="zeros")

        def add_mlp(prefix, in_dim, steps):
            add(f"{prefix}.layer1.weight", (c.mlp_hidden, in_dim), steps)
            add(f"{prefix}.layer1.bias", (c.mlp_hidden,), steps, init="zeros")
            add(f"{prefix}.layer2.weight", (c.lift_dim, c.mlp_hidden), steps)
            add(f"{prefix}.layer2.bias", (c.lift_dim,), steps, init="zeros")

        add_mlp("rga.mlp_v", c.part_dim, (2,))
        add_mlp("rga.mlp_t", c.lift_dim, (2,))
        add_mlp("bfm.mlp_v", c.part_dim, (3,))
        add_mlp("bfm.mlp_t", c.lift_dim, (3,))

        add("classifier.weight", (num_ids, G), global_steps,
            scale=c.classifier_init_scale)
        add("classifier.bias", (num_ids,), global_steps, init="zeros")

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def trainable(self, step_id: int):
        return [p for p in self.params.values() if step_id in p.trainable_in_steps]

    def set_step(self, step_id):
        """Mark only the step's parameters as gradient-requiring (None = all)."""
        for p in self.params.values():
            p.requires_grad = step_id is None or step_id in p.trainable_in_steps

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict):
        for name, arr in state.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name}")
            p = self.params[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = np.asarray(arr, dtype=np.float64).copy()

    # -- visual path ------------------------------------------------------------

    def visual_backbone(self, image: Tensor) -> Tensor:
        c = self.config
        expected = (c.image_channels, c.image_height, c.image_width)
        if image.data.shape != expected:
            raise ValueError(f"image shape {image.data.shape}, expected {expected}")
        x = image
        for i in range(len(c.backbone_channels)):
            x = conv2d(x, self.params[f"backbone.conv{i}.weight"],
                       self.params[f"backbone.conv{i}.bias"], stride=2, pad=1).relu()
        return x

    def global_visual_encode(self, fm: Tensor) -> Tensor:
        cf = fm.data.shape[0]
        pooled = fm.reshape(cf, -1).mean(axis=1)
        return self.params["visual.global_fc.weight"] @ pooled \
            + self.params["visual.global_fc.bias"]

    def part_features(self, fm: Tensor, n: int | None = None) -> Tensor:
        """n vertical stripes, each mean-pooled then mapped through the shared
        1x1 conv (an affine map on pooled vectors). Returns (n, part_dim)."""
        n = n or self.config.n_parts
        cf, hf, wf = fm.data.shape
        if hf % n != 0:
            raise ValueError(f"feature height {hf} not divisible by {n} parts")
        step = hf // n
        stripes = [fm[:, i * step:(i + 1) * step, :].reshape(cf, -1).mean(axis=1)
                   for i in range(n)]
        pooled = stack(stripes, axis=0)  # (n, cf)
        return pooled @ self.params["visual.part_fc.weight"].T \
            + self.params["visual.part_fc.bias"]

    def encode_image(self, image: Tensor):
        fm = self.visual_backbone(image)
        return self.global_visual_encode(fm), self.part_features(fm)

    # -- textual path ---------------------------------------------------------

    def _gru_direction(self, xs: Tensor, direction: str) -> Tensor:
        p = self.params
        w_z, u_z, b_z = p[f"gru.{direction}.w_z"], p[f"gru.{direction}.u_z"], p[f"gru.{direction}.b_z"]
        w_r, u_r, b_r = p[f"gru.{direction}.w_r"], p[f"gru.{direction}.u_r"], p[f"gru.{direction}.b_r"]
        w_h, u_h, b_h = p[f"gru.{direction}.w_h"], p[f"gru.{direction}.u_h"], p[f"gru.{direction}.b_h"]
        length = xs.data.shape[0]
        order = range(length) if direction == "fwd" else range(length - 1, -1, -1)
        h = None  # zero initial state
        for t in order:
            x = xs[t]
            if h is None:
                z = (w_z @ x + b_z).sigmoid()
                hc = (w_h @ x + b_h).tanh()
                h = z * hc
            else:
                z = (w_z @ x + u_z @ h + b_z).sigmoid()
                r = (w_r @ x + u_r @ h + b_r).sigmoid()
                hc = (w_h @ x + u_h @ (r * h) + b_h).tanh()
                h = (1.0 - z) * h + z * hc
        return h

    def text_sequence_encode(self, indices) -> Tensor:
        """Embed a token index list and run the shared Bi-GRU; returns the
        concatenated final hidden states (2H,)."""
        if len(indices) == 0:
            raise ValueError("cannot encode an empty token sequence")
        xs = self.params["text.embedding"][np.asarray(indices, dtype=np.intp)]
        return concat([self._gru_direction(xs, "fwd"),
                       self._gru_direction(xs, "bwd")], axis=0)

    def _gru_batch(self, direction: str, idx: np.ndarray, mask: np.ndarray) -> Tensor:
        """Run one GRU direction over right-padded index rows (B, L); `mask`
        freezes each row's state once its sequence ends. Returns (B, H)."""
        p = self.params
        w_z, u_z, b_z = p[f"gru.{direction}.w_z"], p[f"gru.{direction}.u_z"], p[f"gru.{direction}.b_z"]
        w_r, u_r, b_r = p[f"gru.{direction}.w_r"], p[f"gru.{direction}.u_r"], p[f"gru.{direction}.b_r"]
        w_h, u_h, b_h = p[f"gru.{direction}.w_h"], p[f"gru.{direction}.u_h"], p[f"gru.{direction}.b_h"]
        emb = p["text.embedding"]
        h = None
        for t in range(idx.shape[1]):
            x = emb[idx[:, t]]                                # (B, E)
            if h is None:
                z = (x @ w_z.T + b_z).sigmoid()
                hc = (x @ w_h.T + b_h).tanh()
                h = z * hc
            else:
                z = (x @ w_z.T + h @ u_z.T + b_z).sigmoid()
                r = (x @ w_r.T + h @ u_r.T + b_r).sigmoid()
                hc = (x @ w_h.T + (r * h) @ u_h.T + b_h).tanh()
                h_new = (1.0 - z) * h + z * hc
                m = mask[:, t:t + 1]
                h = h_new * Tensor(m, _check=False) \
                    + h * Tensor(1.0 - m, _check=False)
        return h

    def text_batch_encode(self, index_lists) -> Tensor:
        """Encode several token index sequences in one padded graph; row b
        equals text_sequence_encode(index_lists[b]) up to float associativity.
        Returns (B, 2H)."""
        if not index_lists:
            raise ValueError("empty sequence batch")
        lengths = [len(ix) for ix in index_lists]
        if min(lengths) == 0:
            raise ValueError("cannot encode an empty token sequence")
        b, length = len(index_lists), max(lengths)
        idx_f = np.zeros((b, length), dtype=np.intp)
        idx_b = np.zeros((b, length), dtype=np.intp)
        mask = np.zeros((b, length))
        for i, ix in enumerate(index_lists):
            n = lengths[i]
            idx_f[i, :n] = ix
            idx_b[i, :n] = ix[::-1]
            mask[i, :n] = 1.0
        return concat([self._gru_batch("fwd", idx_f, mask),
                       self._gru_batch("bwd", idx_b, mask)], axis=1)

    def sentence_project(self, hidden: Tensor) -> Tensor:
        w = self.params["text.sentence_fc.weight"]
        bias = self.params["text.sentence_fc.bias"]
        if hidden.data.ndim == 1:
            return w @ hidden + bias
        return hidden @ w.T + bias

    def phrase_project(self, hidden: Tensor) -> Tensor:
        w = self.params["text.phrase_fc.weight"]
        bias = self.params["text.phrase_fc.bias"]
        if hidden.data.ndim == 1:
            return w @ hidden + bias
        return hidden @ w.T + bias

    def encode_caption(self, sentence_indices, phrase_indices):
        """Returns (T, phrases) where phrases is an (m, lift_dim) Tensor or
        None when the caption yielded no noun phrases."""
        t_vec = self.sentence_project(self.text_sequence_encode(sentence_indices))
        vecs = [self.phrase_project(self.text_sequence_encode(idx))
                for idx in phrase_indices if len(idx) > 0]
        phrases = stack(vecs, axis=0) if vecs else None
        return t_vec, phrases

    # -- alignment MLPs -------------------------------------------------------------

    def mlp(self, prefix: str, x: Tensor) -> Tensor:
        """Two-layer perceptron; accepts a vector or a matrix of row vectors."""
        p = self.params
        w1, b1 = p[f"{prefix}.layer1.weight"], p[f"{prefix}.layer1.bias"]
        w2, b2 = p[f"{prefix}.layer2.weight"], p[f"{prefix}.layer2.bias"]
        if x.data.ndim == 1:
            return w2 @ (w1 @ x + b1).relu() + b2
        return (x @ w1.T + b1).relu() @ w2.T + b2

    # -- warm starts ------------------------------------------------------------

    def _mlp_as_affine(self, prefix: str, matrix: np.ndarray, bias: np.ndarray):
        """Set a two-layer MLP to compute exactly x -> matrix @ x + bias,
        via relu(x) - relu(-x) = x. Needs mlp_hidden >= 2 * input dim."""
        out_dim, in_dim = matrix.shape
        hidden = self.config.mlp_hidden
        if hidden < 2 * in_dim:
            return False
        w1 = np.zeros((hidden, in_dim))
        w1[:in_dim] = np.eye(in_dim)
        w1[in_dim:2 * in_dim] = -np.eye(in_dim)
        w2 = np.zeros((out_dim, hidden))
        w2[:, :in_dim] = matrix
        w2[:, in_dim:2 * in_dim] = -matrix
        self.params[f"{prefix}.layer1.weight"].data = w1
        self.params[f"{prefix}.layer1.bias"].data = np.zeros(hidden)
        self.params[f"{prefix}.layer2.weight"].data = w2
        self.params[f"{prefix}.layer2.bias"].data = bias.copy()
        return True

    def _global_restriction(self):
        """The trained global visual head expressed on part features, assuming
        part_fc embeds the pooled stripe vector (see warm_start_relation)."""
        w_g = self.params["visual.global_fc.weight"].data
        b_g = self.params["visual.global_fc.bias"].data
        pd = self.config.part_dim
        cf = w_g.shape[1]
        m = np.zeros((w_g.shape[0], pd))
        m[:, :min(cf, pd)] = w_g[:, :min(cf, pd)]
        return m, b_g

    def warm_start_relation(self):
        """Initialize the relation branch from the trained global branch.

        part_fc becomes an embedding of the pooled stripe vector, phrase_fc a
        copy of the trained sentence head, and the relation MLPs exact affine
        reconstructions of the global visual head (visual side) and of the
        identity (text side). Part/phrase features then start out as 'the
        global feature of just this stripe / phrase', so the cross-modal
        attention is meaningful from the first step-2 update instead of
        having to be learned from random projections."""
        c = self.config
        pd, cf = c.part_dim, self.params["visual.global_fc.weight"].data.shape[1]
        e = np.zeros((pd, cf))
        e[:min(pd, cf), :min(pd, cf)] = np.eye(min(pd, cf))
        self.params["visual.part_fc.weight"].data = e
        self.params["visual.part_fc.bias"].data = np.zeros(pd)
        self.params["text.phrase_fc.weight"].data = \
            self.params["text.sentence_fc.weight"].data.copy()
        self.params["text.phrase_fc.bias"].data = \
            self.params["text.sentence_fc.bias"].data.copy()
        m, b = self._global_restriction()
        eye = np.eye(c.lift_dim)
        return (self._mlp_as_affine("rga.mlp_v", m, b)
                and self._mlp_as_affine("rga.mlp_t", eye, np.zeros(c.lift_dim)))

    def warm_start_fine(self):
        """Initialize the fine-grained matching MLPs the same way (visual side
        reconstructs the global head on parts, text side starts as identity)."""
        m, b = self._global_restriction()
        eye = np.eye(self.config.lift_dim)
        return (self._mlp_as_affine("bfm.mlp_v", m, b)
                and self._mlp_as_affine("bfm.mlp_t", eye,
                                        np.zeros(self.config.lift_dim)))

    # -- step-entry rescaling -----------------------------------------------

    def _scale_params(self, names, factor: float):
        for name in names:
            self.params[name].data = self.params[name].data * factor

    _MLP_TENSORS = ("layer1.weight", "layer1.bias", "layer2.weight",
                    "layer2.bias")

    def rescale_relation(self, gamma: float):
        """Shrink the global heads and the relation MLPs by `gamma` without
        changing the function the model computes.

        Every use of these tensors is scale-invariant: the heads feed cosines
        and the shared classifier (whose weight absorbs the inverse factor
        exactly), and the relation MLPs feed cosines only, with ReLU positive
        homogeneity carrying a factor on both layers straight through to the
        output. The optimizer's per-coordinate step size is scale-free, so
        after the shrink each update becomes a much larger *relative*
        rotation of these tensors — which is what lets the decaying matching
        schedule, with its small absolute movement budget, actually reshape
        the cross-modal cosine geometry.
        """
        if gamma <= 0:
            raise ValueError("rescale factor must be positive")
        self._scale_params(("visual.global_fc.weight", "visual.global_fc.bias",
                            "text.sentence_fc.weight", "text.sentence_fc.bias"),
                           gamma)
        self._scale_params(("classifier.weight",), 1.0 / gamma)
        self._scale_params([f"{m}.{t}" for m in ("rga.mlp_v", "rga.mlp_t")
                            for t in self._MLP_TENSORS], gamma)

    def rescale_fine(self, gamma: float):
        """Shrink the fine-grained matching MLPs by `gamma`; their outputs
        feed cosines only, so this is also function-preserving (and touches
        nothing outside the two MLPs)."""
        if gamma <= 0:
            raise ValueError("rescale factor must be positive")
        self._scale_params([f"{m}.{t}" for m in ("bfm.mlp_v", "bfm.mlp_t")
                            for t in self._MLP_TENSORS], gamma)
