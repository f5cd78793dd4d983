"""GAN assembly: generator/discriminator construction, loss wiring and
checkpoint serialisation.

Two families are provided.  The vanilla pair is a two-layer MLP on flattened
images with a plain real/fake objective.  The categorical family shares one
convolutional trunk and differs only in the discriminator's final
fully-connected width and in how the loss interprets those nodes:

* ``softmax``: k exclusive categories plus a fake node, softmax cross entropy
* ``au``: 8 independent action-unit nodes plus a fake node, sigmoid cross entropy
* ``va``: valence and arousal regression nodes plus a fake node
* ``joint``: valence, arousal, 8 action units and the fake node (11 nodes)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .layers import LayerSpec, Network, PAPER_LRELU, SAME, VALID
from .losses import (huber_loss, log_prob_loss, mse_loss, one_minus_ccc_loss,
                     sigmoid_ce_loss, softmax_ce_loss, PROB_CLAMP)
from .metrics import NUM_AUS, fake_label
from .tensor import Tensor, get_default_dtype

PONDERATED_WEIGHTS = {"va": 0.27, "au": 0.40, "rf": 0.33}
HUBER_WARMUP_STEPS = 1500
HUBER_START_COEF = 10.0

HEAD_KINDS = ("softmax", "au", "va", "joint")


@dataclass(frozen=True)
class HeadVariant:
    """Shape and loss interpretation of the discriminator's output layer."""

    kind: str
    k: int = 10                 # category count for the softmax head
    va_loss: str = "mse"        # "mse" or "ccc" for the regression nodes
    weights: str = "equal"      # "equal" or "ponderated" (joint head only)

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.va_loss not in ("mse", "ccc"):
            raise ValueError(f"va_loss must be 'mse' or 'ccc', got {self.va_loss!r}")
        if self.weights not in ("equal", "ponderated"):
            raise ValueError(f"weights must be 'equal' or 'ponderated'")
        if self.k < 2:
            raise ValueError(f"softmax head needs k >= 2, got {self.k}")

    @property
    def n_nodes(self) -> int:
        return {"softmax": self.k + 1, "au": NUM_AUS + 1,
                "va": 3, "joint": NUM_AUS + 3}[self.kind]

    @property
    def n_categories(self) -> int:
        """Width n of the fake-label vector (node count minus the fake node)."""
        return self.n_nodes - 1


@dataclass
class LabelBatch:
    """Ground truth for one batch of real images.

    `real_flag` uses 0 for real and 1 for fake.  `category` carries the
    exclusive class index needed by the softmax head; the affect heads use
    the action-unit flags and the valence/arousal columns instead.
    """

    real_flag: np.ndarray
    au: np.ndarray | None = None
    valence: np.ndarray | None = None
    arousal: np.ndarray | None = None
    category: np.ndarray | None = None

    def __post_init__(self):
        self.real_flag = np.asarray(self.real_flag)
        if self.au is not None:
            self.au = np.asarray(self.au)
            if not np.isin(self.au, (0, 1)).all():
                raise ValueError("action-unit flags must be binary")
        for name in ("valence", "arousal"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if np.abs(v).max(initial=0.0) > 1.0:
                    raise ValueError(f"{name} values must lie in [-1, 1]")
                setattr(self, name, v)
        if self.category is not None:
            self.category = np.asarray(self.category, dtype=np.int64)


class GanModel:
    """A generator/discriminator pair with parameter and buffer state."""

    def __init__(self, kind: str, generator: Network, discriminator: Network,
                 gen_params: dict, disc_params: dict,
                 head: HeadVariant | None, alpha: float,
                 noise_dim: int, image_size: int, config: dict):
        self.kind = kind
        self.generator = generator
        self.discriminator = discriminator
        self.gen_params = gen_params
        self.disc_params = disc_params
        self.head = head
        self.alpha = float(alpha)
        self.noise_dim = int(noise_dim)
        self.image_size = int(image_size)
        self.config = dict(config)  # everything needed to rebuild the skeleton

    def sample_noise(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0,
                           size=(batch, self.noise_dim)).astype(get_default_dtype())

    def generate(self, z, training: bool,
                 rng: np.random.Generator | None = None,
                 params: dict | None = None) -> Tensor:
        z = Tensor._lift(z)
        if self.kind == "categorical":
            z = z.reshape(z.shape[0], 1, 1, self.noise_dim)
        return self.generator.forward(z, params or self.gen_params,
                                      training, rng)

    def discriminate(self, images, training: bool,
                     rng: np.random.Generator | None = None,
                     params: dict | None = None) -> Tensor:
        return self.discriminator.forward(images, params or self.disc_params,
                                          training, rng)

    def head_probabilities(self, logits: Tensor | np.ndarray) -> np.ndarray:
        """Per-head output probabilities/values from discriminator logits."""
        z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
        if self.kind == "vanilla":
            return z  # the vanilla net already ends in a sigmoid
        return head_outputs(self.head, z)


def head_outputs(head: HeadVariant, logits: np.ndarray) -> np.ndarray:
    """Apply the head's output nonlinearity to raw logits.

    softmax: full softmax row.  au: per-node sigmoid.  va/joint: regression
    nodes pass through, sigmoid on the action-unit and fake nodes.
    """
    z = np.asarray(logits, dtype=np.float64)
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    if head.kind == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    if head.kind == "au":
        return sig(z)
    out = z.copy()
    out[:, 2:] = sig(z[:, 2:])  # va: only the fake node; joint: AUs + fake
    return out


def fake_node_probability(head: HeadVariant | None, logits: Tensor) -> Tensor:
    """Differentiable probability of the last ("fake") output node."""
    if head is not None and head.kind == "softmax":
        return logits.softmax()[:, -1]
    return logits[:, -1].sigmoid()


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_vanilla(rng: np.random.Generator, noise_dim: int = 100,
                  image_dim: int = 784, hidden: int = 128) -> GanModel:
    """The two-layer MLP pair: G 100->128(ReLU)->784(sigmoid),
    D 784->128(ReLU)->1(sigmoid)."""
    gen = Network("gen", [
        LayerSpec("affine", (noise_dim, hidden)),
        LayerSpec("activation", activation="relu"),
        LayerSpec("affine", (hidden, image_dim)),
        LayerSpec("activation", activation="sigmoid"),
    ], input_shape=(noise_dim,))
    disc = Network("disc", [
        LayerSpec("affine", (image_dim, hidden)),
        LayerSpec("activation", activation="relu"),
        LayerSpec("affine", (hidden, 1)),
        LayerSpec("activation", activation="sigmoid"),
    ], input_shape=(image_dim,))
    config = {"kind": "vanilla", "noise_dim": noise_dim,
              "image_dim": image_dim, "hidden": hidden}
    return GanModel("vanilla", gen, disc,
                    gen.init_params(rng), disc.init_params(rng),
                    head=None, alpha=1.0, noise_dim=noise_dim,
                    image_size=int(np.sqrt(image_dim)), config=config)


def _disc_block(filter_shape, keep_prob=0.5):
    return [
        LayerSpec("conv", filter_shape, stride=(1, 2, 2, 1), padding=SAME),
        LayerSpec("activation", activation="lrelu"),
        LayerSpec("batchnorm"),
        LayerSpec("dropout", keep_prob=keep_prob),
    ]


def build_categorical(head: HeadVariant, image_size: int,
                      rng: np.random.Generator, alpha: float = 0.9,
                      noise_dim: int = 100,
                      disc_channels: tuple = (64, 128, 256),
                      gen_channels: tuple = (384, 128, 64),
                      flatten_head: bool = False,
                      lrelu_coefs: tuple = PAPER_LRELU) -> GanModel:
    """Convolutional GAN with the selected head variant.

    The generator's final kernel is 6x6 for 32x32 output and 2x2 for the
    28x28 variant; both follow (in-1)*stride + k arithmetic under VALID
    padding.  The discriminator trunk halves the spatial extent three times
    and reduces to `disc_channels[-1]` features by global average pooling
    (or a full flatten when `flatten_head` is set) before the head layer.
    """
    if image_size not in (28, 32):
        raise ValueError(f"image_size must be 28 or 32, got {image_size}")
    c1, c2, c3 = disc_channels
    g1, g2, g3 = gen_channels

    disc_specs = (_disc_block((5, 5, 3, c1))
                  + _disc_block((5, 5, c1, c2))
                  + _disc_block((5, 5, c2, c3)))
    extent = image_size
    for _ in range(3):
        extent = -(-extent // 2)  # SAME stride-2 chain: 28->14->7->4
    if flatten_head:
        disc_specs.append(LayerSpec("flatten"))
        feat = c3 * extent * extent
    else:
        disc_specs.append(LayerSpec("global_avg_pool"))
        feat = c3
    disc_specs.append(LayerSpec("affine", (feat, head.n_nodes)))
    disc = Network("disc", disc_specs, input_shape=(image_size, image_size, 3),
                   lrelu_coefs=lrelu_coefs)

    final_kernel = 2 if image_size == 28 else 6
    gen_specs = [
        LayerSpec("deconv", (2, 2, noise_dim, g1), stride=(1, 1, 1, 1), padding=VALID),
        LayerSpec("activation", activation="lrelu"),
        LayerSpec("batchnorm"),
        LayerSpec("deconv", (4, 4, g1, g2), stride=(1, 2, 2, 1), padding=VALID),
        LayerSpec("activation", activation="lrelu"),
        LayerSpec("batchnorm"),
        LayerSpec("deconv", (4, 4, g2, g3), stride=(1, 2, 2, 1), padding=VALID),
        LayerSpec("activation", activation="lrelu"),
        LayerSpec("batchnorm"),
        LayerSpec("deconv", (final_kernel, final_kernel, g3, 3),
                  stride=(1, 2, 2, 1), padding=VALID),
        LayerSpec("activation", activation="tanh"),
    ]
    gen = Network("gen", gen_specs, input_shape=(1, 1, noise_dim),
                  lrelu_coefs=lrelu_coefs)
    if gen.output_shape != (image_size, image_size, 3):
        raise AssertionError(
            f"generator produces {gen.output_shape}, wanted {image_size}"
        )

    config = {"kind": "categorical", "head": head.kind, "k": head.k,
              "va_loss": head.va_loss, "weights": head.weights,
              "alpha": alpha, "noise_dim": noise_dim, "image_size": image_size,
              "disc_channels": list(disc_channels),
              "gen_channels": list(gen_channels),
              "flatten_head": flatten_head, "lrelu_coefs": list(lrelu_coefs)}
    return GanModel("categorical", gen, disc,
                    gen.init_params(rng), disc.init_params(rng),
                    head=head, alpha=alpha, noise_dim=noise_dim,
                    image_size=image_size, config=config)


def rebuild_from_config(config: dict, rng: np.random.Generator) -> GanModel:
    if config["kind"] == "vanilla":
        return build_vanilla(rng, config["noise_dim"], config["image_dim"],
                             config["hidden"])
    head = HeadVariant(config["head"], k=config["k"],
                       va_loss=config["va_loss"], weights=config["weights"])
    return build_categorical(
        head, config["image_size"], rng, alpha=config["alpha"],
        noise_dim=config["noise_dim"],
        disc_channels=tuple(config["disc_channels"]),
        gen_channels=tuple(config["gen_channels"]),
        flatten_head=config["flatten_head"],
        lrelu_coefs=tuple(config["lrelu_coefs"]))


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------

def _va_branch(kind: str, pred: Tensor, target) -> Tensor:
    if kind == "mse":
        return mse_loss(pred, target)
    return one_minus_ccc_loss(pred, target)


def _joint_components(head: HeadVariant, logits: Tensor, v_t, a_t, au_t, rf_t):
    va = (_va_branch(head.va_loss, logits[:, 0], v_t)
          + _va_branch(head.va_loss, logits[:, 1], a_t)) * 0.5
    au = sigmoid_ce_loss(logits[:, 2:2 + NUM_AUS], au_t)
    rf = sigmoid_ce_loss(logits[:, -1], rf_t)
    return va, au, rf


def _combine(head: HeadVariant, va: Tensor, au: Tensor, rf: Tensor) -> Tensor:
    if head.weights == "ponderated":
        w = PONDERATED_WEIGHTS
        return w["va"] * va + w["au"] * au + w["rf"] * rf
    return (va + au + rf) * (1.0 / 3.0)


def assemble_discriminator_loss(head: HeadVariant, real_logits: Tensor,
                                fake_logits: Tensor, labels: LabelBatch,
                                alpha: float):
    """Discriminator objective for one real batch and one fake batch.

    Real images carry their true labels plus a 0 on the fake node; fake
    images use the smoothed target from :func:`fake_label`.  Returns the
    scalar loss tensor and a dict of per-component values for logging.
    """
    b_real = real_logits.shape[0]
    diag: dict[str, float] = {}

    if head.kind == "softmax":
        if labels.category is None:
            raise ValueError("softmax head needs category labels")
        real_t = np.zeros((b_real, head.k + 1))
        real_t[np.arange(b_real), labels.category] = 1.0
        d_real = softmax_ce_loss(real_logits, real_t)
        d_fake = softmax_ce_loss(fake_logits, fake_label(head.k, alpha))
    elif head.kind == "au":
        if labels.au is None:
            raise ValueError("au head needs action-unit flags")
        real_t = np.concatenate([labels.au, np.zeros((b_real, 1))], axis=1)
        d_real = sigmoid_ce_loss(real_logits, real_t)
        d_fake = sigmoid_ce_loss(fake_logits, fake_label(NUM_AUS, alpha))
    elif head.kind == "va":
        if labels.valence is None or labels.arousal is None:
            raise ValueError("va head needs valence and arousal labels")
        smooth = (1.0 - alpha) / 2.0
        b_fake = fake_logits.shape[0]
        parts = {}
        for side, logits, v_t, a_t, rf_t in (
                ("real", real_logits, labels.valence, labels.arousal,
                 np.zeros(b_real)),
                ("fake", fake_logits, np.full(b_fake, smooth),
                 np.full(b_fake, smooth), np.full(b_fake, alpha))):
            v = _va_branch(head.va_loss, logits[:, 0], v_t)
            a = _va_branch(head.va_loss, logits[:, 1], a_t)
            rf = sigmoid_ce_loss(logits[:, 2], rf_t)
            parts[side] = ((v + a) * 0.5 + rf) * 0.5
            diag[f"d_loss_{side}_v"] = v.item()
            diag[f"d_loss_{side}_a"] = a.item()
            diag[f"d_loss_{side}_rf"] = rf.item()
        d_real, d_fake = parts["real"], parts["fake"]
    else:  # joint
        if labels.au is None or labels.valence is None or labels.arousal is None:
            raise ValueError("joint head needs AU, valence and arousal labels")
        n = head.n_categories
        smooth = (1.0 - alpha) / n
        b_fake = fake_logits.shape[0]
        va_r, au_r, rf_r = _joint_components(
            head, real_logits, labels.valence, labels.arousal,
            labels.au, np.zeros(b_real))
        va_f, au_f, rf_f = _joint_components(
            head, fake_logits, np.full(b_fake, smooth), np.full(b_fake, smooth),
            np.full((b_fake, NUM_AUS), smooth), np.full(b_fake, alpha))
        d_real = _combine(head, va_r, au_r, rf_r)
        d_fake = _combine(head, va_f, au_f, rf_f)
        diag.update(d_loss_real_va=va_r.item(), d_loss_real_au=au_r.item(),
                    d_loss_real_rf=rf_r.item(), d_loss_fake_va=va_f.item(),
                    d_loss_fake_au=au_f.item(), d_loss_fake_rf=rf_f.item())

    d_loss = (d_real + d_fake) * 0.5
    diag["d_loss_real"] = d_real.item()
    diag["d_loss_fake"] = d_fake.item()
    diag["d_loss"] = d_loss.item()
    return d_loss, diag


def huber_coefficient(step: int) -> float:
    """Schedule of the image-matching term: 10 decaying to 0 over 1500 steps."""
    if step < HUBER_WARMUP_STEPS:
        return (HUBER_WARMUP_STEPS - step) / HUBER_WARMUP_STEPS * HUBER_START_COEF
    return 0.0


def assemble_generator_loss(head: HeadVariant | None, fake_logits: Tensor,
                            fake_images: Tensor, real_images, step: int,
                            non_saturating: bool = False) -> Tensor:
    """Generator objective: mean log of the discriminator's fake-node
    probability, plus the scheduled Huber penalty tying fake images to the
    real batch (paired index-wise).

    With `non_saturating` the first term becomes -mean log(1 - p_fake);
    both push the fake-node probability down.
    """
    p_fake = fake_node_probability(head, fake_logits)
    if non_saturating:
        g = -log_prob_loss(1.0 - p_fake)
    else:
        g = log_prob_loss(p_fake)
    coef = huber_coefficient(step)
    if coef > 0.0:
        g = g + coef * huber_loss(fake_images, real_images, delta=1.0)
    return g


def vanilla_discriminator_loss(real_probs: Tensor, fake_probs: Tensor):
    """Sum of the real-batch and fake-batch binary cross entropies.

    The discriminator here outputs the probability of being real;
    ground-truth labels are 1 for real images and 0 for fake ones.
    """
    d_real = -log_prob_loss(real_probs)
    d_fake = -log_prob_loss(1.0 - fake_probs)
    d_loss = d_real + d_fake
    return d_loss, {"d_loss_real": d_real.item(), "d_loss_fake": d_fake.item(),
                    "d_loss": d_loss.item()}


def vanilla_generator_loss(fake_probs: Tensor) -> Tensor:
    """Cross entropy of the fake batch against the "real" label."""
    return -log_prob_loss(fake_probs)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CGAN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(
            f"truncated checkpoint: wanted {n} bytes for {what} "
            f"at offset {fh.tell() - len(data)}"
        )
    return data


def save_checkpoint(path, model: GanModel, iteration: int,
                    rng_states: dict | None = None) -> None:
    """Write a versioned binary snapshot of the model.

    Layout: magic, version u16, config JSON (u32 length prefix), iteration
    u64, entry count u32, then per entry name (u16 length + utf8), rank u8,
    u32 extents and float64 little-endian values.  Parameters and batch-norm
    buffers are stored through the same table.  The RNG state dict is
    appended as a second JSON blob.  Everything is little-endian.
    """
    entries: dict[str, np.ndarray] = {}
    for prefix, params, net in (("g", model.gen_params, model.generator),
                                ("d", model.disc_params, model.discriminator)):
        for name, arr in params.items():
            entries[f"{prefix}:{name}"] = arr
        for name, arr in net.buffers.items():
            entries[f"{prefix}:{name}"] = arr

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        blob = json.dumps(model.config, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", iteration))
        fh.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr = np.asarray(entries[name], dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        rng_blob = json.dumps(rng_states or {}, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)


def load_checkpoint(path):
    """Read a checkpoint and rebuild the model exactly.

    Returns (model, iteration, rng_states).  Raises CheckpointError with the
    failing byte offset on a bad magic, version or truncation.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r} at offset 0")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = json.loads(_read_exact(fh, clen, "config"))
        (iteration,) = struct.unpack("<Q", _read_exact(fh, 8, "iteration"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        entries = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode()
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "shape"))
            n = int(np.prod(shape)) if rank else 1
            raw = _read_exact(fh, 8 * n, f"values of {name}")
            entries[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        (rlen,) = struct.unpack("<I", _read_exact(fh, 4, "rng length"))
        rng_states = json.loads(_read_exact(fh, rlen, "rng state"))

    model = rebuild_from_config(config, np.random.default_rng(0))
    dt = get_default_dtype()
    for key, arr in entries.items():
        prefix, name = key.split(":", 1)
        params = model.gen_params if prefix == "g" else model.disc_params
        net = model.generator if prefix == "g" else model.discriminator
        if name in params:
            params[name] = arr.astype(dt)
        elif name in net.buffers:
            net.buffers[name] = arr
        else:
            raise CheckpointError(f"unknown entry {key!r} in checkpoint")
    return model, iteration, rng_states
