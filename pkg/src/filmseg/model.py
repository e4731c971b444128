"""FiLM generator and FiLMed U-Net assembly.

The network is a standard 2-d U-Net (3x3 convs, two per block, channel
doubling per pooling stage, 2x2 stride-2 up-convolutions) whose activations
are modulated by per-channel affine coefficients. One shared MLP (the
generator) maps the one-hot metadata vector to a gamma and beta value for
every modulated channel in the network; each modulation point slices its
own range out of that vector. Gamma and beta live in (0,1) because the
generator head is a sigmoid.

With ``film_enabled`` False the modulation points apply the constant pair
(gamma=1, beta=0), which reduces the model to a plain U-Net while keeping
the parameter layout identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CONV_KERNEL = 3
UP_KERNEL = 2

_MAGIC = b"FILMSEG1"


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3
    in_channels: int = 1
    base_filters: int = 8
    n_metadata_classes: int = 3
    film_enabled: bool = True
    generator_hidden: tuple[int, int] = (64, 16)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1 or self.in_channels < 1 or self.n_metadata_classes < 1:
            raise ValueError(f"invalid config: {self}")
        if len(self.generator_hidden) != 2 or min(self.generator_hidden) < 1:
            raise ValueError(f"generator_hidden must be a pair of positive sizes, got {self.generator_hidden}")


@dataclass(frozen=True)
class PlanEntry:
    block: str
    channels: int
    has_film: bool


def channel_plan(config: ModelConfig) -> list[PlanEntry]:
    """Conv units in execution order with their output channels.

    Encoder stage i and the mirrored decoder stage produce
    base_filters * 2**i channels; the bottleneck doubles once more. Every
    conv unit except the 1x1 head is followed by a modulation point.
    """
    base = config.base_filters
    plan = []
    for i in range(config.depth):
        c = base * 2 ** i
        plan.append(PlanEntry(f"enc{i}.conv1", c, True))
        plan.append(PlanEntry(f"enc{i}.conv2", c, True))
    c = base * 2 ** config.depth
    plan.append(PlanEntry("bot.conv1", c, True))
    plan.append(PlanEntry("bot.conv2", c, True))
    for i in reversed(range(config.depth)):
        c = base * 2 ** i
        plan.append(PlanEntry(f"dec{i}.conv1", c, True))
        plan.append(PlanEntry(f"dec{i}.conv2", c, True))
    plan.append(PlanEntry("head", 1, False))
    return plan


def film_channel_total(config: ModelConfig) -> int:
    return sum(e.channels for e in channel_plan(config) if e.has_film)


def one_hot_encode(class_id: int, n_classes: int) -> Tensor:
    if not 0 <= class_id < n_classes:
        raise ValueError(f"class_id {class_id} outside [0, {n_classes})")
    v = np.zeros(n_classes)
    v[class_id] = 1.0
    return Tensor(v)


def one_hot_batch(class_ids, n_classes: int) -> Tensor:
    rows = [one_hot_encode(int(c), n_classes).data for c in class_ids]
    return Tensor(np.stack(rows))


@dataclass
class FilmParams:
    """Generator output split into gamma/beta, one value per modulated channel."""

    gamma: Tensor  # [N, C_total]
    beta: Tensor   # [N, C_total]
    widths: list[int]

    def layer(self, i: int) -> tuple[Tensor, Tensor]:
        start = sum(self.widths[:i])
        stop = start + self.widths[i]
        return T.slice_cols(self.gamma, start, stop), T.slice_cols(self.beta, start, stop)


class FilmUNet:
    """Parameter container plus forward pass; training mutates ``params`` data."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "FilmUNet":
        return FilmUNet(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})

    def load_state(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            p.data[...] = state[k]

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def forward(self, image, metadata, film_override: str | None = None) -> Tensor:
        img = image if isinstance(image, Tensor) else Tensor(image)
        md = metadata if isinstance(metadata, Tensor) else Tensor(metadata)
        return unet_forward(self, img, md, film_override=film_override)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int) -> FilmUNet:
    """He-uniform weights, zero biases, fully determined by (config, seed)."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def conv_unit(name: str, cin: int, cout: int, k: int):
        params[f"{name}.w"] = Tensor(_he_uniform(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

    base = config.base_filters
    cin = config.in_channels
    for i in range(config.depth):
        c = base * 2 ** i
        conv_unit(f"enc{i}.conv1", cin, c, CONV_KERNEL)
        conv_unit(f"enc{i}.conv2", c, c, CONV_KERNEL)
        cin = c
    cbot = base * 2 ** config.depth
    conv_unit("bot.conv1", cin, cbot, CONV_KERNEL)
    conv_unit("bot.conv2", cbot, cbot, CONV_KERNEL)
    prev = cbot
    for i in reversed(range(config.depth)):
        c = base * 2 ** i
        params[f"dec{i}.up.w"] = Tensor(
            _he_uniform(rng, (prev, c, UP_KERNEL, UP_KERNEL), prev * UP_KERNEL * UP_KERNEL), requires_grad=True
        )
        conv_unit(f"dec{i}.conv1", 2 * c, c, CONV_KERNEL)
        conv_unit(f"dec{i}.conv2", c, c, CONV_KERNEL)
        prev = c
    conv_unit("head", base, 1, 1)

    h1, h2 = config.generator_hidden
    n = config.n_metadata_classes
    ctot = film_channel_total(config)
    params["gen.fc1.w"] = Tensor(_he_uniform(rng, (h1, n), n), requires_grad=True)
    params["gen.fc1.b"] = Tensor(np.zeros(h1), requires_grad=True)
    params["gen.fc2.w"] = Tensor(_he_uniform(rng, (h2, h1), h1), requires_grad=True)
    params["gen.fc2.b"] = Tensor(np.zeros(h2), requires_grad=True)
    params["gen.out.w"] = Tensor(_he_uniform(rng, (2 * ctot, h2), h2), requires_grad=True)
    params["gen.out.b"] = Tensor(np.zeros(2 * ctot), requires_grad=True)
    return FilmUNet(config, params)


def expected_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count implied by the channel plan."""
    base, k = config.base_filters, CONV_KERNEL
    total = 0
    cin = config.in_channels
    for i in range(config.depth):
        c = base * 2 ** i
        total += c * cin * k * k + c + c * c * k * k + c
        cin = c
    cbot = base * 2 ** config.depth
    total += cbot * cin * k * k + cbot + cbot * cbot * k * k + cbot
    prev = cbot
    for i in reversed(range(config.depth)):
        c = base * 2 ** i
        total += prev * c * UP_KERNEL * UP_KERNEL
        total += c * 2 * c * k * k + c + c * c * k * k + c
        prev = c
    total += base + 1  # 1x1 head
    h1, h2 = config.generator_hidden
    ctot = film_channel_total(config)
    total += h1 * config.n_metadata_classes + h1 + h2 * h1 + h2 + 2 * ctot * h2 + 2 * ctot
    return total


def film_generator_forward(metadata: Tensor, model: FilmUNet) -> FilmParams:
    """Metadata -> shared MLP -> sigmoid -> (gamma, beta) for every modulation point."""
    cfg = model.config
    if metadata.ndim != 2 or metadata.shape[1] != cfg.n_metadata_classes:
        raise ValueError(
            f"metadata shape {metadata.shape} does not match n_metadata_classes={cfg.n_metadata_classes}"
        )
    p = model.params
    h = T.relu(T.linear(metadata, p["gen.fc1.w"], p["gen.fc1.b"]))
    h = T.relu(T.linear(h, p["gen.fc2.w"], p["gen.fc2.b"]))
    out = T.sigmoid(T.linear(h, p["gen.out.w"], p["gen.out.b"]))
    ctot = out.shape[1] // 2
    widths = [e.channels for e in channel_plan(cfg) if e.has_film]
    return FilmParams(T.slice_cols(out, 0, ctot), T.slice_cols(out, ctot, 2 * ctot), widths)


def unet_forward(model: FilmUNet, image: Tensor, metadata: Tensor, film_override: str | None = None) -> Tensor:
    """Run the FiLMed U-Net; output is a sigmoid map in (0,1) of input size.

    ``film_override="identity"`` forces gamma=1, beta=0 at every modulation
    point (the plain-U-Net behaviour) regardless of the generator.
    """
    cfg = model.config
    if image.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise ValueError(f"image shape {image.shape} does not match in_channels={cfg.in_channels}")
    n, _, h_img, w_img = image.shape
    mult = 2 ** cfg.depth
    if h_img % mult or w_img % mult:
        raise ValueError(f"spatial size {(h_img, w_img)} must be a multiple of {mult} for depth {cfg.depth}")
    if film_override not in (None, "identity"):
        raise ValueError(f"unknown film_override {film_override!r}")

    use_generator = cfg.film_enabled and film_override is None
    film = film_generator_forward(metadata, model) if use_generator else None

    p = model.params
    point = 0

    def unit(x: Tensor, name: str) -> Tensor:
        nonlocal point
        x = T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], padding=CONV_KERNEL // 2)
        x = T.relu(x)
        if film is not None:
            gamma, beta = film.layer(point)
        else:
            c = x.shape[1]
            gamma, beta = Tensor(np.ones((n, c))), Tensor(np.zeros((n, c)))
        point += 1
        return T.per_channel_affine(x, gamma, beta)

    x = image
    skips = []
    for i in range(cfg.depth):
        x = unit(x, f"enc{i}.conv1")
        x = unit(x, f"enc{i}.conv2")
        skips.append(x)
        x = T.maxpool2d(x, 2)
    x = unit(x, "bot.conv1")
    x = unit(x, "bot.conv2")
    for i in reversed(range(cfg.depth)):
        x = T.conv_transpose2d(x, p[f"dec{i}.up.w"], stride=2)
        x = T.concat_channels(x, skips[i])
        x = unit(x, f"dec{i}.conv1")
        x = unit(x, f"dec{i}.conv2")
    x = T.conv2d(x, p["head.w"], p["head.b"])
    return T.sigmoid(x)


# ---------------------------------------------------------------------------
# Checkpoint container: magic, config text block, then named raw tensors.


def _config_text(config: ModelConfig) -> str:
    return (
        f"depth={config.depth}\n"
        f"in_channels={config.in_channels}\n"
        f"base_filters={config.base_filters}\n"
        f"n_metadata_classes={config.n_metadata_classes}\n"
        f"film_enabled={int(config.film_enabled)}\n"
        f"generator_hidden={config.generator_hidden[0]},{config.generator_hidden[1]}\n"
    )


def _config_from_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.strip().splitlines():
        key, _, value = line.partition("=")
        kv[key] = value
    gh = tuple(int(v) for v in kv["generator_hidden"].split(","))
    return ModelConfig(
        depth=int(kv["depth"]),
        in_channels=int(kv["in_channels"]),
        base_filters=int(kv["base_filters"]),
        n_metadata_classes=int(kv["n_metadata_classes"]),
        film_enabled=bool(int(kv["film_enabled"])),
        generator_hidden=gh,  # type: ignore[arg-type]
    )


def save_checkpoint(model: FilmUNet, path):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        cfg = _config_text(model.config).encode()
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> FilmUNet:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    off = 8

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = raw[off:off + n]
        off += n
        return chunk

    (cfg_len,) = struct.unpack("<I", take(4))
    config = _config_from_text(take(cfg_len).decode())
    (n_params,) = struct.unpack("<I", take(4))
    params: dict[str, Tensor] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        params[name] = Tensor(data.copy(), requires_grad=True)
    model = FilmUNet(config, params)
    if model.param_count() != expected_param_count(config):
        raise ValueError(f"{path}: parameter count does not match config")
    return model
