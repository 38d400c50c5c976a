"""Feature backbones behind a small identifier-string registry.

An identifier is "scheme:arg:arg". Two schemes ship built in:

* ``seeded-projection:<dim>[:<seed>]`` needs no checkpoint and is fully
  deterministic, so exports are reproducible byte for byte on any machine.
* ``torchvision:<model>`` loads a pretrained torchvision model (the
  recommended real-data choice is a ViT-B/16 checkpoint pretrained on
  ImageNet-21K); it needs torch, torchvision, and downloadable weights.

A backbone exposes ``identifier`` (canonical string recorded in the mapping
file), ``dim``, and ``embed(batch) -> (b, dim) float32`` where ``batch`` is
``(b, s, s, 3)`` float32 in [0, 1].
"""

import numpy as np

from .errors import BackboneError

DEFAULT_BACKBONE = "seeded-projection:64"

_REGISTRY = {}


def register_backbone(scheme, factory):
    """Plug in a new scheme: factory(arg_strings) -> backbone."""
    _REGISTRY[str(scheme)] = factory


class SeededProjectionBackbone:
    """Offline stand-in for a pretrained extractor.

    Average-pools each channel onto a 16x16 grid and projects the 768 pooled
    values through a seeded Gaussian map, then unit-normalizes. Carries no
    learned knowledge; it exists so pipelines run without any checkpoint.
    """

    GRID = 16

    def __init__(self, dim, seed=0):
        dim = int(dim)
        if dim < 1:
            raise BackboneError(f"projection dim must be >= 1, got {dim}")
        self.dim = dim
        self.seed = int(seed)
        self.identifier = f"seeded-projection:{dim}:{self.seed}"
        rng = np.random.default_rng([0x5EED, dim, self.seed])
        n_in = 3 * self.GRID * self.GRID
        self._w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, dim))

    def _pool(self, batch):
        b, s, _, _ = batch.shape
        g = self.GRID
        if s < g:
            raise BackboneError(f"images must be at least {g}x{g}, got {s}x{s}")
        trim = (s // g) * g
        lo = (s - trim) // 2
        x = batch[:, lo : lo + trim, lo : lo + trim, :]
        x = x.reshape(b, g, trim // g, g, trim // g, 3).mean(axis=(2, 4))
        return x.reshape(b, -1)

    def embed(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 4 or batch.shape[1] != batch.shape[2] or batch.shape[3] != 3:
            raise BackboneError(f"expected (b, s, s, 3) images, got {batch.shape}")
        out = self._pool(batch) @ self._w
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        out = out / np.where(norms == 0.0, 1.0, norms)
        return out.astype(np.float32)


class TorchvisionBackbone:
    """Pretrained torchvision ViT with its classification head removed."""

    # channelwise statistics the published checkpoints were trained with
    MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
    STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

    def __init__(self, name):
        try:
            import torch
            import torchvision.models as models
        except ImportError as exc:
            raise BackboneError(
                f"backbone 'torchvision:{name}' needs torch and torchvision"
            ) from exc
        if not str(name).startswith("vit_"):
            raise BackboneError(
                f"unsupported torchvision family {name!r}: only vit_* models "
                f"expose a clean feature head here"
            )
        try:
            model = models.get_model(name, weights="DEFAULT")
        except Exception as exc:
            raise BackboneError(
                f"could not load pretrained weights for {name!r} "
                f"(offline, or unknown model): {exc}"
            ) from exc
        model.heads = torch.nn.Identity()
        model.eval()
        self._torch = torch
        self._model = model
        self.identifier = f"torchvision:{name}"
        self.dim = int(model.hidden_dim)

    def embed(self, batch):
        torch = self._torch
        x = (np.asarray(batch, dtype=np.float32) - self.MEAN) / self.STD
        with torch.no_grad():
            t = torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
            out = self._model(t).numpy()
        return out.astype(np.float32)


def make_backbone(identifier):
    parts = str(identifier).split(":")
    scheme, args = parts[0], parts[1:]
    try:
        if scheme == "seeded-projection":
            if len(args) > 2:
                raise BackboneError(f"too many arguments in {identifier!r}")
            return SeededProjectionBackbone(*(int(a) for a in args)) if args else (
                SeededProjectionBackbone(64)
            )
        if scheme == "torchvision":
            if len(args) != 1:
                raise BackboneError(f"expected torchvision:<model>, got {identifier!r}")
            return TorchvisionBackbone(args[0])
        if scheme in _REGISTRY:
            return _REGISTRY[scheme](args)
    except ValueError as exc:
        if isinstance(exc, BackboneError):
            raise
        raise BackboneError(f"bad backbone identifier {identifier!r}: {exc}") from exc
    raise BackboneError(f"unknown backbone {identifier!r}")
