"""Network architectures, latent priors and the NFA1 checkpoint format.

All layers use the row convention ``y = x @ W + b`` so a batch of
coordinates is an (n, d) matrix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

CHECKPOINT_MAGIC = b"NFA1"


class CheckpointError(ValueError):
    pass


@dataclass
class LatentPrior:
    """Per-subject conditioning vector, held as a differentiable tensor."""

    values: Tensor
    subject_id: str = ""

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values, requires_grad=True)
        if self.values.ndim != 1 or self.values.shape[0] < 1:
            raise ValueError(f"latent prior must be a non-empty vector, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values.data)):
            raise ValueError("latent prior has non-finite entries")

    def __len__(self):
        return self.values.shape[0]

    @property
    def array(self):
        return self.values.data

    def row(self):
        return self.values.reshape(1, len(self))

    def copy(self):
        return LatentPrior(Tensor(self.values.data.copy(), requires_grad=True), self.subject_id)


def init_latent_interp(L=128, rng=None, sigma=0.01, subject_id="", dtype=np.float32):
    if L <= 0:
        raise ValueError(f"latent length must be positive, got {L}")
    rng = np.random.default_rng(rng)
    return LatentPrior(Tensor(rng.normal(0.0, sigma, L).astype(dtype), requires_grad=True), subject_id)


def init_latent_reg(L=128, rng=None, sigma=0.1, subject_id="", dtype=np.float32):
    """Split prior: scale half ~ N(1, sigma), shift half ~ N(0, sigma)."""
    if L <= 0 or L % 2:
        raise ValueError(f"registration prior length must be positive and even, got {L}")
    rng = np.random.default_rng(rng)
    half = L // 2
    v = np.concatenate([rng.normal(1.0, sigma, half), rng.normal(0.0, sigma, half)])
    return LatentPrior(Tensor(v.astype(dtype), requires_grad=True), subject_id)


def siren_bound(fan_in, omega0, first=False):
    return 1.0 / fan_in if first else np.sqrt(6.0 / fan_in) / omega0


def siren_init(fan_in, fan_out, omega0=30.0, rng=None, first=False, dtype=np.float32):
    """Uniform SIREN weights of shape (fan_in, fan_out)."""
    rng = np.random.default_rng(rng)
    bound = siren_bound(fan_in, omega0, first)
    return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)


def modulated_layer(x, W, b, phi, psi, act=dm.sin):
    """``act(phi * (x @ W + b) + psi)``; phi/psi broadcast over rows."""
    a = x @ W + b
    if a.shape[-1] != phi.shape[-1] or a.shape[-1] != psi.shape[-1]:
        raise dm.ShapeError(f"modulated_layer: pre-activation width {a.shape[-1]} vs "
                            f"phi {phi.shape} / psi {psi.shape}")
    return act(phi * a + psi)


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {name}")


class Model:
    """Ordered parameter container shared by all architectures."""

    arch = "model"

    def __init__(self, config):
        self.config = dict(config)
        self.params: dict[str, Tensor] = {}
        self.dtype = np.dtype(self.config.get("dtype", "float32"))

    def _add(self, name, array):
        self.params[name] = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True, name=name)

    def _const(self, array):
        return Tensor(np.asarray(array, dtype=self.dtype))

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def checksum(self):
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state):
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise CheckpointError(f"parameter {k}: shape {state[k].shape} != {p.shape}")
            p.data = np.asarray(state[k], dtype=self.dtype).copy()

    def freeze(self, frozen=True):
        for p in self.params.values():
            p.requires_grad = not frozen


class InterpNet(Model):
    """Residual complex-Gabor MLP with recon and segmentation heads.

    Every hidden layer sees the previous hidden state plus a fresh copy of
    (coordinates, en-face intensity, latent prior). Hidden states are
    complex, stored as [real | imag] halves of one (n, 2H) matrix; both
    heads read the real half.
    """

    arch = "interp-net"

    def __init__(self, n_classes, latent_dim=128, hidden=128, n_layers=6, omega0=20.0, s0=10.0,
                 use_enface=True, seed=0, dtype="float32"):
        super().__init__(dict(n_classes=n_classes, latent_dim=latent_dim, hidden=hidden,
                              n_layers=n_layers, omega0=omega0, s0=s0, use_enface=use_enface,
                              seed=seed, dtype=dtype))
        self.n_classes, self.L, self.H, self.n_layers = n_classes, latent_dim, hidden, n_layers
        self.omega0, self.s0, self.use_enface = omega0, s0, use_enface
        rng = np.random.default_rng(seed)
        H, n_in = hidden, 4
        for k in range(n_layers):
            fan = n_in + latent_dim + (0 if k == 0 else H)
            bx = 1.0 / np.sqrt(fan) if k == 0 else np.sqrt(6.0 / fan) / omega0
            self._add(f"layer{k}.wx", rng.uniform(-bx, bx, (n_in, 2 * H)))
            self._add(f"layer{k}.wp", rng.uniform(-bx, bx, (latent_dim, 2 * H)))
            self._add(f"layer{k}.b", rng.uniform(-bx, bx, (2 * H,)) * 0.1)
            if k > 0:
                self._add(f"layer{k}.wh_re", rng.uniform(-bx, bx, (H, H)))
                self._add(f"layer{k}.wh_im", rng.uniform(-bx, bx, (H, H)))
        # the residual sum of Gabor outputs is O(1) per unit with a positive
        # mean; a small recon head keeps the sigmoid unsaturated
        bh = np.sqrt(6.0 / H)
        self._add("recon.w", rng.uniform(-bh, bh, (H, 1)) / omega0)
        self._add("recon.b", np.zeros(1))
        self._add("seg.w", rng.uniform(-bh, bh, (H, n_classes)))
        self._add("seg.b", np.zeros(n_classes))

    def features(self, coords, ef, prior: LatentPrior):
        coords = np.asarray(coords, dtype=self.dtype)
        ef = np.asarray(ef, dtype=self.dtype).reshape(-1, 1)
        _check_finite("coords", coords)
        _check_finite("en-face input", ef)
        if len(prior) != self.L:
            raise dm.ShapeError(f"interp-net: prior length {len(prior)} != {self.L}")
        if not self.use_enface:
            ef = np.full_like(ef, 0.5)
        x = self._const(np.concatenate([coords, ef], axis=1))
        p = prior.row()
        P, H = self.params, self.H
        h = None
        for k in range(self.n_layers):
            z = x @ P[f"layer{k}.wx"] + (p @ P[f"layer{k}.wp"] + P[f"layer{k}.b"])
            if k > 0:
                z = z + dm.complex_matmul_stacked(h, P[f"layer{k}.wh_re"], P[f"layer{k}.wh_im"])
            g = dm.gabor_stacked(z, self.omega0, self.s0)
            h = g if h is None else h + g
        return h[:, :H]

    def forward(self, coords, ef, prior: LatentPrior):
        """Return (intensity (n,), class probabilities (n, C)) as tensors."""
        f = self.features(coords, ef, prior)
        P = self.params
        recon = dm.sigmoid(f @ P["recon.w"] + P["recon.b"])
        seg = dm.softmax(f @ P["seg.w"] + P["seg.b"], axis=1)
        return recon.reshape(-1), seg


class SirenNet(Model):
    """Sine MLP with sigmoid intensity head and softmax class head."""

    arch = "siren-net"

    def __init__(self, n_classes, in_dim=3, hidden=256, n_layers=4, omega0=30.0, seed=0,
                 dtype="float32"):
        super().__init__(dict(n_classes=n_classes, in_dim=in_dim, hidden=hidden,
                              n_layers=n_layers, omega0=omega0, seed=seed, dtype=dtype))
        self.n_classes, self.in_dim, self.H, self.n_layers, self.omega0 = (
            n_classes, in_dim, hidden, n_layers, omega0)
        rng = np.random.default_rng(seed)
        fan = in_dim
        for k in range(n_layers):
            self._add(f"l{k}.w", siren_init(fan, hidden, omega0, rng, first=(k == 0), dtype=self.dtype))
            bb = 1.0 / np.sqrt(fan)
            self._add(f"l{k}.b", rng.uniform(-bb, bb, hidden))
            fan = hidden
        bh = np.sqrt(6.0 / hidden)
        self._add("recon.w", rng.uniform(-bh, bh, (hidden, 1)))
        self._add("recon.b", np.zeros(1))
        self._add("seg.w", rng.uniform(-bh, bh, (hidden, n_classes)))
        self._add("seg.b", np.zeros(n_classes))

    def features(self, x):
        x = x if isinstance(x, Tensor) else self._const(x)
        P = self.params
        h = x
        for k in range(self.n_layers):
            h = dm.sin(self.omega0 * (h @ P[f"l{k}.w"] + P[f"l{k}.b"]))
        return h

    def forward(self, x):
        h = self.features(x)
        P = self.params
        recon = dm.sigmoid(h @ P["recon.w"] + P["recon.b"])
        seg = dm.softmax(h @ P["seg.w"] + P["seg.b"], axis=1)
        return recon.reshape(-1), seg


class AtlasNet(SirenNet):
    """Implicit atlas: warped coordinate -> (intensity, class probabilities)."""

    arch = "atlas-net"

    def __init__(self, n_classes, hidden=256, n_layers=4, omega0=30.0, seed=0, dtype="float32", in_dim=3):
        if in_dim != 3:
            raise ValueError("the atlas takes 3D coordinates")
        super().__init__(n_classes, in_dim=3, hidden=hidden, n_layers=n_layers, omega0=omega0,
                         seed=seed, dtype=dtype)


class SingleINR(SirenNet):
    """Instance-specific baseline: three sine layers of width 512 by default."""

    arch = "single-inr"

    def __init__(self, n_classes, in_dim=3, hidden=512, n_layers=3, omega0=30.0, seed=0,
                 dtype="float32"):
        super().__init__(n_classes, in_dim=in_dim, hidden=hidden, n_layers=n_layers,
                         omega0=omega0, seed=seed, dtype=dtype)


class DisplacementNet(Model):
    """Sine MLP mapping coordinates to a bounded 3-vector displacement.

    Hidden-to-hidden layers are modulated by scale/shift vectors that one
    linear hypernetwork layer per modulated layer predicts from the
    subject's latent prior.
    """

    arch = "displacement-net"

    def __init__(self, latent_dim=128, hidden=128, n_layers=4, omega0=30.0, final_omega=30.0,
                 max_disp=0.2, init_range=1e-3, seed=0, dtype="float32"):
        if latent_dim % 2:
            raise ValueError("latent_dim must be even (scale/shift halves)")
        super().__init__(dict(latent_dim=latent_dim, hidden=hidden, n_layers=n_layers,
                              omega0=omega0, final_omega=final_omega, max_disp=max_disp,
                              init_range=init_range, seed=seed, dtype=dtype))
        self.L, self.H, self.n_layers = latent_dim, hidden, n_layers
        self.omega0, self.final_omega, self.max_disp = omega0, final_omega, max_disp
        rng = np.random.default_rng(seed)
        r = init_range

        def u(*shape):
            return rng.uniform(-r, r, shape)

        H, L = hidden, latent_dim
        self._add("l0.w", u(3, H))
        self._add("l0.b", u(H))
        for k in range(1, n_layers):
            self._add(f"l{k}.w", u(H, H))
            self._add(f"l{k}.b", u(H))
        self._add("out.w", u(H, 3))
        self._add("out.b", u(3))
        half = L // 2
        for k in range(1, n_layers):
            # block-diagonal hypernetwork: the first prior half predicts the
            # scales, the second half the shifts; scale weights start as a
            # mean so a prior drawn around (1, 0) gives phi ~ 1, psi ~ 0
            self._add(f"hyper{k}.w_scale", u(half, H) + 1.0 / half)
            self._add(f"hyper{k}.b_scale", u(H))
            self._add(f"hyper{k}.w_shift", u(half, H))
            self._add(f"hyper{k}.b_shift", u(H))

    @property
    def n_modulated(self):
        return self.n_layers - 1

    def modulations(self, prior: LatentPrior):
        """List of (phi, psi) row tensors, one per modulated layer."""
        if len(prior) != self.L:
            raise dm.ShapeError(f"displacement-net: prior length {len(prior)} != {self.L}")
        p = prior.row()
        half = self.L // 2
        p_scale, p_shift = p[:, :half], p[:, half:]
        out = []
        for k in range(1, self.n_layers):
            P = self.params
            phi = p_scale @ P[f"hyper{k}.w_scale"] + P[f"hyper{k}.b_scale"]
            psi = p_shift @ P[f"hyper{k}.w_shift"] + P[f"hyper{k}.b_shift"]
            out.append((phi, psi))
        return out

    def forward(self, coords, prior: LatentPrior | None = None, modulations=None, modulate=True):
        """Displacement u (n, 3) at ``coords``.

        ``modulations`` overrides the hypernetwork output; ``modulate=False``
        runs the plain network.
        """
        c = coords if isinstance(coords, Tensor) else self._const(coords)
        _check_finite("coords", c.data)
        P = self.params
        if modulate and modulations is None:
            modulations = self.modulations(prior)
        h = dm.sin(self.omega0 * (c @ P["l0.w"] + P["l0.b"]))
        for k in range(1, self.n_layers):
            if modulate:
                phi, psi = modulations[k - 1]
                h = modulated_layer(h, P[f"l{k}.w"], P[f"l{k}.b"], phi, psi,
                                    act=lambda a: dm.sin(self.omega0 * a))
            else:
                h = dm.sin(self.omega0 * (h @ P[f"l{k}.w"] + P[f"l{k}.b"]))
        return self.max_disp * dm.sin(self.final_omega * (h @ P["out.w"] + P["out.b"]))

    def warp(self, coords, prior, **kw):
        """Warped coordinates c + u(c)."""
        c = coords if isinstance(coords, Tensor) else self._const(coords)
        return c + self.forward(c, prior, **kw)


ARCHITECTURES = {cls.arch: cls for cls in (InterpNet, SirenNet, AtlasNet, SingleINR, DisplacementNet)}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, priors=(), meta=None):
    """Write magic line, JSON header line, then float32 little-endian payload."""
    entries = [[name, list(p.shape)] for name, p in model.params.items()]
    prior_entries = [[pr.subject_id, len(pr)] for pr in priors]
    header = {"arch": model.arch, "config": model.config, "params": entries,
              "priors": prior_entries, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        for pr in priors:
            fh.write(np.ascontiguousarray(pr.array, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return (model, priors, meta)."""
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    if first < 0 or raw[:first] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an NFA1 checkpoint")
    second = raw.find(b"\n", first + 1)
    if second < 0:
        raise CheckpointError(f"{path}: missing header")
    try:
        header = json.loads(raw[first + 1:second])
    except json.JSONDecodeError:
        raise CheckpointError(f"{path}: corrupt header") from None
    cls = ARCHITECTURES.get(header.get("arch"))
    if cls is None:
        raise CheckpointError(f"{path}: unknown architecture {header.get('arch')!r}")
    model = cls(**header["config"])
    payload = np.frombuffer(raw[second + 1:], dtype="<f4")
    need = sum(int(np.prod(s)) for _, s in header["params"]) + sum(n for _, n in header["priors"])
    if payload.size != need:
        raise CheckpointError(f"{path}: payload holds {payload.size} floats, header declares {need}")
    off = 0
    state = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        state[name] = payload[off:off + n].reshape(shape)
        off += n
    model.load_state(state)
    priors = []
    for sid, n in header["priors"]:
        vals = payload[off:off + n].astype(model.dtype)
        priors.append(LatentPrior(Tensor(vals.copy(), requires_grad=True), sid))
        off += n
    return model, priors, header.get("meta", {})
