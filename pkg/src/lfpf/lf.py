"""Learning Flock module: a set-level additive correction to particles and weights.

Each of the J flock-update blocks splits every particle into its t
sub-particles ``[x_ji, N*w_i]``. It embeds them with shared networks and
mixes the N embeddings of each sub-state with self-attention. A final FC
stack then emits a ``d_sp + 1`` correction per sub-particle. The sub-state
corrections are concatenated and their weight scalars averaged. When J > 1 the
last block also pools its embeddings per sub-state into a baseline head. The
head's output is added to every particle, so it shifts the whole flock.

Nothing in the parameter shapes depends on N or t.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import diff
from .diff import Tensor
from .pf import ParticleSet

CKPT_VERSION = "lf-ckpt-v1"


@dataclass(frozen=True)
class LfHyperparams:
    P: int = 64  # embedding width
    J: int = 2  # parallel flock-update blocks
    S: int = 2  # attention blocks per flock-update block
    E: int = 1  # sub-embeddings (2 adds the secondary embedding)
    B: int = 2  # FC width multiplier
    slope: float = 0.01  # leaky-ReLU slope
    scale: float = 1.0  # particle coordinates are divided by this on input
    per_substate_weights: bool = False

    def __post_init__(self):
        for name in ("P", "J", "S", "B"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.E not in (1, 2):
            raise ValueError("E must be 1 or 2")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def _stack_widths(hyper: LfHyperparams, d_sp: int) -> dict[str, list[int]]:
    P, BP = hyper.P, hyper.B * hyper.P
    return {
        "emb": [d_sp + 1, BP, BP, BP, BP, P],
        "fc": [P, BP, BP, BP, P],
        "final": [P, BP, BP, d_sp + 1],
    }


def parameter_count(hyper: LfHyperparams, d_sp: int) -> int:
    """Closed-form number of trainable scalars."""
    P, BP, J, S, E = hyper.P, hyper.B * hyper.P, hyper.J, hyper.S, hyper.E
    emb = (d_sp + 2) * BP + 3 * (BP + 1) * BP + (BP + 1) * P
    sa = 4 * (P + 1) * P
    fc = (P + 1) * BP + 2 * (BP + 1) * BP + (BP + 1) * P
    final = (P + 1) * BP + (BP + 1) * BP + (BP + 1) * (d_sp + 1)
    block = E * emb + S * (sa + fc) + final
    return J * block + (final if J > 1 else 0)


def fpm_count(hyper: LfHyperparams, d_sp: int, t: int, N: int) -> dict[str, float]:
    """Floating-point multiplications per particle per iteration, split by stage."""
    P, B, J, S, E = hyper.P, hyper.B, hyper.J, hyper.S, hyper.E
    emb = J * E * t * B * P * (P + d_sp + 3 * B * P)
    sa = J * S * t * 2 * P ** 2 * (2 + N / P + B + B ** 2)
    final = t * B * P * (B * P + d_sp)
    return {"emb": emb, "sa": sa, "final": final, "total": emb + sa + final}


class LfModule:
    """Trainable correction ``f_theta`` with named float64 parameter tensors."""

    def __init__(self, hyper: LfHyperparams, d_sp: int, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        self.hyper = hyper
        self.d_sp = d_sp
        self.metadata: dict = {}
        self.params = self._init(rng or np.random.default_rng(0)) if params is None else params
        expected = parameter_count(hyper, d_sp)
        got = self.n_parameters()
        assert got == expected, f"parameter count {got} != closed form {expected}"

    # construction -------------------------------------------------------
    def _init(self, rng: np.random.Generator) -> dict[str, Tensor]:
        h = self.hyper
        widths = _stack_widths(h, self.d_sp)
        params: dict[str, Tensor] = {}

        def dense(prefix, dims, zero_last=False):
            for layer, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
                last = layer == len(dims) - 2
                if zero_last and last:
                    W = np.zeros((i, o))
                else:
                    bound = 1.0 / np.sqrt(i)
                    W = rng.uniform(-bound, bound, size=(i, o))
                params[f"{prefix}.{layer}.W"] = Tensor(W, requires_grad=True)
                params[f"{prefix}.{layer}.b"] = Tensor(np.zeros(o), requires_grad=True)

        for j in range(h.J):
            dense(f"b{j}.emb1", widths["emb"])
            if h.E == 2:
                dense(f"b{j}.emb2", widths["emb"])
            for s in range(h.S):
                for proj in "qkvo":
                    dense(f"b{j}.sa{s}.{proj}", [h.P, h.P])
                dense(f"b{j}.fc{s}", widths["fc"])
            dense(f"b{j}.final", widths["final"], zero_last=True)
        if h.J > 1:
            dense(f"b{h.J - 1}.base", widths["final"], zero_last=True)
        return params

    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def zero_final_layers(self) -> None:
        for name, p in self.params.items():
            if (".final." in name or ".base." in name) and name.split(".")[2] == str(self._last_layer()):
                p.value[...] = 0.0

    def _last_layer(self) -> int:
        return len(_stack_widths(self.hyper, self.d_sp)["final"]) - 2

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def validate(self, n: int, t: int, d_sp: int) -> None:
        if n < 1 or t < 1:
            raise ValueError("need N >= 1 and t >= 1")
        if d_sp != self.d_sp:
            raise ValueError(f"module built for d_sp={self.d_sp}, got {d_sp}")

    # forward ------------------------------------------------------------
    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        layer = 0
        while f"{prefix}.{layer}.W" in self.params:
            if layer > 0:
                x = diff.leaky_relu(x, self.hyper.slope)
            x = diff.affine(x, self.params[f"{prefix}.{layer}.W"], self.params[f"{prefix}.{layer}.b"])
            layer += 1
        return x

    def forward(self, particles, weights) -> tuple[Tensor, Tensor]:
        """Correction ``(dx, dw)`` for particles ``(..., N, t, d_sp)`` and weights ``(..., N)``.

        With ``per_substate_weights`` the weights (and ``dw``) are ``(..., N, t)``.
        """
        dx_total = dw_total = None
        for part in self.forward_parts(particles, weights):
            dx, dw = part["dx"], part["dw"]
            if "base_dx" in part:
                dx = dx + part["base_dx"]
                dw = dw + part["base_dw"]
            dx_total = dx if dx_total is None else dx_total + dx
            dw_total = dw if dw_total is None else dw_total + dw
        return dx_total, dw_total

    def forward_parts(self, particles, weights) -> list[dict[str, Tensor]]:
        """Per-block outputs; the last block (J > 1) also carries its baseline head.

        ``base_dx`` has a singleton particle axis ``(..., 1, t, d_sp)`` and is
        broadcast onto every particle by :meth:`forward`.
        """
        h = self.hyper
        x, w = diff.as_tensor(particles), diff.as_tensor(weights)
        *_, n, t, d = x.shape
        self.validate(n, t, d)
        if h.per_substate_weights:
            if w.shape != x.shape[:-1]:
                raise ValueError(f"weights must be {x.shape[:-1]}, got {w.shape}")
            w_in = (w * float(n)).reshape(w.shape + (1,))
        else:
            if w.shape != x.shape[:-2]:
                raise ValueError(f"weights must be {x.shape[:-2]}, got {w.shape}")
            w_in = diff.broadcast_to((w * float(n)).reshape(w.shape + (1, 1)), x.shape[:-1] + (1,))
        inp = diff.concat([x * (1.0 / h.scale), w_in], axis=-1)  # (..., N, t, d+1)

        parts = []
        for j in range(h.J):
            emb = self._mlp(f"b{j}.emb1", inp)
            if h.E == 2 and t > 1:
                sec = self._mlp(f"b{j}.emb2", inp)
                others = (sec.sum(axis=-2, keepdims=True) - sec) * (1.0 / (t - 1))
                emb = emb + others
            hid = emb.swapaxes(-2, -3)  # (..., t, N, P): attention runs over N per sub-state
            for s in range(h.S):
                q = self._mlp(f"b{j}.sa{s}.q", hid)
                k = self._mlp(f"b{j}.sa{s}.k", hid)
                v = self._mlp(f"b{j}.sa{s}.v", hid)
                hid = hid + self._mlp(f"b{j}.sa{s}.o", diff.softmax_attention(q, k, v))
                hid = hid + self._mlp(f"b{j}.fc{s}", hid)
            out = self._mlp(f"b{j}.final", hid).swapaxes(-2, -3)  # (..., N, t, d+1)
            dx, dw = self._split(out, n)
            part = {"dx": dx, "dw": dw}
            if j == h.J - 1 and h.J > 1:
                base = self._mlp(f"b{j}.base", hid.mean(axis=-2))  # (..., t, d+1)
                part["base_dx"], part["base_dw"] = self._split(
                    base.reshape(base.shape[:-2] + (1,) + base.shape[-2:]), n)
            parts.append(part)
        return parts

    def _split(self, out: Tensor, n: int) -> tuple[Tensor, Tensor]:
        d = self.d_sp
        dx = out[..., :d] * self.hyper.scale
        dw = out[..., d] * (1.0 / n)
        if not self.hyper.per_substate_weights:
            dw = dw.mean(axis=-1)
        return dx, dw

    def correction(self, pset: ParticleSet) -> np.ndarray:
        """Flat correction matrix ``(N, t*d_sp + 1)``: particle part then weight part."""
        dx, dw = self.forward(pset.particles, pset.weights)
        return np.concatenate([dx.value.reshape(pset.n, -1), dw.value[:, None]], axis=1)

    def apply(self, pset: ParticleSet) -> ParticleSet:
        """``{x, w} + f_theta({x, w})``; the result is left unnormalized."""
        dx, dw = self.forward(pset.particles, pset.weights)
        return ParticleSet(pset.particles + dx.value, pset.weights + dw.value, False)

    # checkpoints --------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "format": CKPT_VERSION,
            "hyperparams": asdict(self.hyper),
            "d_sp": self.d_sp,
            "metadata": self.metadata,
            "params": [{"name": k, "shape": list(p.shape), "values": p.value.ravel().tolist()}
                       for k, p in self.params.items()],
        }

    @classmethod
    def from_json(cls, d: dict) -> "LfModule":
        if d.get("format") != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
        params = {e["name"]: Tensor(np.array(e["values"], dtype=np.float64).reshape(e["shape"]),
                                    requires_grad=True)
                  for e in d["params"]}
        mod = cls(LfHyperparams(**d["hyperparams"]), int(d["d_sp"]), params=params)
        mod.metadata = dict(d.get("metadata", {}))
        return mod

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "LfModule":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def copy(self) -> "LfModule":
        params = {k: Tensor(p.value.copy(), requires_grad=True) for k, p in self.params.items()}
        mod = LfModule(self.hyper, self.d_sp, params=params)
        mod.metadata = dict(self.metadata)
        return mod


def lf_forward(module: LfModule, pset: ParticleSet) -> np.ndarray:
    if not pset.normalized:
        raise ValueError("lf_forward needs a normalized set")
    return module.correction(pset)


def lf_apply(module: LfModule, pset: ParticleSet) -> ParticleSet:
    return module.apply(pset)
