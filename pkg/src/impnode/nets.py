"""Implicit (sine-activated) and dynamics (residual ELU) networks.

Both networks keep their parameters as one flat float64 vector; the layer
matrices are recovered by slicing the flat vector on the tape, so the
gradient of a loss comes back as a single flat array too.

Layer conventions (row-vector inputs, ``h @ W + b``):

* ``implicit-sine``: ``depth`` sine layers ``sin(omega0 * (h @ W + b))``
  followed by a linear read-out.
* ``residual-elu``: linear lift ``x @ W + b`` to ``width``, then ``depth``
  blocks ``h <- h + elu(elu(h @ W1 + b1) @ W2 + b2)``, then a linear
  read-out.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DualTrajectory, Tape, Var, elu, forward_tangent, sin

IMPLICIT = "implicit-sine"
DYNAMICS = "residual-elu"


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    input_dim: int
    output_dim: int
    width: int
    depth: int
    omega0: float = 30.0

    def __post_init__(self):
        if self.kind not in (IMPLICIT, DYNAMICS):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input and output dims must be >= 1")
        if self.kind == IMPLICIT and self.input_dim != 1:
            raise ValueError("implicit network takes a scalar time input")

    def layers(self) -> list[tuple[str, tuple[int, int]]]:
        """(name, weight shape) for each affine layer, in evaluation order."""
        w = self.width
        if self.kind == IMPLICIT:
            out = [("sine0", (self.input_dim, w))]
            out += [(f"sine{i}", (w, w)) for i in range(1, self.depth)]
        else:
            out = [("lift", (self.input_dim, w))]
            for i in range(self.depth):
                out += [(f"block{i}a", (w, w)), (f"block{i}b", (w, w))]
        out.append(("readout", (w, self.output_dim)))
        return out

    def layout(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        """Offsets of every weight and bias inside the flat vector."""
        table = {}
        pos = 0
        for name, (fan_in, fan_out) in self.layers():
            table[name + ".W"] = (pos, (fan_in, fan_out))
            pos += fan_in * fan_out
            table[name + ".b"] = (pos, (fan_out,))
            pos += fan_out
        return table

    @property
    def size(self) -> int:
        return sum(i * o + o for _, (i, o) in self.layers())


@dataclass
class NetworkParams:
    spec: NetworkSpec
    flat: np.ndarray
    seed: int | None = None
    layout: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.size,):
            raise ValueError(f"expected {self.spec.size} parameters, got shape {self.flat.shape}")
        self.layout = self.spec.layout()

    def unflatten(self) -> dict[str, np.ndarray]:
        return {k: self.flat[o:o + int(np.prod(s))].reshape(s) for k, (o, s) in self.layout.items()}

    @classmethod
    def flatten(cls, spec: NetworkSpec, arrays: dict[str, np.ndarray], seed=None) -> "NetworkParams":
        layout = spec.layout()
        flat = np.empty(spec.size)
        for k, (o, s) in layout.items():
            flat[o:o + int(np.prod(s))] = np.asarray(arrays[k], dtype=np.float64).reshape(-1)
        return cls(spec, flat, seed)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, self.flat.copy(), self.seed)


def init(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Random initial parameters; biases start at zero."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for idx, (name, (fan_in, fan_out)) in enumerate(spec.layers()):
        if spec.kind == IMPLICIT:
            bound = 1.0 / fan_in if idx == 0 else np.sqrt(6.0 / fan_in) / spec.omega0
        else:
            bound = 1.0 / np.sqrt(fan_in)
        arrays[name + ".W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[name + ".b"] = np.zeros(fan_out)
    return NetworkParams.flatten(spec, arrays, seed)


def unpack(w: Var, spec: NetworkSpec) -> dict[str, Var]:
    """Slice a flat parameter variable into per-layer variables."""
    out = {}
    for k, (o, s) in spec.layout().items():
        piece = w[o:o + int(np.prod(s))]
        out[k] = piece.reshape(s) if len(s) > 1 else piece
    return out


def normalize_time(t, t_min: float, t_max: float) -> tuple[np.ndarray, float]:
    """Affine map of ``[t_min, t_max]`` onto ``[-1, 1]``.

    Returns the mapped times and the scale factor ``2 / (t_max - t_min)``,
    i.e. ``d(normalized)/d(physical)``.
    """
    if not t_max > t_min:
        raise ValueError(f"degenerate time domain [{t_min}, {t_max}]")
    scale = 2.0 / (t_max - t_min)
    return (np.asarray(t, dtype=np.float64) - t_min) * scale - 1.0, scale


def _implicit_body(layers: dict[str, Var], spec: NetworkSpec):
    def body(h: Var) -> Var:
        for i in range(spec.depth):
            h = sin((h @ layers[f"sine{i}.W"] + layers[f"sine{i}.b"]) * spec.omega0)
        return h @ layers["readout.W"] + layers["readout.b"]
    return body


def forward_implicit(w: Var, spec: NetworkSpec, t, scale: float = 1.0,
                     checked: bool = True) -> DualTrajectory:
    """Implicit-network states at normalized times ``t`` and their time derivatives.

    ``scale`` is the normalization factor from :func:`normalize_time`; the
    returned tangent is the derivative with respect to physical time.
    """
    tape = w.tape
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    if checked and np.any(np.abs(t) > 1.0 + 1e-9):
        raise ValueError("implicit network input must be normalized to [-1, 1]")
    layers = unpack(w, spec)
    tv = tape.constant(t)
    return forward_tangent(_implicit_body(layers, spec), tv, seed=scale)


def implicit_values(w: Var, spec: NetworkSpec, t) -> Var:
    """Implicit-network states only, without the tangent pass."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return _implicit_body(unpack(w, spec), spec)(w.tape.constant(t))


def forward_dynamics(w: Var, spec: NetworkSpec, x: Var, layers: dict[str, Var] | None = None) -> Var:
    """Residual ELU vector field evaluated on a batch of states ``x``."""
    if x.value.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"dynamics input must have shape (batch, {spec.input_dim}), got {x.shape}")
    if layers is None:
        layers = unpack(w, spec)
    h = x @ layers["lift.W"] + layers["lift.b"]
    for i in range(spec.depth):
        inner = elu(h @ layers[f"block{i}a.W"] + layers[f"block{i}a.b"])
        h = h + elu(inner @ layers[f"block{i}b.W"] + layers[f"block{i}b.b"])
    return h @ layers["readout.W"] + layers["readout.b"]


def dynamics_field(w: Var, spec: NetworkSpec):
    """A field callable ``x -> f(x)`` with the parameter slices cached once."""
    layers = unpack(w, spec)
    return lambda x: forward_dynamics(w, spec, x, layers)


def evaluate_dynamics(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Plain numpy evaluation on a throwaway tape."""
    tape = Tape()
    w = tape.constant(params.flat)
    return forward_dynamics(w, params.spec, tape.constant(np.atleast_2d(x))).value


def evaluate_implicit(params: NetworkParams, t_norm: np.ndarray, scale: float = 1.0):
    tape = Tape()
    w = tape.constant(params.flat)
    dual = forward_implicit(w, params.spec, t_norm, scale)
    return dual.value.value, dual.tangent.value


# ---------------------------------------------------------------------------
# checkpoints
#
# Text format, one value per line after a three-line header:
#   # impnode-params v1
#   # kind=<kind> input_dim=<n> output_dim=<n> width=<n> depth=<n> omega0=<x> seed=<n|none>
#   # count=<n>
# Values are written with 17 significant digits, which round-trips float64.

def save_params(params: NetworkParams, path) -> None:
    s = params.spec
    header = (
        "# impnode-params v1\n"
        f"# kind={s.kind} input_dim={s.input_dim} output_dim={s.output_dim} "
        f"width={s.width} depth={s.depth} omega0={s.omega0!r} seed={params.seed if params.seed is not None else 'none'}\n"
        f"# count={s.size}\n"
    )
    body = "".join(f"{v:.17g}\n" for v in params.flat)
    Path(path).write_text(header + body, encoding="utf-8")


def load_params(path) -> NetworkParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "# impnode-params v1":
        raise ValueError(f"{path}: not an impnode parameter file")
    fields = dict(item.split("=", 1) for item in lines[1][1:].split())
    count = int(lines[2].split("=", 1)[1])
    spec = NetworkSpec(
        kind=fields["kind"],
        input_dim=int(fields["input_dim"]),
        output_dim=int(fields["output_dim"]),
        width=int(fields["width"]),
        depth=int(fields["depth"]),
        omega0=float(fields["omega0"]),
    )
    flat = np.array([float(v) for v in lines[3:3 + count]])
    seed = None if fields["seed"] == "none" else int(fields["seed"])
    return NetworkParams(spec, flat, seed)
