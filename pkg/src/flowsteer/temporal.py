"""Recurrent steering heads: a liquid time-constant NCP and an LSTM.

Both heads consume a sequence of 32-d feature vectors and emit one steering
value per timestep. The NCP output is the motor neuron's membrane potential;
the LSTM output is a dense projection of its hidden state.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, NumericError, Tensor
from .encoders import LATENT_DIM, uniform_param, zeros_param
from .rng import stream

UNITS = 19


def _inv_softplus(y):
    return np.log(np.expm1(y))


@dataclass
class NcpWiring:
    """Layered sparse wiring. Neurons are ordered inter, command, motor."""

    n_sensory: int
    n_inter: int
    n_command: int
    n_motor: int
    sensory_synapses: list = field(default_factory=list)  # (sensory, neuron, polarity)
    synapses: list = field(default_factory=list)  # (source, target, polarity)

    @property
    def units(self):
        return self.n_inter + self.n_command + self.n_motor

    @property
    def inter(self):
        return list(range(self.n_inter))

    @property
    def command(self):
        return list(range(self.n_inter, self.n_inter + self.n_command))

    @property
    def motor(self):
        return list(range(self.n_inter + self.n_command, self.units))

    def sensory_matrices(self):
        mask = np.zeros((self.n_sensory, self.units))
        erev = np.zeros((self.n_sensory, self.units))
        for s, t, pol in self.sensory_synapses:
            mask[s, t] = 1.0
            erev[s, t] = pol
        return mask, erev

    def matrices(self):
        mask = np.zeros((self.units, self.units))
        erev = np.zeros((self.units, self.units))
        for s, t, pol in self.synapses:
            mask[s, t] = 1.0
            erev[s, t] = pol
        return mask, erev

    def reaches_motor(self, sensory):
        """Breadth-first search from one sensory input to any motor neuron."""
        out = {}
        for s, t, _ in self.synapses:
            out.setdefault(s, []).append(t)
        frontier = deque(t for s, t, _ in self.sensory_synapses if s == sensory)
        seen = set(frontier)
        motors = set(self.motor)
        while frontier:
            n = frontier.popleft()
            if n in motors:
                return True
            for t in out.get(n, ()):
                if t not in seen:
                    seen.add(t)
                    frontier.append(t)
        return False


def build_ncp_wiring(
    seed,
    n_sensory=LATENT_DIM,
    n_inter=12,
    n_command=6,
    n_motor=1,
    sensory_fanout=4,
    command_fanin=4,
    recurrent_fanout=2,
    motor_fanin=6,
):
    """Random layered NCP graph, a pure function of ``seed``.

    sensory -> inter (fan-out), inter -> command (fan-in), command -> command
    (recurrent fan-out), command -> motor (fan-in). Neurons left without an
    incoming synapse from the previous layer get one, and neurons left without
    an outgoing one get one, so every input has a path to the motor neuron.
    """
    checks = (
        ("sensory_fanout", sensory_fanout, n_inter),
        ("command_fanin", command_fanin, n_inter),
        ("recurrent_fanout", recurrent_fanout, n_command),
        ("motor_fanin", motor_fanin, n_command),
    )
    for name, val, limit in checks:
        if not 1 <= val <= limit:
            raise ValueError(f"infeasible {name}={val}: must lie in [1, {limit}]")
    rng = stream(seed, "ncp-wiring")
    w = NcpWiring(n_sensory, n_inter, n_command, n_motor)
    inter, command, motor = w.inter, w.command, w.motor

    def pol():
        return int(rng.choice([-1, 1, 1]))

    for s in range(n_sensory):
        for t in rng.choice(inter, size=sensory_fanout, replace=False):
            w.sensory_synapses.append((s, int(t), pol()))
    reached = {t for _, t, _ in w.sensory_synapses}
    for t in inter:
        if t not in reached:
            w.sensory_synapses.append((int(rng.integers(n_sensory)), t, pol()))

    def connect(sources, targets, fanin):
        edges = []
        for t in targets:
            for s in rng.choice(sources, size=fanin, replace=False):
                edges.append((int(s), t, pol()))
        used = {s for s, _, _ in edges}
        for s in sources:
            if s not in used:
                edges.append((s, int(rng.choice(targets)), pol()))
        return edges

    w.synapses += connect(inter, command, command_fanin)
    for s in command:
        for t in rng.choice(command, size=recurrent_fanout, replace=False):
            w.synapses.append((s, int(t), pol()))
    w.synapses += connect(command, motor, motor_fanin)
    return w


class LtcCell:
    """Liquid time-constant neurons over an NCP wiring.

    Positive quantities (conductances, capacitance, sigmoid gains) are stored
    as softplus pre-activations. Reversal potentials are the fixed synapse
    polarities (+1 excitatory, -1 inhibitory).
    """

    def __init__(self, wiring, rng, dt=1.0, unfolds=6):
        if dt <= 0 or unfolds < 1:
            raise ValueError("dt must be positive and unfolds >= 1")
        self.wiring = wiring
        self.dt = dt
        self.unfolds = unfolds
        n, s = wiring.units, wiring.n_sensory
        self.sensory_mask, self.sensory_erev = wiring.sensory_matrices()
        self.mask, self.erev = wiring.matrices()

        def raw(lo, hi, shape):
            return Tensor(_inv_softplus(rng.uniform(lo, hi, size=shape)), requires_grad=True)

        self.params = {
            "gleak": raw(0.001, 1.0, (n,)),
            "vleak": Tensor(rng.uniform(-0.2, 0.2, size=n), requires_grad=True),
            "cm": raw(0.4, 0.6, (n,)),
            "w": raw(0.001, 1.0, (n, n)),
            "gamma": raw(3.0, 8.0, (n, n)),
            "mu": Tensor(rng.uniform(0.3, 0.8, size=(n, n)), requires_grad=True),
            "sensory_w": raw(0.001, 1.0, (s, n)),
            "sensory_gamma": raw(3.0, 8.0, (s, n)),
            "sensory_mu": Tensor(rng.uniform(0.3, 0.8, size=(s, n)), requires_grad=True),
        }

    @property
    def output_index(self):
        return self.wiring.motor[0]

    def hull(self):
        """Per-neuron interval that the fused update can never leave."""
        vleak = self.params["vleak"].data
        lo = np.minimum(vleak, -1.0)
        hi = np.maximum(vleak, 1.0)
        return lo, hi

    def prepare(self, batch):
        """Constrained parameters broadcast to the batch, shared by all steps."""
        p = self.params
        n, s = self.wiring.units, self.wiring.n_sensory
        dtype = p["w"].dtype

        def const(a):
            return Tensor(a, dtype=dtype)

        def b(x, shape):
            return ad.broadcast_to(x, shape)

        syn = (batch, n, n)
        sens = (batch, s, n)
        w = ad.softplus(p["w"]) * const(self.mask)
        sw = ad.softplus(p["sensory_w"]) * const(self.sensory_mask)
        gl = ad.softplus(p["gleak"])
        cm = ad.softplus(p["cm"]) * (self.unfolds / self.dt)
        return {
            "w": b(w, syn),
            "werev": b(w * const(self.erev), syn),
            "gamma": b(ad.softplus(p["gamma"]), syn),
            "mu": b(p["mu"], syn),
            "sw": b(sw, sens),
            "swerev": b(sw * const(self.sensory_erev), sens),
            "sgamma": b(ad.softplus(p["sensory_gamma"]), sens),
            "smu": b(p["sensory_mu"], sens),
            "cm": b(cm, (batch, n)),
            "gl": b(gl, (batch, n)),
            "glvl": b(gl * p["vleak"], (batch, n)),
        }

    def initial_state(self, batch):
        return Tensor(np.zeros((batch, self.wiring.units)), dtype=self.params["w"].dtype)


def _presynaptic(v, gain, offset):
    n, k = v.shape
    spread = ad.broadcast_to(ad.reshape(v, (n, k, 1)), gain.shape)
    return ad.sigmoid(gain * (spread - offset))


def ltc_step(state, inputs, cell, prepared=None):
    """Advance the membrane potentials by one input step.

    Each of the ``cell.unfolds`` substeps applies the fused semi-implicit
    update ``v <- (cm/delta * v + gl * vl + sum w s E) / (cm/delta + gl + sum w s)``.
    Returns ``(new_state, motor_potential)``.
    """
    if state.ndim != 2 or inputs.ndim != 2 or inputs.shape[1] != cell.wiring.n_sensory:
        raise DimensionError(f"ltc_step: state {state.shape}, inputs {inputs.shape}")
    if prepared is None:
        prepared = cell.prepare(state.shape[0])
    p = prepared
    s = _presynaptic(inputs, p["sgamma"], p["smu"])
    num_in = ad.tsum(p["swerev"] * s, axis=1) + p["glvl"]
    den_in = ad.tsum(p["sw"] * s, axis=1) + p["gl"]
    v = state
    for _ in range(cell.unfolds):
        act = _presynaptic(v, p["gamma"], p["mu"])
        num = p["cm"] * v + num_in + ad.tsum(p["werev"] * act, axis=1)
        den = p["cm"] + den_in + ad.tsum(p["w"] * act, axis=1)
        v = num / den
    if not np.isfinite(v.data).all():
        raise NumericError("ltc_step: non-finite membrane potential")
    return v, v[:, cell.output_index]


class LstmCell:
    """Standard LSTM (gate order i, f, g, o) with a scalar readout."""

    def __init__(self, rng, n_in=LATENT_DIM, units=UNITS):
        self.n_in = n_in
        self.units = units
        fan = n_in + units
        self.params = {
            "kernel": uniform_param(rng, (fan, 4 * units), fan, gain=3.0),
            "bias": Tensor(np.concatenate([np.zeros(units), np.ones(units), np.zeros(2 * units)]), requires_grad=True),
            "out.weight": uniform_param(rng, (units, 1), units, gain=3.0),
            "out.bias": zeros_param((1,)),
        }

    def initial_state(self, batch):
        dtype = self.params["kernel"].dtype
        z = np.zeros((batch, self.units))
        return Tensor(z, dtype=dtype), Tensor(z, dtype=dtype)


def lstm_step(state, inputs, cell):
    h, c = state
    if inputs.ndim != 2 or inputs.shape[1] != cell.n_in or h.shape[1] != cell.units:
        raise DimensionError(f"lstm_step: inputs {inputs.shape}, hidden {h.shape}")
    p = cell.params
    u = cell.units
    z = ad.dense(ad.concat([inputs, h], axis=1), p["kernel"], p["bias"])
    i = ad.sigmoid(z[:, :u])
    f = ad.sigmoid(z[:, u : 2 * u])
    g = ad.tanh(z[:, 2 * u : 3 * u])
    o = ad.sigmoid(z[:, 3 * u :])
    c = f * c + i * g
    h = o * ad.tanh(c)
    y = ad.dense(h, p["out.weight"], p["out.bias"])
    return (h, c), ad.reshape(y, (h.shape[0],))


class NcpHead:
    kind = "ncp"

    def __init__(self, rng, wiring_seed=0, dt=1.0, unfolds=6, **fanouts):
        self.cell = LtcCell(build_ncp_wiring(wiring_seed, **fanouts), rng, dt=dt, unfolds=unfolds)
        self.params = self.cell.params

    def initial_state(self, batch):
        return self.cell.initial_state(batch)


class LstmHead:
    kind = "lstm"

    def __init__(self, rng, units=UNITS):
        self.cell = LstmCell(rng, units=units)
        self.params = self.cell.params

    def initial_state(self, batch):
        return self.cell.initial_state(batch)


def rollout(head, features, state=None):
    """Run ``head`` over features [T, 32] or [N, T, 32]; returns [T] or [N, T]."""
    single = features.ndim == 2
    if single:
        features = ad.reshape(features, (1,) + features.shape)
    if features.ndim != 3 or features.shape[1] < 1:
        raise DimensionError(f"rollout: features must be [N, T, D] with T >= 1, got {features.shape}")
    n, steps, _ = features.shape
    if state is None:
        state = head.initial_state(n)
    outs = []
    if head.kind == "ncp":
        prepared = head.cell.prepare(n)
        for t in range(steps):
            state, y = ltc_step(state, features[:, t], head.cell, prepared)
            outs.append(y)
    else:
        for t in range(steps):
            state, y = lstm_step(state, features[:, t], head.cell)
            outs.append(y)
    out = ad.stack(outs, axis=1)
    return out[0] if single else out
