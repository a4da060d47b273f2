"""
Liquid time-constant head
=========================

The sparse four-layer wiring, its response to a step input, and the bound
that keeps every membrane potential inside the reversal-potential hull.
"""

import numpy as np

from flowsteer.autodiff import Tensor
from flowsteer.temporal import LstmHead, NcpHead, rollout

head = NcpHead(np.random.default_rng(0))
w = head.cell.wiring
print(f"{w.n_sensory} sensory -> {w.n_inter} inter -> {w.n_command} command -> {w.n_motor} motor")
print("synapses:", len(w.sensory_synapses), "sensory,", len(w.synapses), "internal")

# input off for 10 steps, then on for 30
x = np.zeros((40, 32))
x[10:] = 1.0
y = rollout(head, Tensor(x)).data
print("motor output before the step:", np.round(y[:10:3], 4))
print("motor output after the step: ", np.round(y[10::6], 4))

lo, hi = head.cell.hull()
print("hull for the motor neuron:", lo[w.motor[0]], hi[w.motor[0]])

lstm = LstmHead(np.random.default_rng(0))
print("LSTM head on the same input, last step:", rollout(lstm, Tensor(x)).data[-1])
