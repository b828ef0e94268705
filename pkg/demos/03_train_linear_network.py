"""
Training the linear network on synthetic windows
------------------------------------------------

A small (C = 4) network is trained for a few epochs on augmented synthetic
windows. It has no activations and no biases, so it stays exactly linear in
its inputs. Five epochs on 40 windows is far from converged: the loss
starts well above the zero-displacement baseline and only creeps down. A
30-epoch run with C = 8 on 200 windows ends near half the baseline. The
weights are saved, reloaded and used as a solver.
"""

import io

import numpy as np

from selfiestab.network import init_weights, load_weights, net_forward, save_weights, train
from selfiestab.pipeline import net_solver, stabilize_stream
from selfiestab.tracks import SyntheticSceneSpec, synthesize_scene, synthetic_windows

windows = synthetic_windows(40, 5, seed=0, translation_std=4.0, face_jitter_std=2.0)
weights = init_weights(4, 5, np.random.default_rng(1))
weights, curve = train(windows, weights, 5, lr=3e-4, rng=np.random.default_rng(2))
for s in curve:
    print(f"epoch {s.epoch}: loss {s.loss / s.baseline:.1%} of the zero-displacement baseline")

# Linearity holds for any weights.
rng = np.random.default_rng(3)
x, y = rng.uniform(0, 800, (16, 512)), rng.uniform(0, 800, (16, 512))
f = net_forward(x, y, 0.3, weights)
print("f(2x) - 2 f(x):", np.abs(net_forward(2 * x, 2 * y, 0.3, weights) - 2 * f).max())

blob = save_weights(weights)
again = load_weights(io.BytesIO(blob))
print(f"weight file: {len(blob)} bytes, C = {again.C}, T = {again.T}")

frames, _ = synthesize_scene(SyntheticSceneSpec(frame_count=12, seed=9))
outs = stabilize_stream(frames, net_solver(again))
print("warped frames:", [o.frame_index for o in outs if o.warped])
