"""Scratch: training-recipe experiments (not in suite)."""
import json
import sys
import time
import numpy as np

from kbident import ekbf, model as mdl
from kbident.train import NetConfigs, TrainConfig, identify

spec = json.loads(sys.argv[1])
freq = spec.pop("freq", 100.0)
seedv = spec.pop("seed", 0)
q0 = spec.pop("q0", 1e-2)
theta = np.array(spec.pop("theta", [0.6, 0.9, 0.57]))
x0 = np.array(spec.pop("x0", [0.5, 0.0, -0.35, 0.0]))
alpha = spec.pop("alpha", [1.0, 1.0, 1.0])

damped = mdl.double_pendulum(damping=0.05)
undamped = mdl.double_pendulum(damping=0.0)
dt, k = mdl.aligned_sim_dt(freq, 1e-4)
traj = mdl.simulate(damped, theta, x0, 3.0, dt)
n_samp = int(round(3.0 * freq))
sample_t = np.arange(1, n_samp + 1) * (1.0 / freq)
noise = mdl.NoiseSpec(Q=q0 * np.eye(4), R=0.25 * np.eye(4), seed=seedv + 1000)
series = mdl.measure(traj, damped, noise, sample_t)

loss_cfg = ekbf.KbinnLossConfig(x0=x0, noise=noise, alpha1=alpha[0],
                                alpha2=alpha[1], alpha3=alpha[2])
tc = TrainConfig(seed=seedv, log_every=10**9, **spec)
t0 = time.perf_counter()
report, mean_net, cov_net = identify(series, undamped, loss_cfg, tc, NetConfigs())
wall = time.perf_counter() - t0
th = report.theta_hat
err = np.abs(th - theta)
print(f"freq={freq} seed={seedv} cfg={spec}")
print(f"wall {wall:.1f}s; theta_hat={np.round(th,4)} err={np.round(err,4)} mean={err.mean():.4f}")
hist = report.loss_history
ep = tc.epochs
for e in list(range(0, ep, max(1, ep // 10))) + [ep - 1]:
    print(f"  ep {e:6d}: l1={hist[e,0]:9.1f} l2={hist[e,1]:9.1f} l3={hist[e,2]:9.1f} "
          f"tot={hist[e,3]:10.1f} th={np.round(report.theta_history[e],3)}")
xi, _ = mean_net.forward(series.times)
idx = np.rint(series.times / dt).astype(int)
rms = np.sqrt(np.mean((xi - traj[1][idx]) ** 2, axis=0))
print("state RMS:", np.round(rms, 3))
