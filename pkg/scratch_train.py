"""Scratch: first end-to-end KBINN training experiment (not in suite)."""
import sys
import time
import numpy as np

from kbident import ekbf, model as mdl
from kbident.train import NetConfigs, TrainConfig, identify

freq = float(sys.argv[1]) if len(sys.argv) > 1 else 100.0
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 4000
lr = float(sys.argv[3]) if len(sys.argv) > 3 else 2e-3
warm = int(sys.argv[4]) if len(sys.argv) > 4 else 300
q0 = float(sys.argv[5]) if len(sys.argv) > 5 else 1e-2
seedv = int(sys.argv[6]) if len(sys.argv) > 6 else 0

truth = np.array([0.6, 0.9, 0.57])
x0 = np.array([0.5, 0.0, -0.35, 0.0])
damped = mdl.double_pendulum(damping=0.05)
undamped = mdl.double_pendulum(damping=0.0)

dt, k = mdl.aligned_sim_dt(freq, 1e-4)
traj = mdl.simulate(damped, truth, x0, 3.0, dt)
n_samp = int(round(3.0 * freq))
sample_t = np.arange(1, n_samp + 1) * (1.0 / freq)
noise = mdl.NoiseSpec(Q=q0 * np.eye(4), R=0.25 * np.eye(4), seed=seedv + 1000)
series = mdl.measure(traj, damped, noise, sample_t)
print(f"freq={freq} N={len(series)} truth={truth}")

loss_cfg = ekbf.KbinnLossConfig(x0=x0, noise=noise)
tc = TrainConfig(learning_rate=lr, epochs=epochs, seed=seedv,
                 theta_warmup_epochs=warm, log_every=10**9)
t0 = time.perf_counter()
report, mean_net, cov_net = identify(series, undamped, loss_cfg, tc, NetConfigs())
wall = time.perf_counter() - t0
th = report.theta_hat
err = np.abs(th - truth)
print(f"wall {wall:.1f}s  ({wall / epochs * 1e3:.1f} ms/epoch)")
print(f"theta_hat = {np.round(th, 4)}  abs err = {np.round(err, 4)}  mean {err.mean():.4f}")
print(f"best epoch {report.best_epoch}, best total {report.best_total:.1f}")
hist = report.loss_history
for e in range(0, epochs, max(1, epochs // 12)):
    th_e = report.theta_history[e]
    print(f"  ep {e:6d}: l1={hist[e,0]:10.1f} l2={hist[e,1]:10.1f} l3={hist[e,2]:10.1f} "
          f"total={hist[e,3]:11.1f} th={np.round(th_e,3)}")
# trajectory fit quality at sample times
xi, _ = mean_net.forward(series.times)
idx = np.rint(series.times / dt).astype(int)
x_true = traj[1][idx]
rms = np.sqrt(np.mean((xi - x_true) ** 2, axis=0))
print("state RMS err:", np.round(rms, 3))
P, _ = cov_net.forward(series.times)
print("psi diag mean:", np.round(P[:, range(4), range(4)].mean(axis=0), 4))
