"""Scratch: full KBINN loss gradient check + epoch timing (not in suite)."""
import time
import numpy as np

from kbident import autodiff as ad
from kbident import ekbf, model as mdl
from kbident.autodiff import Tape
from kbident.nets import CovNet, MeanNet
from kbident.train import ParamTransform

rng = np.random.default_rng(42)

# small synthetic pendulum dataset
truth = mdl.DoublePendulumParams(l1=0.6, l2=0.9, M=0.57, damping=0.05)
damped = mdl.double_pendulum(damping=0.05)
undamped = mdl.double_pendulum(damping=0.0)
x0 = np.array([0.4, 0.0, -0.3, 0.0])
dt, k = mdl.aligned_sim_dt(50.0, 1e-4)
traj = mdl.simulate(damped, truth.theta, x0, 1.0, dt)
sample_t = np.arange(1, 51) * (1.0 / 50.0)
noise = mdl.NoiseSpec(Q=1e-2 * np.eye(4), R=0.25 * np.eye(4), seed=7)
series = mdl.measure(traj, damped, noise, sample_t)
print("series:", len(series), series.samples.shape)

cfg = ekbf.KbinnLossConfig(x0=x0, noise=noise)
mean_net = MeanNet(4, hidden=(8, 8), time_scale=(0.0, 1.0), seed=1)
cov_net = CovNet(4, hidden=(8, 8), time_scale=(0.0, 1.0), seed=2)
transform = ParamTransform(undamped.param_meta)
theta0 = np.array([0.5, 0.5, 0.5])
raw0 = transform.raw_from(theta0)


def eval_loss(mean_w_flat, cov_w_flat, raw, want_grads=False):
    tape = Tape()
    mp, cp = [], []
    i = 0
    lifted = []
    for w, b in mean_net.weights:
        wv = tape.leaf(mean_w_flat[i]); bv = tape.leaf(mean_w_flat[i + 1])
        mp.append((wv, bv)); lifted.extend([wv, bv]); i += 2
    i = 0
    for w, b in cov_net.weights:
        wv = tape.leaf(cov_w_flat[i]); bv = tape.leaf(cov_w_flat[i + 1])
        cp.append((wv, bv)); lifted.extend([wv, bv]); i += 2
    rv = tape.leaf(raw)
    lifted.append(rv)
    theta = transform.constrain(rv)
    bd = ekbf.loss_total(mean_net, cov_net, theta, series, undamped, cfg,
                         mean_params=mp, cov_params=cp, tape=tape)
    if not want_grads:
        return bd.total
    store = ad.backward(tape, bd.node)
    return bd, [store.grad(v) for v in lifted], lifted, tape


def flat(ws):
    out = []
    for w, b in ws:
        out.extend([w.copy(), b.copy()])
    return out


mw, cw = flat(mean_net.weights), flat(cov_net.weights)
bd, grads, lifted, tape = eval_loss(mw, cw, raw0, want_grads=True)
print("loss breakdown:", bd.total, bd.l1_sum, bd.l2_sum, bd.l3_sum)
print("tape nodes:", len(tape))

# finite-difference spot checks on random weight entries + all raw params
h = 1e-6
checks = []
all_params = mw + cw + [raw0]
for trial in range(12):
    pi = rng.integers(0, len(all_params))
    arr = all_params[pi]
    idx = tuple(rng.integers(0, s) for s in arr.shape)
    orig = arr[idx]
    arr[idx] = orig + h
    lp = eval_loss(mw, cw, raw0)
    arr[idx] = orig - h
    lm = eval_loss(mw, cw, raw0)
    arr[idx] = orig
    fd = (lp - lm) / (2 * h)
    g = grads[pi][idx]
    checks.append((pi, idx, g, fd, abs(g - fd) / max(1.0, abs(fd))))
worst = max(c[-1] for c in checks)
print("worst rel grad err:", worst)
for c in checks:
    if c[-1] > 1e-6:
        print("  detail:", c)

# timing at N=3000, 3x32 nets
mean_big = MeanNet(4, hidden=(32, 32, 32), time_scale=(0.0, 3.0), seed=1)
cov_big = CovNet(4, hidden=(32, 32, 32), time_scale=(0.0, 3.0), seed=2)
dtb, kb = mdl.aligned_sim_dt(1000.0, 1e-4)
trajb = mdl.simulate(damped, truth.theta, x0, 3.0, dtb)
tb = np.arange(1, 3001) * 1e-3
seriesb = mdl.measure(trajb, damped, noise, tb)
cfgb = ekbf.KbinnLossConfig(x0=x0, noise=noise)


def one_epoch():
    tape = Tape()
    mp = [(tape.leaf(w), tape.leaf(b)) for w, b in mean_big.weights]
    cp = [(tape.leaf(w), tape.leaf(b)) for w, b in cov_big.weights]
    rv = tape.leaf(raw0)
    theta = transform.constrain(rv)
    bd = ekbf.loss_total(mean_big, cov_big, theta, seriesb, undamped, cfgb,
                         mean_params=mp, cov_params=cp, tape=tape)
    store = ad.backward(tape, bd.node)
    return bd, len(tape)


t0 = time.perf_counter()
bd, nn = one_epoch()
t1 = time.perf_counter()
reps = 10
t0 = time.perf_counter()
for _ in range(reps):
    one_epoch()
t1 = time.perf_counter()
print(f"N=3000 epoch: {(t1 - t0) / reps * 1e3:.1f} ms, tape nodes {nn}, total {bd.total:.1f}")
