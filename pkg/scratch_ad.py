"""Scratch checks for the autodiff core (not part of the test suite)."""
import numpy as np
from kbident import autodiff as ad

rng = np.random.default_rng(0)

# 1. basic scalar gradients
tape = ad.Tape()
w = tape.leaf(3.0)
y = w * w
g = ad.backward(tape, y).grad(w)
print("w^2 grad at 3:", g, "(expect 6)")

tape = ad.Tape()
w1, w2 = tape.leaf(2.0), tape.leaf(5.0)
y = w1 * w2 + ad.sin(w1)
s = ad.backward(tape, y)
print("grads:", s.grad(w1), s.grad(w2), "(expect", 5 + np.cos(2.0), ", 2)")

# 2. mixed second order: g(w) = d/dt tanh(w t) at t=0 -> value w, d/dw = 1
for wval in [0.3, 1.7, -2.2]:
    tape = ad.Tape()
    w = tape.leaf(wval)
    t = tape.leaf(0.0, tangent=1.0)
    h = ad.tanh(w * t)
    hdot = ad.tangent_of(h)
    s = ad.backward(tape, hdot)
    print(f"d/dt tanh(wt)|0 value={hdot.value:.6f} (exp {wval}), dvalue/dw={s.grad(w):.6f} (exp 1)")

# 3. random smooth compositions vs finite differences
def random_expr(xs, rng):
    # build a random smooth scalar expression from the elementary op set
    pool = list(xs)
    for _ in range(12):
        k = rng.integers(0, 8)
        a = pool[rng.integers(0, len(pool))]
        b = pool[rng.integers(0, len(pool))]
        if k == 0: pool.append(a + b)
        elif k == 1: pool.append(a - b)
        elif k == 2: pool.append(a * b)
        elif k == 3: pool.append(a / (b * b + 1.5))
        elif k == 4: pool.append(ad.sin(a))
        elif k == 5: pool.append(ad.cos(a) * b)
        elif k == 6: pool.append(ad.tanh(a))
        elif k == 7: pool.append(ad.exp(a * 0.3))
    out = pool[-1]
    for p in pool[-4:-1]:
        out = out + p
    return out

worst = 0.0
for trial in range(300):
    x0 = rng.uniform(-2, 2, size=3)
    seq = rng.integers(0, 1 << 31)
    def f_nodes(xs, seq=seq):
        return random_expr(xs, np.random.default_rng(seq))
    tape = ad.Tape()
    xs = [tape.leaf(float(v)) for v in x0]
    y = f_nodes(xs)
    s = ad.backward(tape, y)
    grads = np.array([float(s.grad(x)) for x in xs])
    # finite differences
    def feval(v):
        tp = ad.Tape()
        return float(f_nodes([tp.leaf(float(u)) for u in v]).value)
    h = 1e-6
    fd = np.zeros(3)
    for j in range(3):
        vp, vm = x0.copy(), x0.copy()
        vp[j] += h; vm[j] -= h
        fd[j] = (feval(vp) - feval(vm)) / (2 * h)
    denom = np.maximum(np.abs(fd), 1e-6)
    rel = np.max(np.abs(grads - fd) / denom)
    worst = max(worst, rel)
print("worst rel err over 300 random compositions:", worst)

# 4. array ops: batched matmul chain with norms
N, n = 7, 4
A = rng.standard_normal((N, n, n))
P = rng.standard_normal((N, n, n))
def loss_np(Avals, Pvals):
    S = Avals @ Pvals + np.swapaxes(Avals @ Pvals, -1, -2) - Pvals @ Pvals
    return np.sum(np.sqrt(np.sum(S * S, axis=(-2, -1))))
tape = ad.Tape()
Av, Pv = tape.leaf(A), tape.leaf(P)
AP = ad.matmul(Av, Pv)
S = AP + ad.transpose_last2(AP) - ad.matmul(Pv, Pv)
y = ad.vsum(ad.fro_norm(S))
s = ad.backward(tape, y)
gA = s.grad(Av)
h = 1e-6
i_, j_, k_ = 3, 1, 2
Ap, Am = A.copy(), A.copy()
Ap[i_, j_, k_] += h; Am[i_, j_, k_] -= h
fd = (loss_np(Ap, P) - loss_np(Am, P)) / (2 * h)
print("matmul/norm grad vs fd:", gA[i_, j_, k_], fd)

# 5. triu + PSD assembly with tangent flow
raw = rng.standard_normal((N, 10))
rawdot = rng.standard_normal((N, 10))
tape = ad.Tape()
r = tape.leaf(raw, tangent=rawdot)
U = ad.triu_matrix(r, 4)
Pm = ad.matmul(ad.transpose_last2(U), U)
Pm = (Pm + ad.transpose_last2(Pm)) * 0.5
Pdot = ad.tangent_of(Pm)
# finite diff of tangent: (P(raw + h*rawdot) - P(raw - h*rawdot)) / 2h
def asm(rw):
    Um = np.zeros((N, 4, 4)); rows, cols = np.triu_indices(4)
    Um[..., rows, cols] = rw
    Pp = np.swapaxes(Um, -1, -2) @ Um
    return 0.5 * (Pp + np.swapaxes(Pp, -1, -2))
fdP = (asm(raw + 1e-6 * rawdot) - asm(raw - 1e-6 * rawdot)) / 2e-6
print("psd tangent err:", np.max(np.abs(Pdot.value - fdP)))
sym_err = np.max(np.abs(Pm.value - np.swapaxes(Pm.value, -1, -2)))
print("bitwise symmetry:", sym_err == 0.0)

# 6. second-order through norm: d/dw of || d/dt [w*sin(t)] - c ||
tape = ad.Tape()
w = tape.leaf(1.3)
tarr = tape.leaf(np.linspace(0, 1, 5), tangent=np.ones(5))
yv = w * ad.sin(tarr)
ydot = ad.tangent_of(yv)          # w*cos(t)
res = ydot - np.cos(np.linspace(0, 1, 5)) * 0.7
L = ad.norm2(res, axis=-1)
s = ad.backward(tape, L)
gw = float(s.grad(w))
def L_of(wv):
    c = np.cos(np.linspace(0, 1, 5))
    r = wv * c - 0.7 * c
    return np.sqrt(np.sum(r * r))
fd = (L_of(1.3 + 1e-7) - L_of(1.3 - 1e-7)) / 2e-7
print("norm-of-tangent grad:", gw, fd)

# 7. inverse op with tangent
M = rng.standard_normal((4, 4)) + 5 * np.eye(4)
Mdot = rng.standard_normal((4, 4))
tape = ad.Tape()
Mv = tape.leaf(M, tangent=Mdot)
Minv = ad.inv(Mv)
y = ad.vsum(ad.tangent_of(Minv) * rng.standard_normal((4, 4)))
_ = ad.backward(tape, y)
anal = -np.linalg.inv(M) @ Mdot @ np.linalg.inv(M)
print("inv tangent err:", np.max(np.abs(Minv.tangent - anal)))

# 8. determinism of backward
tape = ad.Tape()
x = tape.leaf(rng.standard_normal(50))
y = ad.vsum(ad.tanh(x * 1.7) * ad.sin(x))
g1 = ad.backward(tape, y).grad(x)
g2 = ad.backward(tape, y).grad(x)
print("backward deterministic:", np.array_equal(g1, g2))
