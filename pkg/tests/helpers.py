"""Independent oracles shared by the unit and acceptance suites."""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate, stats

from dive import tensor as T


def numeric_grad(fn, arrays, h=1e-4):
    """Central differences of the scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = fn(*arrays)
            a[i] = old - h
            fm = fn(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-3):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / den)))
    return worst


_UNARY = ["sigmoid", "tanh", "swish", "softplus", "exp_tanh", "log_softplus", "square"]
_BINARY = ["add", "sub", "mul", "div_pos"]


def random_graph(rng: np.random.Generator, n_ops: int = 6):
    """Return (inputs, fn) where ``fn(*Tensors) -> scalar Tensor``.

    The op sequence is fixed at construction; ``fn`` can be evaluated on
    plain arrays (wrapped) for the finite-difference side.
    """
    shape = (3, 4)
    inputs = [rng.uniform(-2, 2, shape) for _ in range(3)]
    w = rng.uniform(-1, 1, (4, 4))
    plan = []
    for _ in range(n_ops):
        kind = rng.choice(["unary", "binary", "matmul", "concat_slice"], p=[0.45, 0.35, 0.1, 0.1])
        if kind == "unary":
            plan.append(("unary", str(rng.choice(_UNARY)), int(rng.integers(0, 3))))
        elif kind == "binary":
            plan.append(("binary", str(rng.choice(_BINARY)), int(rng.integers(0, 3)), int(rng.integers(0, 3))))
        else:
            plan.append((kind, int(rng.integers(0, 3))))
    final = str(rng.choice(["sum", "mean", "logsumexp", "l2", "l1sq"]))

    def fn(*xs):
        vals = list(xs)
        for step in plan:
            if step[0] == "unary":
                _, op, i = step
                v = vals[i]
                if op == "exp_tanh":
                    out = T.exp(T.tanh(v))
                elif op == "log_softplus":
                    out = T.log(T.softplus(v) + 0.5)
                elif op == "square":
                    out = v ** 2
                else:
                    out = T.forward_op(op, v)
            elif step[0] == "binary":
                _, op, i, j = step
                a, b = vals[i], vals[j]
                if op == "div_pos":
                    out = a / (b * b + 1.0)
                else:
                    out = T.forward_op(op, a, b)
            elif step[0] == "matmul":
                out = T.tanh(vals[step[1]] @ T.Tensor(w))
            else:
                c = T.concat([vals[step[1]], vals[(step[1] + 1) % 3]], axis=1)
                out = c[:, 2:6]
            vals.append(out)
            vals = vals[-3:]
        y = vals[-1] + vals[0] * 0.5
        if final == "sum":
            return T.sum_(y)
        if final == "mean":
            return T.mean(y)
        if final == "logsumexp":
            return T.logsumexp(y)
        if final == "l2":
            return T.l2_norm(y + 3.0)
        return T.sum_(T.sum_(y, axis=1) ** 2)

    return inputs, fn


def check_graph(inputs, fn, h=1e-4):
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in inputs]
    loss = fn(*leaves)
    T.backward(loss)
    analytic = [np.zeros_like(a) if l.grad is None else l.grad for a, l in zip(inputs, leaves)]

    def scalar(*arrs):
        with T.no_grad():
            return fn(*[T.Tensor(a) for a in arrs]).item()

    numeric = numeric_grad(scalar, [a.copy() for a in inputs], h=h)
    return max_rel_err(analytic, numeric)


def logistic_fisher_quadrature(w: float) -> float:
    """E_z[w^2 p(1-p)] for z ~ N(0, 1) and p = sigmoid(w z), by adaptive quadrature."""
    def integrand(z):
        p = 1.0 / (1.0 + math.exp(-w * z))
        return w * w * p * (1 - p) * stats.norm.pdf(z)
    return integrate.quad(integrand, -12, 12)[0]
