"""Shared test helpers: finite-difference oracles and random graph plans."""
from __future__ import annotations

import numpy as np

from jointctc import adcore
from jointctc.adcore import Graph


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(1.0, float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    return float(np.abs(analytic - numeric).max()) / denom


def fd_gradient(fn, values: dict[str, np.ndarray], name: str,
                entries=None, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar fn(values) w.r.t. values[name].

    ``entries`` limits the check to selected flat indices (None: all).
    Unchecked entries come back NaN so callers can mask them.
    """
    base = values[name]
    grad = np.full(base.size, np.nan)
    idx = range(base.size) if entries is None else entries
    flat = base.ravel()
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = fn(values)
        flat[i] = orig - h
        down = fn(values)
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(base.shape)


# --- random computation-graph plans for the autodiff oracle -----------------

_LEAF_SHAPES = [(2, 3), (3, 2), (3, 3), (2, 2), (1, 3)]


def make_plan(rng: np.random.Generator) -> dict:
    """A deterministic recipe for a random graph over the supported ops.

    Steps reference pool indices, where the pool is the initial leaves
    followed by step outputs. Layer-norm gain/bias leaves live outside the
    pool and are referenced by name.
    """
    plan = {"leaves": [], "steps": []}
    shapes: list[tuple[int, int]] = []
    n_initial = int(rng.integers(2, 4))
    for i in range(n_initial):
        s = _LEAF_SHAPES[int(rng.integers(0, len(_LEAF_SHAPES)))]
        plan["leaves"].append([f"p{i}", s])
        shapes.append(s)
    plan["n_initial"] = n_initial

    for _ in range(int(rng.integers(5, 10))):
        n = len(shapes)
        choices = []
        for i in range(n):
            si = shapes[i]
            for op in ("relu", "softsign", "logsoftmax", "softmax", "scale",
                       "transpose", "dropout"):
                choices.append((op, (i,)))
            if si[1] >= 2:
                choices.append(("slice", (i,)))
                choices.append(("layernorm", (i,)))
            for j in range(n):
                sj = shapes[j]
                if si == sj:
                    choices.append(("add", (i, j)))
                    choices.append(("mul", (i, j)))
                if si[1] == sj[0]:
                    choices.append(("matmul", (i, j)))
                if si[0] == sj[0]:
                    choices.append(("concat", (i, j)))
        op, args = choices[int(rng.integers(0, len(choices)))]
        extra = None
        if op == "scale":
            extra = float(rng.uniform(-2.0, 2.0))
        elif op == "slice":
            w = shapes[args[0]][1]
            start = int(rng.integers(0, w))
            stop = int(rng.integers(start + 1, w + 1))
            extra = (start, stop)
        elif op == "dropout":
            extra = float(rng.choice([0.2, 0.4]))
        elif op == "layernorm":
            d = shapes[args[0]][1]
            k = len(plan["leaves"])
            gname, bname = f"p{k}", f"p{k + 1}"
            plan["leaves"].append([gname, (1, d)])
            plan["leaves"].append([bname, (1, d)])
            extra = (gname, bname)

        a = shapes[args[0]]
        if op == "matmul":
            shapes.append((a[0], shapes[args[1]][1]))
        elif op == "transpose":
            shapes.append((a[1], a[0]))
        elif op == "slice":
            shapes.append((a[0], extra[1] - extra[0]))
        elif op == "concat":
            shapes.append((a[0], a[1] + shapes[args[1]][1]))
        else:
            shapes.append(a)
        plan["steps"].append([op, args, extra])
    return plan


def leaf_values(plan: dict, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {name: rng.normal(0.0, 1.0, size=shape) for name, shape in plan["leaves"]}


def run_plan(plan: dict, values: dict[str, np.ndarray], seed: int,
             training: bool = True):
    """Execute a plan; returns (loss value, gradient table, relu kink margin)."""
    g = Graph(seed=seed, training=training)
    by_name = {}
    for name, _ in plan["leaves"]:
        by_name[name] = g.leaf(values[name], name=name)
    pool = [by_name[name] for name, _ in plan["leaves"][: plan["n_initial"]]]
    kink = np.inf
    for op, args, extra in plan["steps"]:
        x = pool[args[0]]
        if op == "relu":
            kink = min(kink, float(np.abs(x.data).min()))
            pool.append(adcore.relu(x))
        elif op == "softsign":
            pool.append(adcore.softsign(x))
        elif op == "logsoftmax":
            pool.append(adcore.log_softmax_rows(x))
        elif op == "softmax":
            pool.append(adcore.softmax_rows(x))
        elif op == "scale":
            pool.append(adcore.scale(x, extra))
        elif op == "transpose":
            pool.append(adcore.transpose(x))
        elif op == "dropout":
            pool.append(adcore.dropout(x, extra))
        elif op == "slice":
            pool.append(adcore.slice_cols(x, extra[0], extra[1]))
        elif op == "layernorm":
            pool.append(adcore.layer_norm_rows(x, by_name[extra[0]], by_name[extra[1]]))
        elif op == "add":
            pool.append(adcore.add(x, pool[args[1]]))
        elif op == "mul":
            pool.append(adcore.mul(x, pool[args[1]]))
        elif op == "matmul":
            pool.append(adcore.matmul(x, pool[args[1]]))
        elif op == "concat":
            pool.append(adcore.concat_cols([x, pool[args[1]]]))
        else:
            raise AssertionError(op)
    loss = adcore.sum_all(pool[-1])
    if len(pool) >= 2:
        loss = adcore.add(loss, adcore.sum_all(pool[-2]))
    table = g.backward(loss)
    return float(loss.data[0, 0]), table, kink
