"""Writes the regression battery.

Expected objectives come from closed forms evaluated with numpy eigen
decompositions and are cross-checked against cvxpy before writing.
"""
import itertools
import pathlib

import cvxpy as cp
import numpy as np

OUT = pathlib.Path(__file__).parent


def fmt_mat(m):
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in m)


def realify(h):
    return np.block([[h.real, -h.imag], [h.imag, h.real]])


def sym_basis(n):
    """Upper-triangle coordinates of a symmetric n×n matrix."""
    out = []
    for i, j in itertools.combinations_with_replacement(range(n), 2):
        e = np.zeros((n, n))
        e[i, j] = e[j, i] = 1.0
        out.append(e)
    return out


def write(name, objective, blocks, expect, equalities=(), status="optimal", x=None):
    lines = [f"name {name}", f"variables {len(objective)}",
             "objective " + " ".join(repr(float(c)) for c in objective)]
    for f0, fs in blocks:
        lines.append(f"block {f0.shape[0]}")
        lines.append("matrix 0")
        lines.append(fmt_mat(f0))
        for k, f in enumerate(fs, 1):
            if np.any(f != 0):
                lines.append(f"matrix {k}")
                lines.append(fmt_mat(f))
    for a, b in equalities:
        lines.append("equality " + " ".join(repr(float(v)) for v in a) + f" {float(b)!r}")
    lines.append(f"expect status {status}")
    if expect is not None:
        lines.append(f"expect objective {float(expect)!r}")
    if x is not None:
        lines.append("expect x " + " ".join(repr(float(v)) for v in x))
    (OUT / f"{name}.sdp").write_text("\n".join(lines) + "\n")
    check(name, objective, blocks, equalities, status, expect)


def check(name, objective, blocks, equalities, status, expect):
    x = cp.Variable(len(objective))
    cons = []
    for f0, fs in blocks:
        expr = f0 + sum(x[k] * f for k, f in enumerate(fs))
        cons.append((expr + expr.T) / 2 >> 0)
    for a, b in equalities:
        cons.append(np.asarray(a) @ x == b)
    prob = cp.Problem(cp.Minimize(np.asarray(objective) @ x), cons)
    prob.solve(solver=cp.CVXOPT if "CVXOPT" in cp.installed_solvers() else None)
    if status == "infeasible":
        assert prob.status.startswith("infeasible"), (name, prob.status)
    else:
        assert abs(prob.value - expect) < 1e-5 * (1 + abs(expect)), (name, prob.value, expect)
    print(f"{name}: {prob.status} {prob.value} (closed form {expect})")


def one(v):
    return np.array([[float(v)]])


def cover_problem(h, w, extra_blocks=()):
    """min Tr(W V) over real symmetric V with V ⪰ H (H possibly complex)."""
    n = h.shape[0]
    basis = sym_basis(n)
    obj = [np.trace(w @ e) for e in basis]
    if np.iscomplexobj(h):
        blocks = [(realify(-h), [realify(e.astype(complex)) for e in basis])]
    else:
        blocks = [(-h, basis)]
    for sign in extra_blocks:
        blocks.append((sign * h, basis) if sign != 0 else (np.zeros((n, n)), basis))
    return obj, blocks


def main():
    write("scalar_lower", [1.0], [(one(-1), [one(1)])], 1.0, x=[1.0])
    write("pair_eigen", [1.0], [(np.array([[0.0, 1.0], [1.0, 0.0]]), [np.eye(2)])], 1.0, x=[1.0])

    e = lambda i, n=3: np.diag(np.eye(n)[i])
    write("lp_cover", [1.0, 2.0],
          [(np.diag([0.0, 0.0, -1.0]), [np.diag([1.0, 0.0, 1.0]), np.diag([0.0, 1.0, 1.0])])],
          1.0, x=[1.0, 0.0])
    write("lp_equality", [1.0, 3.0],
          [(np.zeros((2, 2)), [e(0, 2), e(1, 2)])], 0.5,
          equalities=[([1.0, -1.0], 0.5)], x=[0.5, 0.0])

    a = np.array([[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 4.0]])
    write("lambda_max", [1.0], [(-a, [np.eye(3)])], float(np.linalg.eigvalsh(a).max()))

    h = np.array([[1.0, 0.4, -0.3], [0.4, -0.5, 0.2], [-0.3, 0.2, 0.3]])
    lam = np.linalg.eigvalsh(h)
    obj, blocks = cover_problem(h, np.eye(3), extra_blocks=(0,))
    write("psd_cover", obj, blocks, float(np.clip(lam, 0, None).sum()))
    obj, blocks = cover_problem(h, np.eye(3), extra_blocks=(1,))
    write("trace_norm", obj, blocks, float(np.abs(lam).sum()))

    z2 = np.array([[0.7, 0.2 + 0.3j], [0.2 - 0.3j, 0.4]])
    obj, blocks = cover_problem(z2, np.eye(2))
    write("complex_cover_2", obj, blocks,
          float(np.trace(z2.real) + np.abs(np.linalg.eigvalsh(1j * z2.imag)).sum()))

    z3 = np.array([[1.0, 0.1 + 0.5j, -0.2 + 0.1j],
                   [0.1 - 0.5j, 0.8, 0.3 - 0.4j],
                   [-0.2 - 0.1j, 0.3 + 0.4j, 0.6]])
    obj, blocks = cover_problem(z3, np.eye(3))
    write("complex_cover_3", obj, blocks,
          float(np.trace(z3.real) + np.abs(np.linalg.eigvalsh(1j * z3.imag)).sum()))

    w = np.array([[2.0, 0.5], [0.5, 1.0]])
    lw, uw = np.linalg.eigh(w)
    sw = uw @ np.diag(np.sqrt(lw)) @ uw.T
    obj, blocks = cover_problem(z2, w)
    write("weighted_cover", obj, blocks,
          float(np.trace(w @ z2.real) + np.abs(np.linalg.eigvalsh(1j * (sw @ z2.imag @ sw))).sum()))

    write("hyperbolic_equality", [1.0, 1.0, 1.0],
          [(np.array([[0.0, 1.0], [1.0, 0.0]]),
            [np.diag([1.0, 0.0]), np.diag([0.0, 1.0]), np.zeros((2, 2))]),
           (one(0), [one(0), one(0), one(1)])],
          2.0 * np.sqrt(2.0), equalities=[([-1.0, 0.0, 1.0], 0.0)],
          x=[1 / np.sqrt(2), np.sqrt(2), 1 / np.sqrt(2)])

    write("empty_interval", [1.0], [(np.diag([-1.0, -1.0]), [np.diag([1.0, -1.0])])], None,
          status="infeasible")


if __name__ == "__main__":
    main()
