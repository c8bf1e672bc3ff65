"""CSV formats for parameter sequences and scalar tracks.

Params CSV header: frame,beta_0..,psi_0..,theta_0..,eta,tau with theta
flattened joint-major. Floats are written with repr (shortest round-trip), so
read(write(x)) is bitwise exact.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


class ParamIoError(ValueError):
    pass


def params_header(n_shape: int, n_expressions: int, n_joints: int) -> list[str]:
    cols = ["frame"]
    cols += [f"beta_{i}" for i in range(n_shape)]
    cols += [f"psi_{i}" for i in range(n_expressions)]
    cols += [f"theta_{i}" for i in range(3 * n_joints)]
    cols += ["eta", "tau"]
    return cols


def write_params_csv(
    path: str | Path,
    beta: np.ndarray,
    psi: np.ndarray,
    theta: np.ndarray,
    eta: np.ndarray,
    tau: np.ndarray,
) -> None:
    """One row per frame; beta may be (C,) shared or (T, C) per frame."""
    psi = np.atleast_2d(np.asarray(psi, dtype=np.float64))
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 2:
        theta = theta[None]
    t = psi.shape[0]
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 1:
        beta = np.broadcast_to(beta, (t, beta.shape[0]))
    eta = np.broadcast_to(np.asarray(eta, dtype=np.float64).ravel(), (t,))
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64).ravel(), (t,))
    header = params_header(beta.shape[1], psi.shape[1], theta.shape[1])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(t):
            row = [str(k)]
            row += [repr(float(x)) for x in beta[k]]
            row += [repr(float(x)) for x in psi[k]]
            row += [repr(float(x)) for x in theta[k].reshape(-1)]
            row += [repr(float(eta[k])), repr(float(tau[k]))]
            writer.writerow(row)


def read_params_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Returns beta (T, C), psi (T, P), theta (T, K, 3), eta (T,), tau (T,)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "frame":
            raise ParamIoError(f"{path}: missing params header")
        rows = [r for r in reader if r]
    n_beta = sum(1 for c in header if c.startswith("beta_"))
    n_psi = sum(1 for c in header if c.startswith("psi_"))
    n_theta = sum(1 for c in header if c.startswith("theta_"))
    if n_theta % 3 or header[-2:] != ["eta", "tau"]:
        raise ParamIoError(f"{path}: malformed params header")
    expected = 1 + n_beta + n_psi + n_theta + 2
    data = np.empty((len(rows), expected - 1))
    for i, row in enumerate(rows):
        if len(row) != expected:
            raise ParamIoError(f"{path}: row {i} has {len(row)} fields, expected {expected}")
        data[i] = [float(x) for x in row[1:]]
    off = 0
    beta = data[:, off : off + n_beta]
    off += n_beta
    psi = data[:, off : off + n_psi]
    off += n_psi
    theta = data[:, off : off + n_theta].reshape(len(rows), n_theta // 3, 3)
    off += n_theta
    return {
        "beta": beta,
        "psi": psi,
        "theta": theta,
        "eta": data[:, off],
        "tau": data[:, off + 1],
    }


def write_sequence_csv(path: str | Path, columns: dict[str, np.ndarray]) -> None:
    """Scalar/vector tracks keyed by name: scalars (T,), vectors (T, C)."""
    names = list(columns)
    arrays = []
    header = ["frame"]
    t = None
    for name in names:
        arr = np.asarray(columns[name], dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
            header.append(name)
        else:
            header += [f"{name}_{i}" for i in range(arr.shape[1])]
        t = arr.shape[0] if t is None else t
        if arr.shape[0] != t:
            raise ParamIoError("all columns must share the frame count")
        arrays.append(arr)
    stacked = np.concatenate(arrays, axis=1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(t):
            writer.writerow([str(k)] + [repr(float(x)) for x in stacked[k]])


def read_sequence_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Inverse of write_sequence_csv; vector tracks come back as (T, C)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "frame":
            raise ParamIoError(f"{path}: missing sequence header")
        rows = [r for r in reader if r]
    data = np.array([[float(x) for x in row[1:]] for row in rows])
    groups: dict[str, list[int]] = {}
    for j, name in enumerate(header[1:]):
        base = name.rsplit("_", 1)[0] if name.rsplit("_", 1)[-1].isdigit() else name
        groups.setdefault(base, []).append(j)
    out = {}
    for base, idx in groups.items():
        block = data[:, idx] if len(rows) else np.empty((0, len(idx)))
        out[base] = block[:, 0] if len(idx) == 1 else block
    return out
