"""Coefficient field generators and the field file format.

All generators draw from numpy's Philox counter-based bit generator so a
(kind, seed, shape) triple reproduces the same field on any platform. Values
are per-cell constants on the unit box, returned flat in lexicographic order
(x fastest), matching the fine-element numbering of the grids.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ConfigError, NumericError

__all__ = [
    "rng_for",
    "checkerboard_base",
    "sweep_coefficient",
    "lognormal_field",
    "product_field_3d",
    "write_field",
    "read_field",
]

MAGIC = "lodadapt-field v1"


def rng_for(seed):
    return np.random.Generator(np.random.Philox(int(seed)))


def _midpoints_1d(n):
    return (np.arange(n) + 0.5) / n


def _cell_multis(counts):
    counts = np.asarray(counts, dtype=np.int64)
    n = int(np.prod(counts))
    rem = np.arange(n, dtype=np.int64)
    out = np.empty((n, len(counts)), dtype=np.int64)
    for a in range(len(counts)):
        out[:, a] = rem % counts[a]
        rem = rem // counts[a]
    return out


def checkerboard_base(counts, seed):
    """Log-uniform checkerboard on the unit square with two crossing stripes.

    Each cell takes 10^c with c uniform in [-2, 0]. Cells whose midpoint x1
    lies in [15/32, 1/2] form a low-conductivity vertical stripe (1e-2); cells
    whose midpoint x2 lies in [1/4, 5/16] form a horizontal stripe of value 1,
    applied last so it overwrites the overlap.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != 2:
        raise ConfigError("checkerboard field is two-dimensional")
    rng = rng_for(seed)
    n = int(np.prod(counts))
    vals = 10.0 ** rng.uniform(-2.0, 0.0, size=n)
    multis = _cell_multis(counts)
    x1 = (multis[:, 0] + 0.5) / counts[0]
    x2 = (multis[:, 1] + 0.5) / counts[1]
    vals[(x1 >= 15.0 / 32.0) & (x1 <= 0.5)] = 1e-2
    vals[(x2 >= 0.25) & (x2 <= 5.0 / 16.0)] = 1.0
    return vals


def sweep_coefficient(base, counts, n, period=128):
    """Coefficient n of the drifting-wave sequence: base * (2 + sin(8 pi (x1 - n/period)))."""
    counts = np.asarray(counts, dtype=np.int64)
    multis = _cell_multis(counts)
    x1 = (multis[:, 0] + 0.5) / counts[0]
    # periodic in n; reduce first so steps a full period apart match bitwise
    n = n % period
    return np.asarray(base, dtype=float) * (2.0 + np.sin(8.0 * np.pi * (x1 - n / period)))


def lognormal_field(counts, seed, stddev=3.0, corr_len=0.05, method="auto"):
    """exp(stddev * kappa) with kappa a unit-variance Gaussian field.

    kappa has the isotropic exponential covariance exp(-|x - y|_2 / corr_len)
    on the unit box, sampled at cell midpoints by circulant embedding (FFT);
    small grids fall back to a dense Cholesky factorization.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if corr_len <= 0:
        raise ConfigError("correlation length must be positive")
    n = int(np.prod(counts))
    if method == "auto":
        method = "dense" if n <= 2048 else "fft"
    rng = rng_for(seed)
    if method == "dense":
        pts = _cell_multis(counts).astype(float)
        for a in range(len(counts)):
            pts[:, a] = (pts[:, a] + 0.5) / counts[a]
        dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        cov = np.exp(-dist / corr_len)
        cov[np.diag_indices_from(cov)] += 1e-12
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"covariance factorization failed: {exc}") from exc
        kappa = L @ rng.standard_normal(n)
    elif method == "fft":
        kappa = _circulant_sample(counts, corr_len, rng)
    else:
        raise ConfigError(f"unknown sampling method {method!r}")
    return np.exp(stddev * kappa)


def _circulant_sample(counts, corr_len, rng):
    d = len(counts)
    h = 1.0 / counts.astype(float)
    pad = 2
    while True:
        M = [int(pad * c) for c in counts]
        # torus distance per axis, in physical units
        axes = []
        for a in range(d):
            k = np.arange(M[a])
            k = np.minimum(k, M[a] - k).astype(float) * h[a]
            axes.append(k)
        grids = np.meshgrid(*axes, indexing="ij")
        dist = np.sqrt(sum(g * g for g in grids))
        cov = np.exp(-dist / corr_len)
        lam = np.fft.fftn(cov).real
        floor = lam.min()
        if floor > -1e-9 * lam.max():
            lam = np.maximum(lam, 0.0)
            break
        if pad >= 16:
            raise NumericError(
                f"circulant embedding not positive (min eigenvalue {floor:.3e})"
            )
        pad *= 2
    shape = tuple(M)
    w = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    y = np.fft.ifftn(np.sqrt(lam) * w) * np.sqrt(np.prod(M))
    block = y.real[tuple(slice(0, int(c)) for c in counts)]
    # block is indexed [i0, i1, ...]; flatten to x-fastest lex order
    return block.transpose(tuple(reversed(range(d)))).reshape(-1)


def product_field_3d(counts, seed, octaves=None):
    """Multiplicative cascade permeability on the unit cube.

    K(cell) = 2^(-3 octaves) * prod_{i=1..octaves} (1 + w_i[ceil(2^i x)])^3
    with independent uniform tables w_i of shape (2^i)^3 evaluated at the cell
    midpoint x. The full sequence uses 7 octaves; coarser grids truncate to
    log2 of the cell count per axis.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != 3:
        raise ConfigError("product cascade field is three-dimensional")
    if octaves is None:
        octaves = int(min(7, np.floor(np.log2(counts.min()))))
    if octaves < 1:
        raise ConfigError("product field needs at least one octave")
    rng = rng_for(seed)
    mid = [( _midpoints_1d(int(c)) ) for c in counts]
    multis = _cell_multis(counts)
    vals = np.full(int(np.prod(counts)), 2.0 ** (-3 * octaves))
    for i in range(1, octaves + 1):
        m = 2**i
        w = rng.uniform(size=(m, m, m))  # indexed [i1, i2, i3]
        idx = [np.ceil(m * mid[a][multis[:, a]]).astype(np.int64) - 1 for a in range(3)]
        vals *= (1.0 + w[idx[0], idx[1], idx[2]]) ** 3
    return vals


def write_field(path, counts, values, binary=False):
    """Write a per-cell field in the lodadapt-field v1 format.

    Text layout: a header line "lodadapt-field v1 <d> <n1> [n2] [n3]" followed
    by the cell values in lexicographic order, whitespace separated. Binary
    layout: raw little-endian float64 values with a JSON sidecar
    (path + ".json") carrying the header fields.
    """
    counts = [int(c) for c in np.atleast_1d(counts)]
    values = np.asarray(values, dtype=float).reshape(-1)
    if len(values) != int(np.prod(counts)):
        raise ConfigError(
            f"field has {len(values)} values but counts {counts} require {int(np.prod(counts))}"
        )
    if binary:
        values.astype("<f8").tofile(path)
        sidecar = {
            "format": "lodadapt-field",
            "version": 1,
            "dim": len(counts),
            "counts": counts,
        }
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, sort_keys=True)
            fh.write("\n")
    else:
        with open(path, "w") as fh:
            fh.write(MAGIC + " " + str(len(counts)) + " " + " ".join(map(str, counts)) + "\n")
            for v in values:
                fh.write(repr(float(v)) + "\n")


def read_field(path):
    """Read a lodadapt-field v1 file (text or binary); returns (counts, values)."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC.encode():
        with open(path) as fh:
            header = fh.readline().split()
            d = int(header[2])
            counts = [int(x) for x in header[3 : 3 + d]]
            values = np.loadtxt(fh, dtype=float).reshape(-1)
    else:
        sidecar_path = str(path) + ".json"
        if not os.path.exists(sidecar_path):
            raise ConfigError(f"{path} is not a field file and has no JSON sidecar")
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)
        counts = [int(c) for c in sidecar["counts"]]
        values = np.fromfile(path, dtype="<f8")
    if len(values) != int(np.prod(counts)):
        raise ConfigError(f"field file {path} is truncated")
    return counts, values
