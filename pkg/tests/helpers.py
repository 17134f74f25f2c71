"""Shared synthetic data and independent oracles for the test modules."""
import itertools
from pathlib import Path

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.stats import multivariate_normal, norm

from binmap.localize import SparseObservationSet
from binmap.vessl import QW, QXZ, MixedModel


def cylinder(n_side=30, dim=20, arc=1.5 * np.pi, height=3.0, seed=0):
    """Grid on a cylinder patch, isometrically placed in R^dim.

    Returns the embedded points and the intrinsic (arc, height) coordinates.
    """
    g = np.linspace(0.0, 1.0, n_side)
    U, V = np.meshgrid(g, g)
    theta, h = arc * U.ravel(), height * V.ravel()
    surface = np.column_stack([np.cos(theta), np.sin(theta), h])
    rot = np.linalg.qr(np.random.default_rng(seed).normal(size=(dim, dim)))[0][:3]
    return surface @ rot, np.column_stack([theta, h])


def affine_patch(n=400, dim=10, seed=1):
    """Points on a random 2-D affine subspace of R^dim and their plane coordinates."""
    rng = np.random.default_rng(seed)
    coords = rng.uniform(size=(n, 2))
    return coords @ rng.normal(size=(2, dim)) + rng.normal(size=dim), coords


def brute_trustworthiness(high, low, k):
    """Direct evaluation of the trustworthiness sum with explicit rank tables."""
    n = high.shape[0]
    dh = np.linalg.norm(high[:, None] - high[None], axis=2)
    dl = np.linalg.norm(low[:, None] - low[None], axis=2)
    penalty = 0.0
    for i in range(n):
        order_h = [j for j in np.argsort(dh[i], kind="stable") if j != i]
        order_l = [j for j in np.argsort(dl[i], kind="stable") if j != i]
        rank = {j: r + 1 for r, j in enumerate(order_h)}
        near_h = set(order_h[:k])
        for j in order_l[:k]:
            if j not in near_h:
                penalty += rank[j] - k
    return 1.0 - 2.0 / (n * k * (2 * n - 3 * k - 1)) * penalty


# ---------------------------------------------------------------- variational oracles

def random_qxz(M, K, L, seed):
    rng = np.random.default_rng(seed)
    alpha = rng.dirichlet(np.ones(K), size=M)
    mu = rng.normal(scale=2.0, size=(M, K, L))
    B = rng.normal(size=(M, K, L, L))
    S = np.einsum("mkij,mklj->mkil", B, B) + 0.3 * np.eye(L)
    return QXZ(alpha, mu, S, np.log(alpha))


def random_qw(avail, M, seed):
    q = np.random.default_rng(seed).dirichlet(np.ones(M), size=avail.shape)
    return QW(q * avail[..., None])


def random_mixed(model, M, seed):
    rng = np.random.default_rng(seed)
    lam = rng.dirichlet(np.ones(M), size=model.D)
    return MixedModel(model, model.sigma2 * rng.uniform(0.5, 2.0, size=model.D), lam)


def random_obs(T, D, seed, p=0.7):
    rng = np.random.default_rng(seed)
    return SparseObservationSet(rng.normal(scale=3.0, size=(T, D)), rng.random((T, D)) < p)


def gauss_expect(f, mean, cov, n_nodes=4):
    """E[f(x)] for x ~ N(mean, cov) by tensor Gauss-Hermite quadrature.

    Exact when ``f`` is a polynomial of degree below ``2 * n_nodes``; every
    integrand here is quadratic.
    """
    nodes, weights = hermegauss(n_nodes)
    weights = weights / weights.sum()
    chol = np.linalg.cholesky(np.atleast_2d(cov))
    total = 0.0
    for idx in itertools.product(range(n_nodes), repeat=chol.shape[0]):
        total += np.prod(weights[list(idx)]) * f(mean + chol @ nodes[list(idx)])
    return total


def expected_sq_oracle(model, qxz, y, d):
    """(M,) expected squared residual of a cell value y in dim d, by quadrature."""
    out = np.zeros(qxz.M)
    for m in range(qxz.M):
        for k in range(model.K):
            f = lambda x: (y - model.A[k, d] @ x - model.b[k, d]) ** 2
            out[m] += qxz.alpha[m, k] * gauss_expect(f, qxz.mu[m, k], qxz.S[m, k])
    return out


def enumerated_free_energy(mixed, obs, qxz, cell_groups, group_q):
    """E_q[log p - log q] summed over every assignment and piece, x by quadrature.

    ``cell_groups`` lists the available cells sharing one assignment variable,
    ``group_q`` its distribution.
    """
    base = mixed.base
    M, K = qxz.alpha.shape
    total = 0.0
    for ws in itertools.product(range(M), repeat=len(cell_groups)):
        p_w = np.prod([group_q[g][w] for g, w in enumerate(ws)])
        if p_w == 0:
            continue
        log_qw = sum(np.log(group_q[g][w]) for g, w in enumerate(ws))
        for zs in itertools.product(range(K), repeat=M):
            p_z = np.prod([qxz.alpha[m, z] for m, z in enumerate(zs)])

            def integrand(x):
                val = -log_qw
                for g, w in enumerate(ws):
                    for (t, d) in cell_groups[g]:
                        z = zs[w]
                        mean = base.A[z, d] @ x[w:w + 1] + base.b[z, d]
                        val += np.log(mixed.lam[d, w]) + norm.logpdf(obs.y[t, d], mean,
                                                                     np.sqrt(mixed.sigma2[d]))
                for m, z in enumerate(zs):
                    val += -np.log(K) + norm.logpdf(x[m], base.c[z, 0], np.sqrt(base.gamma[z, 0, 0]))
                    val -= np.log(qxz.alpha[m, z]) + norm.logpdf(x[m], qxz.mu[m, z, 0],
                                                                 np.sqrt(qxz.S[m, z, 0, 0]))
                return val

            mean = np.array([qxz.mu[m, z, 0] for m, z in enumerate(zs)])
            cov = np.diag([qxz.S[m, z, 0, 0] for m, z in enumerate(zs)])
            total += p_w * p_z * gauss_expect(integrand, mean, cov)
    return total


def grid_posterior(model, y, weights, sigma2, half_width=20.0, n=1201):
    """Mixture weights, means and covariances of the weighted direction posterior by 2-D quadrature."""
    axis = np.linspace(-half_width, half_width, n)
    step = axis[1] - axis[0]
    G = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    logs = []
    for k in range(model.K):
        pred = G @ model.A[k].T + model.b[k]
        loglik = sum(weights[t] @ norm.logpdf(y[t], pred, np.sqrt(sigma2)).T for t in range(y.shape[0]))
        logs.append(-np.log(model.K) + multivariate_normal(model.c[k], model.gamma[k]).logpdf(G)
                    + loglik)
    logs = np.array(logs)
    dens = np.exp(logs - logs.max()) * step * step
    mass = dens.sum(axis=1)
    means = dens @ G / mass[:, None]
    covs = np.stack([(G - means[k]).T @ ((G - means[k]) * dens[k][:, None]) / mass[k]
                     for k in range(model.K)])
    return mass / mass.sum(), means, covs


# ---------------------------------------------------------------- command-line pipeline

PIPELINE_SETTINGS = """\
grid_step: 5
K: 4
ladder: [1, 2, 4]
em_max_iter: 60
vem_max_iter: 15
seed: 4
"""

PIPELINE_SCENE = """\
seed: 21
duration: 0.5
noise_level: -60
sources:
  - direction: [-15, 0]
    signal: noise_bursts
  - direction: [15, 5]
    signal: white_noise
"""


def run_cli_pipeline(root: Path, settings: Path, scene: Path) -> Path:
    """simulate, grid, train, extract, localize, separate, embed and eval into ``root``."""
    from binmap import cli

    def run(*argv):
        code = cli.main([str(a) for a in argv])
        assert code == 0, f"{argv[0]} exited with {code}"

    run("simulate", scene, "--config", settings, "--out", root / "sim")
    run("grid", "--config", settings, "--az-range", -20, 20, "--el-range", -10, 10,
        "--out", root / "grid")
    run("train", root / "grid" / "trainset.bac", "--ladder", "--config", settings,
        "--out", root / "model")
    model, wav = root / "model" / "model.bac", root / "sim" / "mixture.wav"
    run("extract", wav, "--config", settings, "--out", root / "obs")
    run("localize", wav, "--model", model, "--config", settings, "--out", root / "loc")
    run("separate", wav, "--model", model, "--sources", 2, "--config", settings,
        "--out", root / "sep")
    run("embed", root / "grid" / "trainset.bac", "--k", 8, "--config", settings,
        "--out", root / "emb")
    run("eval", "--runs", root / "sep", "--truth", root / "sim" / "truth.bac",
        "--config", settings, "--out", root / "eval")
    return root


def output_files(root: Path):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())
