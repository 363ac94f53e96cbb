"""Brute-force oracles kept out of the production package.

The cavity-included model retains a truncated photon space and the raw
(un-eliminated) Hamiltonian and dissipators; it pins down the adiabatic
drive amplitude convention.
"""

import math

import numpy as np
import scipy.sparse as sp
from scipy.linalg import expm


def _kron_all(mats):
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


def cavity_included_trajectory(n_emitters, g, mu, kappa, gamma_s, gamma_d, deltas,
                               times, n_photons=4, delta_c=0.0):
    """<sigma_z>(t) per emitter for the full cavity+emitter master equation.

    Drive normalization: sqrt(kappa_c) A_in = (kappa/2) sqrt(mu); dephasing
    uses the (gamma_d/2)(sz rho sz - rho) convention.
    """
    dim_c = n_photons + 1
    a_c = sp.diags(np.sqrt(np.arange(1, dim_c)), 1, format="csr")
    id_c = sp.identity(dim_c, format="csr")
    sm = sp.csr_matrix(np.array([[0, 0], [1, 0]], dtype=complex))
    sz = sp.csr_matrix(np.diag([1.0, -1.0]).astype(complex))
    id_q = sp.identity(2, format="csr")

    def emb_cavity(op):
        return _kron_all([op] + [id_q] * n_emitters)

    def emb_spin(op, k):
        return _kron_all([id_c] + [op if j == k else id_q for j in range(n_emitters)])

    a_full = emb_cavity(a_c)
    h = delta_c * (a_full.conj().T @ a_full)
    for k in range(n_emitters):
        h = h + 0.5 * deltas[k] * emb_spin(sz, k)
        h = h + g * (a_full.conj().T @ emb_spin(sm, k) + emb_spin(sm.conj().T.tocsr(), k) @ a_full)
    drive = 0.5 * kappa * math.sqrt(mu)
    h = h + (-1j) * drive * (a_full.conj().T - a_full)

    collapse = [(kappa, a_full)]
    for k in range(n_emitters):
        if gamma_s > 0:
            collapse.append((gamma_s, emb_spin(sm, k)))
        if gamma_d > 0:
            collapse.append((0.5 * gamma_d, emb_spin(sz, k)))

    dim = dim_c * 2**n_emitters
    eye = sp.identity(dim, format="csr", dtype=complex)
    lv = -1j * (sp.kron(h, eye) - sp.kron(eye, h.T))
    for rate, op in collapse:
        ada = (op.conj().T @ op).tocsr()
        lv = lv + rate * (sp.kron(op, op.conj()) - 0.5 * sp.kron(ada, eye)
                          - 0.5 * sp.kron(eye, ada.T))
    lv = lv.toarray()

    rho = np.zeros((dim, dim), dtype=complex)
    ground_idx = 2**n_emitters - 1  # zero photons, all emitters |g>
    rho[ground_idx, ground_idx] = 1.0
    vec = rho.reshape(-1)
    sz_ops = [emb_spin(sz, k).toarray() for k in range(n_emitters)]
    out = np.empty((len(times), n_emitters))
    t_prev = 0.0
    for i, t in enumerate(times):
        if t > t_prev:
            vec = expm(lv * (t - t_prev)) @ vec
            t_prev = t
        rho_t = vec.reshape(dim, dim)
        for k in range(n_emitters):
            out[i, k] = np.trace(sz_ops[k] @ rho_t).real
    return out
