# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-step kernels. Mirrors ``_kernels_py`` operation for operation."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs

cnp.import_array()


def project_topk(double[::1] logits, Py_ssize_t k, double tau):
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t i, j, rank, best
    cdef double amax, total, ai, aj
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] w = out
    cdef char[::1] keep

    if n == 0:
        return out
    if k > n:
        k = n
    keep_arr = np.zeros(n, dtype=np.int8)
    keep = keep_arr

    # rank = number of entries strictly ahead of i (ties go to the lower index)
    for i in range(n):
        ai = logits[i]
        rank = 0
        for j in range(n):
            aj = logits[j]
            if aj > ai or (aj == ai and j < i):
                rank += 1
        if rank < k:
            keep[i] = 1

    amax = -1e308
    best = 0
    for i in range(n):
        if logits[i] > logits[best]:
            best = i
        if keep[i] and logits[i] > amax:
            amax = logits[i]

    total = 0.0
    for i in range(n):
        if keep[i]:
            w[i] = exp(logits[i] - amax)
            total += w[i]
    for i in range(n):
        w[i] = w[i] / total

    total = 0.0
    for i in range(n):
        if w[i] < tau:
            w[i] = 0.0
        total += w[i]
    if total <= 0.0:
        w[best] = 1.0
        total = 1.0
    for i in range(n):
        w[i] = w[i] / total
    return out


def gae(double[::1] rewards, double[::1] values, double terminal_value,
        double gamma, double lam):
    cdef Py_ssize_t n = rewards.shape[0]
    cdef Py_ssize_t t
    cdef double next_value = terminal_value
    cdef double running = 0.0
    cdef double delta
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] adv = out
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return out


def running_drawdown(double[::1] equity):
    cdef Py_ssize_t n = equity.shape[0]
    cdef Py_ssize_t t
    cdef double peak = -1e308
    peaks_arr = np.empty(n, dtype=np.float64)
    dd_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] peaks = peaks_arr
    cdef double[::1] dd = dd_arr
    for t in range(n):
        if equity[t] > peak:
            peak = equity[t]
        peaks[t] = peak
        dd[t] = equity[t] / peak - 1.0
    return peaks_arr, dd_arr


def step_accounting(double[::1] returns_row, double[::1] w, double[::1] w_prev,
                    double tc, double lam_sparse):
    cdef Py_ssize_t n = w.shape[0]
    cdef Py_ssize_t i
    cdef double gross = 0.0
    cdef double turnover = 0.0
    cdef Py_ssize_t active = 0
    for i in range(n):
        gross += returns_row[i] * w[i]
        turnover += fabs(w[i] - w_prev[i])
        if w[i] > 0.0:
            active += 1
    net = gross - tc * turnover - lam_sparse * (<double>active / <double>n)
    return gross, turnover, active, net
