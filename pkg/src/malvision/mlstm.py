"""mLSTM blocks: matrix memory with covariance updates and exponential gating.

Each block is pre-norm -> per-head q/k/v and scalar gates -> recurrence
over the sequence -> per-head layer norm -> output projection -> residual.
The input gate is exponential; the forget gate is sigmoid (or exponential,
by configuration).  A running log-scale stabilizer keeps the exponentials
bounded; the stabilized recurrence is exactly equivalent to the naive one
with the normalizer lower-bounded at 1.

Two evaluation paths exist:

  * ``mlstm_cell_step`` / ``mlstm_block_reference``: the sequential
    reference recurrence, plain numpy, one token at a time.
  * ``mlstm_block_forward``: the parallel form used for training.  It
    materializes the gate-decay matrix for the whole sequence and runs on
    the gradient tape.  It must (and is tested to) match the sequential
    form within 1e-5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericsError
from .tensor import (Tensor, add, assert_finite, cumsum, flip, layer_norm,
                     logsigmoid, maximum, mul, reshape, standardize, sub,
                     swapaxes, tabs, texp, tsum, where)

LN_EPS = 1e-5


@dataclass
class MLSTMBlockParams:
    """All learnable tensors of one mLSTM block."""

    heads: int
    pre_g: Tensor
    pre_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wi: Tensor  # (heads, D) input-gate map
    bi: Tensor
    wf: Tensor  # (heads, D) forget-gate map
    bf: Tensor
    mh_g: Tensor
    mh_b: Tensor
    wo: Tensor

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def named(self, prefix: str):
        for field in ("pre_g", "pre_b", "wq", "wk", "wv", "wi", "bi", "wf",
                      "bf", "mh_g", "mh_b", "wo"):
            yield f"{prefix}.{field}", getattr(self, field)


def init_mlstm_block(rng: np.random.Generator, dim: int, heads: int,
                     num_blocks: int, dtype=np.float32) -> MLSTMBlockParams:
    if dim % heads:
        raise DimensionError(f"dim {dim} not divisible by heads {heads}")
    std = math.sqrt(2.0 / (5.0 * dim))
    wo_std = 2.0 / max(num_blocks, 1) / math.sqrt(dim)

    def t(arr, name=None):
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    return MLSTMBlockParams(
        heads=heads,
        pre_g=t(np.ones(dim)),
        pre_b=t(np.zeros(dim)),
        wq=t(rng.normal(0.0, std, (dim, dim))),
        wk=t(rng.normal(0.0, std, (dim, dim))),
        wv=t(rng.normal(0.0, std, (dim, dim))),
        wi=t(np.zeros((heads, dim))),
        bi=t(rng.normal(0.0, 0.1, (heads,))),
        wf=t(np.zeros((heads, dim))),
        # positive forget bias keeps early memories alive at init
        bf=t(np.linspace(3.0, 6.0, heads)),
        mh_g=t(np.ones(dim)),
        mh_b=t(np.zeros(dim)),
        wo=t(rng.normal(0.0, wo_std, (dim, dim))),
    )


@dataclass
class MLSTMState:
    """Per-head recurrent state: matrix memory, normalizer, log stabilizer."""

    c: np.ndarray  # (heads, d, d)
    n: np.ndarray  # (heads, d)
    m: np.ndarray  # (heads,)

    @classmethod
    def zeros(cls, heads: int, head_dim: int, dtype=np.float64) -> "MLSTMState":
        return cls(c=np.zeros((heads, head_dim, head_dim), dtype=dtype),
                   n=np.zeros((heads, head_dim), dtype=dtype),
                   m=np.zeros(heads, dtype=dtype))


def _log_forget(fp: np.ndarray, forget: str) -> np.ndarray:
    if forget == "sigmoid":
        return np.minimum(fp, 0.0) - np.log1p(np.exp(-np.abs(fp)))
    if forget == "exp":
        return fp
    raise DimensionError(f"unknown forget gate mode {forget!r}")


def mlstm_recurrence_step(state: MLSTMState, qh: np.ndarray, kh: np.ndarray,
                          vh: np.ndarray, ip: np.ndarray, fp: np.ndarray,
                          forget: str = "sigmoid") -> tuple[MLSTMState, np.ndarray]:
    """One stabilized recurrence step on per-head arrays.

    ``kh`` must already carry the 1/sqrt(d) key scaling.  Equivalent to the
    unstabilized update C <- f*C + i*v*k^T, n <- f*n + i*k with output
    C q / max(|n.q|, 1).
    """
    logf = _log_forget(fp, forget)
    m_new = np.maximum(logf + state.m, ip)
    f_eff = np.exp(logf + state.m - m_new)
    i_eff = np.exp(ip - m_new)
    c_new = f_eff[:, None, None] * state.c + \
        i_eff[:, None, None] * (vh[:, :, None] * kh[:, None, :])
    n_new = f_eff[:, None] * state.n + i_eff[:, None] * kh
    num = np.einsum("hij,hj->hi", c_new, qh)
    qn = np.einsum("hj,hj->h", n_new, qh)
    den = np.maximum(np.abs(qn), np.exp(-m_new))
    h_tilde = num / den[:, None]
    return MLSTMState(c=c_new, n=n_new, m=m_new), h_tilde


def _layer_norm_np(x: np.ndarray, g: np.ndarray, b: np.ndarray,
                   eps: float = LN_EPS) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def mlstm_cell_step(state: MLSTMState, x_t: np.ndarray, params: MLSTMBlockParams,
                    forget: str = "sigmoid", step: int = 0
                    ) -> tuple[MLSTMState, np.ndarray]:
    """Full block step for one token: projections, recurrence, norm, residual."""
    x_t = np.asarray(x_t)
    h, d = params.heads, params.head_dim
    xn = _layer_norm_np(x_t, params.pre_g.data, params.pre_b.data)
    qh = (params.wq.data @ xn).reshape(h, d)
    kh = (params.wk.data @ xn).reshape(h, d) / math.sqrt(d)
    vh = (params.wv.data @ xn).reshape(h, d)
    ip = params.wi.data @ xn + params.bi.data
    fp = params.wf.data @ xn + params.bf.data
    new_state, h_tilde = mlstm_recurrence_step(state, qh, kh, vh, ip, fp, forget)
    mu = h_tilde.mean(axis=-1, keepdims=True)
    var = h_tilde.var(axis=-1, keepdims=True)
    hn = (h_tilde - mu) / np.sqrt(var + LN_EPS)
    merged = hn.reshape(h * d) * params.mh_g.data + params.mh_b.data
    y = x_t + params.wo.data @ merged
    if not (np.isfinite(y).all() and np.isfinite(new_state.c).all()
            and np.isfinite(new_state.n).all() and np.isfinite(new_state.m).all()):
        raise NumericsError(f"non-finite mLSTM state at step {step}")
    return new_state, y


def mlstm_block_reference(x: np.ndarray, params: MLSTMBlockParams,
                          reverse: bool = False,
                          forget: str = "sigmoid") -> np.ndarray:
    """Sequential scan of ``mlstm_cell_step`` over an (N, D) sequence."""
    seq = x[::-1] if reverse else x
    state = MLSTMState.zeros(params.heads, params.head_dim, dtype=x.dtype)
    out = np.empty_like(seq)
    for t in range(seq.shape[0]):
        state, out[t] = mlstm_cell_step(state, seq[t], params, forget, step=t)
    return out[::-1].copy() if reverse else out


def _mlstm_parallel(x: Tensor, params: MLSTMBlockParams, forget: str) -> Tensor:
    b, n, dim = x.shape
    h, d = params.heads, params.head_dim
    xn = layer_norm(x, params.pre_g, params.pre_b, LN_EPS)

    def heads_view(t: Tensor) -> Tensor:
        return swapaxes(reshape(t, (b, n, h, d)), 1, 2)  # (B, h, N, d)

    q = heads_view(xn @ swapaxes(params.wq, 0, 1))
    k = mul(heads_view(xn @ swapaxes(params.wk, 0, 1)), 1.0 / math.sqrt(d))
    v = heads_view(xn @ swapaxes(params.wv, 0, 1))
    ip = swapaxes(add(xn @ swapaxes(params.wi, 0, 1), params.bi), 1, 2)  # (B,h,N)
    fp = swapaxes(add(xn @ swapaxes(params.wf, 0, 1), params.bf), 1, 2)

    if forget == "sigmoid":
        logf = logsigmoid(fp)
    elif forget == "exp":
        logf = fp
    else:
        raise DimensionError(f"unknown forget gate mode {forget!r}")

    # decay matrix in log space: dlog[i, j] = phi_i - phi_j + ipre_j, j <= i
    phi = cumsum(logf, axis=2)
    dlog = add(sub(reshape(phi, (b, h, n, 1)), reshape(phi, (b, h, 1, n))),
               reshape(ip, (b, h, 1, n)))
    tril = np.tril(np.ones((n, n), dtype=bool))
    dlog = where(tril, dlog, -np.inf)
    # rowwise max is the running stabilizer; constant w.r.t. gradients
    # because the output is exactly invariant to it
    mrow = dlog.data.max(axis=-1, keepdims=True)
    dmat = texp(sub(dlog, Tensor(mrow)))

    scores = q @ swapaxes(k, -1, -2)           # (B, h, N, N)
    cmat = mul(scores, dmat)
    num = cmat @ v                              # (B, h, N, d)
    den = maximum(tabs(tsum(cmat, axis=-1, keepdims=True)),
                  Tensor(np.exp(-mrow).astype(x.dtype)))
    h_tilde = num / den

    hn = standardize(h_tilde, LN_EPS)
    merged = reshape(swapaxes(hn, 1, 2), (b, n, dim))
    normed = add(mul(merged, params.mh_g), params.mh_b)
    return add(x, normed @ swapaxes(params.wo, 0, 1))


def mlstm_block_forward(x: Tensor, params: MLSTMBlockParams,
                        reverse: bool = False,
                        forget: str = "sigmoid") -> Tensor:
    """Parallel block forward on the tape for a (B, N, D) batch.

    ``reverse`` flips the token order before the recurrence and flips the
    result back, so even-numbered encoder blocks scan from the far end.
    """
    if x.ndim != 3:
        raise DimensionError(f"expected (B, N, D) tokens, got {x.shape}")
    if x.shape[2] != params.dim:
        raise DimensionError(
            f"token dim {x.shape[2]} does not match block dim {params.dim}")
    if reverse:
        out = flip(_mlstm_parallel(flip(x, 1), params, forget), 1)
    else:
        out = _mlstm_parallel(x, params, forget)
    assert_finite(out, "mLSTM block output")
    return out
