from __future__ import annotations

import numpy as np

from ..autodiff import F, Module, Parameter, Tensor, uniform_fan_in
from ..data.metadata import MetadataRecord


class MetadataEncoder(Module):
    """Affine map ``W_meta @ M + b_meta`` into the shared width d_f.

    ``W_meta`` is stored (d_f, d_m). Records with no metadata at all use the
    learnable input vector ``e_m`` in place of ``M``.
    """

    def __init__(self, d_m: int, d_f: int, rng: np.random.Generator):
        self.w_meta = Parameter(uniform_fan_in(rng, d_m, (d_f, d_m)))
        self.b_meta = Parameter(np.zeros(d_f))
        self.e_m = Parameter(np.zeros(d_m))

    @property
    def d_m(self) -> int:
        return self.w_meta.shape[1]

    def __call__(self, values: np.ndarray, missing: np.ndarray) -> Tensor:
        """(B, d_m) values and (B,) fully-missing flags -> (B, 1, d_f)."""
        values = np.asarray(values)
        if values.ndim != 2 or values.shape[1] != self.d_m:
            raise ValueError(f"metadata width {values.shape} does not match d_m={self.d_m}")
        miss = np.asarray(missing, dtype=bool)[:, None]
        observed = np.where(miss, 0.0, values).astype(self.w_meta.dtype)
        inputs = F.as_tensor(observed, like=self.w_meta) + F.as_tensor(
            miss.astype(self.w_meta.dtype), like=self.w_meta
        ) * self.e_m
        out = F.matmul(inputs, self.w_meta.T) + self.b_meta
        return out.reshape(values.shape[0], 1, self.w_meta.shape[0])


def embed_metadata(rec: MetadataRecord, enc: MetadataEncoder) -> Tensor:
    """Single record -> one metadata token (1, d_f)."""
    if not rec.fully_missing and not rec.complete:
        raise ValueError(f"record {rec.patient_id} is partially missing; impute before embedding")
    out = enc(rec.values[None], np.array([rec.fully_missing]))
    return out.reshape(1, out.shape[-1])
