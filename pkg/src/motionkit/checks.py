"""Self-contained property suite behind the `check` subcommand.

Each suite runs a batch of randomized (but seeded) verifications and
returns per-check counts.  The CLI exits nonzero if anything fails; the
same machinery powers the negative-control test that deliberately breaks
Sinkhorn's column scaling to prove the marginal check bites.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .data import (FlowGenParams, gen_flow_sample, read_flo, read_pfm,
                   read_ppm, sample_rng, write_flo, write_pfm, write_ppm)
from .denoiser import ista_project, orthonormalize, subspace_denoise
from .errors import FormatError
from .heads import convex_upsample
from .prototypes import sinkhorn_assign
from .tokenizer import make_image
from .heads import DepthMap, FlowField


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    failed: int = 0
    details: List[str] = field(default_factory=list)

    def record(self, ok: bool, detail: str = ""):
        if ok:
            self.passed += 1
        else:
            self.failed += 1
            if detail:
                self.details.append(detail)


def _suite_sinkhorn(perturb: bool = False) -> SuiteResult:
    res = SuiteResult("sinkhorn_marginals")
    g = sample_rng(101)
    for trial in range(40):
        k = int(g.integers(2, 17))
        n = int(g.integers(k, 129))
        v = Tensor(g.normal(size=(k, n)))
        q = sinkhorn_assign(v, reg=float(g.uniform(0.05, 1.0)), max_iters=500,
                            tol=1e-7, _skip_column_scaling=perturb).data
        row_ok = np.max(np.abs(q.sum(axis=1) - 1.0 / k)) < 1e-6
        col_ok = np.max(np.abs(q.sum(axis=0) - 1.0 / n)) < 1e-6
        res.record(bool(row_ok and col_ok and np.all(q >= 0)),
                   f"trial {trial}: marginals violated")
    # shift invariance
    v = g.normal(size=(6, 24))
    a = sinkhorn_assign(Tensor(v), reg=0.1).data
    b = sinkhorn_assign(Tensor(v + 7.3), reg=0.1).data
    res.record(bool(np.max(np.abs(a - b)) < 1e-8), "shift invariance violated")
    return res


def _suite_projector() -> SuiteResult:
    res = SuiteResult("projector_idempotence")
    g = sample_rng(102)
    for trial in range(25):
        d = int(g.integers(3, 12))
        p = int(g.integers(1, d + 1))
        u = orthonormalize(Tensor(g.normal(size=(d, p)))).data
        proj = u @ u.T
        res.record(bool(np.max(np.abs(proj @ proj - proj)) <= 1e-10),
                   f"trial {trial}: projector not idempotent")
        res.record(bool(np.max(np.abs(u.T @ u - np.eye(p))) <= 1e-10),
                   f"trial {trial}: basis not orthonormal")
    return res


def _suite_ista() -> SuiteResult:
    from .denoiser import SubspaceLayerParams
    res = SuiteResult("ista_contracts")
    g = sample_rng(103)
    for trial in range(20):
        d = int(g.integers(2, 9))
        layer = SubspaceLayerParams(
            U=[orthonormalize(Tensor(g.normal(size=(d, 1))))],
            O=Tensor(np.eye(d)), rho=Tensor(np.zeros(())),
            eps_step=float(g.uniform(0.01, 1.0)))
        z = g.normal(size=(d, 5))
        out = ista_project(Tensor(z), layer).data
        res.record(bool(np.allclose(out, np.maximum(z, 0))),
                   f"trial {trial}: identity dictionary is not relu")
        zero = ista_project(Tensor(np.zeros((d, 3))), layer).data
        res.record(bool(np.array_equal(zero, np.zeros((d, 3)))),
                   f"trial {trial}: zero input not preserved")
        layer.O = Tensor(np.eye(d) + 0.01 * g.normal(size=(d, d)))
        res.record(bool(np.all(ista_project(Tensor(z), layer).data >= 0)),
                   f"trial {trial}: output went negative")
    return res


def _suite_gradients() -> SuiteResult:
    from .denoiser import SubspaceLayerParams
    res = SuiteResult("gradient_checks")
    g = sample_rng(104)
    # constants are drawn once; f must be deterministic for the FD oracle
    mm_const = Tensor(g.normal(size=(4, 3)))
    sm_const = Tensor(np.linspace(-1, 1, 16).reshape(4, 4))
    checks: Dict[str, Callable[[Tensor], Tensor]] = {
        "matmul": lambda x: ad.tsum(ad.matmul(x, mm_const)),
        "softmax": lambda x: ad.tsum(ad.mul(ad.softmax(x, axis=0), sm_const)),
        "exp_log": lambda x: ad.tsum(ad.log(ad.add(ad.exp(x), 1.0))),
        "sum_sq": lambda x: ad.tsum(ad.mul(x, x)),
    }
    for name, f in checks.items():
        rep = finite_diff_check(f, Tensor(g.normal(size=(4, 4))), h=1e-4, tol=1e-4)
        res.record(bool(rep.passed), f"{name}: rel err {rep.max_rel_err:.2e}")
    bases = [orthonormalize(Tensor(g.normal(size=(6, 2)))) for _ in range(3)]
    layer = SubspaceLayerParams(U=bases, O=Tensor(np.eye(6) + 0.01 * g.normal(size=(6, 6))),
                                rho=Tensor(np.zeros(())), eps_step=0.1)
    weights = Tensor(g.normal(size=(6, 4)))
    rep = finite_diff_check(
        lambda z: ad.tsum(ad.mul(ista_project(subspace_denoise(z, layer), layer),
                                 weights)),
        Tensor(g.normal(size=(6, 4))), h=1e-4, tol=1e-3)
    res.record(bool(rep.passed), f"denoiser layer: rel err {rep.max_rel_err:.2e}")
    return res


def _suite_upsample() -> SuiteResult:
    res = SuiteResult("convex_upsample_bounds")
    g = sample_rng(105)
    for trial in range(15):
        c, gh, gw, f = 2, 3, 4, 3
        coarse = g.normal(size=(c, gh, gw))
        mask = Tensor(g.normal(size=(9 * f * f, gh, gw)) * 2.0)
        out = convex_upsample(Tensor(coarse), mask, f).data
        ok = True
        for i in range(gh * f):
            for j in range(gw * f):
                ci, cj = i // f, j // f
                nb = coarse[:, max(ci - 1, 0):ci + 2, max(cj - 1, 0):cj + 2]
                if not (np.all(out[:, i, j] >= nb.min(axis=(1, 2)) - 1e-9)
                        and np.all(out[:, i, j] <= nb.max(axis=(1, 2)) + 1e-9)):
                    ok = False
        res.record(ok, f"trial {trial}: fine value escaped coarse bounds")
        const = convex_upsample(Tensor(np.full((1, gh, gw), 1.7)), mask, f).data
        res.record(bool(np.allclose(const, 1.7, atol=1e-6)),
                   f"trial {trial}: constants not preserved")
    return res


def _suite_formats() -> SuiteResult:
    res = SuiteResult("format_fuzz")
    g = sample_rng(106)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        u = g.normal(size=(3, 4)).astype(np.float32)
        write_flo(tmp / "a.flo", FlowField(Tensor(u), Tensor(u), np.ones((3, 4), bool)))
        d = g.uniform(1, 5, size=(3, 4)).astype(np.float32)
        write_pfm(tmp / "a.pfm", DepthMap(Tensor(d), np.ones((3, 4), bool)))
        write_ppm(tmp / "a.pgm", make_image(g.uniform(size=(3, 4)).astype(np.float32)))
        readers = {"a.flo": read_flo, "a.pfm": read_pfm, "a.pgm": read_ppm}
        for fname, reader in readers.items():
            # round trip must hold before fuzzing
            try:
                reader(tmp / fname)
                res.record(True)
            except Exception:  # noqa: BLE001
                res.record(False, f"{fname}: clean file failed to read")
                continue
            blob = bytearray((tmp / fname).read_bytes())
            for trial in range(80):
                mutated = bytearray(blob)
                pos = int(g.integers(0, min(16, len(mutated))))
                mutated[pos] = int(g.integers(0, 256))
                if g.uniform() < 0.3:
                    mutated = mutated[:int(g.integers(0, len(mutated)))]
                (tmp / "fuzz").write_bytes(bytes(mutated))
                try:
                    reader(tmp / "fuzz")
                    res.record(True)  # mutation happened to stay readable
                except FormatError:
                    res.record(True)
                except Exception as exc:  # noqa: BLE001
                    res.record(False,
                               f"{fname} trial {trial}: {type(exc).__name__}: {exc}")
    return res


SUITES: Dict[str, Callable[[], SuiteResult]] = {
    "sinkhorn_marginals": _suite_sinkhorn,
    "projector_idempotence": _suite_projector,
    "ista_contracts": _suite_ista,
    "gradient_checks": _suite_gradients,
    "convex_upsample_bounds": _suite_upsample,
    "format_fuzz": _suite_formats,
}


def run_all(perturb_sinkhorn: bool = False) -> List[SuiteResult]:
    results = []
    for name, suite in SUITES.items():
        if name == "sinkhorn_marginals":
            results.append(_suite_sinkhorn(perturb=perturb_sinkhorn))
        else:
            results.append(suite())
    return results
