# Write the benchmarking functions here.
# See "Writing benchmarks" in the asv docs for more information.

import numpy as np


def _setup(variant: str, dim: int = 2, tau=None, noise: str = "OU"):
    from collapse_sde import IntegratorConfig, ModelSpec, StateVector, Variant, derive_fdr_params
    from collapse_sde.hilbert import canonical_projectors
    from collapse_sde.noise import NoiseKind

    spec = ModelSpec(Variant(variant), canonical_projectors(dim), 1.0, 1.0, tau=tau, noise_kind=NoiseKind(noise))
    spec = derive_fdr_params(spec)
    psi0 = StateVector.from_populations(np.full(dim, 1 / dim))
    config = IntegratorConfig(dt=0.01 if tau is None else tau / 10, t_max=5.0)
    return spec, psi0, config


def batch(variant: str, size: int, dim: int = 2, tau=None, noise: str = "OU"):
    from collapse_sde.sde import integrate_batch

    spec, psi0, config = _setup(variant, dim, tau, noise)
    return integrate_batch(spec, psi0, config, range(size), master_seed=1)


class TimeSuite:
    params = ["TwoStateIto", "NStateStrat"]
    param_names = ["variant"]

    def time_single_trajectory(self, variant):
        batch(variant, 1)

    def time_batch_1024(self, variant):
        batch(variant, 1024)


class ColoredSuite:
    params = ["OU", "SBM"]
    param_names = ["noise"]

    def time_colored_batch(self, noise):
        batch("ColoredNState", 256, tau=0.05, noise=noise)


class PeakMemSuite:
    def peakmem_ensemble(self):
        from collapse_sde.stats import run_ensemble

        spec, psi0, config = _setup("NStateIto", 4)
        run_ensemble(spec, psi0, config, 2048, master_seed=1, workers=1)

    def peakmem_master(self):
        from collapse_sde.hilbert import pure_projector
        from collapse_sde.master import MasterConfig, integrate_master

        spec, psi0, _ = _setup("NStateStrat", 8)
        integrate_master(spec, pure_projector(psi0), MasterConfig(1e-3, 5.0, 10))


def timeraw_import_engine():
    return """
    from collapse_sde.stats import run_ensemble
    """
