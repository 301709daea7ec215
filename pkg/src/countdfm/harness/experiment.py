"""Monte Carlo experiments: simulate, fit, select and forecast over replications,
then write the aggregate CSV tables."""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CountDFMError, ParameterError
from ..estimation import DEFAULT_R_NB, fit
from ..kalman import predict_horizon
from ..link import LinkBank
from ..marginals import MarginalSpec
from ..model import DfmParams, PSI_PRESETS, preset_marginals, preset_params, simulate, standardize
from ..selection import LAG_METHODS, RANK_METHODS, select_lag, select_rank
from ..smc import DEFAULT_QMC, DEFAULT_SWEEPS, forecast_distribution, point_forecast, run_sisr
from . import io
from .metrics import ForecastRecord, forecast_scores, relative_bias, relative_loss

log = logging.getLogger(__name__)

PARAM_NAMES = ("theta", "Lambda", "Sigma_eps", "Psi", "Sigma_eta")
FORECAST_COLUMNS = ("RMFE_Y", "RMFE_Z", "RMFE_X", "Sens", "Sens_Last", "Sens_Marginal")
_SCORE_KEYS = ("rmfe_y", "rmfe_z", "rmfe_x", "sens", "sens_last", "sens_marginal")


@dataclass
class ExperimentConfig:
    """Everything one experiment needs.  ``params``/``marginals`` override the
    presets when given; ``p`` defaults to the order of the ``psi`` preset."""

    name: str = "experiment"
    family: str = "bernoulli"
    psi: str = "1"
    d: int = 15
    r: int = 2
    p: int | None = None
    T: int = 200
    burn_in: int = 500
    replications: int = 100
    seed: int = 0
    param_seed: int | None = None
    estimate: bool = True
    forecast: bool = False
    rank_methods: list[str] = field(default_factory=list)
    lag_methods: list[str] = field(default_factory=list)
    r_max: int = 8
    p_max: int = 6
    B: int = 5
    holdout: int = 5
    window: int = 10
    N: int = 1000
    n_qmc: int = DEFAULT_QMC
    sweeps: int = DEFAULT_SWEEPS
    r_nb: int = DEFAULT_R_NB
    degenerate: str = "drop"
    threads: int | None = None
    params: DfmParams | None = None
    marginals: list[MarginalSpec] | None = None

    def __post_init__(self):
        if self.replications < 0:
            raise ParameterError("replications must be >= 0")
        self.rank_methods = [m.upper() for m in self.rank_methods]
        self.lag_methods = [m.upper() for m in self.lag_methods]
        bad = [m for m in self.rank_methods if m not in RANK_METHODS] + [
            m for m in self.lag_methods if m not in LAG_METHODS
        ]
        if bad:
            raise ParameterError(f"unknown selection methods {bad}")
        if self.params is None and str(self.psi) not in PSI_PRESETS:
            raise ParameterError(f"unknown Psi preset {self.psi!r}")
        if self.forecast and self.holdout < 1:
            raise ParameterError("forecasting needs holdout >= 1")

    @property
    def lag_order(self) -> int:
        if self.p is not None:
            return self.p
        if self.params is not None:
            return self.params.p
        return len(PSI_PRESETS[str(self.psi)])

    def replication_seeds(self) -> list[np.random.SeedSequence]:
        # (seed, k) entropy gives distinct, independent streams per replication
        return [np.random.SeedSequence((self.seed, k)) for k in range(self.replications)]

    def true_model(self) -> tuple[DfmParams, list[MarginalSpec]]:
        if self.params is not None:
            P = self.params
        else:
            ps = self.seed if self.param_seed is None else self.param_seed
            P = preset_params(str(self.psi), self.d, self.r, seed=ps)
        if self.marginals is not None:
            m = list(self.marginals)
        else:
            m = preset_marginals(self.family, P.d)
        if len(m) != P.d:
            raise ParameterError(f"{len(m)} marginals for d={P.d}")
        return P, m

    def families(self) -> list[str]:
        _, m = self.true_model()
        return [s.family.value for s in m]

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out["params"] = None if self.params is None else io.params_to_dict(self.params)
        out["marginals"] = None if self.marginals is None else [s.to_dict() for s in self.marginals]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ParameterError(f"unknown config keys {sorted(unknown)}")
        kw = dict(data)
        if kw.get("params") is not None:
            kw["params"] = io.params_from_dict(kw["params"])
        if kw.get("marginals") is not None:
            kw["marginals"] = [MarginalSpec.from_dict(s) for s in kw["marginals"]]
        if "psi" in kw:
            kw["psi"] = str(kw["psi"])
        return cls(**kw)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(io.load_json(path))


def save_config(path, config: ExperimentConfig) -> None:
    io.save_json(path, config.to_dict())


# ----------------------------------------------------------------------------
# one replication


@dataclass
class ReplicationResult:
    index: int
    ok: bool = True
    error: str = ""
    estimates: dict[str, np.ndarray] = field(default_factory=dict)
    scores: dict[str, np.ndarray] = field(default_factory=dict)
    rank: dict[str, int] = field(default_factory=dict)
    lag: dict[str, int] = field(default_factory=dict)


def _stack_psi(Psi) -> np.ndarray:
    return np.hstack(Psi)


def run_replication(config: ExperimentConfig, index: int) -> ReplicationResult:
    res = ReplicationResult(index)
    try:
        _replicate(config, index, res)
    except (CountDFMError, np.linalg.LinAlgError, FloatingPointError) as exc:
        res.ok = False
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def _replicate(config: ExperimentConfig, index: int, res: ReplicationResult) -> None:
    P, marg = config.true_model()
    fams = [s.family.value for s in marg]
    s_sim, s_fc = config.replication_seeds()[index].spawn(2)
    sim = simulate(P, marg, config.T, burn_in=config.burn_in, seed=np.random.default_rng(s_sim))
    bank = LinkBank()
    p = config.lag_order

    if config.estimate:
        fm = fit(sim.X, fams, P.r, p, r_nb=config.r_nb, bank=bank)
        est = fm.params
        res.estimates = {
            "theta": np.concatenate([np.asarray(s.params, dtype=float) for s in fm.marginals]),
            "Lambda": est.Lambda,
            "Sigma_eps": est.Sigma_eps,
            "Psi": _stack_psi(est.Psi),
            "Sigma_eta": est.Sigma_eta,
        }

    for method in config.rank_methods:
        sel = select_rank(
            sim.X, fams, method, r_max=config.r_max, B=config.B, r_nb=config.r_nb, bank=bank, degenerate=config.degenerate
        )
        res.rank[method] = sel.selected
    for method in config.lag_methods:
        sel = select_lag(
            sim.X, fams, P.r, method, p_max=config.p_max, B=config.B, r_nb=config.r_nb, bank=bank, degenerate=config.degenerate
        )
        res.lag[method] = sel.selected

    if config.forecast:
        H = config.holdout
        T0 = config.T - H
        X_fit = sim.X[:T0]
        fm = fit(X_fit, fams, P.r, p, r_nb=config.r_nb, bank=bank)
        window = X_fit[-config.window :]
        ens = run_sisr(window, fm, config.N, s_fc, sweeps=config.sweeps, n_qmc=config.n_qmc)
        dist = forecast_distribution(ens, fm, H)
        pred = predict_horizon(ens.ss, ens.covs.Q_filt, ens.states, H)
        rec = ForecastRecord(
            point=point_forecast(dist),
            holdout=sim.X[T0:],
            history=X_fit,
            window=window,
            Y_particles=pred.Y[:, :, : P.r],
            Y_holdout=sim.Y[T0:],
            Y_history=sim.Y[:T0],
            Z_particles=pred.Z,
            Z_holdout=sim.Z[T0:],
            Z_history=sim.Z[:T0],
        )
        res.scores = forecast_scores(rec)


def _truths(config: ExperimentConfig) -> dict[str, np.ndarray]:
    P, marg = config.true_model()
    Ps, _, _ = standardize(P)
    return {
        "theta": np.concatenate([np.asarray(s.params, dtype=float) for s in marg]),
        "Lambda": Ps.Lambda,
        "Sigma_eps": Ps.Sigma_eps,
        "Psi": _stack_psi(Ps.Psi),
        "Sigma_eta": Ps.Sigma_eta,
    }


# ----------------------------------------------------------------------------
# driver


@dataclass
class ExperimentReport:
    results: list[ReplicationResult]
    files: dict[str, Path]

    @property
    def n_ok(self) -> int:
        return sum(r.ok for r in self.results)

    @property
    def n_failed(self) -> int:
        return len(self.results) - self.n_ok


def _run_all(config: ExperimentConfig) -> list[ReplicationResult]:
    n = config.replications
    workers = config.threads if config.threads is not None else (os.cpu_count() or 1)
    workers = max(1, min(workers, n))
    if n == 0:
        return []
    if workers == 1:
        return [run_replication(config, k) for k in range(n)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map keeps submission order, so reports do not depend on scheduling
        return list(pool.map(run_replication, [config] * n, range(n)))


def run_experiment(config: ExperimentConfig, out_dir) -> ExperimentReport:
    """Run every replication and write the report CSVs into ``out_dir``.

    Files: ``replications.csv`` always; ``estimation.csv`` (losses and
    biases), ``forecast.csv`` (per-horizon means), ``rank_selection.csv`` and
    ``lag_selection.csv`` (selection frequencies) for the enabled tasks.
    Failed replications are logged, listed in ``replications.csv`` and left
    out of the aggregates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = _run_all(config)
    ok = [r for r in results if r.ok]
    for r in results:
        if not r.ok:
            log.warning("replication %d failed: %s", r.index, r.error)
    files: dict[str, Path] = {}

    files["replications"] = out / "replications.csv"
    io.write_table(
        files["replications"],
        ["replication", "status", "message"],
        [[r.index, "ok" if r.ok else "failed", r.error] for r in results],
    )

    if config.estimate:
        rows = []
        if ok:
            truths = _truths(config)
            for name in PARAM_NAMES:
                est = [r.estimates[name] for r in ok]
                rows.append([name, relative_loss(est, truths[name]), relative_bias(est, truths[name]), len(ok)])
        files["estimation"] = out / "estimation.csv"
        io.write_table(files["estimation"], ["parameter", "loss", "bias", "replications"], rows)

    if config.forecast:
        rows = []
        if ok:
            means = {k: np.mean([r.scores[k] for r in ok], axis=0) for k in _SCORE_KEYS}
            for h in range(config.holdout):
                rows.append([h + 1] + [means[k][h] for k in _SCORE_KEYS] + [len(ok)])
        files["forecast"] = out / "forecast.csv"
        io.write_table(files["forecast"], ["h", *FORECAST_COLUMNS, "replications"], rows)

    for kind, methods, top in (("rank", config.rank_methods, config.r_max), ("lag", config.lag_methods, config.p_max)):
        if not methods:
            continue
        header = ["method"] + [str(c) for c in range(1, top + 1)] + ["replications"]
        rows = []
        if ok:
            for m in methods:
                picks = [getattr(r, kind)[m] for r in ok]
                rows.append([m] + [sum(p == c for p in picks) for c in range(1, top + 1)] + [len(ok)])
        files[f"{kind}_selection"] = out / f"{kind}_selection.csv"
        io.write_table(files[f"{kind}_selection"], header, rows)

    return ExperimentReport(results, files)
