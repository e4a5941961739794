"""Experiment configs, the mechanism comparison, and the property suites.

Everything here is driven by a single JSON-serializable config with one
mandatory master seed. All randomness is split off that seed with spawned
child streams, so every output file is byte-reproducible for a fixed config.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .agents import AgentSpec, DynamicsResult, best_response_dynamics, ic_regret
from .ctr_model import ClickDataset
from .domain import enumerate_responses
from .errors import ConfigError
from .irpo import (
    IrpoConfig,
    DpoConfig,
    PolicyParams,
    mosaic_select,
    policy_distribution,
    run_irpo,
)
from .mechanism import (
    BasePolicy,
    MechanismConfig,
    RewardConfig,
    log_optimal_policy,
    optimal_policy,
    realized_payment,
    response_reward,
    sample_responses,
)
from .properties import (
    StepAllocationEnv,
    bid_click_spearman,
    continuity_sweep,
    monotonicity_sweep,
    optimality_perturbation_test,
    refinement_ratio,
    sample_exact_env,
)
from .user_model import ScenarioConfig, UserModelParams, sample_clicks, sample_context

__all__ = [
    "BasePolicyConfig",
    "EvaluationConfig",
    "ExperimentConfig",
    "MechanismMetrics",
    "MetricsReport",
    "PropertySummary",
    "default_config",
    "default_base_policy",
    "config_hash",
    "run_experiment",
    "verify_properties",
    "run_equilibrium",
    "simulate_baseline",
    "load_agents",
    "MECHANISM_NAMES",
]

MECHANISM_NAMES = ("pretrained", "mosaic", "irpo", "oracle")

CONTINUITY_BAND = (0.4, 0.6)
VM_REGRET_SLACK = 1e-9


@dataclass(frozen=True)
class BasePolicyConfig:
    kappa: float = 1.0
    format_error_rate: float = 0.02


@dataclass(frozen=True)
class EvaluationConfig:
    test_contexts: int = 200
    mosaic_m: int = 20
    metrics_ctr_source: str = "oracle"

    def __post_init__(self):
        if self.test_contexts < 1 or self.mosaic_m < 1:
            raise ValueError("test_contexts and mosaic_m must be >= 1")
        if self.metrics_ctr_source not in ("oracle", "pctr"):
            raise ValueError("metrics_ctr_source must be 'oracle' or 'pctr'")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    mechanism: MechanismConfig = field(default_factory=MechanismConfig)
    base_policy: BasePolicyConfig = field(default_factory=BasePolicyConfig)
    irpo: IrpoConfig = field(default_factory=IrpoConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    output_dir: str | None = None
    seed: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        try:
            scenario_d = dict(obj.get("scenario", {}))
            if "user_model" in scenario_d:
                scenario_d["user_model"] = UserModelParams(**scenario_d["user_model"])
            mech_d = dict(obj.get("mechanism", {}))
            if "reward" in mech_d:
                mech_d["reward"] = RewardConfig(**mech_d["reward"])
            irpo_d = dict(obj.get("irpo", {}))
            if "dpo" in irpo_d:
                irpo_d["dpo"] = DpoConfig(**irpo_d["dpo"])
            if "seed" not in obj:
                raise ValueError("config must set a seed")
            return cls(
                scenario=ScenarioConfig(**scenario_d),
                mechanism=MechanismConfig(**mech_d),
                base_policy=BasePolicyConfig(**obj.get("base_policy", {})),
                irpo=IrpoConfig(**irpo_d),
                evaluation=EvaluationConfig(**obj.get("evaluation", {})),
                output_dir=obj.get("output_dir"),
                seed=int(obj["seed"]),
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(obj)


def default_config(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        return ExperimentConfig.from_dict(d)
    return cfg


def config_hash(config: ExperimentConfig) -> str:
    canon = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def default_base_policy(config: ExperimentConfig | ScenarioConfig) -> BasePolicy:
    if isinstance(config, ScenarioConfig):
        scenario, bp = config, BasePolicyConfig()
    else:
        scenario, bp = config.scenario, config.base_policy
    space = enumerate_responses(scenario.n_ads, scenario.k_max, scenario.quality_levels)
    return BasePolicy.from_ad_count_prior(space, bp.kappa, bp.format_error_rate)


@dataclass(frozen=True)
class MechanismMetrics:
    revenue_per_query: float
    reward_per_query: float
    reward_per_query_pctr: float
    reward_per_query_oracle: float
    clicks_per_query: float
    mean_n_ads: float

    def __post_init__(self):
        if self.revenue_per_query < 0:
            raise ValueError("revenue_per_query must be >= 0")


@dataclass(frozen=True)
class MetricsReport:
    mechanisms: dict[str, MechanismMetrics]
    diagnostics: dict[str, object]
    seed: int
    config_hash: str
    version: str

    def to_json_text(self) -> str:
        rows = {}
        for name, m in self.mechanisms.items():
            row = asdict(m)
            row.update({"seed": self.seed, "config_hash": self.config_hash, "version": self.version})
            rows[name] = row
        payload = {
            "mechanisms": rows,
            "diagnostics": self.diagnostics,
            "meta": {"seed": self.seed, "config_hash": self.config_hash, "version": self.version},
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def run_experiment(config: ExperimentConfig) -> MetricsReport:
    """Train the policy, then race the four mechanisms on held-out queries.

    Compared on identical test contexts with freshly drawn bids: the untrained
    base prior, best-of-m selection over base samples, the trained policy, and
    the exact optimum under the ground-truth click model. Revenue uses the
    realized click-payment rule on simulated clicks.
    """
    scenario = config.scenario
    base = default_base_policy(config)
    um = scenario.user_model
    mech = config.mechanism
    reward_cfg = mech.reward

    root = np.random.SeedSequence(config.seed)
    train_ss, ctx_ss, spearman_ss, *mech_ss = root.spawn(3 + len(MECHANISM_NAMES))

    params, pctr, history = run_irpo(
        scenario, config.irpo, mech, np.random.default_rng(train_ss), base=base
    )

    ctx_rng = np.random.default_rng(ctx_ss)
    test_contexts = [sample_context(ctx_rng, scenario) for _ in range(config.evaluation.test_contexts)]

    mechanisms: dict[str, MechanismMetrics] = {}
    for name, ss in zip(MECHANISM_NAMES, mech_ss):
        rng = np.random.default_rng(ss)
        revenue = reward_p = reward_o = clicks_n = ads_n = 0.0
        for context in test_contexts:
            if name == "pretrained":
                y = sample_responses(rng, base.dist, 1, base.format_error_rate)[0]
            elif name == "mosaic":
                y = mosaic_select(base, context, pctr, reward_cfg, config.evaluation.mosaic_m, rng)
            elif name == "irpo":
                dist = policy_distribution(params, context, base)
                y = sample_responses(rng, dist, 1, base.format_error_rate)[0]
            else:
                dist = optimal_policy(context, base, um, mech)
                y = sample_responses(rng, dist, 1, base.format_error_rate)[0]
            clicks = sample_clicks(rng, um, context, y)
            revenue += float(realized_payment(clicks, context.bids).sum())
            reward_p += response_reward(context, y, pctr, reward_cfg)
            reward_o += response_reward(context, y, um, reward_cfg)
            clicks_n += len(clicks.clicked_ads)
            ads_n += y.n_ads
        n = len(test_contexts)
        primary = reward_o if config.evaluation.metrics_ctr_source == "oracle" else reward_p
        mechanisms[name] = MechanismMetrics(
            revenue_per_query=revenue / n,
            reward_per_query=primary / n,
            reward_per_query_pctr=reward_p / n,
            reward_per_query_oracle=reward_o / n,
            clicks_per_query=clicks_n / n,
            mean_n_ads=ads_n / n,
        )

    # Exact diagnostics on the test contexts: how close training got to the
    # closed-form optimum of its own (final)-reward objective. Both KLs use
    # the optimum's log form directly; its probabilities underflow at small
    # beta.
    kl_trained = kl_base = 0.0
    for context in test_contexts:
        log_star = log_optimal_policy(context, base, pctr, mech)
        trained = policy_distribution(params, context, base).probs
        mask = trained > 0
        kl_trained += float(
            np.sum(trained[mask] * (np.log(trained[mask]) - log_star[mask]))
        )
        kl_base += float(np.sum(base.probs * (base.log_probs - log_star)))
    n = len(test_contexts)

    snapshots = [PolicyParams.zeros()] + [
        PolicyParams(theta=rec.theta, ref_theta=rec.theta) for rec in history
    ]
    spearman = bid_click_spearman(
        snapshots, scenario, base, np.random.default_rng(spearman_ss)
    )

    diagnostics = {
        "kl_trained_to_optimal": kl_trained / n,
        "kl_base_to_optimal": kl_base / n,
        "kl_contraction": (kl_trained / kl_base) if kl_base > 0 else 0.0,
        "spearman_by_epoch": spearman,
        "unbiasedness_gap_by_epoch": [rec.unbiasedness_gap for rec in history],
        "history_oracle_reward": [rec.oracle_reward_per_query for rec in history],
    }
    report = MetricsReport(
        mechanisms=mechanisms,
        diagnostics=diagnostics,
        seed=config.seed,
        config_hash=config_hash(config),
        version=__version__,
    )

    if config.output_dir:
        out = Path(config.output_dir)
        _write(out / "metrics.json", report.to_json_text())
        _write(out / "history.csv", history.to_csv_text())
        spearman_lines = ["epoch,spearman"] + [
            f"{epoch},{rho!r}" for epoch, rho in enumerate(spearman)
        ]
        _write(out / "curves" / "spearman_by_epoch.csv", "\n".join(spearman_lines) + "\n")
    return report


@dataclass(frozen=True)
class PropertySummary:
    monotonicity_passed: bool
    monotonicity_max_violation: float
    continuity_passed: bool
    continuity_ratios: tuple[float, ...]
    negative_control_detected: bool
    optimality_passed: bool
    optimality_worst_gap: float
    vm_ic_passed: bool
    vm_regret_max: float
    spearman_by_epoch: tuple[float, ...]

    @property
    def passed(self) -> bool:
        return (
            self.monotonicity_passed
            and self.continuity_passed
            and self.negative_control_detected
            and self.optimality_passed
            and self.vm_ic_passed
        )

    def to_json_text(self) -> str:
        d = asdict(self)
        d["passed"] = self.passed
        return json.dumps(d, sort_keys=True, indent=2) + "\n"


def verify_properties(
    config: ExperimentConfig,
    n_monotonicity: int = 200,
    n_continuity: int = 50,
    n_optimality: int = 50,
    n_vm: int = 100,
    inject_step_control: bool = False,
    with_training: bool = True,
) -> PropertySummary:
    """Run the hard property checks on seeded exact-optimum environments.

    ``inject_step_control`` swaps the environments under the continuity check
    for the discrete slot-auction control, which must make the check fail.
    The bid-click correlation needs a trained policy, so a training run is
    included unless ``with_training`` is false.
    """
    scenario = config.scenario
    base = default_base_policy(config)
    mech = config.mechanism
    root = np.random.SeedSequence(config.seed)
    mono_ss, cont_ss, opt_ss, vm_ss, train_ss, sp_ss = root.spawn(6)

    grid = np.arange(1.0, 101.0)
    rng = np.random.default_rng(mono_ss)
    max_violation = 0.0
    mono_ok = True
    first_mono = None
    for _ in range(n_monotonicity):
        env = sample_exact_env(rng, scenario, base, mech)
        res = monotonicity_sweep(env, grid)
        if first_mono is None:
            first_mono = res
        max_violation = max(max_violation, res.max_violation)
        mono_ok = mono_ok and res.passed

    rng = np.random.default_rng(cont_ss)
    ratios = []
    first_cont = None
    for _ in range(n_continuity):
        env = sample_exact_env(rng, scenario, base, mech)
        if inject_step_control:
            env = StepAllocationEnv(
                context=env.context, ad=env.ad, base=base, user_model=scenario.user_model
            )
        if first_cont is None:
            first_cont = continuity_sweep(env, 1.0, 100.0, 0.01)
        ratios.append(refinement_ratio(env, 1.0, 100.0, 0.02))
    lo, hi = CONTINUITY_BAND
    cont_ok = all(lo <= r <= hi for r in ratios)

    # The detector must reject the built-in step allocation regardless of the
    # environments under test.
    rng = np.random.default_rng(np.random.SeedSequence(config.seed + 977))
    control_env = sample_exact_env(rng, scenario, base, mech)
    control = StepAllocationEnv(
        context=control_env.context, ad=control_env.ad, base=base, user_model=scenario.user_model
    )
    control_ratio = refinement_ratio(control, 1.0, 100.0, 0.02)
    control_detected = not (lo <= control_ratio <= hi)

    rng = np.random.default_rng(opt_ss)
    opt_ok = True
    worst_gap = -np.inf
    for _ in range(n_optimality):
        env = sample_exact_env(rng, scenario, base, mech)
        res = optimality_perturbation_test(env, trials=1000, magnitude=0.5, rng=rng)
        opt_ok = opt_ok and res.passed
        worst_gap = max(worst_gap, res.worst_gap)

    rng = np.random.default_rng(vm_ss)
    vm_ok = True
    vm_regret = 0.0
    for _ in range(n_vm):
        env = sample_exact_env(rng, scenario, base, mech)
        roi = float(rng.choice([1.0, 1.25, 2.0, 4.0]))
        value = float(rng.integers(10, 101))
        agent = AgentSpec(kind="VM", value=value, roi=roi)
        regret = ic_regret(env, agent, grid)
        vm_regret = max(vm_regret, regret)
        vm_ok = vm_ok and regret <= VM_REGRET_SLACK

    spearman: tuple[float, ...] = ()
    if with_training:
        params, pctr, history = run_irpo(
            scenario, config.irpo, mech, np.random.default_rng(train_ss), base=base
        )
        snapshots = [PolicyParams.zeros()] + [
            PolicyParams(theta=rec.theta, ref_theta=rec.theta) for rec in history
        ]
        spearman = tuple(
            bid_click_spearman(snapshots, scenario, base, np.random.default_rng(sp_ss))
        )

    summary = PropertySummary(
        monotonicity_passed=mono_ok,
        monotonicity_max_violation=max_violation,
        continuity_passed=cont_ok,
        continuity_ratios=tuple(ratios),
        negative_control_detected=control_detected,
        optimality_passed=opt_ok,
        optimality_worst_gap=float(worst_gap),
        vm_ic_passed=vm_ok,
        vm_regret_max=vm_regret,
        spearman_by_epoch=spearman,
    )

    if config.output_dir:
        out = Path(config.output_dir)
        _write(out / "property_summary.json", summary.to_json_text())
        if first_mono is not None:
            _write(out / "curves" / "monotonicity.csv", first_mono.curve_csv_text())
        if first_cont is not None:
            _write(out / "curves" / "continuity.csv", first_cont.curve_csv_text())
        if spearman:
            lines = ["epoch,spearman"] + [f"{e},{r!r}" for e, r in enumerate(spearman)]
            _write(out / "curves" / "spearman_by_epoch.csv", "\n".join(lines) + "\n")
    return summary


def load_agents(path: str | Path) -> list[AgentSpec]:
    """Parse an agents spec file: a JSON list of {kind, value, roi?} objects."""
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read agents file {path}: {exc}") from exc
    if not isinstance(obj, list) or not obj:
        raise ConfigError("agents file must hold a non-empty JSON list")
    agents = []
    for i, row in enumerate(obj):
        try:
            agents.append(AgentSpec(**row))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad agent entry {i}: {exc}") from exc
    return agents


def run_equilibrium(config: ExperimentConfig, agents: list[AgentSpec], max_iters: int = 50) -> DynamicsResult:
    """Best-response dynamics among the given agents on a sampled context.

    Agent i bids for ad i; ads beyond the agent list keep their sampled bids
    as non-strategic competition. The trace lands in equilibrium_trace.csv.
    """
    scenario = config.scenario
    base = default_base_policy(config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    context = sample_context(rng, scenario)
    result = best_response_dynamics(
        context,
        base,
        scenario.user_model,
        config.mechanism,
        agents,
        bid_grid=np.arange(0.0, 101.0),
        max_iters=max_iters,
    )
    if config.output_dir:
        _write(Path(config.output_dir) / "equilibrium_trace.csv", result.trace_csv_text())
    return result


def simulate_baseline(config: ExperimentConfig) -> dict:
    """Deploy the base prior on sampled contexts and log simulated clicks.

    Writes clicks.csv (context_id, response_key, ad_id, click) and returns
    summary statistics of the run.
    """
    scenario = config.scenario
    base = default_base_policy(config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    data = ClickDataset()
    revenue = 0.0
    ads_n = 0
    n_responses = 0
    for _ in range(config.evaluation.test_contexts):
        context = sample_context(rng, scenario)
        for y in sample_responses(rng, base.dist, config.irpo.reward_samples, base.format_error_rate):
            n_responses += 1
            ads_n += y.n_ads
            if y.is_empty:
                continue
            clicks = sample_clicks(rng, scenario.user_model, context, y)
            data.add_clicks(context, y, clicks)
            revenue += float(realized_payment(clicks, context.bids).sum())
    summary = {
        "contexts": config.evaluation.test_contexts,
        "responses": n_responses,
        "rows": len(data),
        "mean_n_ads": ads_n / n_responses if n_responses else 0.0,
        "revenue_per_response": revenue / n_responses if n_responses else 0.0,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "version": __version__,
    }
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        data.to_csv(out / "clicks.csv")
        _write(out / "simulate_summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary
