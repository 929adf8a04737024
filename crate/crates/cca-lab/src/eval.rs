//! Distributional metrics and the fidelity/diversity trade-off harness.
//! Every expectation here is computed by exact enumeration, never by
//! sampling, so metrics add no noise to the checks built on them.

use serde::{Deserialize, Serialize};

use crate::dist::SequenceDistribution;
use crate::error::{Error, Result};
use crate::model::TabularArModel;
use crate::oracle::TrueDistributionSpec;

/// KL(p || q) in nats. Requires q > 0 wherever p > 0.
pub fn kl_divergence(p: &SequenceDistribution, q: &SequenceDistribution) -> Result<f64> {
    if p.space() != q.space() {
        return Err(Error::Input(
            "KL divergence requires distributions on the same space".into(),
        ));
    }
    let mut total = 0.0;
    for x in 0..p.space().num_sequences() {
        let px = p.prob(x);
        if px == 0.0 {
            continue;
        }
        let qx = q.prob(x);
        if qx == 0.0 {
            return Err(Error::Domain(format!(
                "KL divergence undefined: sequence {x} has p > 0 but q = 0"
            )));
        }
        total += px * (px.ln() - qx.ln());
    }
    // Rounding can push a vanishing divergence a hair below zero.
    Ok(total.max(0.0))
}

/// Total variation distance, (1/2) * sum |p - q|, in [0, 1].
pub fn tv_distance(p: &SequenceDistribution, q: &SequenceDistribution) -> Result<f64> {
    if p.space() != q.space() {
        return Err(Error::Input(
            "total variation requires distributions on the same space".into(),
        ));
    }
    let sum: f64 = p
        .probs()
        .iter()
        .zip(q.probs().iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(0.5 * sum)
}

/// Exact trade-off metrics of a sampling policy given as one distribution
/// per condition.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    /// Expected conditional residual under the policy, nats.
    pub fidelity: f64,
    /// exp of the expected posterior-vs-prior KL under the policy mixture.
    pub toy_is: f64,
    /// Expected policy entropy over conditions, nats.
    pub diversity: f64,
    /// KL(policy(.|c) || target(.|c, eval_scale)) per condition.
    pub kl_per_condition: Vec<f64>,
    /// The per-condition KLs averaged under p(c).
    pub kl_to_target: f64,
    /// Per-condition total variation to the target, averaged under p(c).
    pub tv_to_target: f64,
}

/// Evaluate a policy against a spec and the sharpened target at
/// `eval_scale`. `policy` holds one distribution per real condition.
pub fn evaluate_policy(
    policy: &[SequenceDistribution],
    spec: &TrueDistributionSpec,
    eval_scale: f64,
) -> Result<PolicyEvaluation> {
    let space = *spec.space();
    if policy.len() != space.num_conditions() {
        return Err(Error::Input(format!(
            "policy has {} distributions, spec has {} conditions",
            policy.len(),
            space.num_conditions()
        )));
    }
    for dist in policy {
        if dist.space() != &space {
            return Err(Error::Input(
                "policy distribution space does not match spec space".into(),
            ));
        }
    }
    let marginal = spec.marginal_x();

    let mut fidelity = 0.0;
    let mut diversity = 0.0;
    let mut mixture = vec![0.0f64; space.num_sequences()];
    for c in 0..space.num_conditions() {
        let weight = spec.p_c()[c];
        diversity += weight * policy[c].entropy();
        for x in 0..space.num_sequences() {
            let m = policy[c].prob(x);
            if m == 0.0 {
                continue;
            }
            mixture[x] += weight * m;
            let residual = spec.residual_against(&marginal, c, x)?;
            if residual == f64::NEG_INFINITY {
                return Err(Error::Domain(format!(
                    "policy puts mass on sequence {x} which condition {c} forbids; \
                     fidelity is -inf"
                )));
            }
            fidelity += weight * m * residual;
        }
    }

    let mut posterior_kl = 0.0;
    for (x, &mass) in mixture.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let posterior = spec.posterior_against(&marginal, x)?;
        let mut kl = 0.0;
        for c in 0..space.num_conditions() {
            if posterior[c] > 0.0 {
                kl += posterior[c] * (posterior[c].ln() - spec.p_c()[c].ln());
            }
        }
        posterior_kl += mass * kl;
    }
    let toy_is = posterior_kl.exp();

    let mut kl_per_condition = Vec::with_capacity(space.num_conditions());
    let mut kl_to_target = 0.0;
    let mut tv_to_target = 0.0;
    for c in 0..space.num_conditions() {
        let (target, _) = spec.target_distribution(c, eval_scale)?;
        let kl = kl_divergence(&policy[c], &target)?;
        let tv = tv_distance(&policy[c], &target)?;
        kl_per_condition.push(kl);
        kl_to_target += spec.p_c()[c] * kl;
        tv_to_target += spec.p_c()[c] * tv;
    }

    let evaluation = PolicyEvaluation {
        fidelity,
        toy_is,
        diversity,
        kl_per_condition,
        kl_to_target,
        tv_to_target,
    };
    evaluation.validate(&space)?;
    Ok(evaluation)
}

impl PolicyEvaluation {
    fn validate(&self, space: &crate::space::SequenceSpace) -> Result<()> {
        let max_entropy =
            space.seq_len() as f64 * (space.vocab_size() as f64).ln() + 1e-9;
        if !self.fidelity.is_finite() {
            return Err(Error::Numeric(format!(
                "fidelity is {}, expected finite",
                self.fidelity
            )));
        }
        if self.toy_is < 1.0 - 1e-10 {
            return Err(Error::Numeric(format!(
                "toy_is is {}, expected >= 1",
                self.toy_is
            )));
        }
        if !(0.0..=max_entropy).contains(&self.diversity) {
            return Err(Error::Numeric(format!(
                "diversity {} outside [0, N log V]",
                self.diversity
            )));
        }
        for (c, kl) in self.kl_per_condition.iter().enumerate() {
            if *kl < 0.0 || !kl.is_finite() {
                return Err(Error::Numeric(format!(
                    "KL to target for condition {c} is {kl}"
                )));
            }
        }
        if !(0.0..=1.0 + 1e-12).contains(&self.tv_to_target) {
            return Err(Error::Numeric(format!(
                "total variation {} outside [0, 1]",
                self.tv_to_target
            )));
        }
        Ok(())
    }
}

/// Trade-off metrics of a tabular model's conditional rows.
pub fn fidelity_and_diversity(
    model: &TabularArModel,
    spec: &TrueDistributionSpec,
) -> Result<(f64, f64, f64)> {
    let policy = model_policy(model, spec)?;
    // The evaluation target scale does not affect these three metrics.
    let evaluation = evaluate_policy(&policy, spec, 0.0)?;
    Ok((evaluation.fidelity, evaluation.toy_is, evaluation.diversity))
}

/// Materialize the per-condition distributions of a model.
pub fn model_policy(
    model: &TabularArModel,
    spec: &TrueDistributionSpec,
) -> Result<Vec<SequenceDistribution>> {
    if model.space() != spec.space() {
        return Err(Error::Input(
            "model space does not match spec space".into(),
        ));
    }
    (0..spec.space().num_conditions())
        .map(|c| model.model_distribution(c))
        .collect()
}

/// One evaluated experiment point, as persisted to metrics files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub loss_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_u: Option<f64>,
    pub kl_to_target: f64,
    pub kl_per_condition: Vec<f64>,
    pub tv_to_target: f64,
    pub fidelity: f64,
    pub toy_is: f64,
    pub diversity: f64,
    pub seed: u64,
    /// Wall-clock is informational only and deliberately not persisted:
    /// metrics files must be byte-identical across reruns.
    #[serde(skip)]
    pub wall_secs: f64,
}

impl MetricsRecord {
    pub fn from_evaluation(
        run_id: impl Into<String>,
        loss_kind: impl Into<String>,
        evaluation: &PolicyEvaluation,
        seed: u64,
    ) -> Self {
        MetricsRecord {
            run_id: run_id.into(),
            loss_kind: loss_kind.into(),
            axis_value: None,
            beta: None,
            lambda: None,
            scale: None,
            beta_d: None,
            lambda_u: None,
            kl_to_target: evaluation.kl_to_target,
            kl_per_condition: evaluation.kl_per_condition.clone(),
            tv_to_target: evaluation.tv_to_target,
            fidelity: evaluation.fidelity,
            toy_is: evaluation.toy_is,
            diversity: evaluation.diversity,
            seed,
            wall_secs: 0.0,
        }
    }
}

/// Which hyperparameter a trade-off sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    CcaLambda,
    CcaBeta,
    CfgScale,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 3] = [SweepAxis::CcaLambda, SweepAxis::CcaBeta, SweepAxis::CfgScale];

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::CcaLambda => "cca_lambda",
            SweepAxis::CcaBeta => "cca_beta",
            SweepAxis::CfgScale => "cfg_s",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cca_lambda" => Ok(SweepAxis::CcaLambda),
            "cca_beta" => Ok(SweepAxis::CcaBeta),
            "cfg_s" => Ok(SweepAxis::CfgScale),
            other => Err(Error::Config(format!(
                "unknown sweep axis '{other}' (expected cca_lambda, cca_beta, or cfg_s)"
            ))),
        }
    }
}

/// Shared inputs of a trade-off sweep.
#[derive(Debug, Clone)]
pub struct SweepSettings<'a> {
    pub spec: &'a TrueDistributionSpec,
    /// Starting point for fine-tuned points and the sampler for guided
    /// points. Its mask row must hold a usable unconditional model.
    pub pretrained: &'a TabularArModel,
    pub dataset: &'a [crate::oracle::DataPair],
    /// Base training options for the fine-tuned points; the axis value
    /// overrides the corresponding hyperparameter per point.
    pub align: crate::alignment::TrainOptions,
    /// Scale of the sharpened target that kl/tv are measured against.
    pub eval_scale: f64,
    pub master_seed: u64,
}

/// One sweep point: either metrics or the error that prevented them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepRecord {
    pub axis: String,
    pub axis_value: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn sweep_point(
    settings: &SweepSettings,
    axis: SweepAxis,
    index: usize,
    value: f64,
) -> Result<MetricsRecord> {
    let seed = crate::rng::derive_seed(settings.master_seed, "sweep-point", index as u64);
    let run_id = format!("{}-{index:03}", axis.name());
    match axis {
        SweepAxis::CfgScale => {
            let policy: Vec<SequenceDistribution> = (0..settings
                .spec
                .space()
                .num_conditions())
                .map(|c| {
                    crate::guidance::guided_sequence_distribution(
                        settings.pretrained,
                        crate::guidance::UncondSource::MaskRow,
                        &crate::guidance::GuidanceSpec::cfg(value),
                        c,
                    )
                })
                .collect::<Result<_>>()?;
            let evaluation = evaluate_policy(&policy, settings.spec, settings.eval_scale)?;
            let mut record = MetricsRecord::from_evaluation(run_id, "cfg", &evaluation, seed);
            record.axis_value = Some(value);
            record.scale = Some(value);
            Ok(record)
        }
        SweepAxis::CcaLambda | SweepAxis::CcaBeta => {
            let mut options = settings.align.clone();
            let hp = match &mut options.loss {
                crate::alignment::TrainLoss::Cca { hp, .. } => hp,
                other => {
                    return Err(Error::Config(format!(
                        "sweep axis {} requires contrastive training options, got {}",
                        axis.name(),
                        other.kind_name()
                    )));
                }
            };
            match axis {
                SweepAxis::CcaLambda => hp.lambda = value,
                SweepAxis::CcaBeta => hp.beta = value,
                SweepAxis::CfgScale => unreachable!(),
            }
            let (beta, lambda) = (hp.beta, hp.lambda);
            let mut model = settings.pretrained.clone();
            let mut rng = crate::rng::from_seed(seed);
            crate::alignment::train(
                &mut model,
                Some(settings.pretrained),
                crate::alignment::DataSource::Empirical(settings.dataset),
                &options,
                &mut rng,
                None,
            )?;
            let policy = model_policy(&model, settings.spec)?;
            let evaluation = evaluate_policy(&policy, settings.spec, settings.eval_scale)?;
            let mut record = MetricsRecord::from_evaluation(run_id, "cca", &evaluation, seed);
            record.axis_value = Some(value);
            record.beta = Some(beta);
            record.lambda = Some(lambda);
            Ok(record)
        }
    }
}

/// Evaluate every grid value on its own derived seed. Point failures
/// are recorded in place and do not stop the sweep. Points run in
/// parallel; the output order always follows the grid.
pub fn tradeoff_sweep(
    settings: &SweepSettings,
    axis: SweepAxis,
    grid: &[f64],
) -> Result<Vec<SweepRecord>> {
    if grid.is_empty() {
        return Err(Error::Input("sweep grid is empty".into()));
    }
    for (i, value) in grid.iter().enumerate() {
        if !value.is_finite() || *value < 0.0 {
            return Err(Error::Input(format!(
                "sweep grid value {i} is {value}, expected finite and >= 0"
            )));
        }
    }
    use rayon::prelude::*;
    let records: Vec<SweepRecord> = grid
        .par_iter()
        .enumerate()
        .map(|(index, &value)| {
            let seed =
                crate::rng::derive_seed(settings.master_seed, "sweep-point", index as u64);
            match sweep_point(settings, axis, index, value) {
                Ok(metrics) => SweepRecord {
                    axis: axis.name().into(),
                    axis_value: value,
                    seed,
                    metrics: Some(metrics),
                    error: None,
                },
                Err(err) => SweepRecord {
                    axis: axis.name().into(),
                    axis_value: value,
                    seed,
                    metrics: None,
                    error: Some(err.to_string()),
                },
            }
        })
        .collect();
    Ok(records)
}
