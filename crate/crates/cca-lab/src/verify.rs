//! Self-check suite: every library invariant exercised on built-in
//! fixtures, reported as a deterministic pass/fail table.
//!
//! The suite is what the `verify` subcommand runs. Each check names its
//! module and property; failures report the observed value against the
//! bound. Report text contains no timing or paths, so two runs of a
//! healthy build render identical output.

use crate::alignment::{
    build_alignment_batch, cca_batch_loss, cca_expectation_loss_terms, dpo_batch_loss,
    make_negative_batch, mle_batch_loss, train, train_nce_exact, unlearn_batch_loss,
    CcaHyperparams, DataSource, TrainLoss, TrainOptions,
};
use crate::config::{parse_config, serialize_config, ExperimentConfig};
use crate::dist::SequenceDistribution;
use crate::error::Result;
use crate::eval::{fidelity_and_diversity, kl_divergence};
use crate::grad::{check_gradient, loss_gradient, loss_value, FD_ATOL, FD_RTOL, FD_STEP};
use crate::guidance::{
    cfg_logits, guided_sample_sequence, guided_sequence_distribution, GuidanceSpec, UncondSource,
};
use crate::model::TabularArModel;
use crate::numeric::log_normalize_in_place;
use crate::oracle::{SpecFamily, TrueDistributionSpec};
use crate::pipeline::{run_pipeline, Stage};
use crate::rng::{stream, Rng};
use crate::space::SequenceSpace;

/// Outcome of one named invariant check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    /// Observed-vs-bound statement, identical across reruns.
    pub detail: String,
}

/// Full suite outcome.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Render the pass/fail table. Deterministic: same build, same text.
    pub fn render(&self) -> String {
        let module_width = self
            .checks
            .iter()
            .map(|c| c.module.len())
            .max()
            .unwrap_or(6)
            .max("module".len());
        let name_width = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max("check".len());
        let mut out = String::new();
        out.push_str(&format!(
            "{:module_width$}  {:name_width$}  result\n",
            "module", "check"
        ));
        for check in &self.checks {
            let verdict = if check.passed { "pass" } else { "FAIL" };
            out.push_str(&format!(
                "{:module_width$}  {:name_width$}  {verdict}  {}\n",
                check.module, check.name, check.detail
            ));
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        out.push_str(&format!("{passed}/{} checks passed\n", self.checks.len()));
        out
    }
}

/// Deliberate corruption for the negative self-test: one logit is set
/// to NaN before the model checks run, which the normalization check
/// must catch and name.
#[derive(Debug, Clone, Copy)]
pub struct CorruptLogit {
    pub row: usize,
    pub position: usize,
    pub prefix: usize,
    pub token: usize,
}

const FIXTURE_SEED: u64 = 2026;

fn fixture_space() -> SequenceSpace {
    SequenceSpace::new(3, 2, 3).expect("fixture dimensions are valid")
}

fn fixture_specs() -> Vec<(SpecFamily, TrueDistributionSpec)> {
    let space = fixture_space();
    SpecFamily::ALL
        .iter()
        .map(|&family| {
            let spec = TrueDistributionSpec::generate(family, space, 1.0, FIXTURE_SEED)
                .expect("fixture spec generation cannot fail");
            (family, spec)
        })
        .collect()
}

/// A model with irregular but finite logits, for normalization checks.
fn scrambled_model(space: SequenceSpace, rng: &mut Rng) -> TabularArModel {
    use rand::Rng as _;
    let mut model = TabularArModel::uniform(space);
    for value in model.logits_mut().values_mut() {
        *value = rng.gen_range(-3.0..3.0);
    }
    model
}

fn check(
    module: &'static str,
    name: &'static str,
    passed: bool,
    detail: String,
) -> CheckResult {
    CheckResult {
        module,
        name,
        passed,
        detail,
    }
}

fn bound_detail(observed: f64, bound: f64) -> String {
    format!("observed {observed:.3e}, bound {bound:.3e}")
}

fn check_softmax_normalization(hook: Option<CorruptLogit>) -> CheckResult {
    let space = fixture_space();
    let mut model = scrambled_model(space, &mut stream(FIXTURE_SEED, "verify-model", 0));
    if let Some(corrupt) = hook {
        model.set_logit(
            corrupt.row,
            corrupt.position,
            corrupt.prefix,
            corrupt.token as crate::space::Token,
            f64::NAN,
        );
    }
    let bound = 1e-12;
    let mut worst: f64 = 0.0;
    let mut failure: Option<String> = None;
    'rows: for row in 0..space.num_rows() {
        for position in 0..space.seq_len() {
            for prefix in 0..space.num_prefixes(position) {
                let mut slot = model.logits().slot(row, position, prefix).to_vec();
                log_normalize_in_place(&mut slot);
                let sum: f64 = slot.iter().map(|lp| lp.exp()).sum();
                let err = (sum - 1.0).abs();
                if !(err <= bound) {
                    failure = Some(format!(
                        "row {row}, position {position}, prefix {:?}: sum {sum} \
                         (bound {bound:.0e})",
                        space.decode_prefix(position, prefix)
                    ));
                    break 'rows;
                }
                worst = worst.max(err);
            }
        }
    }
    match failure {
        Some(detail) => check("core_model", "softmax rows normalize", false, detail),
        None => check(
            "core_model",
            "softmax rows normalize",
            true,
            bound_detail(worst, bound),
        ),
    }
}

fn check_sequence_normalization() -> CheckResult {
    let space = fixture_space();
    let model = scrambled_model(space, &mut stream(FIXTURE_SEED, "verify-model", 1));
    let bound = 1e-10;
    let mut worst: f64 = 0.0;
    for row in 0..space.num_rows() {
        let sum: f64 = (0..space.num_sequences())
            .map(|x| model.log_prob_by_index(row, x).exp())
            .sum();
        worst = worst.max((sum - 1.0).abs());
    }
    check(
        "core_model",
        "sequence probabilities sum to one",
        worst <= bound,
        bound_detail(worst, bound),
    )
}

fn check_prefix_bijection() -> CheckResult {
    let space = fixture_space();
    let mut ok = true;
    let mut detail = String::from("all prefix indices round-trip");
    'lens: for len in 0..=space.seq_len() {
        for index in 0..space.num_prefixes(len) {
            let tokens = space.decode_prefix(len, index);
            let back = space.encode_prefix(&tokens).unwrap_or(usize::MAX);
            if back != index {
                ok = false;
                detail = format!("length {len}, index {index} decoded to {tokens:?}, encoded to {back}");
                break 'lens;
            }
        }
    }
    check("core_model", "prefix encode/decode round-trips", ok, detail)
}

fn check_loss_gradients() -> CheckResult {
    use rand::Rng as _;
    let space = fixture_space();
    let configs = 100usize;
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    let mut first_failure = String::new();
    for config_index in 0..configs {
        let mut rng = stream(FIXTURE_SEED, "verify-grad", config_index as u64);
        let model = scrambled_model(space, &mut rng);
        let reference = scrambled_model(space, &mut rng);
        let pairs: Vec<crate::oracle::DataPair> = (0..8)
            .map(|_| crate::oracle::DataPair {
                seq_index: rng.gen_range(0..space.num_sequences()),
                condition: rng.gen_range(0..space.num_conditions()),
            })
            .collect();
        let batch = build_alignment_batch(space, &pairs, 0.2, &mut rng)
            .expect("fixture batch construction cannot fail");
        let full_batch = make_negative_batch(space, &pairs, &mut rng)
            .expect("fixture batch construction cannot fail");
        let hp = CcaHyperparams {
            beta: 0.5,
            lambda: 2.0,
            lambda_per_condition: None,
        };
        let losses: Vec<(&str, Box<dyn crate::grad::LogProbLoss>)> = vec![
            ("mle", Box::new(mle_batch_loss(&batch))),
            (
                "cca",
                Box::new(cca_batch_loss(&reference, &batch, &hp).expect("valid cca batch")),
            ),
            (
                "dpo",
                Box::new(
                    dpo_batch_loss(&reference, &full_batch, 0.5).expect("valid dpo batch"),
                ),
            ),
            (
                "unlearn",
                Box::new(unlearn_batch_loss(&full_batch, 0.3).expect("valid unlearn batch")),
            ),
        ];
        for (kind, loss) in &losses {
            match check_gradient(&model, loss.as_ref(), FD_STEP, FD_RTOL, FD_ATOL) {
                Ok(result) => {
                    worst = worst.max(result.max_abs_diff);
                    if !result.passed {
                        failures += 1;
                        if first_failure.is_empty() {
                            first_failure = format!(
                                "{kind} loss, config {config_index}: analytic {} vs fd {}",
                                result.analytic, result.finite_difference
                            );
                        }
                    }
                }
                Err(e) => {
                    failures += 1;
                    if first_failure.is_empty() {
                        first_failure = format!("{kind} loss, config {config_index}: {e}");
                    }
                }
            }
        }
    }
    if failures == 0 {
        check(
            "core_model",
            "loss gradients match finite differences",
            true,
            format!("{configs} configs x 4 losses, worst abs diff {worst:.3e}"),
        )
    } else {
        check(
            "core_model",
            "loss gradients match finite differences",
            false,
            format!("{failures} failures; first: {first_failure}"),
        )
    }
}

fn check_target_normalization() -> CheckResult {
    let bound_sum = 1e-10;
    let bound_pointwise = 1e-12;
    let mut worst_sum: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    let mut failure: Option<String> = None;
    'families: for (family, spec) in fixture_specs() {
        let space = *spec.space();
        for c in 0..space.num_conditions() {
            for &s in &[0.0, 0.5, 1.0, 2.0, 5.0] {
                let (target, z) = match spec.target_distribution(c, s) {
                    Ok(pair) => pair,
                    Err(e) => {
                        failure = Some(format!("{} c={c} s={s}: {e}", family.name()));
                        break 'families;
                    }
                };
                let sum: f64 = target.probs().iter().sum();
                worst_sum = worst_sum.max((sum - 1.0).abs());
                // Recompute pointwise from the residual definition.
                for x in 0..space.num_sequences() {
                    let p_cond = spec.conditional(c).prob(x);
                    if p_cond == 0.0 {
                        if target.prob(x) != 0.0 {
                            failure = Some(format!(
                                "{} c={c} s={s} x={x}: zero conditional but target {}",
                                family.name(),
                                target.prob(x)
                            ));
                            break 'families;
                        }
                        continue;
                    }
                    let residual = spec
                        .conditional_residual(c, x)
                        .expect("residual defined where conditional is positive");
                    let expected = (p_cond.ln() + s * residual - z.ln()).exp();
                    let rel = (target.prob(x) - expected).abs() / expected.max(1e-300);
                    worst_rel = worst_rel.max(rel);
                }
            }
        }
    }
    if let Some(detail) = failure {
        return check("oracle", "sharpened target normalizes", false, detail);
    }
    let passed = worst_sum <= bound_sum && worst_rel <= bound_pointwise;
    check(
        "oracle",
        "sharpened target normalizes",
        passed,
        format!(
            "worst sum err {worst_sum:.3e} (bound {bound_sum:.0e}), \
             worst pointwise rel {worst_rel:.3e} (bound {bound_pointwise:.0e})"
        ),
    )
}

fn check_monotone_concentration() -> CheckResult {
    let grid = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
    let mut failure: Option<String> = None;
    'families: for (family, spec) in fixture_specs() {
        let space = *spec.space();
        for c in 0..space.num_conditions() {
            let mut previous = f64::NEG_INFINITY;
            for &s in &grid {
                let (target, _) = spec
                    .target_distribution(c, s)
                    .expect("fixture targets exist");
                let mut expected = 0.0;
                for x in 0..space.num_sequences() {
                    let mass = target.prob(x);
                    if mass > 0.0 {
                        expected += mass
                            * spec
                                .conditional_residual(c, x)
                                .expect("residual defined on target support");
                    }
                }
                if expected + 1e-12 < previous {
                    failure = Some(format!(
                        "{} c={c}: expected residual fell from {previous} to {expected} at s={s}",
                        family.name()
                    ));
                    break 'families;
                }
                previous = expected;
            }
        }
    }
    match failure {
        Some(detail) => check("oracle", "sharpening concentrates the target", false, detail),
        None => check(
            "oracle",
            "sharpening concentrates the target",
            true,
            format!("expected residual non-decreasing over s in {grid:?}"),
        ),
    }
}

fn check_residual_expectation() -> CheckResult {
    let bound = 1e-10;
    let mut worst: f64 = 0.0;
    for (_, spec) in fixture_specs() {
        let space = *spec.space();
        let marginal = spec.marginal_x();
        for c in 0..space.num_conditions() {
            let mut expectation = 0.0;
            for x in 0..space.num_sequences() {
                let p_x = marginal.prob(x);
                if p_x == 0.0 {
                    continue;
                }
                if spec.conditional(c).prob(x) == 0.0 {
                    continue;
                }
                expectation += p_x
                    * spec
                        .conditional_residual(c, x)
                        .expect("residual defined where both are positive")
                        .exp();
            }
            worst = worst.max((expectation - 1.0).abs());
        }
    }
    check(
        "oracle",
        "marginal expectation of the residual ratio is one",
        worst <= bound,
        bound_detail(worst, bound),
    )
}

fn check_posterior_identity() -> CheckResult {
    let bound = 1e-12;
    let mut worst: f64 = 0.0;
    let mut failure: Option<String> = None;
    'families: for (family, spec) in fixture_specs() {
        let space = *spec.space();
        let marginal = spec.marginal_x();
        for x in 0..space.num_sequences() {
            if marginal.prob(x) == 0.0 {
                continue;
            }
            let posterior = spec
                .posterior_against(&marginal, x)
                .expect("posterior defined on marginal support");
            for c in 0..space.num_conditions() {
                if spec.conditional(c).prob(x) == 0.0 || spec.p_c()[c] == 0.0 {
                    continue;
                }
                let lhs = posterior[c].ln() - spec.p_c()[c].ln();
                let rhs = spec
                    .conditional_residual(c, x)
                    .expect("residual defined here");
                let err = (lhs - rhs).abs();
                if !(err <= bound) {
                    failure = Some(format!(
                        "{} x={x} c={c}: log-posterior ratio {lhs} vs residual {rhs}",
                        family.name()
                    ));
                    break 'families;
                }
                worst = worst.max(err);
            }
        }
    }
    match failure {
        Some(detail) => check("oracle", "posterior ratio equals the residual", false, detail),
        None => check(
            "oracle",
            "posterior ratio equals the residual",
            true,
            bound_detail(worst, bound),
        ),
    }
}

fn check_per_token_guidance_identity() -> CheckResult {
    use rand::Rng as _;
    let bound = 1e-12;
    let mut worst: f64 = 0.0;
    let mut rng = stream(FIXTURE_SEED, "verify-guidance", 0);
    for _ in 0..100 {
        let dim = rng.gen_range(2..6);
        let l_cond: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let l_uncond: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let scale = rng.gen_range(0.0..4.0);
        let mut guided = cfg_logits(&l_cond, &l_uncond, scale).expect("equal lengths");
        log_normalize_in_place(&mut guided);
        // Reference: renormalized p_c^(1+s) p_u^(-s) in the log domain.
        let mut p_c = l_cond.clone();
        log_normalize_in_place(&mut p_c);
        let mut p_u = l_uncond.clone();
        log_normalize_in_place(&mut p_u);
        let mut expected: Vec<f64> = p_c
            .iter()
            .zip(p_u.iter())
            .map(|(c, u)| (1.0 + scale) * c - scale * u)
            .collect();
        log_normalize_in_place(&mut expected);
        for (g, e) in guided.iter().zip(expected.iter()) {
            worst = worst.max((g.exp() - e.exp()).abs());
        }
    }
    check(
        "guidance",
        "per-token tilt matches the power form",
        worst <= bound,
        bound_detail(worst, bound),
    )
}

fn check_guidance_argmax() -> CheckResult {
    use rand::Rng as _;
    let mut rng = stream(FIXTURE_SEED, "verify-guidance", 1);
    let mut checked = 0usize;
    let mut failure: Option<String> = None;
    fn argmax(values: &[f64]) -> usize {
        let mut best = 0;
        for (i, v) in values.iter().enumerate() {
            if *v > values[best] {
                best = i;
            }
        }
        best
    }
    'outer: for _ in 0..200 {
        let dim = rng.gen_range(2..6);
        let l_cond: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let l_uncond: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let diff: Vec<f64> = l_cond
            .iter()
            .zip(l_uncond.iter())
            .map(|(c, u)| c - u)
            .collect();
        if argmax(&l_cond) != argmax(&diff) {
            continue;
        }
        checked += 1;
        for &scale in &[0.0, 0.5, 1.0, 3.0, 10.0] {
            let guided = cfg_logits(&l_cond, &l_uncond, scale).expect("equal lengths");
            if argmax(&guided) != argmax(&l_cond) {
                failure = Some(format!(
                    "scale {scale}: argmax moved from {} to {}",
                    argmax(&l_cond),
                    argmax(&guided)
                ));
                break 'outer;
            }
        }
    }
    match failure {
        Some(detail) => check("guidance", "agreeing argmax survives the tilt", false, detail),
        None => check(
            "guidance",
            "agreeing argmax survives the tilt",
            true,
            format!("{checked} agreeing cases, scales up to 10"),
        ),
    }
}

fn check_single_token_guidance() -> CheckResult {
    let bound = 1e-12;
    let space = SequenceSpace::new(4, 1, 3).expect("single-token space is valid");
    let mut worst: f64 = 0.0;
    let mut failure: Option<String> = None;
    'families: for &family in SpecFamily::ALL.iter() {
        let spec = TrueDistributionSpec::generate(family, space, 1.0, FIXTURE_SEED)
            .expect("fixture spec generation cannot fail");
        let model = spec.exact_model().expect("exact model exists");
        for c in 0..space.num_conditions() {
            for &s in &[0.0, 0.5, 1.0, 2.0] {
                let guided = guided_sequence_distribution(
                    &model,
                    UncondSource::MaskRow,
                    &GuidanceSpec::cfg(s),
                    c,
                )
                .expect("guided distribution exists");
                let (target, _) = spec
                    .target_distribution(c, s)
                    .expect("fixture target exists");
                for x in 0..space.num_sequences() {
                    let err = (guided.prob(x) - target.prob(x)).abs();
                    if !(err <= bound) {
                        failure = Some(format!(
                            "{} c={c} s={s} x={x}: guided {} vs target {}",
                            family.name(),
                            guided.prob(x),
                            target.prob(x)
                        ));
                        break 'families;
                    }
                    worst = worst.max(err);
                }
            }
        }
    }
    match failure {
        Some(detail) => check(
            "guidance",
            "single-token tilt equals the sharpened target",
            false,
            detail,
        ),
        None => check(
            "guidance",
            "single-token tilt equals the sharpened target",
            true,
            bound_detail(worst, bound),
        ),
    }
}

fn check_guided_sampling_determinism() -> CheckResult {
    let (_, spec) = &fixture_specs()[0];
    let model = spec.exact_model().expect("exact model exists");
    let guidance = GuidanceSpec::cfg(1.5);
    let draw = |seed_index: u64| -> Vec<Vec<crate::space::Token>> {
        let mut rng = stream(FIXTURE_SEED, "verify-sample", seed_index);
        (0..32)
            .map(|i| {
                guided_sample_sequence(
                    &model,
                    UncondSource::MaskRow,
                    &guidance,
                    i % spec.space().num_conditions(),
                    &mut rng,
                )
                .expect("sampling from a valid model succeeds")
            })
            .collect()
    };
    let a = draw(7);
    let b = draw(7);
    let c = draw(8);
    let replay_matches = a == b;
    let seeds_differ = a != c;
    check(
        "guidance",
        "guided sampling replays under a fixed seed",
        replay_matches && seeds_differ,
        format!("replay match {replay_matches}, distinct seeds differ {seeds_differ}"),
    )
}

fn check_stationarity_at_independence() -> CheckResult {
    let bound = 1e-10;
    let space = fixture_space();
    let spec = TrueDistributionSpec::generate(SpecFamily::Independent, space, 1.0, FIXTURE_SEED)
        .expect("independent fixture exists");
    let reference = spec.exact_model().expect("exact model exists");
    let lambda = vec![1.0; space.num_conditions()];
    let mut worst: f64 = 0.0;
    for &beta in &[0.25, 1.0, 4.0] {
        let loss = cca_expectation_loss_terms(&reference, &spec, beta, &lambda)
            .expect("expectation loss exists");
        let (_, gradient) = loss_gradient(&reference, &loss);
        worst = worst.max(gradient.max_abs());
    }
    check(
        "alignment",
        "contrastive gradient vanishes at independence",
        worst <= bound,
        bound_detail(worst, bound),
    )
}

fn check_exact_contrastive_recovery() -> CheckResult {
    let bound = 1e-6;
    let mut worst: f64 = 0.0;
    let mut failure: Option<String> = None;
    'families: for (family, spec) in fixture_specs() {
        let space = *spec.space();
        let reference = spec.exact_model().expect("exact model exists");
        for &s in &[0.5, 1.0, 2.0] {
            let beta = 1.0 / s;
            let lambda: Vec<f64> = (0..space.num_conditions())
                .map(|c| spec.lambda_c(c, s).expect("fixture constants exist"))
                .collect();
            let loss = cca_expectation_loss_terms(&reference, &spec, beta, &lambda)
                .expect("expectation loss exists");
            // Curvature scales with beta^2 = 1/s^2, so the stable step
            // size scales with s^2.
            let learning_rate = 8.0 * s * s;
            let mut model = reference.clone();
            for _ in 0..5000 {
                let (_, gradient) = loss_gradient(&model, &loss);
                model.logits_mut().axpy(-learning_rate, &gradient);
            }
            for c in 0..space.num_conditions() {
                let (target, _) = spec
                    .target_distribution(c, s)
                    .expect("fixture target exists");
                let kl = kl_divergence(
                    &model
                        .model_distribution(c)
                        .expect("model distribution exists"),
                    &target,
                )
                .expect("same space");
                if kl > bound {
                    failure = Some(format!(
                        "{} s={s} c={c}: kl {kl:.3e} (bound {bound:.0e})",
                        family.name()
                    ));
                    break 'families;
                }
                worst = worst.max(kl);
            }
        }
    }
    match failure {
        Some(detail) => check(
            "alignment",
            "exact contrastive training recovers the target",
            false,
            detail,
        ),
        None => check(
            "alignment",
            "exact contrastive training recovers the target",
            true,
            format!("3 families x s in {{0.5, 1, 2}}, worst kl {worst:.3e} (bound {bound:.0e})"),
        ),
    }
}

fn check_nce_recovery() -> CheckResult {
    let bound = 1e-3;
    let mut worst: f64 = 0.0;
    let mut failure: Option<String> = None;
    for (family, spec) in fixture_specs() {
        let space = *spec.space();
        let table = match train_nce_exact(&spec, 40_000, None) {
            Ok(table) => table,
            Err(e) => {
                failure = Some(format!("{}: {e}", family.name()));
                break;
            }
        };
        let marginal = spec.marginal_x();
        for x in 0..space.num_sequences() {
            for c in 0..space.num_conditions() {
                if spec.conditional(c).prob(x) == 0.0 || marginal.prob(x) == 0.0 {
                    continue;
                }
                let oracle = spec
                    .conditional_residual(c, x)
                    .expect("residual defined on support");
                worst = worst.max((table.score(x, c) - oracle).abs());
            }
        }
    }
    match failure {
        Some(detail) => check(
            "alignment",
            "score training recovers the log-ratio oracle",
            false,
            detail,
        ),
        None => check(
            "alignment",
            "score training recovers the log-ratio oracle",
            worst <= bound,
            bound_detail(worst, bound),
        ),
    }
}

fn check_loss_anchors() -> CheckResult {
    use rand::Rng as _;
    let bound = 1e-12;
    let space = fixture_space();
    let mut rng = stream(FIXTURE_SEED, "verify-anchor", 0);
    let reference = scrambled_model(space, &mut rng);
    let pairs: Vec<crate::oracle::DataPair> = (0..16)
        .map(|_| crate::oracle::DataPair {
            seq_index: rng.gen_range(0..space.num_sequences()),
            condition: rng.gen_range(0..space.num_conditions()),
        })
        .collect();
    let batch = make_negative_batch(space, &pairs, &mut rng).expect("fixture batch exists");
    let mut worst: f64 = 0.0;
    for &lambda in &[0.0, 1.0, 300.0] {
        let hp = CcaHyperparams {
            beta: 0.02,
            lambda,
            lambda_per_condition: None,
        };
        let loss = cca_batch_loss(&reference, &batch, &hp).expect("valid batch");
        let value = loss_value(&reference, &loss);
        let anchor = (1.0 + lambda) * std::f64::consts::LN_2;
        worst = worst.max((value - anchor).abs());
    }
    for &beta_d in &[0.01, 0.1, 1.0, 10.0] {
        let loss = dpo_batch_loss(&reference, &batch, beta_d).expect("valid batch");
        let value = loss_value(&reference, &loss);
        worst = worst.max((value - std::f64::consts::LN_2).abs());
    }
    let spec = &fixture_specs()[0].1;
    let exact_reference = spec.exact_model().expect("exact model exists");
    let lambda = vec![1.0; space.num_conditions()];
    let loss = cca_expectation_loss_terms(&exact_reference, spec, 1.0, &lambda)
        .expect("expectation loss exists");
    let value = loss_value(&exact_reference, &loss);
    worst = worst.max((value - 2.0 * std::f64::consts::LN_2).abs());
    check(
        "alignment",
        "losses anchor at the frozen reference",
        worst <= bound,
        bound_detail(worst, bound),
    )
}

fn check_reference_frozen() -> CheckResult {
    let (_, spec) = &fixture_specs()[0];
    let reference = spec.exact_model().expect("exact model exists");
    let before = reference.logits().values().to_vec();
    let dataset = spec.sample_dataset(512, &mut stream(FIXTURE_SEED, "verify-data", 0));
    let mut model = reference.clone();
    let options = TrainOptions {
        loss: TrainLoss::Cca {
            hp: CcaHyperparams {
                beta: 0.02,
                lambda: 1.0,
                lambda_per_condition: None,
            },
            dropout_prob: 0.1,
        },
        steps: 50,
        learning_rate: 0.5,
        batch_size: 128,
        record_every: 50,
    };
    let trained = train(
        &mut model,
        Some(&reference),
        DataSource::Empirical(&dataset),
        &options,
        &mut stream(FIXTURE_SEED, "verify-train", 0),
        None,
    );
    let identical = reference.logits().values() == before.as_slice();
    let moved = model.logits().values() != before.as_slice();
    check(
        "alignment",
        "the reference model stays frozen",
        trained.is_ok() && identical && moved,
        format!(
            "training ok {}, reference bit-identical {identical}, trainee moved {moved}",
            trained.is_ok()
        ),
    )
}

fn check_kl_properties() -> CheckResult {
    use rand::Rng as _;
    let space = fixture_space();
    let bound = 1e-12;
    let mut rng = stream(FIXTURE_SEED, "verify-kl", 0);
    let random_dist = |rng: &mut Rng| -> SequenceDistribution {
        let log_weights: Vec<f64> = (0..space.num_sequences())
            .map(|_| rng.gen_range(0.05f64..1.0).ln())
            .collect();
        SequenceDistribution::from_log_weights(space, log_weights)
            .expect("finite log weights normalize")
    };
    let mut worst_negative: f64 = 0.0;
    let mut worst_self: f64 = 0.0;
    let mut min_distinct = f64::INFINITY;
    for _ in 0..100 {
        let p = random_dist(&mut rng);
        let q = random_dist(&mut rng);
        let kl_pq = kl_divergence(&p, &q).expect("same space");
        let kl_self = kl_divergence(&p, &p).expect("same space");
        worst_negative = worst_negative.min(kl_pq);
        worst_self = worst_self.max(kl_self);
        min_distinct = min_distinct.min(kl_pq);
    }
    let passed = worst_negative >= 0.0 && worst_self <= bound && min_distinct > bound;
    check(
        "eval",
        "divergence is nonnegative and zero only at equality",
        passed,
        format!(
            "min over pairs {min_distinct:.3e}, worst self {worst_self:.3e} (bound {bound:.0e})"
        ),
    )
}

fn check_metric_monotonicity() -> CheckResult {
    let grid = [0.0, 0.5, 1.0, 2.0, 4.0];
    let mut failure: Option<String> = None;
    'families: for (family, spec) in fixture_specs() {
        let space = *spec.space();
        let mut previous_fidelity = f64::NEG_INFINITY;
        let mut previous_diversity = f64::INFINITY;
        for &s in &grid {
            let mut model = TabularArModel::uniform(space);
            for c in 0..space.num_conditions() {
                let (target, _) = spec
                    .target_distribution(c, s)
                    .expect("fixture target exists");
                model
                    .set_row_from_distribution(c, &target)
                    .expect("target row is representable");
            }
            let (fidelity, _, diversity) =
                fidelity_and_diversity(&model, &spec).expect("metrics exist");
            if fidelity + 1e-9 < previous_fidelity {
                failure = Some(format!(
                    "{}: fidelity fell from {previous_fidelity} to {fidelity} at s={s}",
                    family.name()
                ));
                break 'families;
            }
            if diversity - 1e-9 > previous_diversity {
                failure = Some(format!(
                    "{}: diversity rose from {previous_diversity} to {diversity} at s={s}",
                    family.name()
                ));
                break 'families;
            }
            previous_fidelity = fidelity;
            previous_diversity = diversity;
        }
    }
    match failure {
        Some(detail) => check(
            "eval",
            "sharpening trades diversity for fidelity",
            false,
            detail,
        ),
        None => check(
            "eval",
            "sharpening trades diversity for fidelity",
            true,
            format!("fidelity up, diversity down over s in {grid:?} on all families"),
        ),
    }
}

fn check_toy_is_recompute() -> CheckResult {
    let bound = 1e-10;
    let mut worst: f64 = 0.0;
    for (_, spec) in fixture_specs() {
        let space = *spec.space();
        let marginal = spec.marginal_x();
        let mut model = TabularArModel::uniform(space);
        for c in 0..space.num_conditions() {
            model
                .set_row_from_distribution(c, &marginal)
                .expect("marginal row is representable");
        }
        let (_, toy_is, _) = fidelity_and_diversity(&model, &spec).expect("metrics exist");
        // Straight-line recompute of exp(E_x KL(p(c|x) || p(c))).
        let mut expected_kl = 0.0;
        for x in 0..space.num_sequences() {
            let p_x = marginal.prob(x);
            if p_x == 0.0 {
                continue;
            }
            let posterior = spec
                .posterior_against(&marginal, x)
                .expect("posterior defined on support");
            let mut kl = 0.0;
            for c in 0..space.num_conditions() {
                if posterior[c] > 0.0 {
                    kl += posterior[c] * (posterior[c].ln() - spec.p_c()[c].ln());
                }
            }
            expected_kl += p_x * kl;
        }
        worst = worst.max((toy_is - expected_kl.exp()).abs());
    }
    check(
        "eval",
        "score of the unconditional model recomputes",
        worst <= bound,
        bound_detail(worst, bound),
    )
}

fn check_config_round_trip() -> CheckResult {
    let default_config = ExperimentConfig::default();
    let custom_text = "\
[spec]
family = needle
vocab_size = 4
seq_len = 3
num_conditions = 2

[run]
out_dir = elsewhere
master_seed = 42
dataset_size = 128
record_every = 10
jobs = 2

[align]
loss = dpo
beta_d = 0.5
steps = 10

[guidance]
kind = cfgv2
terminal_scale = 2.5

[sweep]
axis = cca_beta
grid = 0.01, 0.1, 1
";
    let mut failure: Option<String> = None;
    match parse_config(custom_text) {
        Ok(custom) => {
            for (label, config) in [("default", &default_config), ("custom", &custom)] {
                let text = serialize_config(config);
                match parse_config(&text) {
                    Ok(reparsed) if &reparsed == config => {}
                    Ok(_) => {
                        failure =
                            Some(format!("{label} config changed across a round-trip"));
                        break;
                    }
                    Err(issues) => {
                        failure = Some(format!(
                            "{label} config failed to reparse: {}",
                            issues[0]
                        ));
                        break;
                    }
                }
            }
        }
        Err(issues) => failure = Some(format!("custom fixture rejected: {}", issues[0])),
    }
    match failure {
        Some(detail) => check("cli", "configs survive a parse round-trip", false, detail),
        None => check(
            "cli",
            "configs survive a parse round-trip",
            true,
            "default and custom configs reparse equal".into(),
        ),
    }
}

fn pipeline_fixture_text(out_dir: &std::path::Path) -> String {
    format!(
        "\
[spec]
family = random-dirichlet
vocab_size = 3
seq_len = 2
num_conditions = 3

[run]
out_dir = {}
master_seed = 5
dataset_size = 256
record_every = 50

[pretrain]
steps = 120
learning_rate = 0.5
batch_size = 128

[align]
loss = cca
beta = 0.02
lambda = 1
steps = 60
learning_rate = 0.5
batch_size = 128

[guidance]
kind = cfg
scale = 1
",
        out_dir.display()
    )
}

fn run_fixture_pipeline(dir: &std::path::Path, through: Stage) -> Result<()> {
    let config = crate::config::parse_config_or_error(&pipeline_fixture_text(dir))?;
    run_pipeline(&config, through)?;
    Ok(())
}

fn numeric_artifacts(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map(|entries| {
            entries
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().to_string_lossy().to_string();
                    // The manifest holds timestamps and the config holds
                    // the directory path; neither is a numeric artifact.
                    if name == "manifest.json" || name == "config.txt" {
                        return None;
                    }
                    std::fs::read(e.path()).ok().map(|bytes| (name, bytes))
                })
                .collect()
        })
        .unwrap_or_default();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

fn check_pipeline_determinism() -> CheckResult {
    let base = std::env::temp_dir().join(format!("cca-lab-verify-{}", std::process::id()));
    let fresh = base.join("fresh");
    let resumed = base.join("resumed");
    let _ = std::fs::remove_dir_all(&base);
    let outcome = (|| -> Result<(bool, usize)> {
        run_fixture_pipeline(&fresh, Stage::Eval)?;
        run_fixture_pipeline(&resumed, Stage::Pretrain)?;
        run_fixture_pipeline(&resumed, Stage::Eval)?;
        let a = numeric_artifacts(&fresh);
        let b = numeric_artifacts(&resumed);
        Ok((a == b && !a.is_empty(), a.len()))
    })();
    let _ = std::fs::remove_dir_all(&base);
    match outcome {
        Ok((identical, count)) => check(
            "cli",
            "interrupted runs resume byte-identically",
            identical,
            format!("{count} numeric artifacts compared between fresh and resumed runs"),
        ),
        Err(e) => check(
            "cli",
            "interrupted runs resume byte-identically",
            false,
            format!("pipeline failed: {e}"),
        ),
    }
}

fn run_checks(hook: Option<CorruptLogit>, include_pipeline: bool) -> VerifyReport {
    let mut checks = vec![
        check_softmax_normalization(hook),
        check_sequence_normalization(),
        check_prefix_bijection(),
        check_loss_gradients(),
        check_target_normalization(),
        check_monotone_concentration(),
        check_residual_expectation(),
        check_posterior_identity(),
        check_per_token_guidance_identity(),
        check_guidance_argmax(),
        check_single_token_guidance(),
        check_guided_sampling_determinism(),
        check_stationarity_at_independence(),
        check_exact_contrastive_recovery(),
        check_nce_recovery(),
        check_loss_anchors(),
        check_reference_frozen(),
        check_kl_properties(),
        check_metric_monotonicity(),
        check_toy_is_recompute(),
        check_config_round_trip(),
    ];
    if include_pipeline {
        checks.push(check_pipeline_determinism());
    }
    VerifyReport { checks }
}

/// Run the whole invariant suite. `hook` corrupts one logit before the
/// model checks execute, for exercising the failure path.
pub fn run_verification(hook: Option<CorruptLogit>) -> VerifyReport {
    run_checks(hook, true)
}

/// The suite minus the end-to-end pipeline check, for fast iteration.
pub fn run_verification_fast(hook: Option<CorruptLogit>) -> VerifyReport {
    run_checks(hook, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_build_passes_every_check() {
        let report = run_verification(None);
        let failures: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}/{}: {}", c.module, c.name, c.detail))
            .collect();
        assert!(failures.is_empty(), "failures: {failures:?}");
        assert!(report.all_passed());
        assert_eq!(report.checks.len(), 22);
    }

    #[test]
    fn corrupted_logit_fails_normalization_with_named_slot() {
        let hook = CorruptLogit {
            row: 1,
            position: 1,
            prefix: 2,
            token: 0,
        };
        let result = check_softmax_normalization(Some(hook));
        assert!(!result.passed);
        assert!(result.detail.contains("row 1"), "{}", result.detail);
        assert!(result.detail.contains("position 1"), "{}", result.detail);
        let report = VerifyReport {
            checks: vec![result],
        };
        assert!(!report.all_passed());
        assert!(report.render().contains("FAIL"));
    }

    #[test]
    fn report_text_is_deterministic() {
        let a = run_verification_fast(None);
        let b = run_verification_fast(None);
        assert_eq!(a.render(), b.render());
        assert!(a.render().contains("pass"));
    }

    #[test]
    fn render_aligns_and_summarizes() {
        let report = VerifyReport {
            checks: vec![
                CheckResult {
                    module: "core_model",
                    name: "softmax rows normalize",
                    passed: true,
                    detail: "observed 1e-16".into(),
                },
                CheckResult {
                    module: "eval",
                    name: "short",
                    passed: false,
                    detail: "observed 2, bound 1".into(),
                },
            ],
        };
        let text = report.render();
        assert!(text.contains("1/2 checks passed"));
        assert!(text.lines().count() >= 4);
    }
}
