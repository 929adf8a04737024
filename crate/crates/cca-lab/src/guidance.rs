//! Guided sampling policies: classifier-free guidance with a constant or
//! linearly scheduled scale, applied per token, and whole-sequence
//! classifier guidance, plus the classifier itself and its trainers.

use rand::Rng as _;

use crate::dist::SequenceDistribution;
use crate::error::{Error, Result};
use crate::model::TabularArModel;
use crate::numeric::{log_sum_exp, log_normalize_in_place};
use crate::oracle::{DataPair, TrueDistributionSpec};
use crate::rng::Rng;
use crate::space::{SequenceSpace, Token};

/// Which guided sampling policy to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceKind {
    None,
    Cfg,
    CfgV2,
    Classifier,
}

impl GuidanceKind {
    pub fn name(&self) -> &'static str {
        match self {
            GuidanceKind::None => "none",
            GuidanceKind::Cfg => "cfg",
            GuidanceKind::CfgV2 => "cfgv2",
            GuidanceKind::Classifier => "classifier",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(GuidanceKind::None),
            "cfg" => Ok(GuidanceKind::Cfg),
            "cfgv2" => Ok(GuidanceKind::CfgV2),
            "classifier" => Ok(GuidanceKind::Classifier),
            other => Err(Error::Config(format!(
                "unknown guidance kind {other:?}; expected none, cfg, cfgv2, or classifier"
            ))),
        }
    }
}

/// A guided sampling policy: kind, scale, and for the scheduled variant the
/// terminal scale reached at the last position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSpec {
    pub kind: GuidanceKind,
    pub scale: f64,
    /// Terminal scale of the linear schedule; cfgv2 only.
    pub terminal_scale: Option<f64>,
}

impl GuidanceSpec {
    pub fn none() -> Self {
        GuidanceSpec {
            kind: GuidanceKind::None,
            scale: 0.0,
            terminal_scale: None,
        }
    }

    pub fn cfg(scale: f64) -> Self {
        GuidanceSpec {
            kind: GuidanceKind::Cfg,
            scale,
            terminal_scale: None,
        }
    }

    pub fn cfgv2(terminal_scale: f64) -> Self {
        GuidanceSpec {
            kind: GuidanceKind::CfgV2,
            scale: 0.0,
            terminal_scale: Some(terminal_scale),
        }
    }

    pub fn classifier(scale: f64) -> Self {
        GuidanceSpec {
            kind: GuidanceKind::Classifier,
            scale,
            terminal_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(Error::Config(format!(
                "guidance scale must be finite and >= 0, got {}",
                self.scale
            )));
        }
        match (self.kind, self.terminal_scale) {
            (GuidanceKind::CfgV2, Some(s_max)) if s_max.is_finite() && s_max >= 0.0 => Ok(()),
            (GuidanceKind::CfgV2, Some(s_max)) => Err(Error::Config(format!(
                "cfgv2 terminal scale must be finite and >= 0, got {s_max}"
            ))),
            (GuidanceKind::CfgV2, None) => Err(Error::Config(
                "guidance kind cfgv2 requires s_max".into(),
            )),
            (_, Some(_)) => Err(Error::Config(
                "s_max is only meaningful for guidance kind cfgv2".into(),
            )),
            (_, None) => Ok(()),
        }
    }

    /// Effective scale at a 0-based position.
    fn scale_at(&self, position: usize, seq_len: usize) -> f64 {
        match self.kind {
            GuidanceKind::CfgV2 => cfgv2_scale(
                self.terminal_scale.unwrap_or(0.0),
                position + 1,
                seq_len,
            ),
            _ => self.scale,
        }
    }
}

/// The guided logit rule: l_cond + s * (l_cond - l_uncond).
pub fn cfg_logits(l_cond: &[f64], l_uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if l_cond.len() != l_uncond.len() {
        return Err(Error::Input(format!(
            "logit vectors differ in length: {} vs {}",
            l_cond.len(),
            l_uncond.len()
        )));
    }
    Ok(l_cond
        .iter()
        .zip(l_uncond.iter())
        .map(|(c, u)| c + scale * (c - u))
        .collect())
}

/// Linear scale schedule: s_n = s_max * n / N for 1-based position n.
pub fn cfgv2_scale(terminal_scale: f64, position: usize, seq_len: usize) -> f64 {
    debug_assert!(position >= 1 && position <= seq_len);
    terminal_scale * position as f64 / seq_len as f64
}

/// Where the unconditional logits come from.
#[derive(Debug, Clone, Copy)]
pub enum UncondSource<'a> {
    /// The mask row of the conditional model itself.
    MaskRow,
    /// The same condition row of a separate model.
    Model(&'a TabularArModel),
}

fn guided_slot_log_probs(
    cond_model: &TabularArModel,
    uncond: UncondSource<'_>,
    guidance: &GuidanceSpec,
    condition: usize,
    prefix: &[Token],
    position: usize,
) -> Result<Vec<f64>> {
    guidance.validate()?;
    cond_model.space().check_condition(condition)?;
    if position != prefix.len() {
        return Err(Error::Input(format!(
            "position {position} does not match prefix length {}",
            prefix.len()
        )));
    }
    let l_cond = cond_model.next_token_log_probs(condition, prefix)?;
    if guidance.kind == GuidanceKind::None {
        return Ok(l_cond);
    }
    if guidance.kind == GuidanceKind::Classifier {
        return Err(Error::Input(
            "classifier guidance scores whole sequences; \
             use classifier_guided_sequence_distribution"
                .into(),
        ));
    }
    let l_uncond = match uncond {
        UncondSource::MaskRow => {
            cond_model.next_token_log_probs(cond_model.space().mask_id(), prefix)?
        }
        UncondSource::Model(model) => {
            if model.space() != cond_model.space() {
                return Err(Error::Input(
                    "unconditional model space does not match conditional model".into(),
                ));
            }
            model.next_token_log_probs(condition, prefix)?
        }
    };
    let scale = guidance.scale_at(position, cond_model.space().seq_len());
    let mut guided = cfg_logits(&l_cond, &l_uncond, scale)?;
    log_normalize_in_place(&mut guided);
    Ok(guided)
}

/// Next-token probabilities under the guided policy at one slot.
pub fn guided_next_token_distribution(
    cond_model: &TabularArModel,
    uncond: UncondSource<'_>,
    guidance: &GuidanceSpec,
    condition: usize,
    prefix: &[Token],
    position: usize,
) -> Result<Vec<f64>> {
    let log_probs =
        guided_slot_log_probs(cond_model, uncond, guidance, condition, prefix, position)?;
    Ok(log_probs.iter().map(|lp| lp.exp()).collect())
}

/// The whole-sequence distribution the per-token guided policy induces:
/// the product of guided next-token distributions along each path.
pub fn guided_sequence_distribution(
    cond_model: &TabularArModel,
    uncond: UncondSource<'_>,
    guidance: &GuidanceSpec,
    condition: usize,
) -> Result<SequenceDistribution> {
    guidance.validate()?;
    let space = *cond_model.space();
    let mut level = vec![0.0f64];
    let mut prefix_tokens: Vec<Vec<Token>> = vec![Vec::new()];
    for position in 0..space.seq_len() {
        let mut next = vec![0.0f64; space.num_prefixes(position + 1)];
        let mut next_tokens = Vec::with_capacity(next.len());
        for (prefix_index, tokens) in prefix_tokens.iter().enumerate() {
            let log_probs = guided_slot_log_probs(
                cond_model, uncond, guidance, condition, tokens, position,
            )?;
            for (token, lp) in log_probs.iter().enumerate() {
                next[prefix_index * space.vocab_size() + token] = level[prefix_index] + lp;
                let mut extended = tokens.clone();
                extended.push(token as Token);
                next_tokens.push(extended);
            }
        }
        level = next;
        prefix_tokens = next_tokens;
    }
    SequenceDistribution::from_log_weights(space, level)
}

/// Ancestral sampling under the guided per-token policy.
pub fn guided_sample_sequence(
    cond_model: &TabularArModel,
    uncond: UncondSource<'_>,
    guidance: &GuidanceSpec,
    condition: usize,
    rng: &mut Rng,
) -> Result<Vec<Token>> {
    let space = *cond_model.space();
    let mut tokens: Vec<Token> = Vec::with_capacity(space.seq_len());
    for position in 0..space.seq_len() {
        let probs = guided_next_token_distribution(
            cond_model, uncond, guidance, condition, &tokens, position,
        )?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = space.vocab_size() - 1;
        for (token, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = token;
                break;
            }
        }
        tokens.push(chosen as Token);
    }
    Ok(tokens)
}

/// Whole-sequence softmax classifier of the condition label.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularClassifier {
    space: SequenceSpace,
    /// One logit per (sequence index, condition), row-major by sequence.
    logits: Vec<f64>,
}

impl TabularClassifier {
    pub fn uniform(space: SequenceSpace) -> Self {
        TabularClassifier {
            space,
            logits: vec![0.0; space.num_sequences() * space.num_conditions()],
        }
    }

    /// The oracle classifier: logits equal to the true log posterior.
    pub fn from_spec_posterior(spec: &TrueDistributionSpec) -> Result<Self> {
        let space = *spec.space();
        let marginal = spec.marginal_x();
        let mut classifier = TabularClassifier::uniform(space);
        for x in 0..space.num_sequences() {
            let posterior = spec.posterior_against(&marginal, x)?;
            let row = classifier.row_mut(x);
            for (c, p) in posterior.iter().enumerate() {
                row[c] = if *p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
            }
        }
        Ok(classifier)
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn row(&self, seq_index: usize) -> &[f64] {
        let c = self.space.num_conditions();
        &self.logits[seq_index * c..(seq_index + 1) * c]
    }

    fn row_mut(&mut self, seq_index: usize) -> &mut [f64] {
        let c = self.space.num_conditions();
        &mut self.logits[seq_index * c..(seq_index + 1) * c]
    }

    /// log p(c|x) for all conditions: log-softmax of the sequence's row.
    pub fn log_posterior(&self, seq_index: usize) -> Result<Vec<f64>> {
        if seq_index >= self.space.num_sequences() {
            return Err(Error::Input(format!(
                "sequence index {seq_index} out of range"
            )));
        }
        let row = self.row(seq_index);
        let norm = log_sum_exp(row);
        Ok(row.iter().map(|l| l - norm).collect())
    }

    pub fn posterior(&self, seq_index: usize) -> Result<Vec<f64>> {
        Ok(self.log_posterior(seq_index)?.iter().map(|l| l.exp()).collect())
    }
}

/// Cross-entropy of the classifier against the exact joint distribution.
pub fn classifier_exact_loss(classifier: &TabularClassifier, spec: &TrueDistributionSpec) -> f64 {
    let space = *spec.space();
    let mut loss = 0.0;
    for x in 0..space.num_sequences() {
        let log_post = classifier.log_posterior(x).expect("index in range");
        for c in 0..space.num_conditions() {
            let weight = spec.p_c()[c] * spec.conditional(c).prob(x);
            if weight > 0.0 {
                loss -= weight * log_post[c];
            }
        }
    }
    loss
}

/// Exact-expectation classifier training. Each sequence is an independent
/// classification problem weighted by p(x); the update normalizes that
/// weight away so every row converges at the same rate.
pub fn train_classifier_exact(
    spec: &TrueDistributionSpec,
    steps: usize,
    lr: f64,
) -> Result<TabularClassifier> {
    let space = *spec.space();
    let marginal = spec.marginal_x();
    let mut classifier = TabularClassifier::uniform(space);
    for _ in 0..steps {
        for x in 0..space.num_sequences() {
            let p_x = marginal.prob(x);
            if p_x == 0.0 {
                continue;
            }
            let posterior = classifier.posterior(x)?;
            let target = spec.posterior_against(&marginal, x)?;
            let row = classifier.row_mut(x);
            for c in 0..row.len() {
                row[c] -= lr * (posterior[c] - target[c]);
            }
        }
    }
    Ok(classifier)
}

/// Minibatch SGD on the classification cross-entropy over a dataset.
pub fn train_classifier(
    space: SequenceSpace,
    dataset: &[DataPair],
    steps: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<TabularClassifier> {
    if dataset.is_empty() {
        return Err(Error::Input(
            "classifier training requires a non-empty dataset".into(),
        ));
    }
    for pair in dataset {
        space.check_condition(pair.condition)?;
        if pair.seq_index >= space.num_sequences() {
            return Err(Error::Input(format!(
                "sequence index {} out of range",
                pair.seq_index
            )));
        }
    }
    let batch_size = dataset.len().min(128);
    let mut classifier = TabularClassifier::uniform(space);
    for _ in 0..steps {
        let mut updates: Vec<(usize, Vec<f64>)> = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let pair = dataset[rng.gen_range(0..dataset.len())];
            let mut grad = classifier.posterior(pair.seq_index)?;
            grad[pair.condition] -= 1.0;
            updates.push((pair.seq_index, grad));
        }
        let scale = lr / batch_size as f64;
        for (seq_index, grad) in updates {
            let row = classifier.row_mut(seq_index);
            for (l, g) in row.iter_mut().zip(grad.iter()) {
                *l -= scale * g;
            }
        }
    }
    Ok(classifier)
}

/// The sequence-level classifier-guided policy:
/// log p_model(x|c) + s * log p_classifier(c|x), renormalized.
pub fn classifier_guided_sequence_distribution(
    cond_model: &TabularArModel,
    classifier: &TabularClassifier,
    scale: f64,
    condition: usize,
) -> Result<SequenceDistribution> {
    if classifier.space() != cond_model.space() {
        return Err(Error::Input(
            "classifier space does not match model space".into(),
        ));
    }
    cond_model.space().check_condition(condition)?;
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::Input(format!(
            "guidance scale must be finite and >= 0, got {scale}"
        )));
    }
    let space = *cond_model.space();
    let mut log_weights = Vec::with_capacity(space.num_sequences());
    for x in 0..space.num_sequences() {
        let log_p = cond_model.log_prob_by_index(condition, x);
        let log_post = classifier.log_posterior(x)?[condition];
        let w = if scale == 0.0 {
            // s = 0 must reduce to the model exactly, even where the
            // classifier assigns zero posterior (0 * -inf is NaN).
            log_p
        } else {
            log_p + scale * log_post
        };
        log_weights.push(w);
    }
    SequenceDistribution::from_log_weights(space, log_weights)
}
