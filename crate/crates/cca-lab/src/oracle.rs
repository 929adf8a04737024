//! Ground truth by brute force: the true joint distribution over
//! (condition, sequence) and every exact quantity derived from it —
//! marginal, conditional residual, target sampling distribution with its
//! normalizing constant, per-condition lambda, and the Bayes posterior.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use crate::dist::SequenceDistribution;
use crate::error::{Error, Result};
use crate::model::TabularArModel;
use crate::numeric::log_sum_exp;
use crate::rng::Rng;
use crate::space::SequenceSpace;

/// The true data-generating process: p(c) over condition labels and one
/// explicit conditional p(x|c) per label. The mask label has no row here.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueDistributionSpec {
    space: SequenceSpace,
    p_c: Vec<f64>,
    conditionals: Vec<SequenceDistribution>,
}

pub const SPEC_FORMAT_VERSION: u32 = 1;

/// One observation drawn from the joint p(x, c).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataPair {
    pub seq_index: usize,
    pub condition: usize,
}

/// Built-in generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecFamily {
    /// Smoothed Dirichlet draws for p(c) and every conditional row.
    RandomDirichlet,
    /// Uniform rows with one high-probability needle sequence per condition.
    Needle,
    /// Condition-independent: p(x|c) = p(x) for every label.
    Independent,
}

impl SpecFamily {
    pub const ALL: [SpecFamily; 3] = [
        SpecFamily::RandomDirichlet,
        SpecFamily::Needle,
        SpecFamily::Independent,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SpecFamily::RandomDirichlet => "random-dirichlet",
            SpecFamily::Needle => "needle",
            SpecFamily::Independent => "independent",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "random-dirichlet" => Ok(SpecFamily::RandomDirichlet),
            "needle" => Ok(SpecFamily::Needle),
            "independent" => Ok(SpecFamily::Independent),
            other => Err(Error::Config(format!(
                "unknown spec family {other:?}; expected random-dirichlet, needle, or independent"
            ))),
        }
    }
}

/// Mass mixed back toward uniform in Dirichlet draws, so every generated
/// spec keeps residuals bounded and strictly positive support.
const DIRICHLET_SMOOTHING: f64 = 0.05;
/// Probability mass placed on each condition's needle sequence.
const NEEDLE_MASS: f64 = 0.5;

fn dirichlet_draw(rng: &mut Rng, dim: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration validated by caller");
    let mut draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // Astronomically unlikely; fall back to uniform rather than divide by 0.
        return vec![1.0 / dim as f64; dim];
    }
    let uniform = 1.0 / dim as f64;
    for d in draws.iter_mut() {
        *d = (1.0 - DIRICHLET_SMOOTHING) * (*d / total) + DIRICHLET_SMOOTHING * uniform;
    }
    draws
}

impl TrueDistributionSpec {
    pub fn new(
        space: SequenceSpace,
        p_c: Vec<f64>,
        conditionals: Vec<SequenceDistribution>,
    ) -> Result<Self> {
        if p_c.len() != space.num_conditions() {
            return Err(Error::Input(format!(
                "p_c has {} entries, space has {} conditions",
                p_c.len(),
                space.num_conditions()
            )));
        }
        for (c, &p) in p_c.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Numeric(format!(
                    "p_c[{c}] is {p}, expected a finite non-negative value"
                )));
            }
        }
        let total: f64 = p_c.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Numeric(format!(
                "p_c sums to {total}, expected 1 within 1e-12"
            )));
        }
        if conditionals.len() != space.num_conditions() {
            return Err(Error::Input(format!(
                "{} conditional rows for {} conditions",
                conditionals.len(),
                space.num_conditions()
            )));
        }
        for dist in &conditionals {
            if dist.space() != &space {
                return Err(Error::Input(
                    "conditional row space does not match spec space".into(),
                ));
            }
        }
        let spec = TrueDistributionSpec {
            space,
            p_c,
            conditionals,
        };
        // A sequence must not be reachable under a condition yet impossible
        // under the marginal: the residual would be log(+inf).
        let marginal = spec.marginal_x();
        for x in 0..space.num_sequences() {
            if marginal.prob(x) > 0.0 {
                continue;
            }
            for c in 0..space.num_conditions() {
                if spec.conditionals[c].prob(x) > 0.0 {
                    return Err(Error::Domain(format!(
                        "malformed spec: p(x|c) > 0 but p(x) = 0 for sequence {x}, condition {c}"
                    )));
                }
            }
        }
        Ok(spec)
    }

    /// Generate a spec from one of the built-in families.
    ///
    /// `random-dirichlet` draws p(c) and each row from a symmetric
    /// Dirichlet with the given concentration, then mixes 5% uniform mass
    /// back in. `needle` uses uniform p(c) and rows that are half uniform,
    /// half a point mass on a per-condition needle sequence (seed and
    /// concentration are ignored; the family is a fixed fixture).
    /// `independent` draws a single smoothed Dirichlet row shared by all
    /// conditions.
    pub fn generate(
        family: SpecFamily,
        space: SequenceSpace,
        concentration: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(concentration > 0.0 && concentration.is_finite()) {
            return Err(Error::Config(format!(
                "concentration must be positive and finite, got {concentration}"
            )));
        }
        let mut rng = crate::rng::stream(seed, "spec-generator", 0);
        let s = space.num_sequences();
        let c_count = space.num_conditions();
        let (p_c, rows): (Vec<f64>, Vec<Vec<f64>>) = match family {
            SpecFamily::RandomDirichlet => {
                let p_c = dirichlet_draw(&mut rng, c_count, concentration);
                let rows = (0..c_count)
                    .map(|_| dirichlet_draw(&mut rng, s, concentration))
                    .collect();
                (p_c, rows)
            }
            SpecFamily::Needle => {
                let p_c = vec![1.0 / c_count as f64; c_count];
                let rows = (0..c_count)
                    .map(|c| {
                        let needle = c * s / c_count;
                        let mut row = vec![(1.0 - NEEDLE_MASS) / s as f64; s];
                        row[needle] += NEEDLE_MASS;
                        row
                    })
                    .collect();
                (p_c, rows)
            }
            SpecFamily::Independent => {
                let p_c = dirichlet_draw(&mut rng, c_count, concentration);
                let shared = dirichlet_draw(&mut rng, s, concentration);
                let rows = vec![shared; c_count];
                (p_c, rows)
            }
        };
        let conditionals = rows
            .into_iter()
            .map(|row| SequenceDistribution::new(space, row))
            .collect::<Result<Vec<_>>>()?;
        TrueDistributionSpec::new(space, p_c, conditionals)
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    pub fn p_c(&self) -> &[f64] {
        &self.p_c
    }

    pub fn conditional(&self, condition: usize) -> &SequenceDistribution {
        &self.conditionals[condition]
    }

    /// Exact marginal p(x) = sum_c p(c) p(x|c).
    pub fn marginal_x(&self) -> SequenceDistribution {
        let s = self.space.num_sequences();
        let mut probs = vec![0.0; s];
        for (c, row) in self.conditionals.iter().enumerate() {
            let weight = self.p_c[c];
            for (x, p) in probs.iter_mut().enumerate() {
                *p += weight * row.prob(x);
            }
        }
        // Mixture of valid distributions; renormalize away float dust so
        // downstream log-domain math sees mass exactly 1 within tolerance.
        SequenceDistribution::new(self.space, probs)
            .expect("mixture of valid distributions is valid")
    }

    /// log p(x|c) - log p(x). Returns -inf as an explicit sentinel when
    /// p(x|c) = 0 with p(x) > 0; errors when p(x) = 0.
    pub fn conditional_residual(&self, condition: usize, seq_index: usize) -> Result<f64> {
        self.space.check_condition(condition)?;
        let marginal = self.marginal_x();
        self.residual_against(&marginal, condition, seq_index)
    }

    /// Residual with a precomputed marginal, for callers in enumeration loops.
    pub fn residual_against(
        &self,
        marginal: &SequenceDistribution,
        condition: usize,
        seq_index: usize,
    ) -> Result<f64> {
        let p_x = marginal.prob(seq_index);
        if p_x == 0.0 {
            return Err(Error::Domain(format!(
                "residual undefined: p(x) = 0 for sequence {seq_index}"
            )));
        }
        let p_xc = self.conditionals[condition].prob(seq_index);
        if p_xc == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(p_xc.ln() - p_x.ln())
    }

    /// All residuals for one condition, computed in one pass.
    pub fn residual_row(&self, condition: usize) -> Result<Vec<f64>> {
        self.space.check_condition(condition)?;
        let marginal = self.marginal_x();
        (0..self.space.num_sequences())
            .map(|x| self.residual_against(&marginal, condition, x))
            .collect()
    }

    /// The sharpened sampling target p(x|c) * (p(x|c)/p(x))^s, normalized,
    /// together with its normalizing constant Z(c).
    pub fn target_distribution(
        &self,
        condition: usize,
        s: f64,
    ) -> Result<(SequenceDistribution, f64)> {
        Ok(self.target_with_log_z(condition, s)?.0)
    }

    fn target_with_log_z(
        &self,
        condition: usize,
        s: f64,
    ) -> Result<((SequenceDistribution, f64), f64)> {
        self.space.check_condition(condition)?;
        if !s.is_finite() || s < 0.0 {
            return Err(Error::Input(format!(
                "guidance scale must be finite and >= 0, got {s}"
            )));
        }
        let marginal = self.marginal_x();
        let row = &self.conditionals[condition];
        let mut log_weights = vec![f64::NEG_INFINITY; self.space.num_sequences()];
        for (x, w) in log_weights.iter_mut().enumerate() {
            let p_xc = row.prob(x);
            if p_xc == 0.0 {
                // Limit convention: zero stays zero for every s.
                continue;
            }
            let p_x = marginal.prob(x);
            if p_x == 0.0 {
                return Err(Error::Domain(format!(
                    "target undefined: p(x|c) > 0 but p(x) = 0 for sequence {x}"
                )));
            }
            *w = (1.0 + s) * p_xc.ln() - s * p_x.ln();
        }
        let log_z = log_sum_exp(&log_weights);
        if !log_z.is_finite() {
            return Err(Error::Numeric(format!(
                "normalizing constant degenerate (log Z = {log_z}) for condition {condition}"
            )));
        }
        let dist = SequenceDistribution::from_log_weights(self.space, log_weights)?;
        Ok(((dist, log_z.exp()), log_z))
    }

    /// The Appendix-style per-condition weight Z(c)^(1/s).
    pub fn lambda_c(&self, condition: usize, s: f64) -> Result<f64> {
        if !(s > 0.0) {
            return Err(Error::Input(format!(
                "lambda_c requires s > 0, got {s}"
            )));
        }
        let (_, log_z) = self.target_with_log_z(condition, s)?;
        Ok((log_z / s).exp())
    }

    /// Bayes posterior p(c|x) over condition labels.
    pub fn posterior(&self, seq_index: usize) -> Result<Vec<f64>> {
        let marginal = self.marginal_x();
        self.posterior_against(&marginal, seq_index)
    }

    /// Posterior with a precomputed marginal.
    pub fn posterior_against(
        &self,
        marginal: &SequenceDistribution,
        seq_index: usize,
    ) -> Result<Vec<f64>> {
        if seq_index >= self.space.num_sequences() {
            return Err(Error::Input(format!(
                "sequence index {seq_index} out of range"
            )));
        }
        let p_x = marginal.prob(seq_index);
        if p_x == 0.0 {
            return Err(Error::Domain(format!(
                "posterior undefined: p(x) = 0 for sequence {seq_index}"
            )));
        }
        Ok((0..self.space.num_conditions())
            .map(|c| self.p_c[c] * self.conditionals[c].prob(seq_index) / p_x)
            .collect())
    }

    /// Mutual information I(x; c) in nats, by enumeration.
    pub fn mutual_information(&self) -> f64 {
        let marginal = self.marginal_x();
        let mut total = 0.0;
        for c in 0..self.space.num_conditions() {
            for x in 0..self.space.num_sequences() {
                let p_xc = self.conditionals[c].prob(x);
                if p_xc > 0.0 && self.p_c[c] > 0.0 {
                    total += self.p_c[c] * p_xc * (p_xc.ln() - marginal.prob(x).ln());
                }
            }
        }
        total
    }

    /// The tabular model that reproduces this spec exactly: one row per
    /// condition plus the marginal on the mask row.
    pub fn exact_model(&self) -> Result<TabularArModel> {
        let mut model = TabularArModel::uniform(self.space);
        for c in 0..self.space.num_conditions() {
            model.set_row_from_distribution(c, &self.conditionals[c])?;
        }
        model.set_row_from_distribution(self.space.mask_id(), &self.marginal_x())?;
        Ok(model)
    }

    /// Draw `size` observations from the joint p(x, c).
    pub fn sample_dataset(&self, size: usize, rng: &mut Rng) -> Vec<DataPair> {
        let mut condition_cdf = self.p_c.clone();
        for i in 1..condition_cdf.len() {
            condition_cdf[i] += condition_cdf[i - 1];
        }
        let mut pairs = Vec::with_capacity(size);
        for _ in 0..size {
            let u: f64 = rng.gen();
            let condition = condition_cdf
                .iter()
                .position(|&acc| u < acc)
                .unwrap_or(self.space.num_conditions() - 1);
            let v: f64 = rng.gen();
            let seq_index = self.conditionals[condition].sample_index(v);
            pairs.push(DataPair {
                seq_index,
                condition,
            });
        }
        pairs
    }

    /// Serialize to the versioned text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "true-spec v{SPEC_FORMAT_VERSION}");
        let _ = writeln!(out, "vocab_size={}", self.space.vocab_size());
        let _ = writeln!(out, "seq_len={}", self.space.seq_len());
        let _ = writeln!(out, "num_conditions={}", self.space.num_conditions());
        out.push_str("p_c");
        for p in &self.p_c {
            let _ = write!(out, " {p}");
        }
        out.push('\n');
        for (c, row) in self.conditionals.iter().enumerate() {
            let _ = write!(out, "row {c}");
            for p in row.probs() {
                let _ = write!(out, " {p}");
            }
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let fail = |message: String| Error::format(origin, message);
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| fail("empty spec file".into()))?;
        if header.trim() != format!("true-spec v{SPEC_FORMAT_VERSION}") {
            return Err(fail(format!(
                "unsupported header {header:?}, expected \"true-spec v{SPEC_FORMAT_VERSION}\""
            )));
        }
        let mut dims = [0usize; 3];
        for (slot, key) in ["vocab_size", "seq_len", "num_conditions"].iter().enumerate() {
            let (number, line) = lines
                .next()
                .ok_or_else(|| fail(format!("missing {key} line")))?;
            let value = line
                .strip_prefix(&format!("{key}="))
                .ok_or_else(|| fail(format!("line {}: expected {key}=<int>", number + 1)))?;
            dims[slot] = value
                .trim()
                .parse()
                .map_err(|_| fail(format!("line {}: bad integer {value:?}", number + 1)))?;
        }
        let space = SequenceSpace::new(dims[0], dims[1], dims[2])?;
        let parse_floats = |line: &str, number: usize, expected: usize| -> Result<Vec<f64>> {
            let values = line
                .split_ascii_whitespace()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| fail(format!("line {}: bad float {f:?}", number + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != expected {
                return Err(fail(format!(
                    "line {}: expected {expected} values, got {}",
                    number + 1,
                    values.len()
                )));
            }
            Ok(values)
        };
        let (number, line) = lines.next().ok_or_else(|| fail("missing p_c line".into()))?;
        let body = line
            .strip_prefix("p_c")
            .ok_or_else(|| fail(format!("line {}: expected p_c row", number + 1)))?;
        let p_c = parse_floats(body, number, space.num_conditions())?;
        let mut conditionals = Vec::with_capacity(space.num_conditions());
        for c in 0..space.num_conditions() {
            let (number, line) = lines
                .next()
                .ok_or_else(|| fail(format!("missing row {c}")))?;
            let body = line
                .strip_prefix(&format!("row {c}"))
                .ok_or_else(|| fail(format!("line {}: expected \"row {c} ...\"", number + 1)))?;
            let probs = parse_floats(body, number, space.num_sequences())?;
            conditionals.push(SequenceDistribution::new(space, probs)?);
        }
        match lines.next() {
            Some((_, line)) if line.trim() == "end" => TrueDistributionSpec::new(space, p_c, conditionals),
            Some((number, line)) => Err(fail(format!(
                "line {}: expected terminator \"end\", got {line:?}",
                number + 1
            ))),
            None => Err(fail("spec file truncated: missing \"end\"".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pipeline::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// V=2, N=1, C=2, p(c)=(0.5,0.5), p(x=0|c=0)=0.8, p(x=0|c=1)=0.3.
    fn hand_spec() -> TrueDistributionSpec {
        let space = SequenceSpace::new(2, 1, 2).unwrap();
        TrueDistributionSpec::new(
            space,
            vec![0.5, 0.5],
            vec![
                SequenceDistribution::new(space, vec![0.8, 0.2]).unwrap(),
                SequenceDistribution::new(space, vec![0.3, 0.7]).unwrap(),
            ],
        )
        .unwrap()
    }

    fn families_on(space: SequenceSpace) -> Vec<TrueDistributionSpec> {
        SpecFamily::ALL
            .iter()
            .map(|f| TrueDistributionSpec::generate(*f, space, 1.0, 71).unwrap())
            .collect()
    }

    #[test]
    fn hand_marginal() {
        let spec = hand_spec();
        let m = spec.marginal_x();
        assert_abs_diff_eq!(m.prob(0), 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(m.prob(1), 0.45, epsilon = 1e-15);
    }

    #[test]
    fn marginal_degenerate_cases() {
        let space = SequenceSpace::new(2, 2, 1).unwrap();
        let row = SequenceDistribution::new(space, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let spec = TrueDistributionSpec::new(space, vec![1.0], vec![row.clone()]).unwrap();
        assert_eq!(spec.marginal_x().probs(), row.probs());

        let space = SequenceSpace::new(2, 2, 3).unwrap();
        let row = SequenceDistribution::new(space, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let spec = TrueDistributionSpec::new(
            space,
            vec![0.2, 0.5, 0.3],
            vec![row.clone(), row.clone(), row.clone()],
        )
        .unwrap();
        for x in 0..4 {
            assert_abs_diff_eq!(spec.marginal_x().prob(x), row.prob(x), epsilon = 1e-15);
        }
    }

    #[test]
    fn hand_residual() {
        let spec = hand_spec();
        let r = spec.conditional_residual(0, 0).unwrap();
        assert_abs_diff_eq!(r, (0.8f64 / 0.55).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(r, 0.3747, epsilon = 1e-4);
    }

    #[test]
    fn hand_target_and_lambda() {
        let spec = hand_spec();
        let (target, z) = spec.target_distribution(0, 1.0).unwrap();
        let unnorm0 = 0.8 * 0.8 / 0.55;
        let unnorm1 = 0.2 * 0.2 / 0.45;
        let z_expected = unnorm0 + unnorm1;
        assert_abs_diff_eq!(z, z_expected, epsilon = 1e-12);
        assert_abs_diff_eq!(z, 1.2525, epsilon = 1e-4);
        assert_abs_diff_eq!(target.prob(0), unnorm0 / z_expected, epsilon = 1e-12);
        assert_abs_diff_eq!(target.prob(0), 0.9290, epsilon = 1e-4);
        assert_abs_diff_eq!(target.prob(1), 0.0710, epsilon = 1e-4);

        assert_abs_diff_eq!(spec.lambda_c(0, 1.0).unwrap(), z_expected, epsilon = 1e-12);
        let z2 = 0.8 * (0.8f64 / 0.55).powi(2) + 0.2 * (0.2f64 / 0.45).powi(2);
        assert_abs_diff_eq!(
            spec.lambda_c(0, 2.0).unwrap(),
            z2.sqrt(),
            epsilon = 1e-12
        );
        assert!(spec.lambda_c(0, 0.0).is_err());
    }

    #[test]
    fn hand_posterior() {
        let spec = hand_spec();
        let post = spec.posterior(0).unwrap();
        assert_abs_diff_eq!(post[0], 0.8 * 0.5 / 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(post[0], 0.7273, epsilon = 1e-4);
        assert_abs_diff_eq!(post.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        let space = SequenceSpace::new(2, 1, 1).unwrap();
        let single = TrueDistributionSpec::new(
            space,
            vec![1.0],
            vec![SequenceDistribution::new(space, vec![0.4, 0.6]).unwrap()],
        )
        .unwrap();
        assert_eq!(single.posterior(0).unwrap(), vec![1.0]);
    }

    #[test]
    fn scale_zero_returns_conditional() {
        let space = SequenceSpace::new(3, 2, 3).unwrap();
        for spec in families_on(space) {
            for c in 0..3 {
                let (target, z) = spec.target_distribution(c, 0.0).unwrap();
                assert_abs_diff_eq!(z, 1.0, epsilon = 1e-12);
                for x in 0..space.num_sequences() {
                    assert_abs_diff_eq!(
                        target.prob(x),
                        spec.conditional(c).prob(x),
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn independent_family_is_inert() {
        let space = SequenceSpace::new(3, 2, 3).unwrap();
        let spec = TrueDistributionSpec::generate(SpecFamily::Independent, space, 1.0, 5).unwrap();
        for c in 0..3 {
            for x in 0..space.num_sequences() {
                assert_abs_diff_eq!(
                    spec.conditional_residual(c, x).unwrap(),
                    0.0,
                    epsilon = 1e-12
                );
            }
            let (target, z) = spec.target_distribution(c, 2.5).unwrap();
            assert_abs_diff_eq!(z, 1.0, epsilon = 1e-10);
            for x in 0..space.num_sequences() {
                assert_abs_diff_eq!(
                    target.prob(x),
                    spec.conditional(c).prob(x),
                    epsilon = 1e-12
                );
            }
            assert_abs_diff_eq!(spec.lambda_c(c, 3.0).unwrap(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn change_of_measure_identity() {
        // E_{p(x)}[exp(residual(x, c))] = 1 for every condition.
        let space = SequenceSpace::new(3, 2, 3).unwrap();
        for spec in families_on(space) {
            let marginal = spec.marginal_x();
            for c in 0..space.num_conditions() {
                let mut expectation = 0.0;
                for x in 0..space.num_sequences() {
                    let r = spec.residual_against(&marginal, c, x).unwrap();
                    if r.is_finite() {
                        expectation += marginal.prob(x) * r.exp();
                    }
                }
                assert_abs_diff_eq!(expectation, 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn posterior_matches_residual_identity() {
        // log p(c|x) - log p(c) = residual(x, c), for every (x, c).
        let space = SequenceSpace::new(3, 2, 3).unwrap();
        for spec in families_on(space) {
            let marginal = spec.marginal_x();
            for x in 0..space.num_sequences() {
                let post = spec.posterior_against(&marginal, x).unwrap();
                for c in 0..space.num_conditions() {
                    let r = spec.residual_against(&marginal, c, x).unwrap();
                    assert_abs_diff_eq!(
                        post[c].ln() - spec.p_c()[c].ln(),
                        r,
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn target_matches_pointwise_residual_form() {
        // Recomputing the target from residuals reproduces it.
        let space = SequenceSpace::new(3, 2, 3).unwrap();
        for spec in families_on(space) {
            let marginal = spec.marginal_x();
            for c in 0..space.num_conditions() {
                for s in [0.0, 0.5, 1.0, 2.0, 4.0] {
                    let (target, z) = spec.target_distribution(c, s).unwrap();
                    for x in 0..space.num_sequences() {
                        let p_xc = spec.conditional(c).prob(x);
                        let r = spec.residual_against(&marginal, c, x).unwrap();
                        let expected = if p_xc == 0.0 {
                            0.0
                        } else {
                            p_xc * (s * r).exp() / z
                        };
                        let tolerance = 1e-12 * expected.max(1e-300);
                        assert!(
                            (target.prob(x) - expected).abs() <= tolerance.max(1e-15),
                            "family mismatch at c={c} s={s} x={x}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn expected_residual_is_monotone_in_scale() {
        let space = SequenceSpace::new(3, 2, 3).unwrap();
        for spec in families_on(space) {
            let marginal = spec.marginal_x();
            for c in 0..space.num_conditions() {
                let mut previous = f64::NEG_INFINITY;
                for s in [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
                    let (target, _) = spec.target_distribution(c, s).unwrap();
                    let mut expected_residual = 0.0;
                    for x in 0..space.num_sequences() {
                        let p = target.prob(x);
                        if p > 0.0 {
                            expected_residual +=
                                p * spec.residual_against(&marginal, c, x).unwrap();
                        }
                    }
                    assert!(
                        expected_residual >= previous - 1e-12,
                        "expected residual decreased at s={s} for condition {c}"
                    );
                    previous = expected_residual;
                }
            }
        }
    }

    #[test]
    fn zero_probability_conventions() {
        let space = SequenceSpace::new(2, 1, 2).unwrap();
        let spec = TrueDistributionSpec::new(
            space,
            vec![0.5, 0.5],
            vec![
                SequenceDistribution::new(space, vec![0.0, 1.0]).unwrap(),
                SequenceDistribution::new(space, vec![0.5, 0.5]).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(
            spec.conditional_residual(0, 0).unwrap(),
            f64::NEG_INFINITY
        );
        let (target, _) = spec.target_distribution(0, 1.0).unwrap();
        assert_eq!(target.prob(0), 0.0);
        assert_abs_diff_eq!(target.prob(1), 1.0, epsilon = 1e-12);

        // p(x) = 0 while p(x|c) > 0 must be rejected outright.
        let malformed = TrueDistributionSpec::new(
            space,
            vec![1.0, 0.0],
            vec![
                SequenceDistribution::new(space, vec![0.0, 1.0]).unwrap(),
                SequenceDistribution::new(space, vec![1.0, 0.0]).unwrap(),
            ],
        );
        assert!(matches!(malformed, Err(Error::Domain(_))));
    }

    #[test]
    fn exact_model_reproduces_spec() {
        let space = SequenceSpace::new(3, 2, 3).unwrap();
        let spec =
            TrueDistributionSpec::generate(SpecFamily::RandomDirichlet, space, 1.0, 13).unwrap();
        let model = spec.exact_model().unwrap();
        for c in 0..space.num_conditions() {
            let dist = model.model_distribution(c).unwrap();
            for x in 0..space.num_sequences() {
                assert_abs_diff_eq!(dist.prob(x), spec.conditional(c).prob(x), epsilon = 1e-12);
            }
        }
        let mask = model.model_distribution(space.mask_id()).unwrap();
        let marginal = spec.marginal_x();
        for x in 0..space.num_sequences() {
            assert_abs_diff_eq!(mask.prob(x), marginal.prob(x), epsilon = 1e-12);
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let space = SequenceSpace::new(3, 2, 3).unwrap();
        for family in SpecFamily::ALL {
            let a = TrueDistributionSpec::generate(family, space, 1.0, 9).unwrap();
            let b = TrueDistributionSpec::generate(family, space, 1.0, 9).unwrap();
            assert_eq!(a, b);
        }
        let a = TrueDistributionSpec::generate(SpecFamily::RandomDirichlet, space, 1.0, 9).unwrap();
        let b = TrueDistributionSpec::generate(SpecFamily::RandomDirichlet, space, 1.0, 10).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn needle_rows_have_designed_shape() {
        let space = SequenceSpace::new(2, 3, 4).unwrap();
        let spec = TrueDistributionSpec::generate(SpecFamily::Needle, space, 1.0, 0).unwrap();
        let s = space.num_sequences();
        for c in 0..4 {
            let needle = c * s / 4;
            let row = spec.conditional(c);
            assert_abs_diff_eq!(
                row.prob(needle),
                0.5 + 0.5 / s as f64,
                epsilon = 1e-15
            );
            // The needle is the clear residual peak for its condition.
            let r = spec.conditional_residual(c, needle).unwrap();
            assert!(r > 1.0, "needle residual {r} unexpectedly small");
        }
    }

    #[test]
    fn dataset_sampling_matches_joint() {
        let space = SequenceSpace::new(2, 2, 2).unwrap();
        let spec = hand_spec_on(space);
        let mut rng = crate::rng::stream(31, "dataset-test", 0);
        let draws = 100_000usize;
        let pairs = spec.sample_dataset(draws, &mut rng);
        let mut counts = vec![vec![0usize; space.num_sequences()]; 2];
        for pair in &pairs {
            counts[pair.condition][pair.seq_index] += 1;
        }
        for c in 0..2 {
            for x in 0..space.num_sequences() {
                let p = spec.p_c()[c] * spec.conditional(c).prob(x);
                let sigma = (p * (1.0 - p) / draws as f64).sqrt();
                let observed = counts[c][x] as f64 / draws as f64;
                assert!(
                    (observed - p).abs() <= 3.0 * sigma,
                    "joint frequency off at (c={c}, x={x}): {observed} vs {p}"
                );
            }
        }
    }

    fn hand_spec_on(space: SequenceSpace) -> TrueDistributionSpec {
        TrueDistributionSpec::new(
            space,
            vec![0.4, 0.6],
            vec![
                SequenceDistribution::new(space, vec![0.1, 0.3, 0.25, 0.35]).unwrap(),
                SequenceDistribution::new(space, vec![0.4, 0.2, 0.15, 0.25]).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let space = SequenceSpace::new(3, 2, 3).unwrap();
        let spec =
            TrueDistributionSpec::generate(SpecFamily::RandomDirichlet, space, 0.7, 123).unwrap();
        let text = spec.to_text();
        let back = TrueDistributionSpec::from_text(&text, Path::new("t")).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn loader_rejects_malformed_text() {
        let spec = hand_spec();
        let text = spec.to_text();
        assert!(TrueDistributionSpec::from_text(
            &text.replace("true-spec v1", "true-spec v2"),
            Path::new("t")
        )
        .is_err());
        assert!(TrueDistributionSpec::from_text(
            &text.replace("end\n", ""),
            Path::new("t")
        )
        .is_err());
        assert!(TrueDistributionSpec::from_text(
            &text.replace("row 1", "row 7"),
            Path::new("t")
        )
        .is_err());
        assert!(
            TrueDistributionSpec::from_text(&text.replace("0.8", "0.9"), Path::new("t")).is_err()
        );
    }
}
