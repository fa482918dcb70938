//! Soft severity distributions and the linear weighting that turns them into
//! a per-instance loss weight.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `p_nc + p_n + p_c = 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeverityError {
    #[error("severity component {name} = {value} is not finite")]
    NonFinite { name: &'static str, value: f64 },
    #[error("severity component {name} = {value} lies outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("severity components sum to {sum}, not 1 (tolerance {SIMPLEX_TOLERANCE})")]
    NotNormalized { sum: f64 },
    #[error("weight coefficient {name} = {value} must be finite and non-negative")]
    BadCoefficient { name: &'static str, value: f64 },
    #[error("unknown severity label {0:?} (expected non-critical, neutral or critical)")]
    UnknownLabel(String),
    #[error(
        "unrecognized weighting {0:?} (expected mild, strong, balanced, uniform-ce or alpha,beta,gamma)"
    )]
    UnknownWeighting(String),
}

/// The three severity classes, in tie-breaking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SeverityClass {
    #[serde(rename = "non-critical")]
    NonCritical,
    #[serde(rename = "neutral")]
    Neutral,
    #[serde(rename = "critical")]
    Critical,
}

impl SeverityClass {
    pub const ALL: [SeverityClass; 3] = [Self::NonCritical, Self::Neutral, Self::Critical];

    pub fn index(self) -> usize {
        match self {
            Self::NonCritical => 0,
            Self::Neutral => 1,
            Self::Critical => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NonCritical => "non-critical",
            Self::Neutral => "neutral",
            Self::Critical => "critical",
        }
    }
}

impl fmt::Display for SeverityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeverityClass {
    type Err = SeverityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "non-critical" => Ok(Self::NonCritical),
            "neutral" => Ok(Self::Neutral),
            "critical" => Ok(Self::Critical),
            other => Err(SeverityError::UnknownLabel(other.to_string())),
        }
    }
}

const COMPONENT_NAMES: [&str; 3] = ["non_critical", "neutral", "critical"];

/// Probability simplex `[p_nc, p_n, p_c]` over the three severity classes.
///
/// Construction validates; a value of this type always satisfies the
/// simplex invariants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeverityDistribution {
    probs: [f64; 3],
}

impl SeverityDistribution {
    /// Strict constructor: rejects anything off the simplex, never repairs.
    pub fn new(non_critical: f64, neutral: f64, critical: f64) -> Result<Self, SeverityError> {
        let probs = [non_critical, neutral, critical];
        check_components(&probs)?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(SeverityError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    /// Ingestion constructor: components within [`SIMPLEX_TOLERANCE`] of
    /// summing to one are divided by their sum; larger deviations are
    /// rejected.
    pub fn renormalized(
        non_critical: f64,
        neutral: f64,
        critical: f64,
    ) -> Result<Self, SeverityError> {
        let d = Self::new(non_critical, neutral, critical)?;
        let sum: f64 = d.probs.iter().sum();
        // Already normalized to machine precision; dividing would only
        // perturb the last bits and break exact serialization round trips.
        if (sum - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(d);
        }
        Ok(Self {
            probs: d.probs.map(|p| (p / sum).min(1.0)),
        })
    }

    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / 3.0; 3],
        }
    }

    /// All mass on one class.
    pub fn one_hot(class: SeverityClass) -> Self {
        let mut probs = [0.0; 3];
        probs[class.index()] = 1.0;
        Self { probs }
    }

    pub fn non_critical(&self) -> f64 {
        self.probs[0]
    }

    pub fn neutral(&self) -> f64 {
        self.probs[1]
    }

    pub fn critical(&self) -> f64 {
        self.probs[2]
    }

    pub fn probs(&self) -> [f64; 3] {
        self.probs
    }

    pub fn prob(&self, class: SeverityClass) -> f64 {
        self.probs[class.index()]
    }

    /// Most probable class; ties resolve to the earlier class in
    /// non-critical < neutral < critical order.
    pub fn argmax(&self) -> SeverityClass {
        let mut best = 0;
        for i in 1..3 {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        SeverityClass::ALL[best]
    }
}

fn check_components(probs: &[f64; 3]) -> Result<(), SeverityError> {
    for (&value, name) in probs.iter().zip(COMPONENT_NAMES) {
        if !value.is_finite() {
            return Err(SeverityError::NonFinite { name, value });
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(SeverityError::OutOfRange { name, value });
        }
    }
    Ok(())
}

/// Coefficients `(alpha, beta, gamma)` applied to `(p_nc, p_n, p_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl WeightConfig {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, SeverityError> {
        for (name, value) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !value.is_finite() || value < 0.0 {
                return Err(SeverityError::BadCoefficient { name, value });
            }
        }
        Ok(Self {
            alpha,
            beta,
            gamma,
            name: None,
        })
    }

    fn preset(name: &str, alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            name: Some(name.to_string()),
        }
    }

    pub fn mild() -> Self {
        Self::preset("mild", 0.75, 1.0, 1.25)
    }

    pub fn strong() -> Self {
        Self::preset("strong", 0.25, 1.0, 1.75)
    }

    pub fn balanced() -> Self {
        Self::preset("balanced", 0.5, 1.0, 1.5)
    }

    /// `(1, 1, 1)`: the weighted loss collapses to plain cross-entropy.
    pub fn unit() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            name: None,
        }
    }

    pub fn preset_by_name(name: &str) -> Option<Self> {
        match name {
            "mild" => Some(Self::mild()),
            "strong" => Some(Self::strong()),
            "balanced" => Some(Self::balanced()),
            _ => None,
        }
    }

    pub fn coefficients(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    /// Multiplies every coefficient by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self, SeverityError> {
        Self::new(self.alpha * c, self.beta * c, self.gamma * c)
    }

    fn validate(&self) -> Result<(), SeverityError> {
        Self::new(self.alpha, self.beta, self.gamma).map(|_| ())
    }
}

impl fmt::Display for WeightConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(name) = &self.name {
            write!(f, "{name} ")?;
        }
        write!(
            f,
            "(alpha={}, beta={}, gamma={})",
            self.alpha, self.beta, self.gamma
        )
    }
}

/// `w = alpha * p_nc + beta * p_n + gamma * p_c`.
pub fn compute_weight(dist: &SeverityDistribution, cfg: &WeightConfig) -> f64 {
    cfg.alpha * dist.non_critical() + cfg.beta * dist.neutral() + cfg.gamma * dist.critical()
}

/// Like [`compute_weight`] but starting from raw components, so that an
/// invalid simplex or coefficient triple surfaces as an error.
pub fn weight_from_probs(probs: [f64; 3], cfg: &WeightConfig) -> Result<f64, SeverityError> {
    cfg.validate()?;
    let dist = SeverityDistribution::new(probs[0], probs[1], probs[2])?;
    Ok(compute_weight(&dist, cfg))
}

/// How the training loss weights each instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Weighting {
    /// Plain cross-entropy: every instance has weight exactly 1.
    UniformCe,
    Severity(WeightConfig),
}

impl Weighting {
    pub fn weight(&self, dist: &SeverityDistribution) -> f64 {
        match self {
            Self::UniformCe => 1.0,
            Self::Severity(cfg) => compute_weight(dist, cfg),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::UniformCe => "uniform-ce".to_string(),
            Self::Severity(cfg) => cfg.to_string(),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Weighting {
    type Err = SeverityError;

    /// Accepts `mild`, `strong`, `balanced`, `uniform-ce`, or an explicit
    /// `alpha,beta,gamma` triple.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "uniform-ce" {
            return Ok(Self::UniformCe);
        }
        if let Some(cfg) = WeightConfig::preset_by_name(s) {
            return Ok(Self::Severity(cfg));
        }
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(SeverityError::UnknownWeighting(s.to_string()));
        }
        let mut vals = [0.0; 3];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p
                .parse()
                .map_err(|_| SeverityError::UnknownWeighting(s.to_string()))?;
        }
        Ok(Self::Severity(WeightConfig::new(vals[0], vals[1], vals[2])?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_are_exact() {
        assert_eq!(WeightConfig::mild().coefficients(), [0.75, 1.0, 1.25]);
        assert_eq!(WeightConfig::strong().coefficients(), [0.25, 1.0, 1.75]);
        assert_eq!(WeightConfig::balanced().coefficients(), [0.5, 1.0, 1.5]);
    }

    #[test]
    fn unit_weights_give_one() {
        let d = SeverityDistribution::new(0.2, 0.3, 0.5).unwrap();
        assert!((compute_weight(&d, &WeightConfig::unit()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn balanced_on_neck_lump_row() {
        let d = SeverityDistribution::new(0.32, 0.32, 0.36).unwrap();
        let w = compute_weight(&d, &WeightConfig::balanced());
        assert!((w - 1.02).abs() < 1e-12, "{w}");
    }

    #[test]
    fn degenerate_simplex_selects_alpha() {
        let d = SeverityDistribution::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(compute_weight(&d, &WeightConfig::strong()), 0.25);
    }

    #[test]
    fn invalid_simplex_names_invariant() {
        let err = weight_from_probs([0.5, 0.2, 0.1], &WeightConfig::balanced()).unwrap_err();
        assert!(matches!(err, SeverityError::NotNormalized { .. }));
        assert!(err.to_string().contains("sum"));
        let err = weight_from_probs([1.2, -0.1, -0.1], &WeightConfig::balanced()).unwrap_err();
        assert!(err.to_string().contains("outside [0, 1]"), "{err}");
        let err = weight_from_probs([f64::NAN, 0.5, 0.5], &WeightConfig::unit()).unwrap_err();
        assert!(matches!(err, SeverityError::NonFinite { .. }));
    }

    #[test]
    fn negative_coefficient_rejected() {
        assert!(WeightConfig::new(-0.1, 1.0, 1.0).is_err());
        assert!("1,-1,1".parse::<Weighting>().is_err());
    }

    #[test]
    fn renormalization_only_within_tolerance() {
        let d = SeverityDistribution::renormalized(0.3333335, 0.3333335, 0.3333335).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(SeverityDistribution::renormalized(0.4, 0.2, 0.2).is_err());
    }

    #[test]
    fn argmax_ties_follow_class_order() {
        let d = SeverityDistribution::new(0.4, 0.4, 0.2).unwrap();
        assert_eq!(d.argmax(), SeverityClass::NonCritical);
        let d = SeverityDistribution::new(0.2, 0.4, 0.4).unwrap();
        assert_eq!(d.argmax(), SeverityClass::Neutral);
        let d = SeverityDistribution::new(0.32, 0.32, 0.36).unwrap();
        assert_eq!(d.argmax(), SeverityClass::Critical);
    }

    #[test]
    fn weighting_parses_presets_and_triples() {
        assert_eq!("uniform-ce".parse::<Weighting>().unwrap(), Weighting::UniformCe);
        assert_eq!(
            "balanced".parse::<Weighting>().unwrap(),
            Weighting::Severity(WeightConfig::balanced())
        );
        let Weighting::Severity(cfg) = "0.1, 2, 3.5".parse::<Weighting>().unwrap() else {
            panic!("expected explicit triple");
        };
        assert_eq!(cfg.coefficients(), [0.1, 2.0, 3.5]);
        assert!("heavy".parse::<Weighting>().is_err());
        assert!("1,2".parse::<Weighting>().is_err());
    }

    #[test]
    fn labels_round_trip() {
        for c in SeverityClass::ALL {
            assert_eq!(c.as_str().parse::<SeverityClass>().unwrap(), c);
        }
        assert!("severe".parse::<SeverityClass>().is_err());
    }

    fn simplex() -> impl Strategy<Value = SeverityDistribution> {
        // Components below 0.05 snap to exactly zero so that degenerate
        // faces of the simplex are exercised.
        let comp = || (0.0..1.0f64).prop_map(|v| if v < 0.05 { 0.0 } else { v });
        (comp(), comp(), comp())
            .prop_filter("non-degenerate", |(a, b, c)| a + b + c > 0.0)
            .prop_map(|(a, b, c)| {
                let s = a + b + c;
                SeverityDistribution::renormalized(a / s, b / s, c / s).unwrap()
            })
    }

    proptest! {
        #[test]
        fn weight_lies_between_extreme_coefficients(
            d in simplex(),
            a in 0.0..5.0f64, b in 0.0..5.0f64, g in 0.0..5.0f64,
        ) {
            let cfg = WeightConfig::new(a, b, g).unwrap();
            let w = compute_weight(&d, &cfg);
            let lo = a.min(b).min(g);
            let hi = a.max(b).max(g);
            prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12);
        }

        #[test]
        fn weight_is_homogeneous(d in simplex(), c in 0.01..10.0f64) {
            let cfg = WeightConfig::balanced();
            let w = compute_weight(&d, &cfg);
            let ws = compute_weight(&d, &cfg.scaled(c).unwrap());
            prop_assert!((ws - c * w).abs() <= 1e-12 * ws.abs().max(1.0));
        }

        #[test]
        fn raising_gamma_moves_weight_iff_critical_mass(d in simplex(), bump in 0.01..2.0f64) {
            let base = WeightConfig::balanced();
            let more = WeightConfig::new(base.alpha, base.beta, base.gamma + bump).unwrap();
            let (w0, w1) = (compute_weight(&d, &base), compute_weight(&d, &more));
            if d.critical() > 0.0 {
                prop_assert!(w1 > w0);
            } else {
                prop_assert_eq!(w1, w0);
            }
            let more_alpha = WeightConfig::new(base.alpha + bump, base.beta, base.gamma).unwrap();
            let w2 = compute_weight(&d, &more_alpha);
            if d.non_critical() > 0.0 {
                prop_assert!(w2 > w0);
            } else {
                prop_assert_eq!(w2, w0);
            }
        }
    }
}
