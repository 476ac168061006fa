use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelOutput};
use crate::labels::{check_simplex, NUM_CLASSES};

/// Weights of the auxiliary terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_secondary: f64,
    pub lambda_attributes: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_secondary: 0.5, lambda_attributes: 0.5 }
    }
}

/// Targets for one sample. Absent auxiliary targets contribute nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub primary: [f64; NUM_CLASSES],
    pub secondary: Option<[f64; NUM_CLASSES]>,
    pub attributes: Option<[f64; 3]>,
}

impl Targets {
    pub fn primary_only(primary: [f64; NUM_CLASSES]) -> Self {
        Self { primary, secondary: None, attributes: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub primary: f64,
    pub secondary: f64,
    pub attributes: f64,
}

impl LossBreakdown {
    pub(crate) fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.primary += o.primary;
        self.secondary += o.secondary;
        self.attributes += o.attributes;
    }

    pub(crate) fn scale(&mut self, k: f64) {
        self.total *= k;
        self.primary *= k;
        self.secondary *= k;
        self.attributes *= k;
    }
}

/// `Σ tᵢ (ln tᵢ − log pᵢ)` with `0 · ln 0 = 0`.
pub fn kl_divergence(target: &[f64], logprobs: &[f64]) -> f64 {
    target
        .iter()
        .zip(logprobs)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, lp)| t * (t.ln() - lp))
        .sum()
}

/// KL(target ‖ prediction) for the primary head.
pub fn kl_loss(output: &ModelOutput, target: &[f64; NUM_CLASSES]) -> Result<f64, ModelError> {
    check_simplex(target, 1e-6).map_err(|e| ModelError::TargetNotOnSimplex(e.to_string()))?;
    Ok(kl_divergence(target, &output.primary_logprobs))
}

/// Primary KL plus weighted secondary KL and attribute MSE.
pub fn total_loss(output: &ModelOutput, targets: &Targets, cfg: &LossConfig) -> LossBreakdown {
    let primary = kl_divergence(&targets.primary, &output.primary_logprobs);
    let secondary = match (&targets.secondary, &output.secondary_logprobs) {
        (Some(t), Some(lp)) => kl_divergence(t, lp),
        _ => 0.0,
    };
    let attributes = match (&targets.attributes, &output.attributes) {
        (Some(t), Some(a)) => t.iter().zip(a).map(|(t, a)| (a - t) * (a - t)).sum::<f64>() / 3.0,
        _ => 0.0,
    };
    LossBreakdown {
        total: primary + cfg.lambda_secondary * secondary + cfg.lambda_attributes * attributes,
        primary,
        secondary,
        attributes,
    }
}

/// d(total loss) / d(raw head outputs).
///
/// For a KL term against a target with mass `Σt` the logit gradient is
/// `(Σt)·p − t`; renormalized targets give the familiar `p − t`.
pub(crate) fn output_gradient(output: &ModelOutput, targets: &Targets, cfg: &LossConfig, mc: &ModelConfig) -> Vec<f64> {
    let mut g = vec![0.0; mc.out_dim()];
    let mass: f64 = targets.primary.iter().sum();
    for i in 0..NUM_CLASSES {
        g[i] = mass * output.primary_probs[i] - targets.primary[i];
    }
    if let (Some(range), Some(t), Some(p)) = (mc.secondary_range(), &targets.secondary, &output.secondary_probs) {
        let mass: f64 = t.iter().sum();
        for (k, i) in range.enumerate() {
            g[i] = cfg.lambda_secondary * (mass * p[k] - t[k]);
        }
    }
    if let (Some(range), Some(t), Some(a)) = (mc.attribute_range(), &targets.attributes, &output.attributes) {
        for (k, i) in range.enumerate() {
            g[i] = cfg.lambda_attributes * (2.0 / 3.0) * (a[k] - t[k]) * a[k] * (1.0 - a[k]);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        let t = [0.5, 0.5];
        let lp = [0.25f64.ln(), 0.75f64.ln()];
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&t, &lp) - expect).abs() < 1e-15);
        assert!((expect - 0.143_841).abs() < 1e-6);

        let p = [0.1, 0.2, 0.7];
        let lp: Vec<f64> = p.iter().map(|x: &f64| x.ln()).collect();
        assert!(kl_divergence(&p, &lp).abs() < 1e-15);
        // one-hot → NLL of that class
        assert!((kl_divergence(&[0.0, 1.0, 0.0], &lp) + 0.2f64.ln()).abs() < 1e-15);
        // zero-mass entries ignore -inf predictions
        assert_eq!(kl_divergence(&[0.0, 1.0], &[f64::NEG_INFINITY, 0.0]), 0.0);
    }
}
