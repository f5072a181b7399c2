//! Reference calculators for the SFT objective and the KTO loss over
//! caller-supplied log-probabilities. Nothing here computes gradients.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid KTO configuration: {0}")]
    InvalidConfig(String),
}

/// Risk aversion `beta` and the desirable/undesirable weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KtoConfig<T> {
    pub beta: T,
    pub lambda_p: T,
    pub lambda_n: T,
}

impl<T: Scalar> KtoConfig<T> {
    pub fn new(beta: T, lambda_p: T, lambda_n: T) -> Result<Self, LossError> {
        let cfg = KtoConfig {
            beta,
            lambda_p,
            lambda_n,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("beta", self.beta),
            ("lambda_p", self.lambda_p),
            ("lambda_n", self.lambda_n),
        ] {
            if !(v.is_finite() && v > T::zero()) {
                return Err(LossError::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Class weight for an example.
    pub fn lambda(&self, desirable: bool) -> T {
        if desirable {
            self.lambda_p
        } else {
            self.lambda_n
        }
    }
}

impl<T: Scalar> Default for KtoConfig<T> {
    fn default() -> Self {
        KtoConfig {
            beta: T::lit(0.1),
            lambda_p: T::one(),
            lambda_n: T::one(),
        }
    }
}

/// Log-probabilities of one completion under the policy and reference models.
///
/// The optional `kl_*` pair scores this example's prompt against a different
/// example's completion and feeds the reference-point estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample<T> {
    pub policy_logprob: T,
    pub ref_logprob: T,
    pub desirable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_policy_logprob: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_ref_logprob: Option<T>,
}

impl<T: Scalar> ScoredExample<T> {
    pub fn new(policy_logprob: T, ref_logprob: T, desirable: bool) -> Self {
        ScoredExample {
            policy_logprob,
            ref_logprob,
            desirable,
            kl_policy_logprob: None,
            kl_ref_logprob: None,
        }
    }

    pub fn with_mismatched(mut self, policy_logprob: T, ref_logprob: T) -> Self {
        self.kl_policy_logprob = Some(policy_logprob);
        self.kl_ref_logprob = Some(ref_logprob);
        self
    }

    /// Implied reward `log π(y|x) − log π_ref(y|x)`.
    pub fn reward(&self) -> T {
        self.policy_logprob - self.ref_logprob
    }

    fn mismatched_reward(&self) -> Option<T> {
        Some(self.kl_policy_logprob? - self.kl_ref_logprob?)
    }
}

/// How the reference point `z0` is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferencePoint<T> {
    /// Batch estimate from mismatched prompt/completion pairs, clamped at 0.
    Estimate,
    /// Caller-supplied value, used as is.
    Fixed(T),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KtoOutput<T> {
    pub loss: T,
    pub per_example: Vec<T>,
    pub z0: T,
}

/// Mean implied reward over the mismatched pairs, clamped at zero. Examples
/// without a mismatched pair are ignored; a batch with none yields 0.
pub fn estimate_z0<T: Scalar>(batch: &[ScoredExample<T>]) -> T {
    let rewards: Vec<T> = batch.iter().filter_map(ScoredExample::mismatched_reward).collect();
    if rewards.is_empty() {
        tracing::warn!("no mismatched log-probabilities in batch; using z0 = 0");
        return T::zero();
    }
    let mean = rewards.iter().fold(T::zero(), |acc, &r| acc + r) / T::from_count(rewards.len());
    mean.max(T::zero())
}

/// Prospect-theoretic value of one example.
pub fn kto_value<T: Scalar>(reward: T, z0: T, desirable: bool, cfg: &KtoConfig<T>) -> T {
    if desirable {
        cfg.lambda_p * (cfg.beta * (reward - z0)).sigmoid()
    } else {
        cfg.lambda_n * (cfg.beta * (z0 - reward)).sigmoid()
    }
}

/// Mean of `λ_y − v(x, y)` over the batch.
pub fn kto_loss<T: Scalar>(
    batch: &[ScoredExample<T>],
    cfg: &KtoConfig<T>,
    reference: ReferencePoint<T>,
) -> Result<KtoOutput<T>, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    cfg.validate()?;
    if batch
        .iter()
        .any(|e| e.policy_logprob > T::zero() || e.ref_logprob > T::zero())
    {
        tracing::warn!("positive log-probability in KTO batch");
    }
    let z0 = match reference {
        ReferencePoint::Estimate => estimate_z0(batch),
        ReferencePoint::Fixed(z) => z,
    };
    let per_example: Vec<T> = batch
        .iter()
        .map(|e| cfg.lambda(e.desirable) - kto_value(e.reward(), z0, e.desirable, cfg))
        .collect();
    let loss = per_example.iter().fold(T::zero(), |acc, &l| acc + l) / T::from_count(per_example.len());
    Ok(KtoOutput { loss, per_example, z0 })
}

/// Conditional log-likelihood of a gold sequence: the sum of its token
/// log-probabilities. Maximized during fine-tuning.
pub fn sft_loss<T: Scalar>(token_logprobs: &[T]) -> T {
    if token_logprobs.is_empty() {
        tracing::warn!("empty token sequence; SFT objective is 0");
    }
    token_logprobs.iter().fold(T::zero(), |acc, &x| acc + x)
}
