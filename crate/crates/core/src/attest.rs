//! Attestations binding a model, an input and an output by hash, and
//! verification by re-execution.
//!
//! Wire format (112 bytes): `model_id | input_hash | output_hash` (32 bytes
//! each), then `bond: u64`, `challenge_period: u64`, little-endian.

use std::fmt;

use crate::digest::{token_bytes, tokens_digest, Digest};
use crate::engine::{Engine, ExecConfig, GenerationResult};
use crate::error::Result;
use crate::modelio::{weight_hash, ModelFile};
use crate::wire::Reader;

pub const ATTESTATION_LEN: usize = 112;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Attestation {
    pub model_id: Digest,
    pub input_hash: Digest,
    pub output_hash: Digest,
    /// Stake committed by the attester. Carried as data only.
    pub bond: u64,
    /// Dispute window in blocks. Carried as data only.
    pub challenge_period: u64,
}

impl Attestation {
    pub fn to_bytes(&self) -> [u8; ATTESTATION_LEN] {
        let mut out = [0u8; ATTESTATION_LEN];
        out[..32].copy_from_slice(&self.model_id.0);
        out[32..64].copy_from_slice(&self.input_hash.0);
        out[64..96].copy_from_slice(&self.output_hash.0);
        out[96..104].copy_from_slice(&self.bond.to_le_bytes());
        out[104..].copy_from_slice(&self.challenge_period.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let mut digest = || -> Result<Digest> {
            let mut d = [0u8; 32];
            d.copy_from_slice(r.take(32)?);
            Ok(Digest(d))
        };
        let model_id = digest()?;
        let input_hash = digest()?;
        let output_hash = digest()?;
        let att = Attestation {
            model_id,
            input_hash,
            output_hash,
            bond: r.u64()?,
            challenge_period: r.u64()?,
        };
        r.finish()?;
        Ok(att)
    }

    /// Multi-line hex rendering.
    pub fn to_text(&self) -> String {
        format!(
            "model_id={}\ninput_hash={}\noutput_hash={}\nbond={}\nchallenge_period={}\n",
            self.model_id, self.input_hash, self.output_hash, self.bond, self.challenge_period
        )
    }
}

/// Builds the attestation for `result`, the engine's output on `prompt_ids`.
pub fn make_attestation(
    model_bytes: &[u8],
    prompt_ids: &[u32],
    result: &GenerationResult,
    bond: u64,
    challenge_period: u64,
) -> Attestation {
    Attestation {
        model_id: weight_hash(model_bytes),
        input_hash: tokens_digest(prompt_ids),
        output_hash: Digest::of(&token_bytes(&result.token_ids)),
        bond,
        challenge_period,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Model,
    Input,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Model => "model",
            Stage::Input => "input",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyOutcome {
    Confirmed,
    Refuted {
        stage: Stage,
        expected: Digest,
        found: Digest,
    },
}

impl VerifyOutcome {
    pub fn is_confirmed(&self) -> bool {
        matches!(self, VerifyOutcome::Confirmed)
    }
}

impl fmt::Display for VerifyOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyOutcome::Confirmed => f.write_str("Confirmed"),
            VerifyOutcome::Refuted { stage, .. } => write!(f, "Refuted({stage})"),
        }
    }
}

/// Staged verification with a caller-supplied re-executor.
///
/// The model and input digests are checked first; only if both match is the
/// model decoded and `reexecute` called, exactly once.
pub fn verify_with<F>(
    att: &Attestation,
    model_bytes: &[u8],
    prompt_ids: &[u32],
    reexecute: F,
) -> Result<VerifyOutcome>
where
    F: FnOnce(&ModelFile, &[u32]) -> Result<GenerationResult>,
{
    let model_id = weight_hash(model_bytes);
    if model_id != att.model_id {
        return Ok(VerifyOutcome::Refuted {
            stage: Stage::Model,
            expected: att.model_id,
            found: model_id,
        });
    }
    let input_hash = tokens_digest(prompt_ids);
    if input_hash != att.input_hash {
        return Ok(VerifyOutcome::Refuted {
            stage: Stage::Input,
            expected: att.input_hash,
            found: input_hash,
        });
    }
    let model = ModelFile::from_bytes(model_bytes)?;
    let result = reexecute(&model, prompt_ids)?;
    if result.output_hash != att.output_hash {
        return Ok(VerifyOutcome::Refuted {
            stage: Stage::Output,
            expected: att.output_hash,
            found: result.output_hash,
        });
    }
    Ok(VerifyOutcome::Confirmed)
}

/// Re-runs greedy generation on this machine and compares the output hash.
pub fn verify_by_reexecution(
    att: &Attestation,
    model_bytes: &[u8],
    prompt_ids: &[u32],
    max_new: usize,
) -> Result<VerifyOutcome> {
    verify_with(att, model_bytes, prompt_ids, |model, prompt| {
        Engine::new(model, ExecConfig::default())?.generate_greedy(prompt, max_new)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    AttesterWins,
    ChallengerWins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisputeResult {
    pub winner: Winner,
    pub outcome: VerifyOutcome,
}

impl DisputeResult {
    pub fn failed_stage(&self) -> Option<Stage> {
        match self.outcome {
            VerifyOutcome::Confirmed => None,
            VerifyOutcome::Refuted { stage, .. } => Some(stage),
        }
    }
}

/// One challenger re-executes with the honest model; the challenger wins iff
/// verification refutes the attestation.
pub fn dispute_game(
    att: &Attestation,
    honest_model_bytes: &[u8],
    prompt_ids: &[u32],
    max_new: usize,
) -> Result<DisputeResult> {
    let outcome = verify_by_reexecution(att, honest_model_bytes, prompt_ids, max_new)?;
    let winner = if outcome.is_confirmed() {
        Winner::AttesterWins
    } else {
        Winner::ChallengerWins
    };
    Ok(DisputeResult { winner, outcome })
}

/// Convenience: run greedy generation and attest to it.
pub fn attest_greedy(
    model_bytes: &[u8],
    prompt_ids: &[u32],
    max_new: usize,
    bond: u64,
    challenge_period: u64,
) -> Result<(Attestation, GenerationResult)> {
    let model = ModelFile::from_bytes(model_bytes)?;
    let result = Engine::new(&model, ExecConfig::default())?.generate_greedy(prompt_ids, max_new)?;
    let att = make_attestation(model_bytes, prompt_ids, &result, bond, challenge_period);
    Ok((att, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::modelio::{gen_toy_model, ModelConfig};

    fn setup() -> (Vec<u8>, Vec<u32>) {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 16,
            vocab: 32,
            max_ctx: 32,
            rope_theta: 10000.0,
        };
        (gen_toy_model(11, &cfg).unwrap().to_bytes(), vec![3, 1, 4, 1, 5])
    }

    #[test]
    fn honest_round_trip() {
        let (bytes, prompt) = setup();
        let (att, _) = attest_greedy(&bytes, &prompt, 8, 1000, 50).unwrap();
        let (again, _) = attest_greedy(&bytes, &prompt, 8, 1000, 50).unwrap();
        assert_eq!(att, again);
        assert_eq!(att.bond, 1000);
        assert_eq!(att.challenge_period, 50);
        assert_eq!(
            verify_by_reexecution(&att, &bytes, &prompt, 8).unwrap(),
            VerifyOutcome::Confirmed
        );
    }

    #[test]
    fn prompts_change_input_hash() {
        let (bytes, prompt) = setup();
        let (a, _) = attest_greedy(&bytes, &prompt, 4, 0, 0).unwrap();
        let (b, _) = attest_greedy(&bytes, &[3, 1, 4], 4, 0, 0).unwrap();
        assert_ne!(a.input_hash, b.input_hash);
    }

    #[test]
    fn flipped_output_bit_is_refuted() {
        let (bytes, prompt) = setup();
        let (mut att, _) = attest_greedy(&bytes, &prompt, 8, 0, 0).unwrap();
        att.output_hash.0[7] ^= 0x10;
        let out = verify_by_reexecution(&att, &bytes, &prompt, 8).unwrap();
        assert!(matches!(out, VerifyOutcome::Refuted { stage: Stage::Output, .. }));
        assert_eq!(out.to_string(), "Refuted(output)");
    }

    #[test]
    fn wrong_model_is_refuted_before_inference() {
        let (bytes, prompt) = setup();
        let (att, _) = attest_greedy(&bytes, &prompt, 8, 0, 0).unwrap();
        let mut other = bytes.clone();
        let last = other.len() - 1;
        other[last] ^= 1;
        let mut ran = false;
        let out = verify_with(&att, &other, &prompt, |_, _| {
            ran = true;
            unreachable!()
        })
        .unwrap();
        assert!(!ran);
        assert!(matches!(out, VerifyOutcome::Refuted { stage: Stage::Model, .. }));
    }

    #[test]
    fn undecodable_model_is_an_error_not_a_verdict() {
        let garbage = b"not a model".to_vec();
        let att = Attestation {
            model_id: weight_hash(&garbage),
            input_hash: tokens_digest(&[1]),
            output_hash: Digest::of(b""),
            bond: 0,
            challenge_period: 0,
        };
        assert!(matches!(
            verify_by_reexecution(&att, &garbage, &[1], 2),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn dispute_outcomes() {
        let (bytes, prompt) = setup();
        let (att, result) = attest_greedy(&bytes, &prompt, 6, 5, 5).unwrap();
        let honest = dispute_game(&att, &bytes, &prompt, 6).unwrap();
        assert_eq!(honest.winner, Winner::AttesterWins);
        assert_eq!(honest.failed_stage(), None);

        let mut fake = result.token_ids.clone();
        fake[0] = (fake[0] + 1) % 32;
        let forged = Attestation {
            output_hash: tokens_digest(&fake),
            ..att
        };
        let d = dispute_game(&forged, &bytes, &prompt, 6).unwrap();
        assert_eq!((d.winner, d.failed_stage()), (Winner::ChallengerWins, Some(Stage::Output)));

        let wrong_model = Attestation {
            model_id: Digest::of(b"some other model"),
            ..att
        };
        let d = dispute_game(&wrong_model, &bytes, &prompt, 6).unwrap();
        assert_eq!((d.winner, d.failed_stage()), (Winner::ChallengerWins, Some(Stage::Model)));
    }

    #[test]
    fn wire_format() {
        let (bytes, prompt) = setup();
        let (att, _) = attest_greedy(&bytes, &prompt, 3, 0x0102, u64::MAX).unwrap();
        let wire = att.to_bytes();
        assert_eq!(wire.len(), ATTESTATION_LEN);
        assert_eq!(&wire[..32], att.model_id.as_bytes());
        assert_eq!(&wire[96..98], &[0x02, 0x01]);
        assert_eq!(Attestation::from_bytes(&wire).unwrap(), att);
        assert!(Attestation::from_bytes(&wire[..111]).is_err());
        let text = att.to_text();
        assert!(text.contains(&format!("model_id={}", att.model_id.to_hex())));
    }
}
