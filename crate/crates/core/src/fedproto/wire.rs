//! Messages and their length-prefixed frames.
//!
//! ```text
//! u32 LE  frame_len      bytes that follow this field
//! u32 LE  header_len
//! [header_len]  JSON header
//! [8·payload_words]  payload, LE u64 words
//! ```
//!
//! The header carries the message tag and fields, run id, sender, round,
//! the sender's layout hash, the payload word count and the payload's
//! CRC-32 (which catches every single-bit flip). A ciphertext's words are
//! the payload; everything else is JSON.

use serde::{Deserialize, Serialize};

use super::cipher::{CipherVector, Scheme};
use super::{FedError, Result};
use crate::arch::ArchCode;
use crate::supernet::Regularization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Controller,
    Client(usize),
}

/// What a client should do with a broadcast population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Phase {
    /// Run `steps` federated weight updates on the population, then report
    /// val losses of it.
    Train { steps: usize },
    /// The controller's evolved population: merge, evolve locally, report
    /// elites and losses.
    Evolve,
    /// Report val losses only.
    Evaluate,
}

/// Search-space and optimiser settings a client needs to build its replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSetup {
    pub num_clients: usize,
    pub layers: usize,
    pub layer_types: Vec<String>,
    pub lr: f64,
    pub scheme: Scheme,
    /// This client's train-size coefficient (gradients).
    pub train_coeff: f64,
    /// This client's val-size coefficient (losses).
    pub val_coeff: f64,
    pub population: usize,
    pub crossover_prob: f64,
    pub mutation_rate: f64,
    pub tournament: usize,
    pub regularization: Regularization,
    /// Seed of the client's own RNG streams.
    pub run_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", content = "body")]
pub enum Body {
    Hello {
        client: usize,
        num_features: usize,
        num_classes: usize,
        train: usize,
        val: usize,
        test: usize,
    },
    InitSuperNet {
        seed: u64,
        layout_hash: String,
        setup: ClientSetup,
    },
    PopulationBroadcast {
        population: Vec<ArchCode>,
        phase: Phase,
    },
    GradientReport {
        cipher: CipherVector,
    },
    GradientBroadcast {
        cipher: CipherVector,
    },
    LossReport {
        codes: Vec<ArchCode>,
        cipher: CipherVector,
    },
    ElitesReport {
        elites: Vec<ArchCode>,
        codes: Vec<ArchCode>,
        cipher: CipherVector,
        best_local_loss: f64,
    },
    GammaBroadcast {
        generation: usize,
        gamma: f64,
        quota: usize,
    },
    FinalEvalRequest {
        code: ArchCode,
        timing_runs: usize,
    },
    FinalEvalReport {
        accuracy: f64,
        test_size: usize,
        inference_secs: f64,
    },
    /// A client-side failure, reported instead of the expected reply.
    Failure {
        numeric: bool,
        reason: String,
    },
    Shutdown,
}

impl Body {
    pub fn tag(&self) -> &'static str {
        match self {
            Body::Hello { .. } => "Hello",
            Body::InitSuperNet { .. } => "InitSuperNet",
            Body::PopulationBroadcast { .. } => "PopulationBroadcast",
            Body::GradientReport { .. } => "GradientReport",
            Body::GradientBroadcast { .. } => "GradientBroadcast",
            Body::LossReport { .. } => "LossReport",
            Body::ElitesReport { .. } => "ElitesReport",
            Body::GammaBroadcast { .. } => "GammaBroadcast",
            Body::FinalEvalRequest { .. } => "FinalEvalRequest",
            Body::FinalEvalReport { .. } => "FinalEvalReport",
            Body::Failure { .. } => "Failure",
            Body::Shutdown => "Shutdown",
        }
    }

    fn cipher(&self) -> Option<&CipherVector> {
        match self {
            Body::GradientReport { cipher }
            | Body::GradientBroadcast { cipher }
            | Body::LossReport { cipher, .. }
            | Body::ElitesReport { cipher, .. } => Some(cipher),
            _ => None,
        }
    }

    fn cipher_mut(&mut self) -> Option<&mut CipherVector> {
        match self {
            Body::GradientReport { cipher }
            | Body::GradientBroadcast { cipher }
            | Body::LossReport { cipher, .. }
            | Body::ElitesReport { cipher, .. } => Some(cipher),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub run_id: String,
    pub sender: Party,
    pub round: u64,
    pub layout_hash: String,
    pub body: Body,
}

#[derive(Serialize, Deserialize)]
struct Header<B> {
    run_id: String,
    sender: Party,
    round: u64,
    layout_hash: String,
    message: B,
    payload_words: usize,
    payload_crc32: u32,
}

pub fn encode(env: &Envelope) -> Vec<u8> {
    // cipher words are skipped by serde and travel as the payload
    let words: &[u64] = env.body.cipher().map_or(&[], |c| &c.words);
    let mut payload = Vec::with_capacity(words.len() * 8);
    for w in words {
        payload.extend_from_slice(&w.to_le_bytes());
    }
    let header = serde_json::to_vec(&Header {
        run_id: env.run_id.clone(),
        sender: env.sender,
        round: env.round,
        layout_hash: env.layout_hash.clone(),
        message: &env.body,
        payload_words: words.len(),
        payload_crc32: crc32fast::hash(&payload),
    })
    .expect("header serialises");
    let frame_len = 4 + header.len() + payload.len();
    let mut out = Vec::with_capacity(4 + frame_len);
    out.extend_from_slice(&(frame_len as u32).to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Decodes one complete frame, checking lengths and the payload digest.
pub fn decode(frame: &[u8]) -> Result<Envelope> {
    let bad = |m: String| FedError::Frame(m);
    if frame.len() < 8 {
        return Err(bad(format!("frame of {} bytes is too short", frame.len())));
    }
    let frame_len = u32::from_le_bytes(frame[0..4].try_into().unwrap()) as usize;
    if frame_len != frame.len() - 4 {
        return Err(bad(format!("length prefix {frame_len} but {} bytes follow", frame.len() - 4)));
    }
    let header_len = u32::from_le_bytes(frame[4..8].try_into().unwrap()) as usize;
    if header_len > frame.len() - 8 {
        return Err(bad(format!("header length {header_len} exceeds frame")));
    }
    let header: Header<Body> = serde_json::from_slice(&frame[8..8 + header_len]).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &frame[8 + header_len..];
    if payload.len() != header.payload_words * 8 {
        return Err(bad(format!(
            "payload has {} bytes, header declares {} words",
            payload.len(),
            header.payload_words
        )));
    }
    if crc32fast::hash(payload) != header.payload_crc32 {
        return Err(FedError::Tampered("payload checksum mismatch".into()));
    }
    let mut body = header.message;
    match body.cipher_mut() {
        Some(c) => {
            if c.len != header.payload_words {
                return Err(bad(format!("cipher length {} vs {} payload words", c.len, header.payload_words)));
            }
            c.words = payload
                .chunks_exact(8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .collect();
        }
        None if header.payload_words != 0 => return Err(bad("payload on a message without a cipher".into())),
        None => {}
    }
    Ok(Envelope {
        run_id: header.run_id,
        sender: header.sender,
        round: header.round,
        layout_hash: header.layout_hash,
        body,
    })
}

/// Receiver-side checks shared by both ends: run id, sender, strictly
/// increasing rounds, and (once known) the layout hash.
#[derive(Debug, Clone)]
pub struct Inbox {
    run_id: String,
    layout_hash: Option<String>,
    last_round: std::collections::BTreeMap<Party, u64>,
}

impl Inbox {
    pub fn new(run_id: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            layout_hash: None,
            last_round: Default::default(),
        }
    }

    pub fn set_layout_hash(&mut self, hash: &str) {
        self.layout_hash = Some(hash.to_string());
    }

    pub fn accept(&mut self, frame: &[u8], from: Party) -> Result<Envelope> {
        let env = decode(frame)?;
        if env.run_id != self.run_id {
            return Err(FedError::Frame(format!("run id {:?}, expected {:?}", env.run_id, self.run_id)));
        }
        if env.sender != from {
            return Err(FedError::Frame(format!("sender {:?}, expected {from:?}", env.sender)));
        }
        if let Some(h) = &self.layout_hash {
            if &env.layout_hash != h {
                return Err(FedError::LayoutMismatch {
                    expected: h.clone(),
                    got: env.layout_hash,
                });
            }
        }
        if let Some(&last) = self.last_round.get(&from) {
            if env.round <= last {
                return Err(FedError::RoundRegression {
                    last,
                    got: env.round,
                });
            }
        }
        self.last_round.insert(from, env.round);
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedproto::cipher::encrypt;

    fn code() -> ArchCode {
        ArchCode {
            input: 1,
            layer_types: vec![2, 0],
            preds: vec![Some(0), None],
            output: 3,
        }
    }

    fn envelope(round: u64) -> Envelope {
        Envelope {
            run_id: "r1".into(),
            sender: Party::Client(2),
            round,
            layout_hash: "abc".into(),
            body: Body::LossReport {
                codes: vec![code()],
                cipher: encrypt(&[0.25, -1.0, 3.5], 1.0, Scheme::Plain, None, 0).unwrap(),
            },
        }
    }

    #[test]
    fn frames_round_trip() {
        let env = envelope(3);
        let frame = encode(&env);
        assert_eq!(decode(&frame).unwrap(), env);
        let plain = Envelope {
            body: Body::GammaBroadcast {
                generation: 1,
                gamma: 0.495,
                quota: 10,
            },
            ..env.clone()
        };
        assert_eq!(decode(&encode(&plain)).unwrap(), plain);
        // layout: prefix counts everything after itself; payload is 3 words
        let frame_len = u32::from_le_bytes(frame[0..4].try_into().unwrap()) as usize;
        let header_len = u32::from_le_bytes(frame[4..8].try_into().unwrap()) as usize;
        assert_eq!(frame_len, frame.len() - 4);
        assert_eq!(frame.len(), 8 + header_len + 24);
        assert_eq!(&frame[frame.len() - 8..], &3.5f64.to_bits().to_le_bytes());
    }

    #[test]
    fn every_flipped_payload_bit_is_detected() {
        let frame = encode(&envelope(1));
        let header_len = u32::from_le_bytes(frame[4..8].try_into().unwrap()) as usize;
        for byte in 8 + header_len..frame.len() {
            for bit in 0..8 {
                let mut f = frame.clone();
                f[byte] ^= 1 << bit;
                assert!(matches!(decode(&f), Err(FedError::Tampered(_))));
            }
        }
    }

    #[test]
    fn truncation_and_length_lies_are_detected() {
        let frame = encode(&envelope(1));
        assert!(decode(&frame[..frame.len() - 1]).is_err());
        let mut f = frame.clone();
        f[0] ^= 1;
        assert!(decode(&f).is_err());
        let mut f = frame.clone();
        f.extend_from_slice(&[0; 8]);
        f[0..4].copy_from_slice(&((frame.len() + 4) as u32).to_le_bytes());
        assert!(decode(&f).is_err());
    }

    #[test]
    fn inbox_checks_rounds_layout_and_sender() {
        let mut inbox = Inbox::new("r1");
        inbox.set_layout_hash("abc");
        let from = Party::Client(2);
        inbox.accept(&encode(&envelope(1)), from).unwrap();
        inbox.accept(&encode(&envelope(2)), from).unwrap();
        assert!(matches!(
            inbox.accept(&encode(&envelope(2)), from),
            Err(FedError::RoundRegression { .. })
        ));
        assert!(inbox.accept(&encode(&envelope(9)), Party::Client(1)).is_err());
        let mut other = envelope(10);
        other.layout_hash = "zzz".into();
        assert!(matches!(inbox.accept(&encode(&other), from), Err(FedError::LayoutMismatch { .. })));
        let mut foreign = envelope(11);
        foreign.run_id = "r2".into();
        assert!(inbox.accept(&encode(&foreign), from).is_err());
    }
}
