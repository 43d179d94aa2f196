use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::transport::Link;
use super::wire::{encode, Body, Envelope, Inbox, Party};
use super::{FedError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub messages_sent: u64,
    pub messages_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl TrafficStats {
    pub fn messages(&self) -> u64 {
        self.messages_sent + self.messages_received
    }

    pub fn bytes(&self) -> u64 {
        self.bytes_sent + self.bytes_received
    }
}

impl std::ops::AddAssign for TrafficStats {
    fn add_assign(&mut self, o: Self) {
        self.messages_sent += o.messages_sent;
        self.messages_received += o.messages_received;
        self.bytes_sent += o.bytes_sent;
        self.bytes_received += o.bytes_received;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToClient,
    FromClient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub client: usize,
    #[serde(with = "hex_bytes")]
    pub frame: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Every frame the controller exchanged, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
        Ok(Self { entries })
    }

    pub fn num_clients(&self) -> usize {
        self.entries.iter().map(|e| e.client + 1).max().unwrap_or(0)
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.frame.len() as u64).sum()
    }

    /// Replay links that feed back the recorded client frames and check
    /// that the controller sends exactly the recorded frames.
    pub fn replay_links(&self) -> Vec<Box<dyn Link>> {
        (0..self.num_clients())
            .map(|c| {
                let mut link = ReplayLink {
                    client: c,
                    expected: VecDeque::new(),
                    replies: VecDeque::new(),
                };
                for e in self.entries.iter().filter(|e| e.client == c) {
                    match e.direction {
                        Direction::ToClient => link.expected.push_back(e.frame.clone()),
                        Direction::FromClient => link.replies.push_back(e.frame.clone()),
                    }
                }
                Box::new(link) as Box<dyn Link>
            })
            .collect()
    }
}

struct ReplayLink {
    client: usize,
    expected: VecDeque<Vec<u8>>,
    replies: VecDeque<Vec<u8>>,
}

impl Link for ReplayLink {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        match self.expected.pop_front() {
            Some(f) if f == frame => Ok(()),
            Some(_) => Err(FedError::Diverged(format!("frame to client {} differs from the recording", self.client))),
            None => Err(FedError::Diverged(format!("extra frame to client {}", self.client))),
        }
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        self.replies
            .pop_front()
            .ok_or_else(|| FedError::Diverged(format!("recording has no further frame from client {}", self.client)))
    }
}

/// The controller's side of the star: one link per client, a round
/// counter, receive checks, traffic accounting and an optional transcript.
pub struct Hub {
    run_id: String,
    links: Vec<Box<dyn Link>>,
    inbox: Inbox,
    round: u64,
    layout_hash: String,
    stats: TrafficStats,
    transcript: Option<Transcript>,
}

impl Hub {
    pub fn new(run_id: &str, links: Vec<Box<dyn Link>>, record: bool) -> Self {
        Self {
            run_id: run_id.to_string(),
            links,
            inbox: Inbox::new(run_id),
            round: 0,
            layout_hash: String::new(),
            stats: TrafficStats::default(),
            transcript: record.then(Transcript::default),
        }
    }

    pub fn num_clients(&self) -> usize {
        self.links.len()
    }

    pub fn set_layout_hash(&mut self, hash: &str) {
        self.layout_hash = hash.to_string();
        self.inbox.set_layout_hash(hash);
    }

    pub fn stats(&self) -> TrafficStats {
        self.stats
    }

    pub fn transcript(&self) -> Option<&Transcript> {
        self.transcript.as_ref()
    }

    pub fn take_transcript(&mut self) -> Option<Transcript> {
        self.transcript.take()
    }

    /// Sends `body_for(i)` to every client under one new round id.
    pub fn broadcast_each(&mut self, mut body_for: impl FnMut(usize) -> Body) -> Result<u64> {
        self.round += 1;
        for i in 0..self.links.len() {
            let frame = encode(&Envelope {
                run_id: self.run_id.clone(),
                sender: Party::Controller,
                round: self.round,
                layout_hash: self.layout_hash.clone(),
                body: body_for(i),
            });
            self.links[i].send(&frame)?;
            self.stats.messages_sent += 1;
            self.stats.bytes_sent += frame.len() as u64;
            if let Some(t) = &mut self.transcript {
                t.entries.push(TranscriptEntry {
                    direction: Direction::ToClient,
                    client: i,
                    frame,
                });
            }
        }
        Ok(self.round)
    }

    pub fn broadcast(&mut self, body: Body) -> Result<u64> {
        self.broadcast_each(|_| body.clone())
    }

    /// Receives one message from every client, in client order. A client
    /// `Failure` becomes an error.
    pub fn gather(&mut self) -> Result<Vec<Envelope>> {
        let mut out = Vec::with_capacity(self.links.len());
        for i in 0..self.links.len() {
            let frame = self.links[i].recv()?;
            self.stats.messages_received += 1;
            self.stats.bytes_received += frame.len() as u64;
            let env = self.inbox.accept(&frame, Party::Client(i))?;
            if let Some(t) = &mut self.transcript {
                t.entries.push(TranscriptEntry {
                    direction: Direction::FromClient,
                    client: i,
                    frame,
                });
            }
            if let Body::Failure { numeric, reason } = env.body {
                return Err(FedError::Remote {
                    client: i,
                    numeric,
                    reason,
                });
            }
            out.push(env);
        }
        Ok(out)
    }

    /// Sends a shutdown and closes every link.
    pub fn shutdown(&mut self) -> Result<()> {
        self.broadcast(Body::Shutdown)?;
        for l in &mut self.links {
            l.close()?;
        }
        Ok(())
    }
}
