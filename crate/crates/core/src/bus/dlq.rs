use serde::{Deserialize, Serialize};

use super::file::{decode_records, encode_record};
use crate::event::CloudEvent;

/// Replays an unmatched event survives before it is moved to the poisoned list.
pub const MAX_REPLAY_GENERATIONS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParkReason {
    NoMatchingTrigger,
    TriggerDisabled,
    Malformed,
    MalformedConditionInput,
    OutOfSequence,
    CascadeLimit,
}

impl ParkReason {
    /// Whether a replay can ever succeed for this reason.
    pub fn replayable(self) -> bool {
        !matches!(self, ParkReason::Malformed | ParkReason::CascadeLimit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParkedEvent {
    pub event: CloudEvent,
    pub reason: ParkReason,
    #[serde(default)]
    pub generations: u32,
    /// Triggers whose state change may let this event through.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocked_on: Vec<String>,
}

/// Per-workflow holding area for events that matched no enabled trigger.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeadLetterQueue {
    parked: Vec<ParkedEvent>,
    #[serde(default)]
    poisoned: Vec<ParkedEvent>,
    #[serde(default)]
    replay_generation: u64,
    #[serde(default)]
    parked_total: u64,
    #[serde(default)]
    replayed_total: u64,
}

impl DeadLetterQueue {
    pub fn park(&mut self, event: CloudEvent, reason: ParkReason) {
        self.park_entry(ParkedEvent { event, reason, generations: 0, blocked_on: Vec::new() });
    }

    /// Re-parks an entry after an unsuccessful replay, poisoning it once it
    /// has exhausted its generations.
    pub fn park_entry(&mut self, entry: ParkedEvent) {
        if entry.generations >= MAX_REPLAY_GENERATIONS || !entry.reason.replayable() {
            tracing::debug!(id = %entry.event.id, reason = ?entry.reason, "event poisoned");
            self.poisoned.push(entry);
        } else {
            self.parked_total += 1;
            self.parked.push(entry);
        }
    }

    /// Takes every parked event in park order.
    pub fn replay_parked(&mut self) -> Vec<ParkedEvent> {
        if self.parked.is_empty() {
            return Vec::new();
        }
        self.replay_generation += 1;
        let out = std::mem::take(&mut self.parked);
        self.replayed_total += out.len() as u64;
        out.into_iter()
            .map(|mut e| {
                e.generations += 1;
                e
            })
            .collect()
    }

    /// Takes the parked events selected by `pred`, keeping park order for
    /// both the taken and the remaining entries.
    pub fn replay_where(&mut self, mut pred: impl FnMut(&ParkedEvent) -> bool) -> Vec<ParkedEvent> {
        if !self.parked.iter().any(&mut pred) {
            return Vec::new();
        }
        self.replay_generation += 1;
        let (taken, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut self.parked).into_iter().partition(|e| pred(e));
        self.parked = kept;
        self.replayed_total += taken.len() as u64;
        taken
            .into_iter()
            .map(|mut e| {
                e.generations += 1;
                e
            })
            .collect()
    }

    pub fn parked(&self) -> &[ParkedEvent] {
        &self.parked
    }

    pub fn poisoned(&self) -> &[ParkedEvent] {
        &self.poisoned
    }

    pub fn len(&self) -> usize {
        self.parked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parked.is_empty()
    }

    pub fn replay_generation(&self) -> u64 {
        self.replay_generation
    }

    pub fn parked_total(&self) -> u64 {
        self.parked_total
    }

    pub fn replayed_total(&self) -> u64 {
        self.replayed_total
    }

    /// Length-prefixed mirror: a header record followed by one record per entry.
    pub fn to_log_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Header {
            replay_generation: u64,
            parked_total: u64,
            replayed_total: u64,
        }
        #[derive(Serialize)]
        struct Entry<'a> {
            #[serde(flatten)]
            entry: &'a ParkedEvent,
            poisoned: bool,
        }
        let mut out = Vec::new();
        let header = Header {
            replay_generation: self.replay_generation,
            parked_total: self.parked_total,
            replayed_total: self.replayed_total,
        };
        encode_record(&mut out, &serde_json::to_vec(&header).unwrap());
        for (entries, poisoned) in [(&self.parked, false), (&self.poisoned, true)] {
            for entry in entries {
                encode_record(&mut out, &serde_json::to_vec(&Entry { entry, poisoned }).unwrap());
            }
        }
        out
    }

    pub fn from_log_bytes(bytes: &[u8]) -> Result<Self, String> {
        #[derive(Deserialize)]
        struct Header {
            replay_generation: u64,
            parked_total: u64,
            replayed_total: u64,
        }
        #[derive(Deserialize)]
        struct Entry {
            #[serde(flatten)]
            entry: ParkedEvent,
            poisoned: bool,
        }
        let (records, valid) = decode_records(bytes);
        if valid != bytes.len() {
            return Err("torn dlq record".into());
        }
        let mut it = records.iter();
        let header: Header = match it.next() {
            Some(r) => serde_json::from_slice(r).map_err(|e| e.to_string())?,
            None => return Ok(DeadLetterQueue::default()),
        };
        let mut dlq = DeadLetterQueue {
            replay_generation: header.replay_generation,
            parked_total: header.parked_total,
            replayed_total: header.replayed_total,
            ..Default::default()
        };
        for r in it {
            let e: Entry = serde_json::from_slice(r).map_err(|e| e.to_string())?;
            if e.poisoned {
                dlq.poisoned.push(e.entry);
            } else {
                dlq.parked.push(e.entry);
            }
        }
        Ok(dlq)
    }
}
