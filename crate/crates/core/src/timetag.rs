//! Detection events and time-ordered tag streams.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Reverse;
use core::fmt;

use crate::{Error, Result};

/// Picoseconds per second.
pub const PS_PER_S: i64 = 1_000_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Party {
    Alice,
    Bob,
}

impl Party {
    pub fn code(self) -> u8 {
        match self {
            Party::Alice => 0,
            Party::Bob => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Party::Alice),
            1 => Some(Party::Bob),
            _ => None,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Party::Alice => "alice",
            Party::Bob => "bob",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    /// Time of arrival.
    Toa,
    /// Temporal superposition (unbalanced interferometer output).
    Tsup,
}

/// Which output of the TSUP module fired: the transmitted port projects onto
/// `(|i> + |i+k>)/√2`, the reflected port onto `(|i> - |i+k>)/√2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

/// One of the four detectors of a party's receiver module.
///
/// The ordinal doubles as the on-disk channel code and as the tie-breaker
/// for tags sharing a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Channel {
    ToaH = 0,
    ToaV = 1,
    TsupPlus = 2,
    TsupMinus = 3,
}

impl Channel {
    pub const ALL: [Channel; 4] = [
        Channel::ToaH,
        Channel::ToaV,
        Channel::TsupPlus,
        Channel::TsupMinus,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::ToaH => "TOA_H",
            Channel::ToaV => "TOA_V",
            Channel::TsupPlus => "TSUP_PLUS",
            Channel::TsupMinus => "TSUP_MINUS",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn basis(self) -> Basis {
        match self {
            Channel::ToaH | Channel::ToaV => Basis::Toa,
            Channel::TsupPlus | Channel::TsupMinus => Basis::Tsup,
        }
    }

    pub fn sign(self) -> Option<Sign> {
        match self {
            Channel::TsupPlus => Some(Sign::Plus),
            Channel::TsupMinus => Some(Sign::Minus),
            _ => None,
        }
    }

    pub fn tsup(sign: Sign) -> Self {
        match sign {
            Sign::Plus => Channel::TsupPlus,
            Sign::Minus => Channel::TsupMinus,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single detection: epoch-relative picosecond timestamp and detector.
///
/// The party is carried by the owning [`TagStream`]. Field order gives the
/// derived `Ord` the stream ordering: timestamp first, then channel ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeTag {
    pub timestamp: i64,
    pub channel: Channel,
}

impl TimeTag {
    pub fn new(timestamp: i64, channel: Channel) -> Self {
        Self { timestamp, channel }
    }
}

/// Checks strict `(timestamp, channel)` ordering and reports the first
/// violation.
pub fn check_order(tags: &[TimeTag]) -> Result<()> {
    for (i, w) in tags.windows(2).enumerate() {
        let (prev, next) = (w[0], w[1]);
        if prev == next {
            return Err(Error::DuplicateTag {
                index: i + 1,
                timestamp_ps: next.timestamp,
                channel: next.channel.code(),
            });
        }
        if prev > next {
            return Err(Error::Unsorted {
                index: i + 1,
                prev_ps: prev.timestamp,
                prev_channel: prev.channel.code(),
                next_ps: next.timestamp,
                next_channel: next.channel.code(),
            });
        }
    }
    Ok(())
}

/// Immutable, strictly ordered detection stream of one party.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    party: Party,
    epoch: i64,
    tags: Vec<TimeTag>,
}

impl TagStream {
    /// Wraps already sorted tags; unsorted or duplicated input is rejected.
    pub fn new(party: Party, epoch: i64, tags: Vec<TimeTag>) -> Result<Self> {
        check_order(&tags)?;
        Ok(Self { party, epoch, tags })
    }

    pub fn empty(party: Party, epoch: i64) -> Self {
        Self {
            party,
            epoch,
            tags: Vec::new(),
        }
    }

    /// Sorts arbitrary tags. Exact duplicates are still an error.
    pub fn from_unsorted(party: Party, epoch: i64, mut tags: Vec<TimeTag>) -> Result<Self> {
        tags.sort_unstable();
        Self::new(party, epoch, tags)
    }

    /// Sorts and silently drops exact `(timestamp, channel)` repeats, keeping
    /// the first. Used by the generators, where a repeat is a detector that
    /// cannot fire twice within the same picosecond.
    pub(crate) fn sorted_dedup(party: Party, epoch: i64, mut tags: Vec<TimeTag>) -> Self {
        tags.sort_unstable();
        tags.dedup();
        Self { party, epoch, tags }
    }

    pub fn party(&self) -> Party {
        self.party
    }

    pub fn epoch(&self) -> i64 {
        self.epoch
    }

    pub fn tags(&self) -> &[TimeTag] {
        &self.tags
    }

    pub fn into_tags(self) -> Vec<TimeTag> {
        self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn first_ps(&self) -> Option<i64> {
        self.tags.first().map(|t| t.timestamp)
    }

    pub fn last_ps(&self) -> Option<i64> {
        self.tags.last().map(|t| t.timestamp)
    }

    /// Tags with `start <= timestamp < end`.
    pub fn range(&self, start: i64, end: i64) -> &[TimeTag] {
        slice_range(&self.tags, start, end)
    }

    /// Every tag translated by `delta` ps.
    pub fn shifted(&self, delta: i64) -> TagStream {
        TagStream {
            party: self.party,
            epoch: self.epoch,
            tags: self
                .tags
                .iter()
                .map(|t| TimeTag::new(t.timestamp + delta, t.channel))
                .collect(),
        }
    }
}

/// Sub-slice of sorted `tags` with `start <= timestamp < end`.
pub fn slice_range(tags: &[TimeTag], start: i64, end: i64) -> &[TimeTag] {
    let lo = tags.partition_point(|t| t.timestamp < start);
    let hi = tags.partition_point(|t| t.timestamp < end).max(lo);
    &tags[lo..hi]
}

/// k-way merge of sorted streams of the same party and epoch.
pub fn merge_sorted(streams: &[TagStream]) -> Result<TagStream> {
    let first = streams.first().ok_or(Error::NoStreams)?;
    for s in streams {
        if s.party != first.party {
            return Err(Error::MixedParties {
                first: first.party,
                other: s.party,
            });
        }
        if s.epoch != first.epoch {
            return Err(Error::EpochMismatch {
                first: first.epoch,
                other: s.epoch,
            });
        }
    }

    let total = streams.iter().map(TagStream::len).sum();
    let mut out = Vec::with_capacity(total);
    let mut heap: BinaryHeap<Reverse<(TimeTag, usize, usize)>> = streams
        .iter()
        .enumerate()
        .filter_map(|(s, stream)| stream.tags.first().map(|&t| Reverse((t, s, 0))))
        .collect();

    while let Some(Reverse((tag, s, pos))) = heap.pop() {
        if out.last() == Some(&tag) {
            return Err(Error::DuplicateTag {
                index: out.len(),
                timestamp_ps: tag.timestamp,
                channel: tag.channel.code(),
            });
        }
        out.push(tag);
        if let Some(&next) = streams[s].tags.get(pos + 1) {
            heap.push(Reverse((next, s, pos + 1)));
        }
    }

    Ok(TagStream {
        party: first.party,
        epoch: first.epoch,
        tags: out,
    })
}
