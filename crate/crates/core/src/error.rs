use crate::timetag::Party;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tags out of order at index {index}: ({prev_ps} ps, ch {prev_channel}) then ({next_ps} ps, ch {next_channel})")]
    Unsorted {
        index: usize,
        prev_ps: i64,
        prev_channel: u8,
        next_ps: i64,
        next_channel: u8,
    },
    #[error("duplicate tag at index {index}: {timestamp_ps} ps on channel {channel}")]
    DuplicateTag {
        index: usize,
        timestamp_ps: i64,
        channel: u8,
    },
    #[error("cannot merge streams of different parties ({first:?} and {other:?})")]
    MixedParties { first: Party, other: Party },
    #[error("cannot merge streams with different epochs ({first} and {other})")]
    EpochMismatch { first: i64, other: i64 },
    #[error("nothing to merge")]
    NoStreams,
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error("histogram has no peak")]
    NoPeak,
    #[error("synchronization failed: {locked} of {blocks} blocks locked, need at least 2")]
    SyncFailure { locked: usize, blocks: usize },
    #[error("subspace index {index} out of range (d/2 = {count})")]
    SubspaceOutOfRange { index: usize, count: usize },
    #[error("probability {0} outside [0, 1]")]
    ProbabilityDomain(f64),
}
