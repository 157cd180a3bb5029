//! Channel-tagged detection streams and the TTG1 binary container.
//!
//! Layout (little-endian): `"TTG1"`, `u16` version = 1, `u64` resolution in
//! picoseconds, `u64` record count, then `count` records of `u8` channel and
//! `u64` timestamp in ticks, sorted by timestamp.

use std::io::{Read, Write};

use crate::error::{domain, Error, Result};

pub const MAGIC: &[u8; 4] = b"TTG1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 4 + 2 + 8 + 8;
pub const RECORD_LEN: u64 = 1 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag {
    pub timestamp: u64,
    pub channel: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeTagStream {
    /// Tick length in picoseconds.
    pub resolution_ps: u64,
    /// Tags ordered by `(timestamp, channel)`.
    pub tags: Vec<Tag>,
    /// Acquisition length in ticks; every timestamp is strictly below it.
    pub duration_ticks: u64,
}

impl TimeTagStream {
    pub fn empty(resolution_ps: u64, duration_ticks: u64) -> Self {
        Self { resolution_ps, tags: Vec::new(), duration_ticks }
    }

    pub fn resolution(&self) -> f64 {
        self.resolution_ps as f64 * 1e-12
    }

    pub fn duration(&self) -> f64 {
        self.duration_ticks as f64 * self.resolution()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Timestamps of one channel, in order.
    pub fn channel(&self, channel: u8) -> Vec<u64> {
        self.tags.iter().filter(|t| t.channel == channel).map(|t| t.timestamp).collect()
    }

    pub fn channels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for t in &self.tags {
            seen[t.channel as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    /// Mean detection rate of one channel in counts per second.
    pub fn rate(&self, channel: u8) -> f64 {
        let d = self.duration();
        if d > 0.0 {
            self.tags.iter().filter(|t| t.channel == channel).count() as f64 / d
        } else {
            0.0
        }
    }

    /// Checks ordering and the duration bound.
    pub fn validate(&self) -> Result<()> {
        if self.resolution_ps == 0 {
            return Err(domain("resolution must be at least 1 ps"));
        }
        for (i, w) in self.tags.windows(2).enumerate() {
            if w[1] < w[0] {
                return Err(domain(format!("tag {} is out of order", i + 1)));
            }
        }
        if let Some(last) = self.tags.last() {
            if last.timestamp >= self.duration_ticks {
                return Err(domain("timestamp beyond stream duration"));
            }
        }
        Ok(())
    }

    /// Copy with every tag moved to `channel`.
    pub fn relabel(&self, channel: u8) -> Self {
        Self {
            resolution_ps: self.resolution_ps,
            tags: self.tags.iter().map(|t| Tag { channel, ..*t }).collect(),
            duration_ticks: self.duration_ticks,
        }
    }
}

/// Merges streams sharing one resolution. Ties break by channel and then by
/// the position of the source stream in `streams`.
pub fn merge(streams: &[TimeTagStream]) -> Result<TimeTagStream> {
    let Some(first) = streams.first() else {
        return Err(domain("nothing to merge"));
    };
    if streams.iter().any(|s| s.resolution_ps != first.resolution_ps) {
        return Err(domain("cannot merge streams with different resolutions"));
    }
    let mut keyed: Vec<(Tag, usize)> = Vec::with_capacity(streams.iter().map(|s| s.len()).sum());
    for (src, s) in streams.iter().enumerate() {
        keyed.extend(s.tags.iter().map(|&t| (t, src)));
    }
    keyed.sort_by_key(|&(t, src)| (t.timestamp, t.channel, src));
    Ok(TimeTagStream {
        resolution_ps: first.resolution_ps,
        tags: keyed.into_iter().map(|(t, _)| t).collect(),
        duration_ticks: streams.iter().map(|s| s.duration_ticks).max().unwrap_or(0),
    })
}

pub fn write_timetags<W: Write>(stream: &TimeTagStream, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity((HEADER_LEN + RECORD_LEN * stream.len() as u64) as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&stream.resolution_ps.to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for t in &stream.tags {
        buf.push(t.channel);
        buf.extend_from_slice(&t.timestamp.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

/// Reads a TTG1 stream. The container stores no acquisition length, so the
/// duration is set to one tick past the last timestamp (0 when empty).
pub fn read_timetags<R: Read>(mut input: R) -> Result<TimeTagStream> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_timetags(&bytes)
}

pub fn parse_timetags(bytes: &[u8]) -> Result<TimeTagStream> {
    let take = |offset: u64, len: u64, what: &str| -> Result<&[u8]> {
        let end = offset + len;
        bytes.get(offset as usize..end as usize).ok_or_else(|| format_err(offset, format!("truncated {what}")))
    };
    if take(0, 4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic, expected TTG1"));
    }
    let version = u16::from_le_bytes(take(4, 2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let resolution_ps = u64::from_le_bytes(take(6, 8, "resolution")?.try_into().expect("8 bytes"));
    if resolution_ps == 0 {
        return Err(format_err(6, "zero resolution"));
    }
    let count = u64::from_le_bytes(take(14, 8, "record count")?.try_into().expect("8 bytes"));
    let expected = count
        .checked_mul(RECORD_LEN)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| format_err(14, "record count overflows"))?;
    if (bytes.len() as u64) < expected {
        let complete = (bytes.len() as u64).saturating_sub(HEADER_LEN) / RECORD_LEN;
        return Err(format_err(HEADER_LEN + complete * RECORD_LEN, format!("truncated record {complete} of {count}")));
    }
    if (bytes.len() as u64) > expected {
        return Err(format_err(expected, "trailing bytes after last record"));
    }
    let mut tags = Vec::with_capacity(count as usize);
    let mut prev = 0u64;
    for i in 0..count {
        let offset = HEADER_LEN + i * RECORD_LEN;
        let rec = &bytes[offset as usize..(offset + RECORD_LEN) as usize];
        let timestamp = u64::from_le_bytes(rec[1..9].try_into().expect("8 bytes"));
        if timestamp < prev {
            return Err(format_err(offset, format!("record {i} is out of order")));
        }
        prev = timestamp;
        tags.push(Tag { channel: rec[0], timestamp });
    }
    let duration_ticks = tags.last().map(|t| t.timestamp + 1).unwrap_or(0);
    Ok(TimeTagStream { resolution_ps, tags, duration_ticks })
}

/// Writes `channel,timestamp_ps`.
pub fn write_timetags_csv<W: Write>(stream: &TimeTagStream, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["channel", "timestamp_ps"])?;
    for t in &stream.tags {
        w.write_record([t.channel.to_string(), (t.timestamp * stream.resolution_ps).to_string()])?;
    }
    w.flush()?;
    Ok(())
}
