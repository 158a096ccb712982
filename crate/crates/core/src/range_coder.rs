//! Carry-less 32-bit range coder over frozen 16-bit CDF tables.
//!
//! Integer arithmetic only, so identical symbols and tables give identical
//! bytes on every platform. Renormalization emits whole bytes and never needs
//! carry propagation: when the interval straddles a byte boundary while
//! becoming too narrow, it is shrunk to the part below that boundary.

use crate::entropy_model::{CdfTable, CDF_PRECISION_BITS};
use crate::error::{Error, Result};

const TOP: u64 = 1 << 24;
const BOT: u32 = 1 << 16;

/// Entropy-coded bytes plus the number of symbols they carry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Payload {
    pub bytes: Vec<u8>,
    pub symbol_count: usize,
}

/// Whether the coder must shift out a byte, fixing up `range` first when the
/// interval is too narrow but still straddles a byte boundary.
#[inline]
fn needs_shift(low: u32, range: &mut u32) -> bool {
    if (low as u64 ^ (low as u64 + *range as u64)) < TOP {
        return true;
    }
    if *range < BOT {
        *range = low.wrapping_neg() & (BOT - 1);
        return true;
    }
    false
}

struct Encoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    #[inline]
    fn encode(&mut self, start: u32, freq: u32) {
        let r = self.range >> CDF_PRECISION_BITS;
        self.low = self.low.wrapping_add(start * r);
        self.range = freq * r;
        while needs_shift(self.low, &mut self.range) {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        self.out.extend_from_slice(&self.low.to_be_bytes());
        self.out
    }
}

struct Decoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = Decoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            bytes,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.bytes.get(self.pos).ok_or_else(|| Error::Decode {
            offset: self.pos,
            reason: "payload truncated".into(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    #[inline]
    fn target(&mut self) -> (u32, u32) {
        let r = self.range >> CDF_PRECISION_BITS;
        (self.code.wrapping_sub(self.low) / r, r)
    }

    #[inline]
    fn consume(&mut self, start: u32, freq: u32, r: u32) -> Result<()> {
        self.low = self.low.wrapping_add(start * r);
        self.range = freq * r;
        while needs_shift(self.low, &mut self.range) {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }
}

fn check_ids(n: usize, channel_ids: &[usize], tables: &CdfTable) -> Result<()> {
    if channel_ids.len() != n {
        return Err(Error::invalid(format!(
            "{} channel ids for {n} symbols",
            channel_ids.len()
        )));
    }
    if let Some(&bad) = channel_ids.iter().find(|&&c| c >= tables.len()) {
        return Err(Error::invalid(format!(
            "channel id {bad} but only {} tables",
            tables.len()
        )));
    }
    Ok(())
}

/// Codes `symbols[i]` with the table of channel `channel_ids[i]`.
pub fn rc_encode(symbols: &[i32], channel_ids: &[usize], tables: &CdfTable) -> Result<Payload> {
    check_ids(symbols.len(), channel_ids, tables)?;
    let mut enc = Encoder::new();
    for (&v, &k) in symbols.iter().zip(channel_ids) {
        let table = tables.channel(k);
        if !table.contains(v) {
            return Err(Error::Coding { channel: k, value: v });
        }
        let (start, freq) = table.interval(v);
        enc.encode(start, freq);
    }
    Ok(Payload {
        bytes: enc.finish(),
        symbol_count: symbols.len(),
    })
}

/// Inverse of [`rc_encode`] given the same channel order and tables.
pub fn rc_decode(payload: &Payload, channel_ids: &[usize], tables: &CdfTable) -> Result<Vec<i32>> {
    check_ids(payload.symbol_count, channel_ids, tables)?;
    let mut dec = Decoder::new(&payload.bytes)?;
    let mut out = Vec::with_capacity(payload.symbol_count);
    for &k in channel_ids {
        let table = tables.channel(k);
        let (target, r) = dec.target();
        let bucket = if target < crate::entropy_model::CDF_TOTAL {
            table.bucket_of(target)
        } else {
            usize::MAX
        };
        if bucket >= table.support_len() {
            return Err(Error::Decode {
                offset: dec.pos,
                reason: format!("corrupt payload: no symbol of channel {k} matches"),
            });
        }
        let v = table.symbol_min + bucket as i32;
        let (start, freq) = table.interval(v);
        dec.consume(start, freq, r)?;
        out.push(v);
    }
    if dec.pos != payload.bytes.len() {
        return Err(Error::Decode {
            offset: dec.pos,
            reason: format!(
                "{} trailing bytes after the last symbol",
                payload.bytes.len() - dec.pos
            ),
        });
    }
    Ok(out)
}

/// Channel ids for a `channels x plane` block scanned channel-major.
pub fn channel_major_ids(channels: usize, plane: usize) -> Vec<usize> {
    (0..channels)
        .flat_map(|c| std::iter::repeat(c).take(plane))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_model::{ChannelCdf, CDF_TOTAL};

    fn table(counts: &[u32], symbol_min: i32) -> CdfTable {
        CdfTable {
            channels: vec![ChannelCdf::from_counts(symbol_min, counts).unwrap()],
        }
    }

    #[test]
    fn empty_stream_is_flush_only() {
        let t = table(&[CDF_TOTAL - 1, 1], 0);
        let p = rc_encode(&[], &[], &t).unwrap();
        assert!(p.bytes.len() <= 8);
        assert_eq!(rc_decode(&p, &[], &t).unwrap(), Vec::<i32>::new());
    }

    #[test]
    fn single_symbol_round_trip() {
        let t = table(&[100, 200, CDF_TOTAL - 301, 1], -1);
        for v in -1..=1 {
            let p = rc_encode(&[v], &[0], &t).unwrap();
            assert_eq!(rc_decode(&p, &[0], &t).unwrap(), vec![v]);
        }
    }

    #[test]
    fn near_certain_symbols_cost_almost_nothing() {
        let t = table(&[CDF_TOTAL - 1, 1], 0);
        let symbols = vec![0; 10_000];
        let ids = vec![0; 10_000];
        let p = rc_encode(&symbols, &ids, &t).unwrap();
        assert!(p.bytes.len() <= 40, "{} bytes", p.bytes.len());
        assert_eq!(rc_decode(&p, &ids, &t).unwrap(), symbols);
    }

    #[test]
    fn out_of_support_symbol_is_rejected() {
        let t = table(&[1000, CDF_TOTAL - 1001, 1], 3);
        let err = rc_encode(&[3, 5], &[0, 0], &t).unwrap_err();
        assert!(matches!(err, Error::Coding { channel: 0, value: 5 }));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let t = table(&[20_000, 20_000, CDF_TOTAL - 40_001, 1], 0);
        let symbols: Vec<i32> = (0..500).map(|i| (i * 7 % 3) as i32).collect();
        let ids = vec![0; symbols.len()];
        let mut p = rc_encode(&symbols, &ids, &t).unwrap();
        let full = p.bytes.len();
        p.bytes.truncate(full - 3);
        match rc_decode(&p, &ids, &t) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, full - 3),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let t = table(&[30_000, CDF_TOTAL - 30_001, 1], 0);
        let ids = vec![0; 10];
        let mut p = rc_encode(&[0, 1, 0, 1, 1, 0, 0, 0, 1, 1], &ids, &t).unwrap();
        p.bytes.push(0xAB);
        assert!(matches!(rc_decode(&p, &ids, &t), Err(Error::Decode { .. })));
    }

    #[test]
    fn channel_major_ids_layout() {
        assert_eq!(channel_major_ids(3, 2), vec![0, 0, 1, 1, 2, 2]);
    }
}
