//! TFRecord container framing.
//!
//! Each record is `len: u64 LE | masked_crc32c(len bytes): u32 LE | data |
//! masked_crc32c(data): u32 LE`.

use std::io::{self, ErrorKind, Read, Write};

use thiserror::Error;

const MASK_DELTA: u32 = 0xa282_ead8;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("corrupt record at byte {offset}: {what} checksum mismatch")]
    Corrupt { offset: u64, what: &'static str },
    #[error("truncated record at byte {offset}: expected {expected} more bytes")]
    Truncated { offset: u64, expected: usize },
    #[error("record at byte {offset} declares length {len}, larger than the {limit}-byte limit")]
    TooLarge { offset: u64, len: u64, limit: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn mask(crc: u32) -> u32 {
    crc.rotate_right(15).wrapping_add(MASK_DELTA)
}

pub fn masked_crc(bytes: &[u8]) -> u32 {
    mask(crc32c::crc32c(bytes))
}

/// Frames one record.
pub fn write_record<W: Write>(out: &mut W, data: &[u8]) -> io::Result<()> {
    let len = (data.len() as u64).to_le_bytes();
    out.write_all(&len)?;
    out.write_all(&masked_crc(&len).to_le_bytes())?;
    out.write_all(data)?;
    out.write_all(&masked_crc(data).to_le_bytes())
}

pub fn write_tfrecord<W: Write, D: AsRef<[u8]>>(out: &mut W, records: impl IntoIterator<Item = D>) -> io::Result<()> {
    for r in records {
        write_record(out, r.as_ref())?;
    }
    Ok(())
}

/// Iterator over the payloads of a record stream. Stops after the first
/// error.
pub struct RecordReader<R> {
    inner: R,
    offset: u64,
    limit: u64,
    done: bool,
}

/// Default per-record size ceiling, guarding against absurd lengths in
/// corrupted headers that still pass the length checksum.
pub const DEFAULT_RECORD_LIMIT: u64 = 1 << 30;

pub fn read_tfrecord<R: Read>(inner: R) -> RecordReader<R> {
    RecordReader { inner, offset: 0, limit: DEFAULT_RECORD_LIMIT, done: false }
}

impl<R: Read> RecordReader<R> {
    pub fn with_limit(mut self, limit: u64) -> Self {
        self.limit = limit;
        self
    }

    /// Byte offset of the next record.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Reads exactly `buf.len()` bytes; `Ok(false)` on clean EOF before the
    /// first byte when `eof_ok`.
    fn fill(&mut self, buf: &mut [u8], start: u64, eof_ok: bool) -> Result<bool, RecordError> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) if got == 0 && eof_ok => return Ok(false),
                Ok(0) => return Err(RecordError::Truncated { offset: start, expected: buf.len() - got }),
                Ok(n) => got += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(true)
    }

    fn next_record(&mut self) -> Result<Option<Vec<u8>>, RecordError> {
        let start = self.offset;
        let mut header = [0u8; 12];
        if !self.fill(&mut header, start, true)? {
            return Ok(None);
        }
        let (len_bytes, crc_bytes) = header.split_at(8);
        if masked_crc(len_bytes) != u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes")) {
            return Err(RecordError::Corrupt { offset: start, what: "length" });
        }
        let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
        if len > self.limit {
            return Err(RecordError::TooLarge { offset: start, len, limit: self.limit });
        }
        let mut data = vec![0u8; len as usize];
        self.fill(&mut data, start, false)?;
        let mut footer = [0u8; 4];
        self.fill(&mut footer, start, false)?;
        if masked_crc(&data) != u32::from_le_bytes(footer) {
            return Err(RecordError::Corrupt { offset: start, what: "payload" });
        }
        self.offset += 16 + len;
        Ok(Some(data))
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<Vec<u8>, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let r = self.next_record().transpose();
        if !matches!(r, Some(Ok(_))) {
            self.done = true;
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_formula() {
        for c in [0u32, 1, 0xdead_beef, u32::MAX] {
            assert_eq!(mask(c), ((c >> 15) | (c << 17)).wrapping_add(0xa282ead8));
        }
    }

    #[test]
    fn known_crc32c_vector() {
        assert_eq!(crc32c::crc32c(b"123456789"), 0xe306_9283);
    }

    #[test]
    fn empty_stream_has_no_records() {
        assert_eq!(read_tfrecord(&[][..]).count(), 0);
    }

    #[test]
    fn zero_length_payload_round_trips() {
        let mut buf = Vec::new();
        write_record(&mut buf, b"").unwrap();
        assert_eq!(buf.len(), 16);
        assert_eq!(&buf[..8], &[0u8; 8]);
        let out: Vec<_> = read_tfrecord(&buf[..]).collect::<Result<_, _>>().unwrap();
        assert_eq!(out, vec![Vec::<u8>::new()]);
    }

    #[test]
    fn truncation_is_reported() {
        let mut buf = Vec::new();
        write_record(&mut buf, b"hello").unwrap();
        for cut in 1..buf.len() {
            let r: Vec<_> = read_tfrecord(&buf[..cut]).collect();
            assert!(matches!(r.last(), Some(Err(RecordError::Truncated { offset: 0, .. }))), "cut {cut}");
        }
    }

    #[test]
    fn corruption_names_the_record_offset() {
        let mut buf = Vec::new();
        write_tfrecord(&mut buf, [&b"first"[..], b"second"]).unwrap();
        buf[21 + 12] ^= 0x01;
        let r: Vec<_> = read_tfrecord(&buf[..]).collect();
        assert_eq!(r[0].as_ref().unwrap(), b"first");
        assert!(matches!(r[1], Err(RecordError::Corrupt { offset: 21, what: "payload" })));
        assert_eq!(r.len(), 2);
    }
}
