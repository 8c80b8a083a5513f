//! Canonical byte encoding used for hashing and size accounting.
//!
//! Every value that gets hashed or signed is first serialized here: fixed-width
//! big-endian integers, length-prefixed byte strings, fields in declaration
//! order. Two replicas encoding the same value always produce identical bytes.

/// Append-only canonical encoder.
#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Domain-separation tag, written first by convention.
    pub fn tag(mut self, tag: &str) -> Self {
        self.put_bytes(tag.as_bytes());
        self
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    /// Length-prefixed byte string.
    pub fn put_bytes(&mut self, v: &[u8]) {
        self.put_u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    /// Fixed-width digest, no length prefix.
    pub fn put_digest(&mut self, d: &crate::types::HashDigest) {
        self.buf.extend_from_slice(d.as_bytes());
    }

    /// Presence-tagged optional digest.
    pub fn put_opt_digest(&mut self, d: Option<&crate::types::HashDigest>) {
        match d {
            Some(d) => {
                self.put_u8(1);
                self.put_digest(d);
            }
            None => self.put_u8(0),
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}
