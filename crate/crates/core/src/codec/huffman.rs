//! Canonical, length-limited Huffman coding of `u32` symbols.
//!
//! Table format: varint symbol count, then per symbol in ascending order a
//! varint delta from the previous symbol and a `u8` code length. Codes are
//! written MSB-first.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

pub const MAX_CODE_LEN: u8 = 24;
const FAST_BITS: u32 = 11;

#[derive(Debug, Clone, Default)]
pub struct CodeTable {
    /// `(symbol, length)` sorted by symbol.
    entries: Vec<(u32, u8)>,
}

impl CodeTable {
    /// Builds code lengths from `(symbol, count)` pairs sorted by symbol.
    /// Zero counts are dropped.
    pub fn from_counts(counts: &[(u32, u64)]) -> Self {
        let used: Vec<(u32, u64)> = counts.iter().copied().filter(|c| c.1 > 0).collect();
        let mut weights: Vec<u64> = used.iter().map(|c| c.1).collect();
        loop {
            let lengths = code_lengths(&weights);
            if lengths.iter().all(|&l| l <= MAX_CODE_LEN) {
                return CodeTable {
                    entries: used.iter().map(|c| c.0).zip(lengths).collect(),
                };
            }
            for w in &mut weights {
                *w = (*w >> 1) | 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        put_varint(out, self.entries.len() as u64);
        let mut prev = 0u32;
        for (i, &(sym, len)) in self.entries.iter().enumerate() {
            let delta = if i == 0 { sym } else { sym - prev };
            put_varint(out, u64::from(delta));
            out.push(len);
            prev = sym;
        }
    }

    pub fn read(input: &mut &[u8], max_symbol: u32) -> Result<Self> {
        let n = get_varint(input)?;
        if n > u64::from(max_symbol) + 1 {
            return Err(Error::corrupt("huffman table", format!("{n} symbols")));
        }
        let mut entries = Vec::with_capacity(n as usize);
        let mut prev = 0u64;
        for i in 0..n {
            let delta = get_varint(input)?;
            let sym = if i == 0 { delta } else { prev + delta };
            if (i > 0 && delta == 0) || sym > u64::from(max_symbol) {
                return Err(Error::corrupt("huffman table", "symbols out of order or range"));
            }
            let (&len, rest) = input
                .split_first()
                .ok_or_else(|| Error::corrupt("huffman table", "truncated"))?;
            *input = rest;
            if len == 0 || len > MAX_CODE_LEN {
                return Err(Error::corrupt("huffman table", format!("code length {len}")));
            }
            entries.push((sym as u32, len));
            prev = sym;
        }
        // Kraft inequality must hold for a decodable prefix code.
        let kraft: u64 = entries
            .iter()
            .map(|&(_, l)| 1u64 << (MAX_CODE_LEN - l))
            .sum();
        if kraft > 1u64 << MAX_CODE_LEN {
            return Err(Error::corrupt("huffman table", "code lengths oversubscribed"));
        }
        Ok(CodeTable { entries })
    }

    /// Canonical codes in table order.
    fn codes(&self) -> Vec<u32> {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by_key(|&i| (self.entries[i].1, self.entries[i].0));
        let mut codes = vec![0u32; self.entries.len()];
        let mut code = 0u32;
        let mut prev_len = 0u8;
        for (k, &i) in order.iter().enumerate() {
            let len = self.entries[i].1;
            if k > 0 {
                code = (code + 1) << (len - prev_len);
            } else {
                code <<= len;
            }
            codes[i] = code;
            prev_len = len;
        }
        codes
    }

    /// Dense encoder indexed by symbol: `(code, length)`.
    pub fn encoder(&self, max_symbol: u32) -> Vec<(u32, u8)> {
        let mut lut = vec![(0u32, 0u8); max_symbol as usize + 1];
        for (&(sym, len), code) in self.entries.iter().zip(self.codes()) {
            lut[sym as usize] = (code, len);
        }
        lut
    }

    pub fn decoder(&self) -> Decoder {
        Decoder::new(self)
    }

    /// Total encoded bits for the given counts.
    pub fn encoded_bits(&self, counts: &[(u32, u64)]) -> u64 {
        let mut bits = 0;
        let mut it = self.entries.iter().peekable();
        for &(sym, n) in counts {
            while let Some(&&(s, l)) = it.peek() {
                if s < sym {
                    it.next();
                    continue;
                }
                if s == sym {
                    bits += n * u64::from(l);
                }
                break;
            }
        }
        bits
    }
}

fn code_lengths(weights: &[u64]) -> Vec<u8> {
    match weights.len() {
        0 => return Vec::new(),
        1 => return vec![1],
        _ => {}
    }
    // Leaves are 0..n, internal nodes n.. ; ties break on node index so the
    // tree is deterministic.
    let n = weights.len();
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
        weights.iter().enumerate().map(|(i, &w)| Reverse((w, i))).collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((wa + wb, next)));
        next += 1;
    }
    let root = next - 1;
    let mut depth = vec![0u32; 2 * n - 1];
    for node in (0..root).rev() {
        depth[node] = depth[parent[node]] + 1;
    }
    depth[..n].iter().map(|&d| d.min(255) as u8).collect()
}

pub struct Decoder {
    /// `(symbol, length)` for every `FAST_BITS` prefix that resolves.
    fast: Vec<(u32, u8)>,
    first_code: [u32; MAX_CODE_LEN as usize + 2],
    count: [u32; MAX_CODE_LEN as usize + 2],
    offset: [u32; MAX_CODE_LEN as usize + 2],
    sorted: Vec<u32>,
    single: Option<u32>,
}

impl Decoder {
    fn new(table: &CodeTable) -> Self {
        let mut count = [0u32; MAX_CODE_LEN as usize + 2];
        for &(_, l) in &table.entries {
            count[l as usize] += 1;
        }
        let mut order: Vec<(u8, u32)> = table.entries.iter().map(|&(s, l)| (l, s)).collect();
        order.sort_unstable();
        let sorted: Vec<u32> = order.iter().map(|&(_, s)| s).collect();
        let mut first_code = [0u32; MAX_CODE_LEN as usize + 2];
        let mut offset = [0u32; MAX_CODE_LEN as usize + 2];
        let mut code = 0u32;
        let mut off = 0u32;
        for len in 1..=MAX_CODE_LEN as usize {
            code = (code + count[len - 1]) << 1;
            first_code[len] = code;
            offset[len] = off;
            off += count[len];
        }
        let mut fast = vec![(0u32, 0u8); 1 << FAST_BITS];
        for (&(sym, len), code) in table.entries.iter().zip(table.codes()) {
            if u32::from(len) <= FAST_BITS {
                let shift = FAST_BITS - u32::from(len);
                let base = (code << shift) as usize;
                for slot in &mut fast[base..base + (1 << shift)] {
                    *slot = (sym, len);
                }
            }
        }
        let single = (table.entries.len() == 1).then(|| table.entries[0].0);
        Decoder {
            fast,
            first_code,
            count,
            offset,
            sorted,
            single,
        }
    }

    pub fn decode(&self, reader: &mut BitReader<'_>) -> Result<u32> {
        if let Some(sym) = self.single {
            reader.consume(1)?;
            return Ok(sym);
        }
        let peek = reader.peek(FAST_BITS);
        let (sym, len) = self.fast[peek as usize];
        if len > 0 {
            reader.consume(u32::from(len))?;
            return Ok(sym);
        }
        let bits = reader.peek(u32::from(MAX_CODE_LEN));
        for len in 1..=MAX_CODE_LEN as usize {
            let code = bits >> (MAX_CODE_LEN as usize - len);
            let rel = code.wrapping_sub(self.first_code[len]);
            if code >= self.first_code[len] && rel < self.count[len] {
                reader.consume(len as u32)?;
                return Ok(self.sorted[(self.offset[len] + rel) as usize]);
            }
        }
        Err(Error::corrupt("code stream", "invalid huffman code"))
    }
}

pub struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl<'a> BitWriter<'a> {
    pub fn new(out: &'a mut Vec<u8>) -> Self {
        BitWriter { out, acc: 0, nbits: 0 }
    }

    #[inline]
    pub fn put(&mut self, code: u32, len: u8) {
        self.acc = (self.acc << len) | u64::from(code);
        self.nbits += u32::from(len);
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.out.push((self.acc >> self.nbits) as u8);
        }
    }

    pub fn finish(self) {
        if self.nbits > 0 {
            self.out.push((self.acc << (8 - self.nbits)) as u8);
        }
    }
}

pub struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u64,
    nbits: u32,
    total_bits: u64,
    consumed: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        BitReader {
            data,
            pos: 0,
            acc: 0,
            nbits: 0,
            total_bits: data.len() as u64 * 8,
            consumed: 0,
        }
    }

    #[inline]
    fn refill(&mut self) {
        while self.nbits <= 56 {
            let byte = self.data.get(self.pos).copied().unwrap_or(0);
            self.pos += 1;
            self.acc |= u64::from(byte) << (56 - self.nbits);
            self.nbits += 8;
        }
    }

    /// Next `n` bits (n <= 32) without consuming; zero-padded past the end.
    #[inline]
    pub fn peek(&mut self, n: u32) -> u32 {
        if self.nbits < n {
            self.refill();
        }
        (self.acc >> (64 - n)) as u32
    }

    #[inline]
    pub fn consume(&mut self, n: u32) -> Result<()> {
        if self.nbits < n {
            self.refill();
        }
        self.consumed += u64::from(n);
        if self.consumed > self.total_bits {
            return Err(Error::corrupt("code stream", "ran past end of data"));
        }
        self.acc <<= n;
        self.nbits -= n;
        Ok(())
    }
}

pub fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

pub fn get_varint(input: &mut &[u8]) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let (&b, rest) = input
            .split_first()
            .ok_or_else(|| Error::corrupt("varint", "truncated"))?;
        *input = rest;
        v |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::corrupt("varint", "too long"))
}
