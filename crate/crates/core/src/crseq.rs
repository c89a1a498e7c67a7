//! Bit-exact challenge/reply codec.
//!
//! Challenge word, most significant byte first:
//!
//! ```text
//!  63      32 31    16 15   11 10   8 7    0
//! | lset1 x4 | lset2 x2| shift | dir  | mask |
//! ```
//!
//! A temporary reply carries the B_s bytes of the lset2 cells in its upper
//! half and the table replies of the lset1 cells in its lower half. The
//! authenticated reply is the temporary reply passed through the transform
//! encoded in the low 16 bits of the challenge.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::battery_sim::{V_MAX, V_MIN};
use crate::fuel_gauge::Measurement;
use crate::CellId;

pub const LSET1_LEN: usize = 4;
pub const LSET2_LEN: usize = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CrseqError {
    #[error("a cell-reply table needs at least one entry")]
    EmptyTable,
    #[error("table size {0} exceeds the 8-bit cell id space")]
    TableTooLarge(usize),
    #[error("cell id {id} out of range for a {n}-cell table")]
    IdOutOfRange { id: CellId, n: usize },
    #[error("cell {0} appears twice in one cell set")]
    RepeatedCell(CellId),
    #[error("shift amount {0} does not fit in 5 bits")]
    Shift(u8),
    #[error("direction field {0} does not fit in 3 bits")]
    Direction(u8),
    #[error("cell {0} has no entry in the reply table")]
    UnknownCell(CellId),
}

/// Shift/direction/mask fields of R_T.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TransformSpec {
    shift: u8,
    direction: u8,
    mask: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransformVariant {
    /// Rotate the whole 64-bit word.
    #[default]
    WholeWord,
    /// Rotate each byte on its own by `shift mod 8`.
    PerByte,
}

impl TransformSpec {
    pub fn new(shift: u8, direction: u8, mask: u8) -> Result<Self, CrseqError> {
        if shift > 31 {
            return Err(CrseqError::Shift(shift));
        }
        if direction > 7 {
            return Err(CrseqError::Direction(direction));
        }
        Ok(Self { shift, direction, mask })
    }

    pub fn from_bits(bits: u16) -> Self {
        Self {
            shift: (bits >> 11) as u8,
            direction: ((bits >> 8) & 0b111) as u8,
            mask: bits as u8,
        }
    }

    pub fn to_bits(self) -> u16 {
        (self.shift as u16) << 11 | (self.direction as u16) << 8 | self.mask as u16
    }

    pub fn shift(self) -> u8 {
        self.shift
    }

    pub fn direction_field(self) -> u8 {
        self.direction
    }

    pub fn mask(self) -> u8 {
        self.mask
    }

    /// Odd parity of the direction field means a left rotation.
    pub fn rotates_left(self) -> bool {
        self.direction.count_ones() % 2 == 1
    }

    pub fn is_identity(self) -> bool {
        self.shift == 0 && self.mask == 0
    }
}

fn replicate(mask: u8) -> u64 {
    u64::from_ne_bytes([mask; 8])
}

fn rotate_bytes(word: u64, by: u32, left: bool) -> u64 {
    let bytes = word
        .to_be_bytes()
        .map(|b| if left { b.rotate_left(by) } else { b.rotate_right(by) });
    u64::from_be_bytes(bytes)
}

/// T: rotate, then XOR with the mask repeated in every byte.
pub fn apply_transform(word: u64, rt: TransformSpec) -> u64 {
    apply_transform_with(word, rt, TransformVariant::WholeWord)
}

/// T⁻¹: XOR first, then rotate the other way.
pub fn reverse_transform(word: u64, rt: TransformSpec) -> u64 {
    reverse_transform_with(word, rt, TransformVariant::WholeWord)
}

pub fn apply_transform_with(word: u64, rt: TransformSpec, variant: TransformVariant) -> u64 {
    let left = rt.rotates_left();
    let rotated = match variant {
        TransformVariant::WholeWord if left => word.rotate_left(rt.shift as u32),
        TransformVariant::WholeWord => word.rotate_right(rt.shift as u32),
        TransformVariant::PerByte => rotate_bytes(word, rt.shift as u32 % 8, left),
    };
    rotated ^ replicate(rt.mask)
}

pub fn reverse_transform_with(word: u64, rt: TransformSpec, variant: TransformVariant) -> u64 {
    let left = rt.rotates_left();
    let unmasked = word ^ replicate(rt.mask);
    match variant {
        TransformVariant::WholeWord if left => unmasked.rotate_right(rt.shift as u32),
        TransformVariant::WholeWord => unmasked.rotate_left(rt.shift as u32),
        TransformVariant::PerByte => rotate_bytes(unmasked, rt.shift as u32 % 8, !left),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Challenge {
    pub lset1: [CellId; LSET1_LEN],
    pub lset2: [CellId; LSET2_LEN],
    pub rt: TransformSpec,
}

fn check_distinct(ids: &[CellId]) -> Result<(), CrseqError> {
    for (i, &a) in ids.iter().enumerate() {
        if ids[..i].contains(&a) {
            return Err(CrseqError::RepeatedCell(a));
        }
    }
    Ok(())
}

impl Challenge {
    pub fn encode(&self) -> u64 {
        let [a, b, c, d] = self.lset1;
        let [e, f] = self.lset2;
        u64::from_be_bytes([a, b, c, d, e, f, 0, 0]) | self.rt.to_bits() as u64
    }

    pub fn decode(word: u64) -> Self {
        let bytes = word.to_be_bytes();
        Self {
            lset1: [bytes[0], bytes[1], bytes[2], bytes[3]],
            lset2: [bytes[4], bytes[5]],
            rt: TransformSpec::from_bits(word as u16),
        }
    }

    /// All ids below `n_cells`, each set free of repeats.
    pub fn validate(&self, n_cells: usize) -> Result<(), CrseqError> {
        for &id in self.lset1.iter().chain(&self.lset2) {
            if id as usize >= n_cells {
                return Err(CrseqError::IdOutOfRange { id, n: n_cells });
            }
        }
        check_distinct(&self.lset1)?;
        check_distinct(&self.lset2)
    }
}

/// Quantized (SoC, voltage) of the two lset2 cells, in challenge order:
/// `[soc_a, volt_a, soc_b, volt_b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BessState(pub [u8; 4]);

impl BessState {
    pub fn to_bits(self) -> u32 {
        u32::from_be_bytes(self.0)
    }

    /// XOR of the four bytes.
    pub fn digest(self) -> u8 {
        self.0.iter().fold(0, |acc, b| acc ^ b)
    }
}

// Readings are snapped to a micro-unit grid before scaling so that exact
// midpoints such as 3.725 V stay exact under round-half-up.
fn quantize_byte(value: f64, lo: f64, span: f64) -> (u8, bool) {
    let micro = ((value - lo) * 1e6).round();
    let scaled = micro * 255.0 / (span * 1e6).round();
    let rounded = (scaled + 0.5).floor();
    let clipped = !(0.0..=255.0).contains(&rounded);
    (rounded.clamp(0.0, 255.0) as u8, clipped)
}

pub fn soc_byte(soc_percent: f64) -> u8 {
    quantize_byte(soc_percent, 0.0, 100.0).0
}

pub fn volt_byte(voltage: f64) -> u8 {
    quantize_byte(voltage, V_MIN, V_MAX - V_MIN).0
}

/// B_s from the two lset2 measurements. The flag reports whether any
/// reading fell outside the byte range and was clipped.
pub fn quantize_bs(measurements: &[Measurement; LSET2_LEN]) -> (BessState, bool) {
    let mut bytes = [0u8; 4];
    let mut clipped = false;
    for (i, m) in measurements.iter().enumerate() {
        let (s, cs) = quantize_byte(m.soc_percent, 0.0, 100.0);
        let (v, cv) = quantize_byte(m.voltage, V_MIN, V_MAX - V_MIN);
        bytes[2 * i] = s;
        bytes[2 * i + 1] = v;
        clipped |= cs || cv;
    }
    (BessState(bytes), clipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TempReply(pub u64);

impl TempReply {
    pub fn new(bs: BessState, replies: [u8; LSET1_LEN]) -> Self {
        Self((bs.to_bits() as u64) << 32 | u32::from_be_bytes(replies) as u64)
    }

    pub fn bess_state(self) -> BessState {
        BessState(((self.0 >> 32) as u32).to_be_bytes())
    }

    pub fn replies(self) -> [u8; LSET1_LEN] {
        (self.0 as u32).to_be_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AuthReply(pub u64);

impl AuthReply {
    pub fn from_temp(temp: TempReply, rt: TransformSpec, variant: TransformVariant) -> Self {
        Self(apply_transform_with(temp.0, rt, variant))
    }

    pub fn to_temp(self, rt: TransformSpec, variant: TransformVariant) -> TempReply {
        TempReply(reverse_transform_with(self.0, rt, variant))
    }
}

impl fmt::LowerHex for AuthReply {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

/// C_rt: one 8-bit reply per cell plus the round it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellReplyTable {
    entries: Vec<(CellId, u8)>,
    pub version: u64,
}

impl CellReplyTable {
    pub fn init(seed: u64, n: usize) -> Result<Self, CrseqError> {
        if n == 0 {
            return Err(CrseqError::EmptyTable);
        }
        if n > 256 {
            return Err(CrseqError::TableTooLarge(n));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n).map(|i| (i as CellId, rng.gen())).collect();
        Ok(Self { entries, version: 0 })
    }

    /// Rebuild a table received during enrollment.
    pub fn from_entries(entries: Vec<(CellId, u8)>, version: u64) -> Result<Self, CrseqError> {
        if entries.is_empty() {
            return Err(CrseqError::EmptyTable);
        }
        if entries.len() > 256 {
            return Err(CrseqError::TableTooLarge(entries.len()));
        }
        let mut seen = HashSet::new();
        for &(id, _) in &entries {
            if !seen.insert(id) {
                return Err(CrseqError::RepeatedCell(id));
            }
        }
        Ok(Self { entries, version })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(CellId, u8)] {
        &self.entries
    }

    pub fn reply(&self, id: CellId) -> Result<u8, CrseqError> {
        // ids are dense 0..n after init; fall back to a scan for received tables
        match self.entries.get(id as usize) {
            Some(&(c, r)) if c == id => Ok(r),
            _ => self
                .entries
                .iter()
                .find(|&&(c, _)| c == id)
                .map(|&(_, r)| r)
                .ok_or(CrseqError::UnknownCell(id)),
        }
    }

    /// Per-round update: fold B_s into one byte and stir every reply with it.
    pub fn update(&mut self, bs: BessState) {
        let b = bs.digest();
        let rot = b.count_ones() % 8;
        for (_, r) in &mut self.entries {
            *r = (*r ^ b).rotate_left(rot);
        }
        self.version += 1;
    }
}

pub fn build_temp_reply(crt: &CellReplyTable, ch: &Challenge, bs: BessState) -> Result<TempReply, CrseqError> {
    let mut replies = [0u8; LSET1_LEN];
    for (slot, &id) in replies.iter_mut().zip(&ch.lset1) {
        *slot = crt.reply(id)?;
    }
    Ok(TempReply::new(bs, replies))
}

/// One CRSeq record: 16 lowercase hex digits each side.
pub fn format_crseq(challenge: u64, reply: u64) -> String {
    format!("{challenge:016x},{reply:016x}")
}

pub fn write_crseq_csv<W: Write>(mut out: W, records: &[(u64, u64)]) -> std::io::Result<()> {
    for &(c, r) in records {
        writeln!(out, "{}", format_crseq(c, r))?;
    }
    Ok(())
}
