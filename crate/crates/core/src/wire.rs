//! Binary framing for the SM -> PC -> BS links.
//!
//! Every message travels in one frame:
//!
//! ```text
//! magic "PBIL" | version u8 | kind u8 | payload length u32 | payload
//! ```
//!
//! All integers are big-endian. Report tables (kind 1) carry a header with
//! an explicit column bitmap, then one tagged block per declared column in
//! increasing tag order, an end marker and the signature:
//!
//! ```text
//! meter_id (u16 len + utf8) | group_id (u8 len + ascii) | i0 u64 | n u32 | columns u8
//! { tag u8 | block length u32 | block }*  | 0x00
//! sig (u16 len + bytes)
//! ```
//!
//! | tag | column | block contents                                    |
//! |-----|--------|---------------------------------------------------|
//! | 1   | i      | n x u64 interval indices, must equal `i0 + k`     |
//! | 2   | v      | n x u32 raw consumption values                    |
//! | 4   | comm   | n x canonical element encoding                    |
//! | 8   | r      | n x canonical scalar encoding                     |
//! | 16  | sum    | price (u16 len + minimal magnitude) then r' scalar |
//!
//! The meter form declares `i|v|comm|r`; the privacy form declares
//! `i|comm|sum`. A block whose tag is not in the bitmap is a decode error,
//! so a privacy-form frame cannot smuggle plaintext columns.

use std::fmt;
use std::io::{self, Read, Write};

use num_bigint::BigUint;
use thiserror::Error;

use crate::backend::{RejectReason, Verdict};
use crate::group::{GroupError, PrimeOrderGroup};
use crate::metering::{CommitmentReport, ReportRow};
use crate::pedersen::Commitment;
use crate::privacy::{BillingReport, PricingError, Tariff};

pub const MAGIC: [u8; 4] = *b"PBIL";
pub const VERSION: u8 = 1;
pub const FRAME_HEADER_BYTES: usize = 10;
pub const MAX_PAYLOAD_BYTES: usize = 16 << 20;
/// Upper bound on rows per table and rates per tariff.
pub const MAX_ROWS: usize = 1 << 16;

const END_OF_COLUMNS: u8 = 0;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated frame")]
    Truncated,
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload of {0} bytes exceeds the frame limit")]
    PayloadTooLarge(usize),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("unknown column tag {0:#04x}")]
    UnknownColumn(u8),
    #[error("column {0} present but not declared in the header")]
    UndeclaredColumn(Column),
    #[error("column {0} repeated or out of canonical order")]
    ColumnOrder(Column),
    #[error("declared column {0} missing")]
    MissingColumn(Column),
    #[error("column {column} block is {actual} bytes, expected {expected}")]
    BlockLength { column: Column, expected: usize, actual: usize },
    #[error("interval column out of sequence at row {0}")]
    IntervalSequence(usize),
    #[error("frame is for group {actual}, expected {expected}")]
    GroupMismatch { expected: String, actual: String },
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("invalid utf-8 in {0}")]
    Utf8(&'static str),
    #[error("price encoding is not minimal")]
    NonCanonicalPrice,
    #[error("{0} rows exceed the per-table limit")]
    TooManyRows(usize),
    #[error("commitment column is mandatory")]
    MissingCommitments,
    #[error("ambiguous column set {0}")]
    Ambiguous(ColumnSet),
    #[error("bad verdict `{0}`")]
    BadVerdict(String),
    #[error("bad tariff: {0}")]
    BadTariff(#[from] PricingError),
    #[error("{0} too long to encode")]
    FieldTooLong(&'static str),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Column {
    Interval,
    Value,
    Commitment,
    Randomness,
    Summary,
}

impl Column {
    pub const ALL: [Column; 5] = [
        Column::Interval,
        Column::Value,
        Column::Commitment,
        Column::Randomness,
        Column::Summary,
    ];

    pub fn bit(self) -> u8 {
        match self {
            Column::Interval => 1,
            Column::Value => 2,
            Column::Commitment => 4,
            Column::Randomness => 8,
            Column::Summary => 16,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Column> {
        Column::ALL.into_iter().find(|c| c.bit() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Column::Interval => "i",
            Column::Value => "v",
            Column::Commitment => "comm",
            Column::Randomness => "r",
            Column::Summary => "sum",
        }
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Column bitmap carried in the table header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ColumnSet(u8);

impl ColumnSet {
    pub const METER: ColumnSet = ColumnSet(1 | 2 | 4 | 8);
    pub const PRIVACY: ColumnSet = ColumnSet(1 | 4 | 16);

    pub fn from_bits(bits: u8) -> Self {
        ColumnSet(bits)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn of(columns: &[Column]) -> Self {
        ColumnSet(columns.iter().fold(0, |acc, c| acc | c.bit()))
    }

    pub fn contains(self, c: Column) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn columns(self) -> Vec<Column> {
        Column::ALL.into_iter().filter(|c| self.contains(*c)).collect()
    }
}

impl fmt::Display for ColumnSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.columns().iter().map(|c| c.name()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableMode {
    Meter,
    Privacy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary<G: PrimeOrderGroup> {
    pub price: BigUint,
    pub r_prime: G::Scalar,
}

/// A decoded report table. Which columns are present is exactly what the
/// header declared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportTable<G: PrimeOrderGroup> {
    pub meter_id: String,
    pub i0: u64,
    pub n: usize,
    pub intervals: Option<Vec<u64>>,
    pub values: Option<Vec<u32>>,
    pub commitments: Option<Vec<Commitment<G>>>,
    pub randomness: Option<Vec<G::Scalar>>,
    pub summary: Option<Summary<G>>,
    pub sig: Vec<u8>,
}

impl<G: PrimeOrderGroup> ReportTable<G> {
    pub fn columns(&self) -> ColumnSet {
        let mut set = Vec::new();
        if self.intervals.is_some() {
            set.push(Column::Interval);
        }
        if self.values.is_some() {
            set.push(Column::Value);
        }
        if self.commitments.is_some() {
            set.push(Column::Commitment);
        }
        if self.randomness.is_some() {
            set.push(Column::Randomness);
        }
        if self.summary.is_some() {
            set.push(Column::Summary);
        }
        ColumnSet::of(&set)
    }

    pub fn from_meter(report: &CommitmentReport<G>) -> Self {
        Self {
            meter_id: report.meter_id.clone(),
            i0: report.i0,
            n: report.len(),
            intervals: Some(report.rows.iter().map(|r| r.interval).collect()),
            values: Some(report.rows.iter().map(|r| r.value).collect()),
            commitments: Some(report.commitments()),
            randomness: Some(report.randomness()),
            summary: None,
            sig: report.sig.clone(),
        }
    }

    pub fn from_billing(report: &BillingReport<G>) -> Self {
        Self {
            meter_id: report.meter_id.clone(),
            i0: report.i0,
            n: report.len(),
            intervals: Some(interval_column(report.i0, report.len())),
            values: None,
            commitments: Some(report.commitments.clone()),
            randomness: None,
            summary: Some(Summary {
                price: report.price.clone(),
                r_prime: report.r_prime,
            }),
            sig: report.sig.clone(),
        }
    }

    pub fn into_meter(self) -> Result<CommitmentReport<G>, WireError> {
        let (Some(intervals), Some(values), Some(commitments), Some(randomness)) =
            (self.intervals, self.values, self.commitments, self.randomness)
        else {
            return Err(WireError::Ambiguous(ColumnSet::default()));
        };
        let rows = intervals
            .into_iter()
            .zip(values)
            .zip(commitments)
            .zip(randomness)
            .map(|(((interval, value), commitment), randomness)| ReportRow {
                interval,
                value,
                commitment,
                randomness,
            })
            .collect();
        Ok(CommitmentReport {
            meter_id: self.meter_id,
            i0: self.i0,
            rows,
            sig: self.sig,
        })
    }

    pub fn into_billing(self) -> Result<BillingReport<G>, WireError> {
        let (Some(commitments), Some(summary)) = (self.commitments, self.summary) else {
            return Err(WireError::Ambiguous(ColumnSet::default()));
        };
        Ok(BillingReport {
            meter_id: self.meter_id,
            i0: self.i0,
            price: summary.price,
            r_prime: summary.r_prime,
            commitments,
            sig: self.sig,
        })
    }
}

fn interval_column(i0: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| i0.wrapping_add(k)).collect()
}

/// Which form a table is in, from its declared columns alone.
pub fn detect_mode<G: PrimeOrderGroup>(table: &ReportTable<G>) -> Result<TableMode, WireError> {
    detect_mode_bits(table.columns())
}

pub fn detect_mode_bits(columns: ColumnSet) -> Result<TableMode, WireError> {
    if !columns.contains(Column::Commitment) {
        return Err(WireError::MissingCommitments);
    }
    match columns {
        ColumnSet::METER => Ok(TableMode::Meter),
        ColumnSet::PRIVACY => Ok(TableMode::Privacy),
        other => Err(WireError::Ambiguous(other)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TariffMessage {
    pub meter_id: String,
    pub tariff: Tariff,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message<G: PrimeOrderGroup> {
    MeterReport(CommitmentReport<G>),
    BillingReport(BillingReport<G>),
    TariffRequest { meter_id: String, i0: u64, n: usize },
    Tariff(TariffMessage),
    Verdict { meter_id: String, i0: u64, verdict: Verdict },
    Error(String),
    Ack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    ReportTable = 1,
    TariffRequest = 2,
    Tariff = 3,
    Verdict = 4,
    Error = 5,
    Ack = 6,
}

impl Kind {
    fn from_u8(b: u8) -> Option<Kind> {
        Some(match b {
            1 => Kind::ReportTable,
            2 => Kind::TariffRequest,
            3 => Kind::Tariff,
            4 => Kind::Verdict,
            5 => Kind::Error,
            6 => Kind::Ack,
            _ => return None,
        })
    }
}

impl<G: PrimeOrderGroup> Message<G> {
    pub fn kind(&self) -> Kind {
        match self {
            Message::MeterReport(_) | Message::BillingReport(_) => Kind::ReportTable,
            Message::TariffRequest { .. } => Kind::TariffRequest,
            Message::Tariff(_) => Kind::Tariff,
            Message::Verdict { .. } => Kind::Verdict,
            Message::Error(_) => Kind::Error,
            Message::Ack => Kind::Ack,
        }
    }
}

// ---- encoding ----

fn put_str16(out: &mut Vec<u8>, s: &[u8], what: &'static str) -> Result<(), WireError> {
    let len = u16::try_from(s.len()).map_err(|_| WireError::FieldTooLong(what))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s);
    Ok(())
}

fn put_block(out: &mut Vec<u8>, column: Column, block: &[u8]) {
    out.push(column.bit());
    out.extend_from_slice(&(block.len() as u32).to_be_bytes());
    out.extend_from_slice(block);
}

fn price_bytes(price: &BigUint) -> Vec<u8> {
    if price.bits() == 0 {
        Vec::new()
    } else {
        price.to_bytes_be()
    }
}

pub fn encode_table<G: PrimeOrderGroup>(table: &ReportTable<G>) -> Result<Vec<u8>, WireError> {
    encode_table_with(table, None)
}

/// `comm_block` replaces the encoding of the commitment column when given.
fn encode_table_with<G: PrimeOrderGroup>(
    table: &ReportTable<G>,
    comm_block: Option<&[u8]>,
) -> Result<Vec<u8>, WireError> {
    if table.n > MAX_ROWS {
        return Err(WireError::TooManyRows(table.n));
    }
    let mut out = Vec::new();
    put_str16(&mut out, table.meter_id.as_bytes(), "meter id")?;
    let gid = G::ID.as_str().as_bytes();
    out.push(gid.len() as u8);
    out.extend_from_slice(gid);
    out.extend_from_slice(&table.i0.to_be_bytes());
    out.extend_from_slice(&(table.n as u32).to_be_bytes());
    out.push(table.columns().bits());

    let check = |column: Column, len: usize| {
        if len == table.n {
            Ok(())
        } else {
            Err(WireError::BlockLength {
                column,
                expected: table.n,
                actual: len,
            })
        }
    };
    if let Some(col) = &table.intervals {
        check(Column::Interval, col.len())?;
        let block: Vec<u8> = col.iter().flat_map(|i| i.to_be_bytes()).collect();
        put_block(&mut out, Column::Interval, &block);
    }
    if let Some(col) = &table.values {
        check(Column::Value, col.len())?;
        let block: Vec<u8> = col.iter().flat_map(|v| v.to_be_bytes()).collect();
        put_block(&mut out, Column::Value, &block);
    }
    if let Some(col) = &table.commitments {
        check(Column::Commitment, col.len())?;
        match comm_block {
            Some(block) => put_block(&mut out, Column::Commitment, block),
            None => {
                let block: Vec<u8> = col.iter().flat_map(|c| c.to_bytes()).collect();
                put_block(&mut out, Column::Commitment, &block);
            }
        }
    }
    if let Some(col) = &table.randomness {
        check(Column::Randomness, col.len())?;
        let block: Vec<u8> = col.iter().flat_map(G::scalar_to_bytes).collect();
        put_block(&mut out, Column::Randomness, &block);
    }
    if let Some(summary) = &table.summary {
        let mut block = Vec::new();
        put_str16(&mut block, &price_bytes(&summary.price), "price")?;
        block.extend_from_slice(&G::scalar_to_bytes(&summary.r_prime));
        put_block(&mut out, Column::Summary, &block);
    }
    out.push(END_OF_COLUMNS);
    put_str16(&mut out, &table.sig, "signature")?;
    Ok(out)
}

fn encode_payload<G: PrimeOrderGroup>(msg: &Message<G>) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    match msg {
        Message::MeterReport(report) => return encode_table(&ReportTable::from_meter(report)),
        Message::BillingReport(report) => return encode_table(&ReportTable::from_billing(report)),
        Message::TariffRequest { meter_id, i0, n } => {
            put_str16(&mut out, meter_id.as_bytes(), "meter id")?;
            out.extend_from_slice(&i0.to_be_bytes());
            let n = u32::try_from(*n).map_err(|_| WireError::TooManyRows(*n))?;
            out.extend_from_slice(&n.to_be_bytes());
        }
        Message::Tariff(TariffMessage { meter_id, tariff }) => {
            if tariff.len() > MAX_ROWS {
                return Err(WireError::TooManyRows(tariff.len()));
            }
            put_str16(&mut out, meter_id.as_bytes(), "meter id")?;
            out.extend_from_slice(&tariff.i0().to_be_bytes());
            out.extend_from_slice(&(tariff.len() as u32).to_be_bytes());
            for rate in tariff.rates() {
                out.extend_from_slice(&rate.to_be_bytes());
            }
        }
        Message::Verdict { meter_id, i0, verdict } => {
            put_str16(&mut out, meter_id.as_bytes(), "meter id")?;
            out.extend_from_slice(&i0.to_be_bytes());
            let code = match verdict {
                Verdict::Accepted => "accepted",
                Verdict::Rejected(r) => r.code(),
            };
            out.push(code.len() as u8);
            out.extend_from_slice(code.as_bytes());
        }
        Message::Error(text) => put_str16(&mut out, text.as_bytes(), "error text")?,
        Message::Ack => {}
    }
    Ok(out)
}

pub fn encode_message<G: PrimeOrderGroup>(msg: &Message<G>) -> Result<Vec<u8>, WireError> {
    frame(msg.kind(), encode_payload(msg)?)
}

/// Meter-side encoder that copies the commitment column out of the signed
/// `(i0, COMM)` bytes instead of re-encoding every element. Produces the
/// same frame as [`encode_message`].
pub fn encode_meter_frame<G: PrimeOrderGroup>(
    report: &CommitmentReport<G>,
    signed_payload: &[u8],
) -> Result<Vec<u8>, WireError> {
    let expected = 8 + report.len() * G::ELEMENT_BYTES;
    if signed_payload.len() != expected || signed_payload[..8] != report.i0.to_be_bytes() {
        return Err(WireError::BlockLength {
            column: Column::Commitment,
            expected,
            actual: signed_payload.len(),
        });
    }
    let payload = encode_table_with(&ReportTable::from_meter(report), Some(&signed_payload[8..]))?;
    frame(Kind::ReportTable, payload)
}

fn frame(kind: Kind, payload: Vec<u8>) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_PAYLOAD_BYTES {
        return Err(WireError::PayloadTooLarge(payload.len()));
    }
    let mut frame = Vec::with_capacity(FRAME_HEADER_BYTES + payload.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(VERSION);
    frame.push(kind as u8);
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

// ---- decoding ----

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str16(&mut self, what: &'static str) -> Result<String, WireError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Utf8(what))
    }

    fn finish(self) -> Result<(), WireError> {
        match self.buf.len() {
            0 => Ok(()),
            extra => Err(WireError::TrailingBytes(extra)),
        }
    }
}

fn fixed_block(column: Column, block: &[u8], n: usize, width: usize) -> Result<(), WireError> {
    let expected = n * width;
    if block.len() == expected {
        Ok(())
    } else {
        Err(WireError::BlockLength {
            column,
            expected,
            actual: block.len(),
        })
    }
}

pub fn decode_table<G: PrimeOrderGroup>(payload: &[u8]) -> Result<ReportTable<G>, WireError> {
    let mut cur = Cursor { buf: payload };
    let meter_id = cur.str16("meter id")?;
    let gid_len = cur.u8()? as usize;
    let gid = cur.take(gid_len)?;
    if gid != G::ID.as_str().as_bytes() {
        return Err(WireError::GroupMismatch {
            expected: G::ID.as_str().to_string(),
            actual: String::from_utf8_lossy(gid).into_owned(),
        });
    }
    let i0 = cur.u64()?;
    let n = cur.u32()? as usize;
    if n > MAX_ROWS {
        return Err(WireError::TooManyRows(n));
    }
    let declared = ColumnSet::from_bits(cur.u8()?);
    if let Some(bad) = (0..8).map(|b| 1u8 << b).find(|bit| declared.bits() & bit != 0 && Column::from_tag(*bit).is_none()) {
        return Err(WireError::UnknownColumn(bad));
    }

    let mut table = ReportTable {
        meter_id,
        i0,
        n,
        intervals: None,
        values: None,
        commitments: None,
        randomness: None,
        summary: None,
        sig: Vec::new(),
    };
    let mut last_tag = 0u8;
    loop {
        let tag = cur.u8()?;
        if tag == END_OF_COLUMNS {
            break;
        }
        let column = Column::from_tag(tag).ok_or(WireError::UnknownColumn(tag))?;
        if !declared.contains(column) {
            return Err(WireError::UndeclaredColumn(column));
        }
        if tag <= last_tag {
            return Err(WireError::ColumnOrder(column));
        }
        last_tag = tag;
        let len = cur.u32()? as usize;
        let block = cur.take(len)?;
        match column {
            Column::Interval => {
                fixed_block(column, block, n, 8)?;
                let col: Vec<u64> = block
                    .chunks_exact(8)
                    .map(|c| u64::from_be_bytes(c.try_into().unwrap()))
                    .collect();
                if let Some(k) = col
                    .iter()
                    .enumerate()
                    .position(|(k, &i)| i != i0.wrapping_add(k as u64))
                {
                    return Err(WireError::IntervalSequence(k));
                }
                table.intervals = Some(col);
            }
            Column::Value => {
                fixed_block(column, block, n, 4)?;
                table.values = Some(
                    block
                        .chunks_exact(4)
                        .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
                        .collect(),
                );
            }
            Column::Commitment => {
                fixed_block(column, block, n, G::ELEMENT_BYTES)?;
                table.commitments = Some(
                    block
                        .chunks_exact(G::ELEMENT_BYTES)
                        .map(|c| G::element_from_bytes(c).map(Commitment))
                        .collect::<Result<_, _>>()?,
                );
            }
            Column::Randomness => {
                fixed_block(column, block, n, G::SCALAR_BYTES)?;
                table.randomness = Some(
                    block
                        .chunks_exact(G::SCALAR_BYTES)
                        .map(G::scalar_from_bytes)
                        .collect::<Result<_, _>>()?,
                );
            }
            Column::Summary => {
                let mut inner = Cursor { buf: block };
                let plen = inner.u16()? as usize;
                let magnitude = inner.take(plen)?;
                if magnitude.first() == Some(&0) {
                    return Err(WireError::NonCanonicalPrice);
                }
                let price = BigUint::from_bytes_be(magnitude);
                let r_prime = G::scalar_from_bytes(inner.take(G::SCALAR_BYTES)?)?;
                inner.finish()?;
                table.summary = Some(Summary { price, r_prime });
            }
        }
    }
    if let Some(missing) = declared.columns().into_iter().find(|c| match c {
        Column::Interval => table.intervals.is_none(),
        Column::Value => table.values.is_none(),
        Column::Commitment => table.commitments.is_none(),
        Column::Randomness => table.randomness.is_none(),
        Column::Summary => table.summary.is_none(),
    }) {
        return Err(WireError::MissingColumn(missing));
    }
    let sig_len = cur.u16()? as usize;
    table.sig = cur.take(sig_len)?.to_vec();
    cur.finish()?;
    Ok(table)
}

/// Splits a frame into kind and payload after checking the frame header.
pub fn parse_frame(frame: &[u8]) -> Result<(u8, &[u8]), WireError> {
    if frame.len() < FRAME_HEADER_BYTES {
        return Err(WireError::Truncated);
    }
    if frame[..4] != MAGIC {
        return Err(WireError::BadMagic);
    }
    if frame[4] != VERSION {
        return Err(WireError::UnsupportedVersion(frame[4]));
    }
    let kind = frame[5];
    let declared = u32::from_be_bytes(frame[6..10].try_into().unwrap()) as usize;
    if declared > MAX_PAYLOAD_BYTES {
        return Err(WireError::PayloadTooLarge(declared));
    }
    let payload = &frame[FRAME_HEADER_BYTES..];
    if payload.len() < declared {
        return Err(WireError::Truncated);
    }
    if payload.len() > declared {
        return Err(WireError::TrailingBytes(payload.len() - declared));
    }
    Ok((kind, payload))
}

pub fn decode_message<G: PrimeOrderGroup>(frame: &[u8]) -> Result<Message<G>, WireError> {
    let (kind, payload) = parse_frame(frame)?;
    let kind = Kind::from_u8(kind).ok_or(WireError::UnknownKind(kind))?;
    if kind == Kind::ReportTable {
        let table = decode_table::<G>(payload)?;
        return match detect_mode(&table)? {
            TableMode::Meter => table.into_meter().map(Message::MeterReport),
            TableMode::Privacy => table.into_billing().map(Message::BillingReport),
        };
    }
    let mut cur = Cursor { buf: payload };
    let msg = match kind {
        Kind::ReportTable => unreachable!(),
        Kind::TariffRequest => Message::TariffRequest {
            meter_id: cur.str16("meter id")?,
            i0: cur.u64()?,
            n: cur.u32()? as usize,
        },
        Kind::Tariff => {
            let meter_id = cur.str16("meter id")?;
            let i0 = cur.u64()?;
            let n = cur.u32()? as usize;
            if n > MAX_ROWS {
                return Err(WireError::TooManyRows(n));
            }
            let block = cur.take(n * 4)?;
            let rates = block
                .chunks_exact(4)
                .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
                .collect();
            Message::Tariff(TariffMessage {
                meter_id,
                tariff: Tariff::new(i0, rates)?,
            })
        }
        Kind::Verdict => {
            let meter_id = cur.str16("meter id")?;
            let i0 = cur.u64()?;
            let len = cur.u8()? as usize;
            let code = std::str::from_utf8(cur.take(len)?).map_err(|_| WireError::Utf8("verdict"))?;
            let verdict = match code {
                "accepted" => Verdict::Accepted,
                other => Verdict::Rejected(
                    other
                        .parse::<RejectReason>()
                        .map_err(|_| WireError::BadVerdict(other.to_string()))?,
                ),
            };
            Message::Verdict { meter_id, i0, verdict }
        }
        Kind::Error => Message::Error(cur.str16("error text")?),
        Kind::Ack => Message::Ack,
    };
    cur.finish()?;
    Ok(msg)
}

/// Reads one whole frame from a stream. `Ok(None)` on clean EOF before the
/// first header byte.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut header = [0u8; FRAME_HEADER_BYTES];
    let mut filled = 0;
    while filled < header.len() {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated),
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if header[..4] != MAGIC {
        return Err(WireError::BadMagic);
    }
    let len = u32::from_be_bytes(header[6..10].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD_BYTES {
        return Err(WireError::PayloadTooLarge(len));
    }
    let mut frame = header.to_vec();
    frame.resize(FRAME_HEADER_BYTES + len, 0);
    reader.read_exact(&mut frame[FRAME_HEADER_BYTES..]).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e),
    })?;
    Ok(Some(frame))
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &[u8]) -> Result<(), WireError> {
    writer.write_all(frame)?;
    writer.flush()?;
    Ok(())
}

pub fn send<G: PrimeOrderGroup, W: Write>(writer: &mut W, msg: &Message<G>) -> Result<(), WireError> {
    write_frame(writer, &encode_message(msg)?)
}

pub fn recv<G: PrimeOrderGroup, R: Read>(reader: &mut R) -> Result<Option<Message<G>>, WireError> {
    match read_frame(reader)? {
        Some(frame) => decode_message(&frame).map(Some),
        None => Ok(None),
    }
}
