//! Digit-level packet tokenizer.
//!
//! A record `x_1 .. x_{n-1}` with class `y` becomes
//!
//! ```text
//! rev(x_1) S_1 rev(x_2) S_2 ... rev(x_{n-1}) S_{n-1} <label y> <pad> ... <pad>
//! ```
//!
//! where every digit is its own token, `S_i = S_0 + i - 1` and the label token
//! lives in its own ID range above the separators. Reversal puts the ones
//! digit of every field at that field's first slot.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{FieldDescriptor, FieldKind, PacketSchema};

/// First separator ID (`S_0`); IDs 0..=9 are the digits.
pub const SEP_BASE: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("value {value:?} is not in the code table of field {field:?}")]
    UnknownCategory { field: String, value: String },
    #[error("field {field:?} produced a negative value from {value:?}")]
    NegativeValue { field: String, value: String },
    #[error("field {field:?}: {digits} digits exceed max_digits {max}")]
    Overflow { field: String, digits: usize, max: usize },
    #[error("field {field:?}: cannot parse {value:?}")]
    Unparseable { field: String, value: String },
    #[error("expected {expected} fields, got {found}")]
    FieldCountMismatch { expected: usize, found: usize },
    #[error("field {index} is not a canonical digit string: {value:?}")]
    NotNormalized { index: usize, value: String },
    #[error("tokenized packet needs {needed} positions but seq_len is {seq_len}")]
    SequenceTooLong { needed: usize, seq_len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("malformed token sequence at position {position}: {reason}")]
    MalformedSequence { position: usize, reason: String },
}

impl CodecError {
    /// Short machine-readable reason used in reject reports.
    pub fn reason(&self) -> &'static str {
        match self {
            CodecError::UnknownCategory { .. } => "UnknownCategory",
            CodecError::NegativeValue { .. } => "NegativeValue",
            CodecError::Overflow { .. } => "Overflow",
            CodecError::Unparseable { .. } => "Unparseable",
            CodecError::FieldCountMismatch { .. } => "FieldCountMismatch",
            CodecError::NotNormalized { .. } => "NotNormalized",
            CodecError::SequenceTooLong { .. } => "SequenceTooLong",
            CodecError::LabelOutOfRange { .. } => "LabelOutOfRange",
            CodecError::MalformedSequence { .. } => "MalformedSequence",
        }
    }
}

/// Token ID layout: digits `[0, 9]`, separators `[S_0, S_0 + n - 2]`,
/// labels `[label_base, label_base + K - 1]`, then the pad ID.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub sep_base: usize,
    pub sep_count: usize,
    pub label_base: usize,
    pub label_count: usize,
    pub pad_id: usize,
    pub size: usize,
}

impl Vocabulary {
    pub fn new(field_count: usize, label_count: usize) -> Self {
        let label_base = SEP_BASE + field_count;
        let pad_id = label_base + label_count;
        Self {
            sep_base: SEP_BASE,
            sep_count: field_count,
            label_base,
            label_count,
            pad_id,
            size: pad_id + 1,
        }
    }

    pub fn is_digit(&self, id: usize) -> bool {
        id < 10
    }

    /// Zero-based field index for a separator ID.
    pub fn separator_index(&self, id: usize) -> Option<usize> {
        (id >= self.sep_base && id < self.sep_base + self.sep_count).then(|| id - self.sep_base)
    }

    pub fn label_of(&self, id: usize) -> Option<usize> {
        (id >= self.label_base && id < self.label_base + self.label_count).then(|| id - self.label_base)
    }

    pub fn label_token(&self, class: usize) -> usize {
        self.label_base + class
    }
}

pub fn build_vocabulary(schema: &PacketSchema) -> Vocabulary {
    Vocabulary::new(schema.field_count(), schema.class_count())
}

/// One tokenized record, always exactly `seq_len` long.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPacket {
    pub token_ids: Vec<usize>,
    /// Place value of each digit inside its field (0 = ones). `None` for
    /// separators, the label, padding and categorical fields.
    pub numeric_pos: Vec<Option<usize>>,
    /// Row of the field-position table used by each token.
    pub field_pos: Vec<usize>,
    pub label_pos: usize,
    pub loss_mask: Vec<bool>,
}

impl TokenizedPacket {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of leading positions whose next-token prediction is supervised,
    /// i.e. one past the last `t` with `loss_mask[t + 1]`.
    pub fn supervised_prefix(&self) -> usize {
        (1..self.loss_mask.len()).rev().find(|&t| self.loss_mask[t]).unwrap_or(0)
    }

    /// Class carried by the label slot, if any.
    pub fn label(&self, vocab: &Vocabulary) -> Option<usize> {
        self.token_ids.get(self.label_pos).and_then(|&id| vocab.label_of(id))
    }
}

fn canonical_digits(digits: &str) -> String {
    let trimmed = digits.trim_start_matches('0');
    if trimmed.is_empty() {
        "0".to_string()
    } else {
        trimmed.to_string()
    }
}

fn increment_decimal(digits: &str) -> String {
    let mut bytes = digits.as_bytes().to_vec();
    let mut i = bytes.len();
    loop {
        if i == 0 {
            bytes.insert(0, b'1');
            break;
        }
        i -= 1;
        if bytes[i] == b'9' {
            bytes[i] = b'0';
        } else {
            bytes[i] += 1;
            break;
        }
    }
    String::from_utf8(bytes).expect("ascii digits")
}

struct Decimal {
    negative: bool,
    /// All significant digits, no decimal point.
    digits: String,
    /// value = digits * 10^exponent
    exponent: i64,
}

fn parse_decimal(text: &str, allow_fraction: bool) -> Option<Decimal> {
    let (negative, rest) = match text.as_bytes().first()? {
        b'-' => (true, &text[1..]),
        b'+' => (false, &text[1..]),
        _ => (false, text),
    };
    let (mantissa, exp) = match rest.find(['e', 'E']) {
        Some(i) if allow_fraction => {
            let e: i64 = rest[i + 1..].parse().ok()?;
            (&rest[..i], e)
        }
        Some(_) => return None,
        None => (rest, 0),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((a, b)) if allow_fraction => (a, b),
        Some(_) => return None,
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(Decimal {
        negative,
        digits: format!("{int_part}{frac_part}"),
        exponent: exp.checked_sub(frac_part.len() as i64)?,
    })
}

/// `value * 10^scale`, rounded half-to-even, as canonical digits.
fn scale_round_half_even(dec: &Decimal, scale: u32, max_digits: usize, field: &str) -> Result<String, CodecError> {
    let shift = dec.exponent + scale as i64;
    let sig = canonical_digits(&dec.digits);
    if shift >= 0 {
        if sig == "0" {
            return Ok(sig);
        }
        let digits = sig.len() as i64 + shift;
        if digits > max_digits as i64 {
            return Err(CodecError::Overflow {
                field: field.to_string(),
                digits: digits.min(usize::MAX as i64) as usize,
                max: max_digits,
            });
        }
        return Ok(format!("{sig}{}", "0".repeat(shift as usize)));
    }
    let drop = (-shift) as usize;
    let padded = if dec.digits.len() <= drop {
        format!("{}{}", "0".repeat(drop + 1 - dec.digits.len()), dec.digits)
    } else {
        dec.digits.clone()
    };
    let (keep, rest) = padded.split_at(padded.len() - drop);
    let first = rest.as_bytes()[0];
    let tail_zero = rest[1..].bytes().all(|b| b == b'0');
    let last_odd = (keep.as_bytes()[keep.len() - 1] - b'0') % 2 == 1;
    let round_up = first > b'5' || (first == b'5' && (!tail_zero || last_odd));
    let keep = if round_up { increment_decimal(keep) } else { keep.to_string() };
    Ok(canonical_digits(&keep))
}

/// Converts a raw cell into the canonical digit string for `desc`.
pub fn normalize_field(raw: &str, desc: &FieldDescriptor) -> Result<String, CodecError> {
    let text = raw.trim();
    let field = desc.name.as_str();
    let unparseable = || CodecError::Unparseable {
        field: field.to_string(),
        value: raw.to_string(),
    };
    let digits = match &desc.kind {
        FieldKind::Integer => {
            let dec = parse_decimal(text, false).ok_or_else(unparseable)?;
            let d = canonical_digits(&dec.digits);
            if dec.negative && d != "0" {
                return Err(CodecError::NegativeValue {
                    field: field.to_string(),
                    value: raw.to_string(),
                });
            }
            d
        }
        FieldKind::FixedPoint { scale } => {
            let dec = parse_decimal(text, true).ok_or_else(unparseable)?;
            let d = scale_round_half_even(&dec, *scale, desc.max_digits, field)?;
            if dec.negative && d != "0" {
                return Err(CodecError::NegativeValue {
                    field: field.to_string(),
                    value: raw.to_string(),
                });
            }
            d
        }
        FieldKind::Categorical { hex: true, .. } => {
            let body = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")).unwrap_or(text);
            if body.is_empty() || !body.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(unparseable());
            }
            let body = body.trim_start_matches('0');
            if body.len() > 32 {
                return Err(CodecError::Overflow {
                    field: field.to_string(),
                    digits: usize::MAX,
                    max: desc.max_digits,
                });
            }
            if body.is_empty() {
                "0".to_string()
            } else {
                u128::from_str_radix(body, 16).map_err(|_| unparseable())?.to_string()
            }
        }
        FieldKind::Categorical { codes, .. } => codes
            .get(text)
            .ok_or_else(|| CodecError::UnknownCategory {
                field: field.to_string(),
                value: raw.to_string(),
            })?
            .to_string(),
    };
    if digits.len() > desc.max_digits {
        return Err(CodecError::Overflow {
            field: field.to_string(),
            digits: digits.len(),
            max: desc.max_digits,
        });
    }
    Ok(digits)
}

fn check_fields<S: AsRef<str>>(fields: &[S], schema: &PacketSchema) -> Result<(), CodecError> {
    if fields.len() != schema.field_count() {
        return Err(CodecError::FieldCountMismatch {
            expected: schema.field_count(),
            found: fields.len(),
        });
    }
    for (index, f) in fields.iter().enumerate() {
        let f = f.as_ref();
        let canonical = !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()) && (f == "0" || !f.starts_with('0'));
        if !canonical {
            return Err(CodecError::NotNormalized {
                index,
                value: f.to_string(),
            });
        }
    }
    Ok(())
}

fn layout<S: AsRef<str>>(fields: &[S], label_token: usize, schema: &PacketSchema, vocab: &Vocabulary) -> Result<TokenizedPacket, CodecError> {
    check_fields(fields, schema)?;
    let seq_len = schema.seq_len;
    let needed = fields.iter().map(|f| f.as_ref().len() + 1).sum::<usize>() + 1;
    if needed > seq_len {
        return Err(CodecError::SequenceTooLong { needed, seq_len });
    }
    let mut token_ids = Vec::with_capacity(seq_len);
    let mut numeric_pos = Vec::with_capacity(seq_len);
    for (i, (value, desc)) in fields.iter().zip(&schema.fields).enumerate() {
        let numeric = desc.kind.is_numeric();
        for (place, b) in value.as_ref().bytes().rev().enumerate() {
            token_ids.push((b - b'0') as usize);
            numeric_pos.push(numeric.then_some(place));
        }
        token_ids.push(vocab.sep_base + i);
        numeric_pos.push(None);
    }
    let label_pos = token_ids.len();
    token_ids.push(label_token);
    numeric_pos.push(None);
    let mut loss_mask = vec![true; label_pos + 1];
    token_ids.resize(seq_len, vocab.pad_id);
    numeric_pos.resize(seq_len, None);
    loss_mask.resize(seq_len, false);
    Ok(TokenizedPacket {
        token_ids,
        numeric_pos,
        field_pos: (0..seq_len).collect(),
        label_pos,
        loss_mask,
    })
}

/// Tokenizes normalized digit strings plus a class label.
pub fn tokenize_packet<S: AsRef<str>>(fields: &[S], label: usize, schema: &PacketSchema, vocab: &Vocabulary) -> Result<TokenizedPacket, CodecError> {
    if label >= vocab.label_count {
        return Err(CodecError::LabelOutOfRange {
            label,
            classes: vocab.label_count,
        });
    }
    layout(fields, vocab.label_token(label), schema, vocab)
}

/// Tokenizes a record whose label is unknown. The label slot holds the pad
/// ID and is excluded from the loss mask; `label_pos` still marks it.
pub fn tokenize_unlabeled<S: AsRef<str>>(fields: &[S], schema: &PacketSchema, vocab: &Vocabulary) -> Result<TokenizedPacket, CodecError> {
    let mut tp = layout(fields, vocab.pad_id, schema, vocab)?;
    tp.loss_mask[tp.label_pos] = false;
    Ok(tp)
}

/// Inverse of [`tokenize_packet`].
pub fn detokenize(tp: &TokenizedPacket, schema: &PacketSchema, vocab: &Vocabulary) -> Result<(Vec<String>, usize), CodecError> {
    let malformed = |position: usize, reason: String| CodecError::MalformedSequence { position, reason };
    let mut fields = Vec::with_capacity(schema.field_count());
    let mut current: Vec<u8> = Vec::new();
    let mut pos = 0;
    while fields.len() < schema.field_count() {
        let Some(&id) = tp.token_ids.get(pos) else {
            return Err(malformed(pos, "sequence ended inside the data fields".into()));
        };
        if vocab.is_digit(id) {
            current.push(b'0' + id as u8);
        } else if let Some(idx) = vocab.separator_index(id) {
            if idx != fields.len() {
                return Err(malformed(pos, format!("separator S_{} where S_{} was expected", idx + 1, fields.len() + 1)));
            }
            if current.is_empty() {
                return Err(malformed(pos, "empty field before separator".into()));
            }
            current.reverse();
            fields.push(String::from_utf8(std::mem::take(&mut current)).expect("ascii digits"));
        } else {
            return Err(malformed(pos, format!("unexpected token {id} inside a field")));
        }
        pos += 1;
    }
    if pos != tp.label_pos {
        return Err(malformed(pos, format!("label_pos is {} but fields end at {pos}", tp.label_pos)));
    }
    let label = tp
        .token_ids
        .get(pos)
        .and_then(|&id| vocab.label_of(id))
        .ok_or_else(|| malformed(pos, "label token missing".into()))?;
    if let Some(off) = tp.token_ids[pos + 1..].iter().position(|&id| id != vocab.pad_id) {
        return Err(malformed(pos + 1 + off, "non-pad token after the label".into()));
    }
    Ok((fields, label))
}

/// Schema and vocabulary bundled together, with record-level helpers.
#[derive(Clone, Debug, PartialEq)]
pub struct PacketCodec {
    pub schema: PacketSchema,
    pub vocab: Vocabulary,
}

impl PacketCodec {
    pub fn new(schema: PacketSchema) -> Self {
        let vocab = build_vocabulary(&schema);
        Self { schema, vocab }
    }

    pub fn normalize<S: AsRef<str>>(&self, raw: &[S]) -> Result<Vec<String>, CodecError> {
        if raw.len() != self.schema.field_count() {
            return Err(CodecError::FieldCountMismatch {
                expected: self.schema.field_count(),
                found: raw.len(),
            });
        }
        raw.iter()
            .zip(&self.schema.fields)
            .map(|(r, d)| normalize_field(r.as_ref(), d))
            .collect()
    }

    pub fn encode<S: AsRef<str>>(&self, raw: &[S], label: usize) -> Result<TokenizedPacket, CodecError> {
        tokenize_packet(&self.normalize(raw)?, label, &self.schema, &self.vocab)
    }

    pub fn encode_unlabeled<S: AsRef<str>>(&self, raw: &[S]) -> Result<TokenizedPacket, CodecError> {
        tokenize_unlabeled(&self.normalize(raw)?, &self.schema, &self.vocab)
    }

    pub fn decode(&self, tp: &TokenizedPacket) -> Result<(Vec<String>, usize), CodecError> {
        detokenize(tp, &self.schema, &self.vocab)
    }

    /// Token index ranges `[start, end)` of each field, separator included.
    pub fn field_spans(&self, tp: &TokenizedPacket) -> Vec<(usize, usize)> {
        let mut spans = Vec::with_capacity(self.schema.field_count());
        let mut start = 0;
        for (t, &id) in tp.token_ids[..tp.label_pos].iter().enumerate() {
            if self.vocab.separator_index(id).is_some() {
                spans.push((start, t + 1));
                start = t + 1;
            }
        }
        spans
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn int(name: &str, d: usize) -> FieldDescriptor {
        FieldDescriptor::integer(name, d)
    }

    #[test]
    fn normalize_integers() {
        let d = int("port", 5);
        assert_eq!(normalize_field("406", &d).unwrap(), "406");
        assert_eq!(normalize_field("0", &d).unwrap(), "0");
        assert_eq!(normalize_field("000", &d).unwrap(), "0");
        assert_eq!(normalize_field(" 0042 ", &d).unwrap(), "42");
        assert_eq!(normalize_field("+7", &d).unwrap(), "7");
        assert_eq!(normalize_field("-0", &d).unwrap(), "0");
        assert_eq!(normalize_field("-3", &d).unwrap_err().reason(), "NegativeValue");
        assert_eq!(normalize_field("123456", &d).unwrap_err().reason(), "Overflow");
        assert_eq!(normalize_field("1.5", &d).unwrap_err().reason(), "Unparseable");
        assert_eq!(normalize_field("", &d).unwrap_err().reason(), "Unparseable");
        assert_eq!(normalize_field("Infinity", &d).unwrap_err().reason(), "Unparseable");
    }

    #[test]
    fn normalize_fixed_point_rounds_half_to_even() {
        let d = FieldDescriptor::fixed_point("rate", 2, 8);
        assert_eq!(normalize_field("1.25", &d).unwrap(), "125");
        assert_eq!(normalize_field("1.005", &d).unwrap(), "100");
        assert_eq!(normalize_field("1.015", &d).unwrap(), "102");
        assert_eq!(normalize_field("1.0150001", &d).unwrap(), "102");
        assert_eq!(normalize_field("1.0049", &d).unwrap(), "100");
        assert_eq!(normalize_field("9.995", &d).unwrap(), "1000");
        assert_eq!(normalize_field("0.004", &d).unwrap(), "0");
        assert_eq!(normalize_field(".5", &d).unwrap(), "50");
        assert_eq!(normalize_field("7", &d).unwrap(), "700");
        assert_eq!(normalize_field("1.2E+3", &d).unwrap(), "120000");
        assert_eq!(normalize_field("-0.001", &d).unwrap(), "0");
        assert_eq!(normalize_field("-0.5", &d).unwrap_err().reason(), "NegativeValue");
        assert_eq!(normalize_field("1e9", &d).unwrap_err().reason(), "Overflow");
        assert_eq!(normalize_field("NaN", &d).unwrap_err().reason(), "Unparseable");
        let zero_scale = FieldDescriptor::fixed_point("x", 0, 4);
        assert_eq!(normalize_field("2.5", &zero_scale).unwrap(), "2");
        assert_eq!(normalize_field("3.5", &zero_scale).unwrap(), "4");
    }

    #[test]
    fn normalize_categorical_and_hex() {
        let mut codes = BTreeMap::new();
        codes.insert("TCP".to_string(), 6);
        codes.insert("UDP".to_string(), 17);
        let d = FieldDescriptor::categorical("proto", codes, 2);
        assert_eq!(normalize_field("UDP", &d).unwrap(), "17");
        assert_eq!(normalize_field("ICMP", &d).unwrap_err().reason(), "UnknownCategory");
        let h = FieldDescriptor::hex("can_id", 4);
        assert_eq!(normalize_field("0316", &h).unwrap(), "790");
        assert_eq!(normalize_field("0x316", &h).unwrap(), "790");
        assert_eq!(normalize_field("ff", &h).unwrap(), "255");
        assert_eq!(normalize_field("00", &h).unwrap(), "0");
        assert_eq!(normalize_field("zz", &h).unwrap_err().reason(), "Unparseable");
        assert_eq!(normalize_field("ffff", &h).unwrap_err().reason(), "Overflow");
    }

    #[test]
    fn vocabulary_layouts() {
        let v = Vocabulary::new(2, 12);
        assert_eq!((v.sep_base, v.label_base, v.pad_id, v.size), (10, 12, 24, 25));
        assert_eq!(Vocabulary::new(1, 2).size, 14);
        assert_eq!(Vocabulary::new(11, 12).size, 34);
    }

    #[test]
    fn unlabeled_packets_keep_the_label_slot() {
        let schema = PacketSchema::new(vec![int("a", 3)], vec!["x".into(), "y".into()], 8, 3).unwrap();
        let v = build_vocabulary(&schema);
        let tp = tokenize_unlabeled(&["12"], &schema, &v).unwrap();
        assert_eq!(tp.label_pos, 3);
        assert_eq!(tp.token_ids[3], v.pad_id);
        assert_eq!(tp.supervised_prefix(), 2);
        assert_eq!(tp.label(&v), None);
    }

    #[test]
    fn rejects_unnormalized_input() {
        let schema = PacketSchema::new(vec![int("a", 3)], vec!["x".into()], 8, 3).unwrap();
        let v = build_vocabulary(&schema);
        assert!(matches!(tokenize_packet(&["012"], 0, &schema, &v), Err(CodecError::NotNormalized { .. })));
        assert!(matches!(tokenize_packet(&[""], 0, &schema, &v), Err(CodecError::NotNormalized { .. })));
        assert!(matches!(tokenize_packet(&["1", "2"], 0, &schema, &v), Err(CodecError::FieldCountMismatch { .. })));
        assert!(matches!(tokenize_packet(&["1"], 1, &schema, &v), Err(CodecError::LabelOutOfRange { .. })));
    }
}
