//! Binary ECG record format. Layout, all little-endian:
//!
//! ```text
//! magic "ECGT" | version u16 | lead_count u16 | samples_per_lead u32
//! | sampling_rate u32 | label u8 | report_len u32 | report utf-8
//! | segment_count u32 | segments (lead u16, start u32, end u32)*
//! | samples f32, lead-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, FormatErrorKind};
use crate::Result;

pub const MAGIC: [u8; 4] = *b"ECGT";
pub const FORMAT_VERSION: u16 = 1;
pub const LEADS: usize = 12;

pub const LEAD_NAMES: [&str; LEADS] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Label {
    #[serde(rename = "NORM")]
    Norm,
    #[serde(rename = "MI")]
    Mi,
    #[serde(rename = "STTC")]
    Sttc,
    #[serde(rename = "CD")]
    Cd,
    #[serde(rename = "HYP")]
    Hyp,
}

impl Label {
    pub const ALL: [Label; 5] = [Label::Norm, Label::Mi, Label::Sttc, Label::Cd, Label::Hyp];
    pub const DISEASES: [Label; 4] = [Label::Mi, Label::Sttc, Label::Cd, Label::Hyp];

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Norm => 0,
            Label::Mi => 1,
            Label::Sttc => 2,
            Label::Cd => 3,
            Label::Hyp => 4,
        }
    }

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Norm),
            1 => Some(Label::Mi),
            2 => Some(Label::Sttc),
            3 => Some(Label::Cd),
            4 => Some(Label::Hyp),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Norm => "NORM",
            Label::Mi => "MI",
            Label::Sttc => "STTC",
            Label::Cd => "CD",
            Label::Hyp => "HYP",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "NORM" => Some(Label::Norm),
            "MI" => Some(Label::Mi),
            "STTC" => Some(Label::Sttc),
            "CD" => Some(Label::Cd),
            "HYP" => Some(Label::Hyp),
            _ => None,
        }
    }
}

/// Annotated span of disease-bearing samples on one lead, in the record's
/// own sample coordinates. End is exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub lead: u16,
    pub start: u32,
    pub end: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    /// Not part of the binary format; carried from the manifest or filename.
    pub id: String,
    pub sampling_rate: u32,
    pub label: Label,
    pub report: String,
    pub segments: Vec<Segment>,
    /// Lead-major: lead 0's samples, then lead 1's, ... Always 12 leads.
    pub samples: Vec<f32>,
    pub samples_per_lead: usize,
}

impl EcgRecord {
    pub fn lead(&self, i: usize) -> &[f32] {
        assert!(i < LEADS);
        let n = self.samples_per_lead;
        &self.samples[i * n..(i + 1) * n]
    }

    pub fn lead_mut(&mut self, i: usize) -> &mut [f32] {
        assert!(i < LEADS);
        let n = self.samples_per_lead;
        &mut self.samples[i * n..(i + 1) * n]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        assert_eq!(self.samples.len(), LEADS * self.samples_per_lead);
        let mut buf: Vec<u8> = Vec::with_capacity(32 + self.report.len() + self.samples.len() * 4);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(LEADS as u16).to_le_bytes());
        buf.extend_from_slice(&(self.samples_per_lead as u32).to_le_bytes());
        buf.extend_from_slice(&self.sampling_rate.to_le_bytes());
        buf.push(self.label.as_u8());
        buf.extend_from_slice(&(self.report.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.report.as_bytes());
        buf.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for seg in &self.segments {
            buf.extend_from_slice(&seg.lead.to_le_bytes());
            buf.extend_from_slice(&seg.start.to_le_bytes());
            buf.extend_from_slice(&seg.end.to_le_bytes());
        }
        for &v in &self.samples {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EcgRecord> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let fmt = |kind: FormatErrorKind| Error::Format {
            path: path.display().to_string(),
            kind,
        };
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
        if magic != MAGIC {
            return Err(fmt(FormatErrorKind::BadMagic));
        }
        let version = r.u16().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
        if version != FORMAT_VERSION {
            return Err(fmt(FormatErrorKind::UnsupportedVersion));
        }
        let leads = r.u16().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
        if leads as usize != LEADS {
            return Err(fmt(FormatErrorKind::BadLeadCount));
        }
        let samples_per_lead = r.u32().ok_or_else(|| fmt(FormatErrorKind::Truncated))? as usize;
        let sampling_rate = r.u32().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
        let label_byte = r.u8().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
        let label = Label::from_u8(label_byte).ok_or_else(|| fmt(FormatErrorKind::BadLabel))?;
        let report_len = r.u32().ok_or_else(|| fmt(FormatErrorKind::Truncated))? as usize;
        let report_bytes = r.take(report_len).ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
        let report = std::str::from_utf8(report_bytes)
            .map_err(|_| fmt(FormatErrorKind::BadText))?
            .to_string();
        let seg_count = r.u32().ok_or_else(|| fmt(FormatErrorKind::Truncated))? as usize;
        let mut segments = Vec::with_capacity(seg_count);
        for _ in 0..seg_count {
            let lead = r.u16().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
            let start = r.u32().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
            let end = r.u32().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
            segments.push(Segment { lead, start, end });
        }
        let want = LEADS * samples_per_lead;
        let mut samples = Vec::with_capacity(want);
        for _ in 0..want {
            samples.push(f32::from_le_bytes(
                r.take(4)
                    .ok_or_else(|| fmt(FormatErrorKind::Truncated))?
                    .try_into()
                    .unwrap(),
            ));
        }
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(EcgRecord {
            id,
            sampling_rate,
            label,
            report,
            segments,
            samples,
            samples_per_lead,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
