//! Report text to conditioning vector. A pluggable backend produces a raw
//! embedding (deterministic hash-based stub by default; precomputed vectors
//! from a JSON-lines file for real language models); a learnable linear
//! layer compresses it to length L_t. Only the compression carries
//! gradients; backends are frozen by construction.

use std::collections::BTreeMap;
use std::path::Path;

use ecgtwin_nn::seed::Stream;

use crate::error::Error;
use crate::{Result, F};

pub trait TextBackend {
    fn name(&self) -> &'static str;
    fn raw_dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Hash-based stand-in for a pretrained encoder: each lowercase token maps
/// to a seeded pseudo-random unit vector; a report embeds as the normalized
/// token sum. Same text, same vector, no stored weights.
pub struct StubBackend {
    pub raw_dim: usize,
    pub seed: u64,
}

pub fn stub_embed(text: &str, raw_dim: usize, seed: u64) -> Vec<f64> {
    assert!(raw_dim >= 8);
    let mut sum = vec![0.0f64; raw_dim];
    let mut any = false;
    for token in text
        .split(|ch: char| !ch.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let token = token.to_lowercase();
        let mut s = Stream::named(seed, &token);
        let mut v = Vec::with_capacity(raw_dim);
        let mut norm2 = 0.0f64;
        for _ in 0..raw_dim {
            let x = s.normal();
            norm2 += x * x;
            v.push(x);
        }
        let norm = norm2.sqrt().max(f64::MIN_POSITIVE);
        for (acc, x) in sum.iter_mut().zip(&v) {
            *acc += x / norm;
        }
        any = true;
    }
    if !any {
        return sum;
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in sum.iter_mut() {
            *x /= norm;
        }
    }
    sum
}

impl TextBackend for StubBackend {
    fn name(&self) -> &'static str {
        "stub"
    }

    fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(stub_embed(text, self.raw_dim, self.seed))
    }
}

/// Precomputed embeddings keyed by exact report text, one JSON object per
/// line: {"text": "...", "embedding": [...]}.
pub struct ExternalBackend {
    raw_dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

#[derive(serde::Deserialize)]
struct ExternalLine {
    text: String,
    embedding: Vec<f64>,
}

impl ExternalBackend {
    pub fn load(path: &Path, raw_dim: usize) -> Result<ExternalBackend> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::Encoder {
            backend: "external".into(),
            detail: format!("cannot read {}: {e}", path.display()),
        })?;
        let mut table = BTreeMap::new();
        for (i, line) in body.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parsed: ExternalLine = serde_json::from_str(line).map_err(|e| Error::Encoder {
                backend: "external".into(),
                detail: format!("line {}: {e}", i + 1),
            })?;
            if parsed.embedding.len() != raw_dim {
                return Err(Error::Encoder {
                    backend: "external".into(),
                    detail: format!(
                        "line {}: embedding length {} != raw_dim {raw_dim}",
                        i + 1,
                        parsed.embedding.len()
                    ),
                });
            }
            table.insert(parsed.text, parsed.embedding);
        }
        Ok(ExternalBackend { raw_dim, table })
    }
}

impl TextBackend for ExternalBackend {
    fn name(&self) -> &'static str {
        "external"
    }

    fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.table.get(text).cloned().ok_or_else(|| Error::Encoder {
            backend: "external".into(),
            detail: format!("no embedding for text '{text}'"),
        })
    }
}

pub fn make_backend(cfg: &crate::config::Config) -> Result<Box<dyn TextBackend>> {
    match cfg.text_backend {
        crate::config::TextBackendKind::Stub => Ok(Box::new(StubBackend {
            raw_dim: cfg.dims.raw_dim,
            seed: cfg.seed,
        })),
        crate::config::TextBackendKind::External => Ok(Box::new(ExternalBackend::load(
            Path::new(&cfg.text_embeddings_path),
            cfg.dims.raw_dim,
        )?)),
    }
}

/// Embeds a batch of reports into a flat [n, raw_dim] buffer in the crate's
/// working precision, ready to enter the graph as a constant leaf.
pub fn embed_reports(backend: &dyn TextBackend, texts: &[&str]) -> Result<Vec<F>> {
    let d = backend.raw_dim();
    let mut out = Vec::with_capacity(texts.len() * d);
    for t in texts {
        let v = backend.embed(t)?;
        assert_eq!(v.len(), d);
        out.extend(v.iter().map(|&x| x as F));
    }
    Ok(out)
}

/// The compression layer outside the graph: out = w x + b per row,
/// accumulated in f64. Used by evaluation paths that need no gradients.
pub fn compress_plain(raw: &[F], n: usize, raw_dim: usize, w: &[F], b: &[F], l_t: usize) -> Vec<F> {
    assert_eq!(raw.len(), n * raw_dim);
    assert_eq!(w.len(), l_t * raw_dim);
    assert_eq!(b.len(), l_t);
    let mut out = Vec::with_capacity(n * l_t);
    for i in 0..n {
        let x = &raw[i * raw_dim..(i + 1) * raw_dim];
        for o in 0..l_t {
            let row = &w[o * raw_dim..(o + 1) * raw_dim];
            let mut acc = b[o] as f64;
            for (wv, xv) in row.iter().zip(x) {
                acc += *wv as f64 * *xv as f64;
            }
            out.push(acc as F);
        }
    }
    out
}
