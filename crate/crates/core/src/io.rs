//! Binary file formats. Every file opens with a five-byte ASCII magic; counts
//! are little-endian `u64`, reals little-endian IEEE-754 `f64`, and class
//! labels little-endian `u32`.
//!
//! | magic   | contents                                                        |
//! |---------|-----------------------------------------------------------------|
//! | `SSTM1` | rows, cols, row-major entries                                   |
//! | `SSTT1` | K, frames, then K probabilities per frame                       |
//! | `SSTA1` | frames, then one `u32` label per frame                          |
//! | `SSEB1` | class, K, l, σ, mean (K), kept eigenvalues (l), basis (K×l)      |
//! | `SSDC1` | class, K, d, λ, atoms (K×d)                                     |
//! | `SSNN1` | layer count, sizes, per layer weights and biases, seed, epochs  |

use std::fs;
use std::path::Path;

use crate::eigenposterior::EigenposteriorBasis;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::posterior::{Alignment, PosteriorVector};
use crate::softnet::{Dense, MlpModel};
use crate::sparse::SparseDictionary;

pub const MATRIX_MAGIC: &[u8; 5] = b"SSTM1";
pub const TARGETS_MAGIC: &[u8; 5] = b"SSTT1";
pub const ALIGNMENT_MAGIC: &[u8; 5] = b"SSTA1";
pub const BASIS_MAGIC: &[u8; 5] = b"SSEB1";
pub const DICTIONARY_MAGIC: &[u8; 5] = b"SSDC1";
pub const MODEL_MAGIC: &[u8; 5] = b"SSNN1";

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 5]) -> Self {
        Self {
            buf: magic.to_vec(),
        }
    }

    fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn count(&mut self, v: usize) -> &mut Self {
        self.u64(v as u64)
    }

    fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn reals(&mut self, vs: &[f64]) -> &mut Self {
        for v in vs {
            self.f64(*v);
        }
        self
    }

    fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 5], what: &'static str) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..5] != magic {
            return Err(Error::Format(format!(
                "{what}: expected magic {}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Self { bytes, at: 5, what })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("{}: truncated file", self.what))),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{}: count {v} too large", self.what)))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes_needed = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?;
        let raw = self.take(bytes_needed)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn product(a: usize, b: usize, what: &str) -> Result<usize> {
    a.checked_mul(b)
        .ok_or_else(|| Error::Format(format!("{what}: size overflow")))
}

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    Writer::new(MATRIX_MAGIC)
        .count(m.rows())
        .count(m.cols())
        .reals(m.as_slice())
        .finish()
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(bytes, MATRIX_MAGIC, "matrix")?;
    let rows = r.count()?;
    let cols = r.count()?;
    let data = r.reals(product(rows, cols, "matrix")?)?;
    r.done()?;
    Matrix::new(rows, cols, data)
}

/// Soft targets are stored as given; quantize before encoding.
pub fn encode_targets(targets: &[PosteriorVector], class_count: usize) -> Result<Vec<u8>> {
    if targets.iter().any(|t| t.class_count() != class_count) {
        return Err(Error::InvalidInput("targets disagree on K".into()));
    }
    let mut w = Writer::new(TARGETS_MAGIC);
    w.count(class_count).count(targets.len());
    for t in targets {
        w.reals(t.probs());
    }
    Ok(w.finish())
}

pub fn decode_targets(bytes: &[u8]) -> Result<Vec<PosteriorVector>> {
    let mut r = Reader::new(bytes, TARGETS_MAGIC, "soft targets")?;
    let k = r.count()?;
    let frames = r.count()?;
    product(k, frames, "soft targets")?;
    let mut out = Vec::with_capacity(frames.min(1 << 20));
    for _ in 0..frames {
        out.push(PosteriorVector::new(r.reals(k)?)?);
    }
    r.done()?;
    Ok(out)
}

pub fn encode_alignment(a: &Alignment) -> Vec<u8> {
    let mut w = Writer::new(ALIGNMENT_MAGIC);
    w.count(a.len());
    for l in a.labels() {
        w.buf.extend_from_slice(&l.to_le_bytes());
    }
    w.finish()
}

/// The file does not carry K, so the caller supplies it for validation.
pub fn decode_alignment(bytes: &[u8], class_count: usize) -> Result<Alignment> {
    let mut r = Reader::new(bytes, ALIGNMENT_MAGIC, "alignment")?;
    let frames = r.count()?;
    let mut labels = Vec::with_capacity(frames.min(1 << 20));
    for _ in 0..frames {
        labels.push(r.u32()?);
    }
    r.done()?;
    Alignment::new(labels, class_count)
}

pub fn encode_basis(b: &EigenposteriorBasis) -> Vec<u8> {
    Writer::new(BASIS_MAGIC)
        .count(b.class_id)
        .count(b.class_count())
        .count(b.rank())
        .f64(b.variance_fraction)
        .reals(&b.mean_log)
        .reals(&b.kept_eigenvalues)
        .reals(b.basis.as_slice())
        .finish()
}

pub fn decode_basis(bytes: &[u8]) -> Result<EigenposteriorBasis> {
    let mut r = Reader::new(bytes, BASIS_MAGIC, "basis")?;
    let class_id = r.count()?;
    let k = r.count()?;
    let l = r.count()?;
    let sigma = r.f64()?;
    let mean_log = r.reals(k)?;
    let kept = r.reals(l)?;
    let basis = Matrix::new(k, l, r.reals(product(k, l, "basis")?)?)?;
    r.done()?;
    Ok(EigenposteriorBasis {
        class_id,
        mean_log,
        basis,
        spectrum: kept.clone(),
        kept_eigenvalues: kept,
        variance_fraction: sigma,
    })
}

pub fn encode_dictionary(d: &SparseDictionary) -> Vec<u8> {
    Writer::new(DICTIONARY_MAGIC)
        .count(d.class_id)
        .count(d.class_count())
        .count(d.atom_count())
        .f64(d.lambda_train)
        .reals(d.atoms.as_slice())
        .finish()
}

pub fn decode_dictionary(bytes: &[u8]) -> Result<SparseDictionary> {
    let mut r = Reader::new(bytes, DICTIONARY_MAGIC, "dictionary")?;
    let class_id = r.count()?;
    let k = r.count()?;
    let d = r.count()?;
    let lambda_train = r.f64()?;
    let atoms = Matrix::new(k, d, r.reals(product(k, d, "dictionary")?)?)?;
    r.done()?;
    Ok(SparseDictionary {
        class_id,
        atoms,
        lambda_train,
    })
}

pub fn encode_model(m: &MlpModel) -> Vec<u8> {
    let mut w = Writer::new(MODEL_MAGIC);
    w.count(m.layer_sizes.len());
    for s in &m.layer_sizes {
        w.count(*s);
    }
    for l in &m.layers {
        w.reals(l.weights.as_slice()).reals(&l.bias);
    }
    w.u64(m.seed).u64(m.epochs_trained);
    w.finish()
}

pub fn decode_model(bytes: &[u8]) -> Result<MlpModel> {
    let mut r = Reader::new(bytes, MODEL_MAGIC, "model")?;
    let n = r.count()?;
    if !(2..=1024).contains(&n) {
        return Err(Error::Format(format!("model: implausible layer count {n}")));
    }
    let sizes = (0..n).map(|_| r.count()).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n - 1);
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = Matrix::new(
            fan_out,
            fan_in,
            r.reals(product(fan_in, fan_out, "model")?)?,
        )?;
        let bias = r.reals(fan_out)?;
        layers.push(Dense { weights, bias });
    }
    let seed = r.u64()?;
    let epochs_trained = r.u64()?;
    r.done()?;
    Ok(MlpModel {
        layer_sizes: sizes,
        layers,
        seed,
        epochs_trained,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    decode_matrix(&fs::read(path)?)
}

pub fn read_targets(path: &Path) -> Result<Vec<PosteriorVector>> {
    decode_targets(&fs::read(path)?)
}

pub fn read_alignment(path: &Path, class_count: usize) -> Result<Alignment> {
    decode_alignment(&fs::read(path)?, class_count)
}

pub fn read_basis(path: &Path) -> Result<EigenposteriorBasis> {
    decode_basis(&fs::read(path)?)
}

pub fn read_dictionary(path: &Path) -> Result<SparseDictionary> {
    decode_dictionary(&fs::read(path)?)
}

pub fn read_model(path: &Path) -> Result<MlpModel> {
    decode_model(&fs::read(path)?)
}
