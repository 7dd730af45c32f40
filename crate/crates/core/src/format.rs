//! Binary containers for schedules (`GRSC`) and corpora (`GRCO`). All
//! integers and floats are little-endian.

use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::grit::{EpochSchedule, Provenance, ScheduleError};
use crate::toymodel::{CorpusSpec, SyntheticCorpus};
use crate::types::ExampleId;

pub const SCHEDULE_MAGIC: [u8; 4] = *b"GRSC";
pub const CORPUS_MAGIC: [u8; 4] = *b"GRCO";
pub const SCHEDULE_VERSION: u32 = 1;
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("file truncated at byte offset {offset}: needed {needed} more bytes")]
    TruncatedFile { offset: usize, needed: usize },
    #[error("{extra} unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("invalid contents: {0}")]
    Invalid(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(FormatError::TruncatedFile { offset: self.buf.len(), needed: n - left });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const K: usize>(&mut self) -> Result<[u8; K], FormatError> {
        Ok(self.take(K)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize, FormatError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| FormatError::Invalid(format!("{v} does not fit in usize")))
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> Result<(), FormatError> {
        let found = self.array::<4>()?;
        if found != magic {
            return Err(FormatError::BadMagic { expected: magic, found });
        }
        let v = self.u32()?;
        if v != version {
            return Err(FormatError::VersionUnsupported(v));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::TrailingBytes { offset: self.pos, extra: self.buf.len() - self.pos });
        }
        Ok(())
    }
}

pub fn encode_schedule(schedule: &EpochSchedule) -> Vec<u8> {
    let d = schedule.dataset_size();
    let mut out = Vec::with_capacity(20 + 4 * d);
    out.extend_from_slice(&SCHEDULE_MAGIC);
    out.extend_from_slice(&SCHEDULE_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(schedule.batch_size as u32).to_le_bytes());
    for id in schedule.batches.iter().flatten() {
        out.extend_from_slice(&id.0.to_le_bytes());
    }
    out
}

/// The file carries no epoch number; the result is tagged epoch 0 and
/// [`Provenance::Loaded`].
pub fn decode_schedule(bytes: &[u8]) -> Result<EpochSchedule, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(SCHEDULE_MAGIC, SCHEDULE_VERSION)?;
    let d = r.usize()?;
    let n = r.u32()? as usize;
    if n == 0 {
        return Err(FormatError::Invalid("batch size 0".into()));
    }
    let needed = d.checked_mul(4).ok_or_else(|| FormatError::Invalid(format!("D = {d} overflows")))?;
    let body = r.take(needed)?;
    r.finish()?;
    let order = body
        .chunks_exact(4)
        .map(|c| ExampleId(u32::from_le_bytes(c.try_into().expect("chunk of 4"))))
        .collect();
    Ok(EpochSchedule::from_order(order, n, 0, Provenance::Loaded)?)
}

pub fn save_schedule(schedule: &EpochSchedule, path: &Path) -> Result<(), FormatError> {
    Ok(std::fs::write(path, encode_schedule(schedule))?)
}

pub fn load_schedule(path: &Path) -> Result<EpochSchedule, FormatError> {
    decode_schedule(&std::fs::read(path)?)
}

pub fn encode_corpus(corpus: &SyntheticCorpus) -> Vec<u8> {
    let s = &corpus.spec;
    let mut out = Vec::new();
    out.extend_from_slice(&CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    for v in [
        s.n_clusters,
        s.dataset_size,
        s.eval_size,
        s.image_dim,
        s.seq_len,
        s.topic_tokens_per_cluster,
        s.n_attributes,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in [s.attribute_fraction, s.noise, s.signature_noise, s.centroid_scale] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.seed.to_le_bytes());
    for l in &corpus.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for t in corpus.tokens.iter() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for x in corpus.images.iter().chain(corpus.centroids.iter()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_corpus(bytes: &[u8]) -> Result<SyntheticCorpus, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(CORPUS_MAGIC, CORPUS_VERSION)?;
    let spec = CorpusSpec {
        n_clusters: r.usize()?,
        dataset_size: r.usize()?,
        eval_size: r.usize()?,
        image_dim: r.usize()?,
        seq_len: r.usize()?,
        topic_tokens_per_cluster: r.usize()?,
        n_attributes: r.usize()?,
        attribute_fraction: r.f64()?,
        noise: r.f64()?,
        signature_noise: r.f64()?,
        centroid_scale: r.f64()?,
        seed: r.u64()?,
    };
    let total = spec.total();
    let vocab = spec.vocab();
    let count = |a: usize, b: usize| {
        a.checked_mul(b).ok_or_else(|| FormatError::Invalid("array size overflows".into()))
    };
    let labels: Vec<u32> = (0..total).map(|_| r.u32()).collect::<Result<_, _>>()?;
    if let Some(l) = labels.iter().find(|&&l| l as usize >= spec.n_clusters) {
        return Err(FormatError::Invalid(format!("label {l} outside {} clusters", spec.n_clusters)));
    }
    let n_tok = count(total, spec.seq_len)?;
    let tokens: Vec<u32> = (0..n_tok).map(|_| r.u32()).collect::<Result<_, _>>()?;
    if let Some(t) = tokens.iter().find(|&&t| t >= vocab.size) {
        return Err(FormatError::Invalid(format!("token {t} outside vocabulary of {}", vocab.size)));
    }
    let n_img = count(total, spec.image_dim)?;
    let images: Vec<f64> = (0..n_img).map(|_| r.f64()).collect::<Result<_, _>>()?;
    let n_cen = count(spec.n_clusters, spec.image_dim)?;
    let centroids: Vec<f64> = (0..n_cen).map(|_| r.f64()).collect::<Result<_, _>>()?;
    r.finish()?;
    fn shape<T>(rows: usize, cols: usize, v: Vec<T>) -> Array2<T> {
        Array2::from_shape_vec((rows, cols), v).expect("sized above")
    }
    Ok(SyntheticCorpus {
        vocab,
        tokens: shape(total, spec.seq_len, tokens),
        images: shape(total, spec.image_dim, images),
        centroids: shape(spec.n_clusters, spec.image_dim, centroids),
        labels,
        spec,
    })
}

pub fn save_corpus(corpus: &SyntheticCorpus, path: &Path) -> Result<(), FormatError> {
    Ok(std::fs::write(path, encode_corpus(corpus))?)
}

pub fn load_corpus(path: &Path) -> Result<SyntheticCorpus, FormatError> {
    decode_corpus(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grit::first_epoch_schedule;
    use crate::rng::{derive_stream, StreamLabel};

    fn sample() -> EpochSchedule {
        let mut s = first_epoch_schedule(480, 96, 0, &mut derive_stream(9, StreamLabel::ExampleShuffle));
        s.provenance = Provenance::Loaded;
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode_schedule(&sample());
        assert_eq!(&bytes[..4], b"GRSC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 480);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 96);
        assert_eq!(bytes.len(), 20 + 4 * 480);
    }

    #[test]
    fn schedule_round_trip() {
        let s = sample();
        assert_eq!(decode_schedule(&encode_schedule(&s)).unwrap(), s);
    }

    #[test]
    fn corrupt_schedules() {
        let bytes = encode_schedule(&sample());
        let mut flipped = bytes.clone();
        flipped[0] ^= 1;
        assert!(matches!(decode_schedule(&flipped), Err(FormatError::BadMagic { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_schedule(&v2), Err(FormatError::VersionUnsupported(2))));
        assert!(matches!(
            decode_schedule(&bytes[..bytes.len() - 6]),
            Err(FormatError::TruncatedFile { offset, needed: 6 }) if offset == bytes.len() - 6
        ));
        let mut dup = bytes.clone();
        dup[20..24].copy_from_slice(&bytes[24..28]);
        assert!(matches!(decode_schedule(&dup), Err(FormatError::Schedule(ScheduleError::NotAPermutation(_)))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_schedule(&extra), Err(FormatError::TrailingBytes { .. })));
    }

    #[test]
    fn corpus_round_trip() {
        let spec = CorpusSpec { n_clusters: 4, dataset_size: 64, eval_size: 8, image_dim: 6, seed: 3, ..Default::default() };
        let c = SyntheticCorpus::from_spec(&spec).unwrap();
        let bytes = encode_corpus(&c);
        assert_eq!(decode_corpus(&bytes).unwrap(), c);
        assert!(matches!(decode_corpus(&bytes[..bytes.len() - 1]), Err(FormatError::TruncatedFile { .. })));
    }
}
