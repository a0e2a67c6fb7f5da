//! Offline candidate-side tensors, one binary container per candidate plus a
//! JSON manifest recording the model fingerprint they were produced with.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::data::{hex, Case};
use crate::encoder::{encode_case, SentenceEncoder};
use crate::error::{Error, Result};
use crate::model::{Model, SideTensors};

const MAGIC: &[u8; 8] = b"LMCAND01";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCache {
    pub candidate_id: String,
    pub fingerprint: String,
    pub side: SideTensors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fingerprint: String,
    pub encoder: String,
    pub candidates: Vec<String>,
}

pub fn candidate_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{}.bin", hex(id.as_bytes())))
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line: 0, msg: msg.into() }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read, path: &Path) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| bad(path, e.to_string()))
}

fn write_mat(w: &mut impl Write, m: Option<&Mat>) -> Result<()> {
    let Some(m) = m else {
        w.write_u8(0)?;
        return Ok(());
    };
    w.write_u8(1)?;
    w.write_u64::<LittleEndian>(m.nrows() as u64)?;
    w.write_u64::<LittleEndian>(m.ncols() as u64)?;
    for x in m.iter() {
        w.write_f64::<LittleEndian>(*x)?;
    }
    Ok(())
}

fn read_mat(r: &mut impl Read, path: &Path) -> Result<Option<Mat>> {
    match r.read_u8()? {
        0 => Ok(None),
        1 => {
            let rows = r.read_u64::<LittleEndian>()? as usize;
            let cols = r.read_u64::<LittleEndian>()? as usize;
            let mut v = vec![0.0; rows * cols];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            Mat::from_shape_vec((rows, cols), v).map(Some).map_err(|e| bad(path, e.to_string()))
        }
        t => Err(bad(path, format!("unknown tensor tag {t}"))),
    }
}

impl CandidateCache {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = candidate_path(dir, &self.candidate_id);
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            write_str(&mut w, &self.fingerprint)?;
            write_str(&mut w, &self.candidate_id)?;
            write_mat(&mut w, Some(&self.side.emb))?;
            write_mat(&mut w, self.side.lambda.as_ref())?;
            write_mat(&mut w, self.side.values.as_ref())?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Read a container without checking its fingerprint.
    pub fn read(dir: &Path, id: &str) -> Result<Self> {
        let path = candidate_path(dir, id);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let mut r = BufReader::new(File::open(&path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad(&path, "not a candidate cache file"));
        }
        let fingerprint = read_str(&mut r, &path)?;
        let candidate_id = read_str(&mut r, &path)?;
        if candidate_id != id {
            return Err(bad(&path, format!("holds candidate {candidate_id}, expected {id}")));
        }
        let emb = read_mat(&mut r, &path)?.ok_or_else(|| bad(&path, "missing embeddings"))?;
        let lambda = read_mat(&mut r, &path)?;
        let values = read_mat(&mut r, &path)?;
        Ok(Self { candidate_id, fingerprint, side: SideTensors { emb, lambda, values } })
    }

    /// Read a container and require it to match `fingerprint`.
    pub fn load(dir: &Path, id: &str, fingerprint: &str) -> Result<Self> {
        if let Some(m) = read_manifest(dir)? {
            if m.fingerprint != fingerprint {
                return Err(Error::StaleCache { id: id.into(), expected: fingerprint.into(), found: m.fingerprint });
            }
        }
        let c = Self::read(dir, id)?;
        if c.fingerprint != fingerprint {
            return Err(Error::StaleCache { id: id.into(), expected: fingerprint.into(), found: c.fingerprint });
        }
        Ok(c)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?))
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

/// Candidate tensors for `case`, reusing a valid stored container without
/// touching the encoder.
pub fn precompute_candidate(case: &Case, model: &Model, enc: &dyn SentenceEncoder, dir: &Path) -> Result<CandidateCache> {
    let fp = model.fingerprint();
    precompute_with(case, model, &fp, enc, dir)
}

fn precompute_with(case: &Case, model: &Model, fp: &str, enc: &dyn SentenceEncoder, dir: &Path) -> Result<CandidateCache> {
    if let Ok(c) = CandidateCache::read(dir, &case.id) {
        if c.fingerprint == fp {
            return Ok(c);
        }
    }
    let emb = encode_case(case, enc)?;
    let c = CandidateCache { candidate_id: case.id.clone(), fingerprint: fp.to_string(), side: model.side_tensors(&emb)? };
    c.save(dir)?;
    Ok(c)
}

/// Precompute a set of candidates on `jobs` threads and write the manifest.
pub fn precompute_all(
    cases: &[&Case],
    model: &Model,
    enc: &dyn SentenceEncoder,
    dir: &Path,
    jobs: usize,
) -> Result<Vec<CandidateCache>> {
    let fp = model.fingerprint();
    std::fs::create_dir_all(dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let out: Result<Vec<CandidateCache>> =
        pool.install(|| cases.par_iter().map(|c| precompute_with(c, model, &fp, enc, dir)).collect());
    let out = out?;
    let mut candidates: Vec<String> = match read_manifest(dir)? {
        Some(m) if m.fingerprint == fp => m.candidates,
        _ => Vec::new(),
    };
    candidates.extend(out.iter().map(|c| c.candidate_id.clone()));
    candidates.sort();
    candidates.dedup();
    write_manifest(dir, &Manifest { fingerprint: fp, encoder: model.encoder_name.clone(), candidates })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{make_synthetic_corpus, SyntheticSpec};
    use crate::encoder::{deterministic_test_encoder, encode_articles, CountingEncoder};

    fn fixture() -> (crate::data::Corpus, Model) {
        let corpus = make_synthetic_corpus(&SyntheticSpec::new(3, 12, 4)).unwrap();
        let enc = deterministic_test_encoder(8).unwrap();
        let (ids, embs) = encode_articles(&corpus, &enc).unwrap();
        let model = Model::new(ModelConfig::tiny(8), corpus.label_levels, ids, embs, "hash").unwrap();
        (corpus, model)
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let (corpus, model) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let enc = deterministic_test_encoder(8).unwrap();
        let case = corpus.cases.values().next().unwrap();
        let c = precompute_candidate(case, &model, &enc, dir.path()).unwrap();
        assert!(c.side.lambda.is_some() && c.side.values.is_some());
        let back = CandidateCache::load(dir.path(), &case.id, &model.fingerprint()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn stale_fingerprints_are_rejected() {
        let (corpus, model) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let enc = deterministic_test_encoder(8).unwrap();
        let cases: Vec<&Case> = corpus.cases.values().take(3).collect();
        precompute_all(&cases, &model, &enc, dir.path(), 2).unwrap();
        let mut other = model.clone();
        let id = other.store.ids().next().unwrap();
        other.store.get_mut(id)[[0, 0]] += 1e-3;
        let e = CandidateCache::load(dir.path(), &cases[0].id, &other.fingerprint()).unwrap_err();
        assert!(matches!(e, Error::StaleCache { .. }), "{e}");
        let manifest = read_manifest(dir.path()).unwrap().unwrap();
        assert_eq!(manifest.candidates.len(), 3);
        assert_eq!(manifest.fingerprint, model.fingerprint());
    }

    #[test]
    fn valid_containers_skip_the_encoder() {
        let (corpus, model) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let enc = CountingEncoder::new(deterministic_test_encoder(8).unwrap());
        let cases: Vec<&Case> = corpus.cases.values().take(4).collect();
        precompute_all(&cases, &model, &enc, dir.path(), 1).unwrap();
        assert_eq!(enc.calls(), 4);
        enc.reset();
        precompute_all(&cases, &model, &enc, dir.path(), 1).unwrap();
        assert_eq!(enc.calls(), 0);
    }

    #[test]
    fn corrupted_files_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(candidate_path(dir.path(), "c1"), b"garbage!more").unwrap();
        assert!(matches!(CandidateCache::read(dir.path(), "c1"), Err(Error::Parse { .. })));
        assert!(matches!(CandidateCache::read(dir.path(), "c2"), Err(Error::MissingFile(_))));
    }
}
