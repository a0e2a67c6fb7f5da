//! The assembled matching network.
//!
//! Work splits into a per-case side (context encoding, article attention and
//! the article classifier) that depends on one case only, and the pair
//! interaction. The side can run on the tape from embeddings or be rebuilt
//! from stored `(embeddings, Λ, V)`, which is what makes candidate
//! precomputation possible.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Mat, Tape, Var};
use crate::bim::{self, BimParams, SemanticOutput};
use crate::config::{ModelConfig, Variant};
use crate::data::{hex, Case};
use crate::error::{Error, Result};
use crate::heads::{self, MatchHeadParams};
use crate::lim::{self, AiaOutput, ArticleDistribution, LegalOutput, LimParams};
use crate::losses::RationaleHead;
use crate::params::ParamStore;

pub const ARTICLE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub label_levels: usize,
    /// Article ids in row order of `article_embs`, sorted.
    pub article_ids: Vec<String>,
    pub article_embs: Mat,
    pub encoder_name: String,
    pub store: ParamStore,
    pub bim: Option<BimParams>,
    pub lim: Option<LimParams>,
    pub head: MatchHeadParams,
    pub rationale: Option<RationaleHead>,
}

/// Candidate-side tensors that do not depend on the other case.
#[derive(Debug, Clone, PartialEq)]
pub struct SideTensors {
    pub emb: Mat,
    /// `[n × n_L]`, present when the legal branch runs.
    pub lambda: Option<Mat>,
    /// `[n × d_h]`, present when the legal branch runs.
    pub values: Option<Mat>,
}

/// Per-case nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CaseSide {
    pub emb: Var,
    pub dist: Option<ArticleDistribution>,
    /// `1 × n_L` cosines against the prototypes.
    pub cosines: Option<Var>,
    pub probs: Option<Var>,
}

/// Every intermediate of one pair.
pub struct PairOutput {
    pub xf: Var,
    pub yf: Var,
    pub semantic: Option<SemanticOutput>,
    pub c_l: Option<Var>,
    pub legal: Option<LegalOutput>,
    pub aia_x: Option<AiaOutput>,
    pub aia_y: Option<AiaOutput>,
    pub predicted_x: Vec<usize>,
    pub predicted_y: Vec<usize>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        label_levels: usize,
        article_ids: Vec<String>,
        article_embs: Mat,
        encoder_name: impl Into<String>,
    ) -> Result<Self> {
        config.validate()?;
        if label_levels < 2 {
            return Err(Error::Config(format!("need at least 2 label levels, got {label_levels}")));
        }
        if article_embs.nrows() != article_ids.len() {
            return Err(Error::Shape(format!(
                "{} article ids for {} embedding rows",
                article_ids.len(),
                article_embs.nrows()
            )));
        }
        if article_embs.ncols() != config.d_b {
            return Err(Error::Shape(format!(
                "article embeddings have width {}, d_b is {}",
                article_embs.ncols(),
                config.d_b
            )));
        }
        let v = config.variant;
        if v.has_lim() && article_ids.is_empty() {
            return Err(Error::Empty("the legal branch needs at least one law article".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        let bim = v.uses_semantic().then(|| BimParams::new(&mut store, &mut rng, config.d_b, config.d_s));
        let lim = v.has_lim().then(|| {
            LimParams::new(&mut store, &mut rng, &article_embs, config.d_b, config.d_h, config.d_l)
        });
        let head = MatchHeadParams::new(&mut store, &mut rng, config.final_width(), label_levels);
        let rationale = (config.loss.enable_rationale && v.has_lim())
            .then(|| RationaleHead::new(&mut store, &mut rng, config.d_h));
        Ok(Self { config, label_levels, article_ids, article_embs, encoder_name: encoder_name.into(), store, bim, lim, head, rationale })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn n_articles(&self) -> usize {
        self.article_ids.len()
    }

    /// Binary article labels of a case over the model's article order.
    pub fn article_labels(&self, case: &Case) -> Vec<bool> {
        self.article_ids.iter().map(|id| case.cited_article_ids.contains(id)).collect()
    }

    pub fn article_indices(&self, case: &Case) -> Vec<usize> {
        self.article_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| case.cited_article_ids.contains(*id))
            .map(|(k, _)| k)
            .collect()
    }

    /// Article prototypes `[n_L × d_h]` bound on the tape.
    pub fn prototypes(&self, t: &Tape) -> Option<Var> {
        let lim = self.lim.as_ref()?;
        Some(lim::prototypes(t, &self.store, lim, t.leaf(self.article_embs.clone())))
    }

    fn check_emb(&self, emb: &Mat) -> Result<()> {
        if emb.nrows() == 0 {
            return Err(Error::Empty("case with zero sentences".into()));
        }
        if emb.ncols() != self.config.d_b {
            return Err(Error::Shape(format!("sentence embeddings have width {}, d_b is {}", emb.ncols(), self.config.d_b)));
        }
        Ok(())
    }

    fn finish_side(&self, t: &Tape, emb: Var, dist: Option<ArticleDistribution>, protos: Option<Var>) -> Result<CaseSide> {
        let (cosines, probs) = match (dist, protos) {
            (Some(d), Some(p)) => {
                let cos = lim::article_cosines(t, d.reps, p)?;
                (Some(cos), Some(t.sigmoid(cos)))
            }
            _ => (None, None),
        };
        Ok(CaseSide { emb, dist, cosines, probs })
    }

    /// Case side computed from sentence embeddings.
    pub fn case_side(&self, t: &Tape, emb: &Mat, protos: Option<Var>) -> Result<CaseSide> {
        self.check_emb(emb)?;
        let e = t.leaf(emb.clone());
        let dist = match &self.lim {
            Some(lim) => {
                let h = lim.context_rnn.forward(t, &self.store, e);
                Some(lim::article_attention(t, &self.store, &lim.attention, h)?)
            }
            None => None,
        };
        self.finish_side(t, e, dist, protos)
    }

    /// Case side rebuilt from stored tensors.
    pub fn case_side_cached(&self, t: &Tape, side: &SideTensors, protos: Option<Var>) -> Result<CaseSide> {
        self.check_emb(&side.emb)?;
        let e = t.leaf(side.emb.clone());
        let dist = match (&self.lim, &side.lambda, &side.values) {
            (Some(_), Some(l), Some(v)) => {
                if l.dim() != (side.emb.nrows(), self.n_articles()) || v.dim() != (side.emb.nrows(), self.config.d_h) {
                    return Err(Error::Shape("cached side tensors do not match the model".into()));
                }
                Some(lim::distribution_from(t, t.leaf(l.clone()), t.leaf(v.clone())))
            }
            (Some(_), _, _) => return Err(Error::Validation("cached side lacks legal tensors".into())),
            (None, _, _) => None,
        };
        self.finish_side(t, e, dist, protos)
    }

    /// Evaluate the offline-precomputable tensors of one case.
    pub fn side_tensors(&self, emb: &Mat) -> Result<SideTensors> {
        let t = Tape::new();
        let side = self.case_side(&t, emb, None)?;
        Ok(SideTensors {
            emb: emb.clone(),
            lambda: side.dist.map(|d| t.value(d.lambda).clone()),
            values: side.dist.map(|d| t.value(d.values).clone()),
        })
    }

    /// Article probabilities of one case, in model article order.
    pub fn article_probabilities(&self, emb: &Mat) -> Result<Vec<f64>> {
        let t = Tape::new();
        let protos = self.prototypes(&t);
        let side = self.case_side(&t, emb, protos)?;
        Ok(side.probs.map(|p| t.to_vec(p)).unwrap_or_default())
    }

    /// Legal correlation, or its ablation replacement.
    pub fn legal_matrix(&self, t: &Tape, x: &CaseSide, y: &CaseSide) -> Result<Var> {
        let (dx, dy) = match (x.dist, y.dist) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Validation("legal matrix requested without the legal branch".into())),
        };
        let (nx, ny) = (t.shape(dx.values).0, t.shape(dy.values).0);
        match self.variant() {
            Variant::LegalUnit => Ok(t.leaf(unit_pattern(nx, ny))),
            Variant::LegalRandom => Ok(t.leaf(random_pattern(self.config.seed, nx, ny))),
            Variant::LegalEmbeddingDistance => {
                Ok(t.matmul(t.normalize_rows(dx.values), t.transpose(t.normalize_rows(dy.values))))
            }
            _ => lim::legal_correlation(t, dx.lambda, dy.lambda),
        }
    }

    fn predicted(&self, t: &Tape, side: &CaseSide, gold: Option<&[usize]>) -> Vec<usize> {
        match gold {
            Some(g) => g.to_vec(),
            None => side.probs.map(|p| lim::predict_article_set(&t.to_vec(p), ARTICLE_THRESHOLD)).unwrap_or_default(),
        }
    }

    /// Full pair interaction. `gold` substitutes article sets in AIA (teacher forcing).
    pub fn forward_pair(
        &self,
        t: &Tape,
        x: &CaseSide,
        y: &CaseSide,
        gold: Option<(&[usize], &[usize])>,
    ) -> Result<PairOutput> {
        let v = self.variant();
        let semantic = match &self.bim {
            Some(b) => Some(bim::semantic_interaction_encode(t, &self.store, b, x.emb, y.emb)?),
            None => None,
        };
        let (mut c_l, mut legal, mut aia_x, mut aia_y) = (None, None, None, None);
        let (mut predicted_x, mut predicted_y) = (Vec::new(), Vec::new());
        if let Some(lp) = &self.lim {
            let (dx, dy) = (x.dist.expect("legal side"), y.dist.expect("legal side"));
            let c = self.legal_matrix(t, x, y)?;
            let out = lim::legal_interaction_encode(t, &self.store, lp, dx.values, dy.values, c)?;
            if v.uses_aia() {
                predicted_x = self.predicted(t, x, gold.map(|g| g.0));
                predicted_y = self.predicted(t, y, gold.map(|g| g.1));
                aia_x = Some(lim::article_intervened_attention(t, &self.store, lp, out.x_hidden, &predicted_x, &self.article_embs)?);
                aia_y = Some(lim::article_intervened_attention(t, &self.store, lp, out.y_hidden, &predicted_y, &self.article_embs)?);
            }
            c_l = Some(c);
            legal = Some(out);
        }
        let pick = |on: bool, a: Option<Var>| if on { a } else { None };
        let xf = heads::final_representation(
            t,
            &[
                pick(v.uses_semantic(), semantic.as_ref().map(|s| s.x_s)),
                pick(v.uses_legal(), legal.as_ref().map(|l| l.x_l)),
                pick(v.uses_aia(), aia_x.as_ref().map(|a| a.x_a)),
            ],
        )?;
        let yf = heads::final_representation(
            t,
            &[
                pick(v.uses_semantic(), semantic.as_ref().map(|s| s.y_s)),
                pick(v.uses_legal(), legal.as_ref().map(|l| l.y_l)),
                pick(v.uses_aia(), aia_y.as_ref().map(|a| a.x_a)),
            ],
        )?;
        Ok(PairOutput { xf, yf, semantic, c_l, legal, aia_x, aia_y, predicted_x, predicted_y })
    }

    pub fn match_probs(&self, t: &Tape, out: &PairOutput) -> Result<Var> {
        heads::match_classify(t, &self.store, &self.head, out.xf, out.yf)
    }

    /// Retrieval score of two stored sides.
    pub fn score_sides(&self, x: &SideTensors, y: &SideTensors) -> Result<f64> {
        let t = Tape::new();
        let protos = self.prototypes(&t);
        let xs = self.case_side_cached(&t, x, protos)?;
        let ys = self.case_side_cached(&t, y, protos)?;
        let out = self.forward_pair(&t, &xs, &ys, None)?;
        Ok(t.scalar(heads::retrieval_score(&t, out.xf, out.yf)))
    }

    /// Retrieval score computed entirely from embeddings.
    pub fn score_online(&self, x_emb: &Mat, y_emb: &Mat) -> Result<f64> {
        let t = Tape::new();
        let protos = self.prototypes(&t);
        let xs = self.case_side(&t, x_emb, protos)?;
        let ys = self.case_side(&t, y_emb, protos)?;
        let out = self.forward_pair(&t, &xs, &ys, None)?;
        Ok(t.scalar(heads::retrieval_score(&t, out.xf, out.yf)))
    }

    /// Match-level distribution of an ordered pair; `symmetric` averages both orders.
    pub fn classify_sides(&self, x: &SideTensors, y: &SideTensors, symmetric: bool) -> Result<Vec<f64>> {
        let run = |a: &SideTensors, b: &SideTensors| -> Result<Vec<f64>> {
            let t = Tape::new();
            let protos = self.prototypes(&t);
            let xs = self.case_side_cached(&t, a, protos)?;
            let ys = self.case_side_cached(&t, b, protos)?;
            let out = self.forward_pair(&t, &xs, &ys, None)?;
            Ok(t.to_vec(self.match_probs(&t, &out)?))
        };
        let mut p = run(x, y)?;
        if symmetric {
            let q = run(y, x)?;
            p.iter_mut().zip(q).for_each(|(a, b)| *a = 0.5 * (*a + b));
        }
        Ok(p)
    }

    /// SHA-256 over configuration, parameters, articles and encoder identity.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"lawmatch-model\0");
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update((self.label_levels as u64).to_le_bytes());
        for id in &self.article_ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        for x in self.article_embs.iter() {
            h.update(x.to_bits().to_le_bytes());
        }
        h.update(self.encoder_name.as_bytes());
        self.store.digest(&mut h);
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let m: Model = serde_json::from_reader(f)?;
        m.config.validate()?;
        Ok(m)
    }

    /// Named parameter shapes, for logs.
    pub fn parameter_summary(&self) -> BTreeMap<String, (usize, usize)> {
        self.store.ids().map(|id| (self.store.name(id).to_string(), self.store.get(id).dim())).collect()
    }
}

/// Ones on `i == j`, truncated to the rectangle.
pub fn unit_pattern(nx: usize, ny: usize) -> Mat {
    Mat::from_shape_fn((nx, ny), |(i, j)| if i == j { 1.0 } else { 0.0 })
}

/// Uniform noise in `[−1, 1]` keyed by the run seed and the shape.
pub fn random_pattern(seed: u64, nx: usize, ny: usize) -> Mat {
    let key = ((nx as u64) << 32 | ny as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key);
    Mat::from_shape_fn((nx, ny), |_| rng.gen_range(-1.0..=1.0))
}
