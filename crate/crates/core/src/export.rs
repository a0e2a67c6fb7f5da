//! Matrix text files, heatmap images and pair explanations.
//!
//! Text format: a `rows cols` header line, then one whitespace-separated row
//! per line. Values are written in shortest round-trip form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::autograd::{Mat, Tape};
use crate::error::{Error, Result};
use crate::model::Model;

pub fn matrix_to_string(m: &Mat) -> String {
    let mut s = format!("{} {}\n", m.nrows(), m.ncols());
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(s, "{}", cells.join(" ")).unwrap();
    }
    s
}

pub fn parse_matrix(text: &str, path: &Path) -> Result<Mat> {
    let bad = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| bad(1, format!("bad dimension `{t}`: {e}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else { return Err(bad(1, "header must be `rows cols`".into())) };
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate().take(rows) {
        let before = data.len();
        for t in line.split_whitespace() {
            data.push(t.parse::<f64>().map_err(|e| bad(i + 2, format!("bad value `{t}`: {e}")))?);
        }
        if data.len() - before != cols {
            return Err(bad(i + 2, format!("expected {cols} values, found {}", data.len() - before)));
        }
    }
    if data.len() != rows * cols {
        return Err(bad(rows + 1, format!("expected {rows} rows")));
    }
    Mat::from_shape_vec((rows, cols), data).map_err(|e| bad(1, e.to_string()))
}

pub fn write_matrix(path: &Path, m: &Mat) -> Result<()> {
    std::fs::write(path, matrix_to_string(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Mat> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_matrix(&std::fs::read_to_string(path)?, path)
}

/// Diverging colour: blue for negative, white for zero, red for positive.
fn colour(v: f64, scale: f64) -> Rgb<u8> {
    let x = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
    if x >= 0.0 {
        Rgb([255, fade(x), fade(x)])
    } else {
        Rgb([fade(-x), fade(-x), 255])
    }
}

/// Heatmap with square cells, colour scaled to the largest absolute entry.
pub fn heatmap(m: &Mat) -> RgbImage {
    let longest = m.nrows().max(m.ncols()).max(1) as u32;
    let cell = (480 / longest).clamp(1, 32);
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut img = RgbImage::new(cell * m.ncols().max(1) as u32, cell * m.nrows().max(1) as u32);
    for ((r, c), &v) in m.indexed_iter() {
        let px = colour(v, scale);
        for dy in 0..cell {
            for dx in 0..cell {
                img.put_pixel(c as u32 * cell + dx, r as u32 * cell + dy, px);
            }
        }
    }
    img
}

pub fn write_heatmap(path: &Path, m: &Mat) -> Result<()> {
    heatmap(m).save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Interaction matrices of one ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub semantic: Option<Mat>,
    pub legal: Option<Mat>,
    /// `ψ^X_i · c^(L)_ij · ψ^Y_j`
    pub aia_weighted: Option<Mat>,
}

impl Explanation {
    pub fn compute(model: &Model, x_emb: &Mat, y_emb: &Mat) -> Result<Self> {
        let t = Tape::new();
        let protos = model.prototypes(&t);
        let xs = model.case_side(&t, x_emb, protos)?;
        let ys = model.case_side(&t, y_emb, protos)?;
        let out = model.forward_pair(&t, &xs, &ys, None)?;
        let semantic = out.semantic.as_ref().map(|s| t.value(s.correlation).clone());
        let legal = out.c_l.map(|c| t.value(c).clone());
        let aia_weighted = match (&legal, &out.aia_x, &out.aia_y) {
            (Some(c), Some(ax), Some(ay)) => {
                let (px, py) = (t.to_vec(ax.psi), t.to_vec(ay.psi));
                Some(Mat::from_shape_fn(c.dim(), |(i, j)| px[i] * c[[i, j]] * py[j]))
            }
            _ => None,
        };
        Ok(Self { semantic, legal, aia_weighted })
    }

    /// Write each present matrix as `<name>.txt` and `<name>.png`; returns the text files.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, m) in [("semantic", &self.semantic), ("legal", &self.legal), ("aia_weighted", &self.aia_weighted)] {
            if let Some(m) = m {
                let txt = dir.join(format!("{name}.txt"));
                write_matrix(&txt, m)?;
                write_heatmap(&dir.join(format!("{name}.png")), m)?;
                written.push(txt);
            }
        }
        Ok(written)
    }
}
