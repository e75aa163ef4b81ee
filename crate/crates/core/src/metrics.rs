//! Template-matching OCR, its accuracy/precision/recall/F report, a CLIP-score
//! proxy and a Fréchet-distance FID proxy over learned image features.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{Canvas, Glyph, Placed, CANVAS, GLYPH, MAX_POS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Matching cells a 5×5 window needs to count as a detection.
pub const DETECT_THRESHOLD: usize = 23;
/// Row/column slack when scoring detections against ground truth.
pub const POSITION_TOLERANCE: u8 = 1;

const GRID: usize = MAX_POS as usize + 1;

fn binarize(canvas: &Canvas, invert: bool) -> [[bool; CANVAS]; CANVAS] {
    let mut b = [[false; CANVAS]; CANVAS];
    for (r, row) in b.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = (canvas.get(r, c) >= 0.5) != invert;
        }
    }
    b
}

fn detect_polarity(bin: &[[bool; CANVAS]; CANVAS], threshold: usize) -> Vec<Placed> {
    let mut cands: Vec<(usize, Placed)> = Vec::new();
    for g in Glyph::ALL {
        let bm = g.bitmap();
        let mut score = [[0usize; GRID]; GRID];
        for (r, srow) in score.iter_mut().enumerate() {
            for (c, s) in srow.iter_mut().enumerate() {
                *s = (0..GLYPH)
                    .flat_map(|i| (0..GLYPH).map(move |j| (i, j)))
                    .filter(|&(i, j)| bin[r + i][c + j] == bm[i][j])
                    .count();
            }
        }
        for r in 0..GRID {
            for c in 0..GRID {
                let s = score[r][c];
                if s < threshold {
                    continue;
                }
                let is_max = (r.saturating_sub(1)..=(r + 1).min(GRID - 1))
                    .flat_map(|i| (c.saturating_sub(1)..=(c + 1).min(GRID - 1)).map(move |j| (i, j)))
                    .all(|(i, j)| score[i][j] <= s);
                if is_max {
                    cands.push((s, Placed::new(g, r as u8, c as u8)));
                }
            }
        }
    }
    // Highest score first; ties broken by position, then glyph.
    cands.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then((a.1.row, a.1.col, a.1.glyph).cmp(&(b.1.row, b.1.col, b.1.glyph)))
    });
    let mut kept: Vec<Placed> = Vec::new();
    for (_, p) in cands {
        let clash = kept
            .iter()
            .any(|k| (k.row as i32 - p.row as i32).abs() < GLYPH as i32 && (k.col as i32 - p.col as i32).abs() < GLYPH as i32);
        if !clash {
            kept.push(p);
        }
    }
    kept.sort_by_key(|p| (p.row, p.col, p.glyph));
    kept
}

/// Detects glyphs in either polarity; the polarity with more detections wins.
/// Ties go to the polarity with less ink: glyphs never cover half the canvas,
/// and an inverted BARS stamp reads as a shifted BARS in the wrong polarity.
/// Output is sorted by (row, col).
pub fn ocr_detect(canvas: &Canvas) -> Vec<Placed> {
    ocr_detect_with(canvas, DETECT_THRESHOLD)
}

pub fn ocr_detect_with(canvas: &Canvas, threshold: usize) -> Vec<Placed> {
    let (bin, inv) = (binarize(canvas, false), binarize(canvas, true));
    let ink = |b: &[[bool; CANVAS]; CANVAS]| b.iter().flatten().filter(|&&x| x).count();
    let direct = detect_polarity(&bin, threshold);
    let flipped = detect_polarity(&inv, threshold);
    if flipped.len() > direct.len() || (flipped.len() == direct.len() && ink(&inv) < ink(&bin)) {
        flipped
    } else {
        direct
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcrReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

fn f_measure(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Greedy one-to-one matching per image. Each detection (in order) takes the
/// nearest unmatched truth of the same glyph within the tolerance.
fn match_image(dets: &[Placed], truth: &[Placed], tol: u8) -> usize {
    let mut used = vec![false; truth.len()];
    let mut tp = 0;
    for d in dets {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(j, t)| !used[*j] && t.glyph == d.glyph && t.row.abs_diff(d.row) <= tol && t.col.abs_diff(d.col) <= tol)
            .min_by_key(|(j, t)| (t.row.abs_diff(d.row).max(t.col.abs_diff(d.col)), *j));
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    tp
}

/// Micro-averaged precision/recall/F over all images; accuracy is the share
/// of images whose detection set equals the truth set exactly.
pub fn ocr_metrics(detections: &[Vec<Placed>], truths: &[Vec<Placed>], tol: u8) -> Result<OcrReport> {
    if detections.len() != truths.len() {
        return Err(Error::Metric(format!(
            "{} detection lists for {} ground truths",
            detections.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Metric("no images to score".into()));
    }
    let (mut tp, mut fp, mut fneg, mut exact) = (0, 0, 0, 0);
    for (d, t) in detections.iter().zip(truths) {
        let m = match_image(d, t, tol);
        tp += m;
        fp += d.len() - m;
        fneg += t.len() - m;
        let mut ds = d.clone();
        let mut ts = t.clone();
        ds.sort();
        ts.sort();
        if ds == ts {
            exact += 1;
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
    Ok(OcrReport {
        accuracy: exact as f64 / truths.len() as f64,
        precision,
        recall,
        f_measure: f_measure(precision, recall),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
    })
}

/// Mean cosine between matched rows of `t` and `v`.
pub fn clip_proxy_score(t: &Tensor<f32>, v: &Tensor<f32>) -> Result<f64> {
    if t.shape() != v.shape() {
        return Err(crate::error::mismatch("clip_proxy", t.shape(), v.shape()).into());
    }
    if t.is_empty() {
        return Err(Error::Metric("empty batch".into()));
    }
    let n = t.rows();
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (t.row(i), v.row(i));
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Metric("zero embedding".into()));
        }
        total += (dot / (na * nb)).clamp(-1.0, 1.0);
    }
    Ok(total / n as f64)
}

/// Gaussian fit of feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMoments {
    pub mean: Vec<f64>,
    /// `d×d`, row-major.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureMoments {
    /// Sample mean and unbiased covariance of at least two rows.
    pub fn from_rows(x: &Tensor<f32>) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n < 2 {
            return Err(Error::Metric(format!("need at least 2 samples, got {n}")));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            let c: Vec<f64> = x.row(i).iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
            for a in 0..d {
                for b in a..d {
                    cov[a * d + b] += c[a] * c[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[a * d + b] / (n - 1) as f64;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        Ok(FeatureMoments { mean, cov, count: n })
    }

    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(crate::error::mismatch("moments", &[d, d], &[cov.len()]).into());
        }
        if count < 2 {
            return Err(Error::Metric(format!("need at least 2 samples, got {count}")));
        }
        Ok(FeatureMoments { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn to_matrix(d: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, data)
}

/// Principal square root of a symmetric PSD matrix (row-major `d×d`) via
/// `S = QΛQᵀ → QΛ^{1/2}Qᵀ`. Eigenvalues down to `−1e-8·(1+‖S‖_F)` are
/// clamped to zero; anything more negative is an error.
pub fn matrix_sqrt_psd(s: &[f64], d: usize) -> Result<Vec<f64>> {
    if s.len() != d * d || d == 0 {
        return Err(crate::error::mismatch("matrix_sqrt_psd", &[d, d], &[s.len()]).into());
    }
    let m = to_matrix(d, s);
    let scale = 1.0 + m.norm();
    for i in 0..d {
        for j in i + 1..d {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::Metric(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -1e-8 * scale) {
        return Err(Error::Metric(format!("matrix not positive semidefinite (eigenvalue {bad})")));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&root) * q.transpose();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = r[(i, j)];
        }
    }
    Ok(out)
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn fid_proxy(a: &FeatureMoments, b: &FeatureMoments) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(crate::error::mismatch("fid_proxy", &[d], &[b.dim()]).into());
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let s1 = matrix_sqrt_psd(&a.cov, d)?;
    let s1m = to_matrix(d, &s1);
    let inner = &s1m * to_matrix(d, &b.cov) * &s1m;
    let inner = (&inner + inner.transpose()) * 0.5;
    let inner: Vec<f64> = inner.transpose().as_slice().to_vec();
    let root = matrix_sqrt_psd(&inner, d)?;
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    let tr = trace(&a.cov) + trace(&b.cov) - 2.0 * trace(&root);
    let tr = if tr < 0.0 && tr > -1e-6 { 0.0 } else { tr };
    if tr < 0.0 {
        return Err(Error::Metric(format!("negative trace term {tr}")));
    }
    Ok(mean_term + tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_scene, SceneSpec, Style};

    #[test]
    fn detects_rendered_scene_and_blank() {
        let spec = SceneSpec::new(Style::Invert, vec![Placed::new(Glyph::D, 0, 0), Placed::new(Glyph::E, 6, 6)]).unwrap();
        assert_eq!(ocr_detect(&render_scene(&spec).unwrap()), spec.objects);
        assert!(ocr_detect(&Canvas::blank()).is_empty());
    }

    #[test]
    fn inverted_bars_keep_their_row() {
        // Complemented, BARS looks like BARS one row up; polarity must not flip.
        let spec = SceneSpec::new(Style::Invert, vec![Placed::new(Glyph::D, 4, 4)]).unwrap();
        assert_eq!(ocr_detect(&render_scene(&spec).unwrap()), spec.objects);
    }

    #[test]
    fn hand_counted_report() {
        let truth = vec![vec![Placed::new(Glyph::A, 0, 0), Placed::new(Glyph::B, 8, 8)]];
        let dets = vec![vec![Placed::new(Glyph::A, 1, 0), Placed::new(Glyph::C, 8, 8)]];
        let r = ocr_metrics(&dets, &truth, 1).unwrap();
        assert_eq!((r.precision, r.recall, r.f_measure), (0.5, 0.5, 0.5));
        assert_eq!(r.accuracy, 0.0);
        let none = ocr_metrics(&[vec![]], &truth[..1], 1).unwrap();
        assert_eq!((none.precision, none.recall, none.f_measure), (0.0, 0.0, 0.0));
        assert!(ocr_metrics(&[], &truth, 1).is_err());
    }

    #[test]
    fn sqrt_diagonal() {
        let r = matrix_sqrt_psd(&[4.0, 0.0, 0.0, 9.0], 2).unwrap();
        for (a, b) in r.iter().zip([2.0, 0.0, 0.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matrix_sqrt_psd(&[1.0, 2.0, 0.0, 1.0], 2).is_err());
        assert!(matrix_sqrt_psd(&[-1.0, 0.0, 0.0, 1.0], 2).is_err());
    }

    #[test]
    fn fid_one_dimensional() {
        let a = FeatureMoments::new(vec![0.0], vec![1.0], 2).unwrap();
        let b = FeatureMoments::new(vec![1.0], vec![4.0], 2).unwrap();
        assert!((fid_proxy(&a, &b).unwrap() - 2.0).abs() < 1e-9);
        assert!(fid_proxy(&a, &a).unwrap().abs() < 1e-12);
    }
}
