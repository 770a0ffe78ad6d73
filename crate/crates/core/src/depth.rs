//! Temporal consistency of metric depth sequences.
//!
//! For every pixel column the smoothed sequence minimises
//!
//! ```text
//! sum_t w_t (D_t - M_t)^2 + lambda * sum_t ((D_{t+1} - D_t) - (N_{t+1} - N_t))^2
//! ```
//!
//! where `M` is the per-frame metric depth, `N` a temporally consistent
//! reference and `w_t` is 1 on valid metric samples and 0 elsewhere. The
//! normal equations are tridiagonal and solved exactly per pixel.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("lambda must be finite and non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("depth sequence has no valid samples")]
    EmptyDepth,
    #[error("scale hint must be positive, got {0}")]
    NonPositiveHint(f64),
    #[error("values/validity length {got} does not match shape {t}x{h}x{w}")]
    BadLength { got: usize, t: usize, h: usize, w: usize },
}

pub type Result<T> = std::result::Result<T, DepthError>;

pub const DEFAULT_LAMBDA: f64 = 1.0;

/// `T x H x W` depth tensor in meters with an explicit validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSequence {
    frames: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthSequence {
    /// Samples that are NaN, infinite or not strictly positive are invalid.
    pub fn from_values(frames: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * height * width {
            return Err(DepthError::BadLength { got: values.len(), t: frames, h: height, w: width });
        }
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Ok(Self { frames, height, width, values, valid })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.height + y) * self.width + x
    }

    /// Depth at `(t, y, x)`, `None` when invalid.
    pub fn get(&self, t: usize, y: usize, x: usize) -> Option<f64> {
        let i = self.index(t, y, x);
        self.valid[i].then(|| self.values[i])
    }

    /// Raw values with NaN at every invalid sample.
    pub fn values_with_nan(&self) -> Vec<f64> {
        self.values.iter().zip(&self.valid).map(|(&v, &ok)| if ok { v } else { f64::NAN }).collect()
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().zip(&self.valid).filter(|(_, ok)| **ok).map(|(v, _)| *v)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    fn column(&self, y: usize, x: usize) -> (Vec<f64>, Vec<bool>) {
        (0..self.frames)
            .map(|t| {
                let i = self.index(t, y, x);
                (self.values[i], self.valid[i])
            })
            .unzip()
    }
}

/// Solve a tridiagonal system with the Thomas algorithm.
///
/// `lower[i]` couples row `i` to `i - 1` (ignored for `i = 0`), `upper[i]`
/// couples row `i` to `i + 1` (ignored for the last row). The system must be
/// diagonally dominant or symmetric positive definite.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    for i in 0..n {
        let (a, cprev, dprev) = if i == 0 { (0.0, 0.0, 0.0) } else { (lower[i], c[i - 1], d[i - 1]) };
        let denom = diag[i] - a * cprev;
        c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - a * dprev) / denom;
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = if i + 1 < n { d[i] - c[i] * x[i + 1] } else { d[i] };
    }
    x
}

/// Smooth one pixel column. The smoothness term between frames `t` and
/// `t + 1` is only present where the reference gradient is defined (both
/// reference samples valid), so the column splits into independent runs.
/// A run without any valid metric sample is undetermined and comes back as
/// `None`; holes inside a run are filled through the smoothness term.
pub fn smooth_column(m: &[f64], m_valid: &[bool], n: &[f64], n_valid: &[bool], lambda: f64) -> Vec<Option<f64>> {
    let t = m.len();
    if lambda == 0.0 || t == 1 || !m_valid.iter().any(|v| *v) {
        return m.iter().zip(m_valid).map(|(&v, &ok)| ok.then_some(v)).collect();
    }
    let linked = |i: usize| n_valid[i] && n_valid[i + 1];
    let mut out = vec![None; t];
    let mut start = 0;
    while start < t {
        let mut end = start + 1;
        while end < t && linked(end - 1) {
            end += 1;
        }
        if m_valid[start..end].iter().any(|v| *v) {
            let k = end - start;
            let mut lower = vec![0.0; k];
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                if m_valid[start + i] {
                    diag[i] += 1.0;
                    rhs[i] += m[start + i];
                }
            }
            for i in 0..k - 1 {
                let g = n[start + i + 1] - n[start + i];
                diag[i] += lambda;
                diag[i + 1] += lambda;
                upper[i] -= lambda;
                lower[i + 1] -= lambda;
                rhs[i] -= lambda * g;
                rhs[i + 1] += lambda * g;
            }
            for (i, v) in solve_tridiagonal(&lower, &diag, &upper, &rhs).into_iter().enumerate() {
                out[start + i] = Some(v);
            }
        }
        start = end;
    }
    out
}

/// Temporally consistent depth `D*` from metric depth `m` and reference `n`.
pub fn temporal_smooth(m: &DepthSequence, n: &DepthSequence, lambda: f64) -> Result<DepthSequence> {
    if m.shape() != n.shape() {
        return Err(DepthError::ShapeMismatch(m.shape(), n.shape()));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(DepthError::NegativeLambda(lambda));
    }
    let (frames, height, width) = m.shape();
    let mut values = vec![f64::NAN; m.values.len()];
    let mut valid = vec![false; m.values.len()];
    for y in 0..height {
        for x in 0..width {
            let (mv, mok) = m.column(y, x);
            let (nv, nok) = n.column(y, x);
            for (t, d) in smooth_column(&mv, &mok, &nv, &nok, lambda).into_iter().enumerate() {
                let i = m.index(t, y, x);
                if let Some(d) = d {
                    // A solve can land on a non-positive value when the
                    // reference gradient dominates; such samples are invalid.
                    if d.is_finite() && d > 0.0 {
                        values[i] = d;
                        valid[i] = true;
                    }
                }
            }
        }
    }
    Ok(DepthSequence { frames, height, width, values, valid })
}

/// Energy of a candidate solution `d` (invalid entries of `d` are taken
/// as-is). Smoothness terms without a reference gradient are absent.
pub fn energy(d: &[f64], m: &DepthSequence, n: &DepthSequence, lambda: f64) -> f64 {
    let (frames, height, width) = m.shape();
    let mut data = 0.0;
    let mut smooth = 0.0;
    for y in 0..height {
        for x in 0..width {
            for t in 0..frames {
                let i = m.index(t, y, x);
                if m.valid[i] {
                    data += (d[i] - m.values[i]).powi(2);
                }
                if t + 1 < frames {
                    let j = m.index(t + 1, y, x);
                    if n.valid[i] && n.valid[j] {
                        smooth += ((d[j] - d[i]) - (n.values[j] - n.values[i])).powi(2);
                    }
                }
            }
        }
    }
    data + lambda * smooth
}

/// Smoothness term alone: `sum ((D_{t+1} - D_t) - (N_{t+1} - N_t))^2`.
pub fn smoothness(d: &DepthSequence, n: &DepthSequence) -> f64 {
    let (frames, height, width) = d.shape();
    let mut total = 0.0;
    for y in 0..height {
        for x in 0..width {
            for t in 0..frames.saturating_sub(1) {
                let (i, j) = (d.index(t, y, x), d.index(t + 1, y, x));
                if d.valid[i] && d.valid[j] && n.valid[i] && n.valid[j] {
                    total += ((d.values[j] - d.values[i]) - (n.values[j] - n.values[i])).powi(2);
                }
            }
        }
    }
    total
}

/// Lower median (`sorted[(n - 1) / 2]`) of a non-empty sample.
pub fn lower_median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let k = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(k, f64::total_cmp);
    Some(*m)
}

/// Nearest-rank percentile (`sorted[ceil(p * n) - 1]`), `p` in `(0, 1]`.
pub fn percentile(values: &mut [f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let rank = ((p * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Some(*v)
}

/// Rescale so that the lower median of the valid samples equals `scale_hint`.
pub fn rescale_depth(d: &DepthSequence, scale_hint: f64) -> Result<DepthSequence> {
    if !(scale_hint > 0.0) || !scale_hint.is_finite() {
        return Err(DepthError::NonPositiveHint(scale_hint));
    }
    let mut valid: Vec<f64> = d.valid_values().collect();
    let median = lower_median(&mut valid).ok_or(DepthError::EmptyDepth)?;
    let s = scale_hint / median;
    let values = d.values.iter().zip(&d.valid).map(|(&v, &ok)| if ok { v * s } else { v }).collect();
    Ok(DepthSequence { values, ..d.clone() })
}
