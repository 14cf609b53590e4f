//! Low/high frequency split of sequences along the time axis.

use std::sync::Arc;

use ndarray::s;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autograd::{LinearMap, Mat, Span};
use crate::error::{Error, Result};

/// Largest admissible cutoff for a window of `n` steps.
pub fn max_cutoff(n: usize) -> usize {
    n / 2 + 1
}

fn check_cutoff(n: usize, cutoff: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Dimension(
            "frequency filter needs at least one step".into(),
        ));
    }
    if cutoff == 0 || cutoff > max_cutoff(n) {
        return Err(Error::Config(format!(
            "cutoff {cutoff} outside 1..={} for length {n}",
            max_cutoff(n)
        )));
    }
    Ok(())
}

/// Whether DFT bin `k` of an `n`-point transform is among the `cutoff` lowest
/// frequencies. Bins `k` and `n - k` are the same frequency.
pub fn is_low_bin(k: usize, n: usize, cutoff: usize) -> bool {
    k.min(n - k) < cutoff
}

/// `LFC[X]`: inverse DFT of the `cutoff` lowest-frequency bins of every column.
/// Rows are time steps.
pub fn low_frequency(x: &Mat, cutoff: usize) -> Result<Mat> {
    let n = x.nrows();
    check_cutoff(n, cutoff)?;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut out = Mat::zeros(x.dim());
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for (c, col) in x.columns().into_iter().enumerate() {
        buf.iter_mut()
            .zip(col.iter())
            .for_each(|(b, &v)| *b = Complex::new(v, 0.0));
        fwd.process(&mut buf);
        for (k, b) in buf.iter_mut().enumerate() {
            if !is_low_bin(k, n, cutoff) {
                *b = Complex::new(0.0, 0.0);
            }
        }
        inv.process(&mut buf);
        out.column_mut(c)
            .iter_mut()
            .zip(&buf)
            .for_each(|(o, b)| *o = b.re / n as f64);
    }
    Ok(out)
}

/// `HFC[X] = X − LFC[X]`.
pub fn high_frequency(x: &Mat, cutoff: usize) -> Result<Mat> {
    Ok(x - &low_frequency(x, cutoff)?)
}

/// `LFC[X] + β·HFC[X]` for one full sequence.
pub fn frequency_attention(x: &Mat, beta: f64, cutoff: usize) -> Result<Mat> {
    let low = low_frequency(x, cutoff)?;
    Ok(&low + &((x - &low) * beta))
}

/// The low-pass operator of a `window`-step frame as a dense matrix.
///
/// It is real and symmetric: the kept bin set is closed under `k ↦ n − k`.
pub fn low_pass_matrix(window: usize, cutoff: usize) -> Result<Mat> {
    low_frequency(&Mat::eye(window), cutoff)
}

/// `LFC` applied to packed sequences, each placed right-aligned in a
/// zero-padded frame of `window` steps.
///
/// Only real rows are stored, so the operator restricted to a sequence of
/// length `T` is the trailing `T × T` block of the frame's low-pass matrix.
/// That block is symmetric, which makes the operator self-adjoint.
pub struct PackedLowPass {
    matrix: Arc<Mat>,
    spans: Arc<[Span]>,
}

impl PackedLowPass {
    pub fn new(matrix: Arc<Mat>, spans: Arc<[Span]>) -> Result<Self> {
        let window = matrix.nrows();
        if let Some(s) = spans.iter().find(|s| s.len > window) {
            return Err(Error::Dimension(format!(
                "sequence of length {} exceeds the {window}-step frame",
                s.len
            )));
        }
        Ok(Self { matrix, spans })
    }
}

impl LinearMap for PackedLowPass {
    fn apply(&self, x: &Mat) -> Mat {
        let n = self.matrix.nrows();
        let mut out = Mat::zeros(x.dim());
        for span in self.spans.iter() {
            let block = self.matrix.slice(s![n - span.len.., n - span.len..]);
            let rows = span.start..span.end();
            out.slice_mut(s![rows.clone(), ..])
                .assign(&block.dot(&x.slice(s![rows, ..])));
        }
        out
    }

    fn apply_adjoint(&self, g: &Mat) -> Mat {
        self.apply(g)
    }
}
