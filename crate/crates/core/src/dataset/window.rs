//! Sliding-window extraction and overlap-averaged reconstruction.
//!
//! A sequence of `n` rows becomes windows of length `window` taken every
//! `stride` rows, plus one tail window at `n - window` whenever the regular
//! stride does not land there, so every row is covered. The degenerate
//! "chunked" plan (no sliding) tiles the sequence with stride = window and
//! edge-pads the final partial chunk.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    n_rows: usize,
    window: usize,
    starts: Vec<usize>,
}

impl WindowPlan {
    /// Overlapping windows: starts 0, stride, 2*stride, ... while they fit,
    /// plus a tail start at `n - window` if the last regular start misses it.
    pub fn sliding(n: usize, window: usize, stride: usize) -> Result<Self> {
        Self::validate(n, window, stride)?;
        if n < window {
            return Err(CoreError::Window {
                n,
                window,
                stride,
                message: "sequence shorter than the window; reduce the window length or provide more rows"
                    .into(),
            });
        }
        let mut starts = Vec::new();
        let mut s = 0;
        while s + window <= n {
            starts.push(s);
            s += stride;
        }
        let tail = n - window;
        if *starts.last().expect("at least start 0") != tail {
            starts.push(tail);
        }
        Ok(WindowPlan {
            n_rows: n,
            window,
            starts,
        })
    }

    /// Non-overlapping chunks of `window` rows; a final partial chunk is
    /// padded by repeating the last row. Padded rows are dropped again at
    /// reconstruction. A sequence shorter than one window becomes a single
    /// padded chunk.
    pub fn chunked(n: usize, window: usize) -> Result<Self> {
        Self::validate(n, window, window)?;
        let mut starts = Vec::new();
        let mut s = 0;
        while s < n {
            starts.push(s);
            s += window;
        }
        Ok(WindowPlan {
            n_rows: n,
            window,
            starts,
        })
    }

    fn validate(n: usize, window: usize, stride: usize) -> Result<()> {
        if window == 0 || stride == 0 {
            return Err(CoreError::Window {
                n,
                window,
                stride,
                message: "window and stride must be positive".into(),
            });
        }
        if stride > window {
            return Err(CoreError::Window {
                n,
                window,
                stride,
                message: "stride larger than the window leaves rows uncovered".into(),
            });
        }
        if n == 0 {
            return Err(CoreError::Window {
                n,
                window,
                stride,
                message: "empty sequence".into(),
            });
        }
        Ok(())
    }

    pub fn n_windows(&self) -> usize {
        self.starts.len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// Source row behind window-local row `r` of window `w`; `None` marks a
    /// padded slot (chunked tail only).
    fn source_row(&self, w: usize, r: usize) -> Option<usize> {
        let row = self.starts[w] + r;
        if row < self.n_rows {
            Some(row)
        } else {
            None
        }
    }

    /// Gathers windows from a row-major `n_rows x n_cols` matrix into a
    /// `n_windows x window x n_cols` buffer. Padded slots repeat the last row.
    pub fn extract(&self, mat: &[f64], n_cols: usize) -> Vec<f64> {
        assert_eq!(mat.len(), self.n_rows * n_cols, "matrix size mismatch");
        let mut out = Vec::with_capacity(self.n_windows() * self.window * n_cols);
        for w in 0..self.n_windows() {
            for r in 0..self.window {
                let src = self.source_row(w, r).unwrap_or(self.n_rows - 1);
                out.extend_from_slice(&mat[src * n_cols..(src + 1) * n_cols]);
            }
        }
        out
    }

    /// Inverse of `extract` up to overlap: each source row becomes the
    /// arithmetic mean of every window value covering it (running-mean
    /// accumulation, so identical contributions reproduce bit-for-bit).
    /// Padded slots are ignored.
    pub fn overlap_mean(&self, windows: &[f64], n_cols: usize) -> Vec<f64> {
        assert_eq!(
            windows.len(),
            self.n_windows() * self.window * n_cols,
            "window buffer size mismatch"
        );
        let mut mean = vec![0.0; self.n_rows * n_cols];
        let mut count = vec![0u32; self.n_rows];
        for w in 0..self.n_windows() {
            for r in 0..self.window {
                let Some(src) = self.source_row(w, r) else {
                    continue;
                };
                count[src] += 1;
                let k = count[src] as f64;
                let src_base = src * n_cols;
                let win_base = (w * self.window + r) * n_cols;
                for c in 0..n_cols {
                    let m = &mut mean[src_base + c];
                    *m += (windows[win_base + c] - *m) / k;
                }
            }
        }
        debug_assert!(count.iter().all(|&c| c > 0), "coverage hole");
        mean
    }
}
