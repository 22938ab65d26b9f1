//! Ordinary kriging interpolation and cross-fidelity grid alignment.
//!
//! Low and high fidelity tables rarely share sample sites. Before a residual
//! can be formed, both response surfaces are interpolated onto the union of
//! their state grids, clipped to the box where both have coverage. Observed
//! rows are carried through untouched; only the missing fidelity at each site
//! is filled in by the interpolator.

use std::collections::BTreeSet;

use crate::dataset::{Column, DataSet, Role};
use crate::error::{CoreError, Result};
use crate::linalg::{cholesky, Cholesky, Mat};

/// Base diagonal jitter for the correlation factorization.
const JITTER_BASE: f64 = 1e-10;
/// Escalation cap. Beyond this the candidate is treated as unusable.
const JITTER_MAX: f64 = 1e-4;
/// Isotropic lengthscale factors swept during the initial search, as
/// multiples of the per-dimension span.
const N_STARTS: usize = 16;
const FACTOR_LO: f64 = 3.16e-2;
const FACTOR_HI: f64 = 3.16e1;
/// Coordinate descent bracket per dimension, as multiples of the span.
const REFINE_LO: f64 = 1e-2;
const REFINE_HI: f64 = 1e2;
const GOLDEN_ITERS: usize = 28;
const REFINE_SWEEPS: usize = 2;
/// Training sites must be reproduced to this absolute tolerance, relative to
/// the response magnitude, or the candidate is discarded.
const EXACTNESS_TOL: f64 = 1e-8;

/// Gaussian-kernel ordinary kriging model with unit-sum weights.
///
/// The predictor is the concentrated form `mu + r' R^-1 (y - mu 1)` with
/// `mu = (1' R^-1 y) / (1' R^-1 1)`, which is the mean of the bordered
/// unit-sum weight system. Lengthscales are chosen by maximizing the
/// concentrated log-likelihood over a fixed candidate sweep followed by
/// per-dimension coordinate descent.
pub struct KrigingModel {
    states: Mat,
    values: Vec<f64>,
    lengthscales: Vec<f64>,
    mu: f64,
    alpha: Vec<f64>,
    nugget: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl KrigingModel {
    /// Fits lengthscales and the interpolation weights to the given sites.
    ///
    /// Duplicate sites are averaged before fitting. The returned model
    /// reproduces every distinct training site to within `1e-8` of the
    /// response scale; candidates whose factorization needed so much jitter
    /// that they smooth over the data are skipped in likelihood order.
    pub fn fit(states: &Mat, values: &[f64]) -> Result<Self> {
        if states.rows() != values.len() {
            return Err(CoreError::ShapeMismatch {
                op: "kriging fit",
                got: vec![states.rows(), values.len()],
                expected: "one value per site".into(),
            });
        }
        let (states, values) = average_duplicates(states, values);
        let n = states.rows();
        let p = states.cols();
        if n < 2 {
            return Err(CoreError::invalid(
                "kriging fit",
                "need at least two distinct sites",
            ));
        }

        let (lo, hi) = bounding_box(&states);
        let spans: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| b - a).collect();
        // Dimensions with zero span carry no information; their lengthscale
        // is pinned to 1 and left out of the search.
        let active: Vec<usize> = (0..p).filter(|&k| spans[k] > 0.0).collect();

        let mut candidates: Vec<(f64, Vec<f64>)> = Vec::new();
        for i in 0..N_STARTS {
            let t = i as f64 / (N_STARTS - 1) as f64;
            let factor = FACTOR_LO * (FACTOR_HI / FACTOR_LO).powf(t);
            let ls: Vec<f64> = spans
                .iter()
                .map(|&s| if s > 0.0 { factor * s } else { 1.0 })
                .collect();
            if let Some(ll) = log_likelihood(&states, &values, &ls) {
                candidates.push((ll, ls));
            }
        }
        // Span-proportional lengthscales stop being factorizable to
        // interpolation accuracy once the sites get dense. Candidates tied to
        // the mean site spacing keep those grids exactly reproducible, at the
        // cost of a more local predictor.
        let spacing: Vec<f64> = (0..p)
            .map(|k| {
                if spans[k] <= 0.0 {
                    return 1.0;
                }
                let mut coords: Vec<f64> = (0..n).map(|i| states[(i, k)]).collect();
                coords.sort_by(|a, b| a.partial_cmp(b).unwrap());
                coords.dedup();
                if coords.len() < 2 {
                    1.0
                } else {
                    spans[k] / (coords.len() - 1) as f64
                }
            })
            .collect();
        for factor in [1.0, 2.0, 4.0] {
            let ls: Vec<f64> = (0..p)
                .map(|k| if spans[k] > 0.0 { factor * spacing[k] } else { 1.0 })
                .collect();
            if let Some(ll) = log_likelihood(&states, &values, &ls) {
                candidates.push((ll, ls));
            }
        }
        let (_, mut ls) = candidates
            .iter()
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .cloned()
            .ok_or_else(|| {
                CoreError::invalid("kriging fit", "no lengthscale candidate is factorizable")
            })?;

        // Coordinate descent on log lengthscale, one golden-section line
        // search per active dimension per sweep.
        for _ in 0..REFINE_SWEEPS {
            for &k in &active {
                let lo_k = (REFINE_LO * spans[k]).ln();
                let hi_k = (REFINE_HI * spans[k]).ln();
                let eval = |t: f64| {
                    let mut trial = ls.clone();
                    trial[k] = t.exp();
                    log_likelihood(&states, &values, &trial).unwrap_or(f64::NEG_INFINITY)
                };
                ls[k] = golden_max(lo_k, hi_k, GOLDEN_ITERS, eval).exp();
            }
        }
        if let Some(ll) = log_likelihood(&states, &values, &ls) {
            candidates.push((ll, ls));
        }
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

        let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (_, ls) in &candidates {
            let model = match assemble(states.clone(), values.clone(), ls.clone(), &lo, &hi) {
                Ok(m) => m,
                Err(_) => continue,
            };
            if model.reproduces_training(EXACTNESS_TOL * scale) {
                return Ok(model);
            }
        }
        Err(CoreError::invalid(
            "kriging fit",
            "no lengthscale candidate reproduces the training sites",
        ))
    }

    /// Predicts the response at `x`. Sites outside the training bounding box
    /// are rejected: the unit-sum weights extrapolate poorly and alignment
    /// never needs them.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.states.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "kriging predict",
                got: vec![x.len()],
                expected: format!("{} coordinates", self.states.cols()),
            });
        }
        for (dim, &v) in x.iter().enumerate() {
            if v < self.lo[dim] || v > self.hi[dim] {
                return Err(CoreError::OutOfBox {
                    dim,
                    value: v,
                    lo: self.lo[dim],
                    hi: self.hi[dim],
                });
            }
        }
        let mut acc = self.mu;
        for i in 0..self.states.rows() {
            acc += correlation(self.states.row(i), x, &self.lengthscales) * self.alpha[i];
        }
        Ok(acc)
    }

    /// Distinct training sites after duplicate averaging.
    pub fn states(&self) -> &Mat {
        &self.states
    }

    /// Training responses matching [`states`](Self::states).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Fitted kernel lengthscales, one per state dimension.
    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    /// Diagonal jitter the accepted factorization used.
    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    /// Concentrated mean estimate.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    fn reproduces_training(&self, tol: f64) -> bool {
        for i in 0..self.states.rows() {
            let row: Vec<f64> = self.states.row(i).to_vec();
            match self.predict(&row) {
                Ok(pred) if (pred - self.values[i]).abs() <= tol => {}
                _ => return false,
            }
        }
        true
    }
}

fn correlation(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let mut q = 0.0;
    for k in 0..a.len() {
        let h = (a[k] - b[k]) / ls[k];
        q += h * h;
    }
    (-0.5 * q).exp()
}

fn correlation_matrix(states: &Mat, ls: &[f64]) -> Mat {
    Mat::symmetric_from_fn(states.rows(), |i, j| {
        correlation(states.row(i), states.row(j), ls)
    })
}

fn bounding_box(states: &Mat) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; states.cols()];
    let mut hi = vec![f64::NEG_INFINITY; states.cols()];
    for i in 0..states.rows() {
        for (k, &v) in states.row(i).iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    (lo, hi)
}

/// Concentrated ordinary-kriging log-likelihood, or `None` when the
/// correlation matrix cannot be factorized within the jitter cap.
fn log_likelihood(states: &Mat, values: &[f64], ls: &[f64]) -> Option<f64> {
    let n = states.rows();
    let r = correlation_matrix(states, ls);
    let chol = cholesky(&r, JITTER_BASE, JITTER_MAX).ok()?;
    let (mu, alpha) = concentrated_weights(&chol, values);
    let centered: Vec<f64> = values.iter().map(|&v| v - mu).collect();
    let sigma2 = crate::linalg::dot(&centered, &alpha) / n as f64;
    if !(sigma2 > 0.0) {
        return None;
    }
    Some(-0.5 * n as f64 * sigma2.ln() - 0.5 * chol.logdet())
}

/// Solves for the concentrated mean and the weight vector
/// `alpha = R^-1 (y - mu 1)`.
fn concentrated_weights(chol: &Cholesky, values: &[f64]) -> (f64, Vec<f64>) {
    let n = values.len();
    let ones = vec![1.0; n];
    let ri_one = chol.solve_vec(&ones);
    let ri_y = chol.solve_vec(values);
    let mu = crate::linalg::dot(&ones, &ri_y) / crate::linalg::dot(&ones, &ri_one);
    let alpha: Vec<f64> = ri_y.iter().zip(&ri_one).map(|(y, o)| y - mu * o).collect();
    (mu, alpha)
}

fn assemble(
    states: Mat,
    values: Vec<f64>,
    lengthscales: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
) -> Result<KrigingModel> {
    let r = correlation_matrix(&states, &lengthscales);
    let chol = cholesky(&r, JITTER_BASE, JITTER_MAX)?;
    let (mu, alpha) = concentrated_weights(&chol, &values);
    Ok(KrigingModel {
        states,
        values,
        lengthscales,
        mu,
        alpha,
        nugget: chol.jitter,
        lo: lo.to_vec(),
        hi: hi.to_vec(),
    })
}

/// Maximizes `f` on `[a, b]` by golden-section search.
fn golden_max(mut a: f64, mut b: f64, iters: usize, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = 0.618_033_988_749_894_9;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc > fd {
        c
    } else {
        d
    }
}

/// Sorts rows lexicographically and averages groups with equal states.
/// Equality is plain `f64` comparison, so `-0.0` and `0.0` collapse.
fn average_duplicates(states: &Mat, values: &[f64]) -> (Mat, Vec<f64>) {
    let mut order: Vec<usize> = (0..states.rows()).collect();
    order.sort_by(|&i, &j| lex_cmp(states.row(i), states.row(j)));

    let mut out_rows: Vec<Vec<f64>> = Vec::new();
    let mut out_vals: Vec<f64> = Vec::new();
    let mut idx = 0;
    while idx < order.len() {
        let head = order[idx];
        let mut sum = values[head];
        let mut count = 1usize;
        let mut next = idx + 1;
        while next < order.len() && states.row(order[next]) == states.row(head) {
            sum += values[order[next]];
            count += 1;
            next += 1;
        }
        out_rows.push(states.row(head).to_vec());
        out_vals.push(sum / count as f64);
        idx = next;
    }
    (Mat::from_rows(&out_rows), out_vals)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap() {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

fn to_mat(flat: &[f64], rows: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        m.row_mut(i).copy_from_slice(&flat[i * cols..(i + 1) * cols]);
    }
    m
}

/// Two response tables interpolated onto a shared state grid.
///
/// Observed rows keep their table values bit for bit; the masks say which
/// grid rows were observed in which table. `delta` is `y_h - y_l` row by row.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    pub state_names: Vec<String>,
    pub response_names: Vec<String>,
    /// Shared grid, `n_grid x p`, sorted lexicographically, duplicates
    /// collapsed.
    pub states: Mat,
    /// Low-fidelity responses on the grid, `n_grid x m`.
    pub y_l: Mat,
    /// High-fidelity responses on the grid.
    pub y_h: Mat,
    /// `y_h - y_l`.
    pub delta: Mat,
    pub observed_l: Vec<bool>,
    pub observed_h: Vec<bool>,
}

impl AlignedPair {
    /// Grid rows as a training table: states plus low-fidelity responses as
    /// inputs, the per-response residual as the target.
    pub fn training_dataset(&self) -> Result<DataSet> {
        let mut columns: Vec<Column> = self
            .state_names
            .iter()
            .map(|n| Column::state(n))
            .collect();
        for r in &self.response_names {
            columns.push(Column::state(&format!("{r}_lf")));
        }
        for r in &self.response_names {
            columns.push(Column::response(&format!("{r}_delta")));
        }
        let mut data = Vec::with_capacity(self.states.rows() * columns.len());
        for i in 0..self.states.rows() {
            data.extend_from_slice(self.states.row(i));
            data.extend_from_slice(self.y_l.row(i));
            data.extend_from_slice(self.delta.row(i));
        }
        DataSet::new(columns, data)
    }

    /// Inverse of [`training_dataset`](Self::training_dataset): rebuilds the
    /// pair from a table with state columns, `<r>_lf` input columns, and
    /// `<r>_delta` response columns. The observation masks are not stored in
    /// the table, so they come back empty-handed (all false).
    pub fn from_training_dataset(data: &DataSet) -> Result<AlignedPair> {
        let mut state_names = Vec::new();
        let mut lf_of = std::collections::BTreeMap::new();
        for (i, col) in data.columns().iter().enumerate() {
            match col.role {
                Role::State => match col.name.strip_suffix("_lf") {
                    Some(base) => {
                        lf_of.insert(base.to_string(), i);
                    }
                    None => state_names.push((col.name.clone(), i)),
                },
                Role::Response => {}
            }
        }
        let mut response_names = Vec::new();
        let mut pairs = Vec::new();
        for (i, col) in data.columns().iter().enumerate() {
            if col.role != Role::Response {
                continue;
            }
            let base = col.name.strip_suffix("_delta").ok_or_else(|| {
                CoreError::Alignment {
                    message: format!(
                        "response column '{}' does not carry the _delta suffix",
                        col.name
                    ),
                }
            })?;
            let lf = *lf_of.get(base).ok_or_else(|| CoreError::Alignment {
                message: format!("no '{base}_lf' input column for response '{}'", col.name),
            })?;
            response_names.push(base.to_string());
            pairs.push((lf, i));
        }
        if response_names.is_empty() {
            return Err(CoreError::Alignment {
                message: "table has no _delta response columns".into(),
            });
        }
        if state_names.is_empty() {
            return Err(CoreError::Alignment {
                message: "table has no state columns".into(),
            });
        }

        let n = data.n_rows();
        let p = state_names.len();
        let m = response_names.len();
        let mut states = Mat::zeros(n, p);
        let mut y_l = Mat::zeros(n, m);
        let mut y_h = Mat::zeros(n, m);
        let mut delta = Mat::zeros(n, m);
        for i in 0..n {
            for (j, (_, c)) in state_names.iter().enumerate() {
                states[(i, j)] = data.value(i, *c);
            }
            for (r, (lf, dl)) in pairs.iter().enumerate() {
                y_l[(i, r)] = data.value(i, *lf);
                delta[(i, r)] = data.value(i, *dl);
                y_h[(i, r)] = y_l[(i, r)] + delta[(i, r)];
            }
        }
        Ok(AlignedPair {
            state_names: state_names.into_iter().map(|(n, _)| n).collect(),
            response_names,
            states,
            y_l,
            y_h,
            delta,
            observed_l: vec![false; n],
            observed_h: vec![false; n],
        })
    }

    /// Grid rows as an evaluation table: states plus both fidelity levels,
    /// for comparing a fused surface against the high-fidelity reference.
    pub fn reference_dataset(&self) -> Result<DataSet> {
        let mut columns: Vec<Column> = self
            .state_names
            .iter()
            .map(|n| Column::state(n))
            .collect();
        for r in &self.response_names {
            columns.push(Column::response(&format!("{r}_lf")));
        }
        for r in &self.response_names {
            columns.push(Column::response(&format!("{r}_hf")));
        }
        let mut data = Vec::with_capacity(self.states.rows() * columns.len());
        for i in 0..self.states.rows() {
            data.extend_from_slice(self.states.row(i));
            data.extend_from_slice(self.y_l.row(i));
            data.extend_from_slice(self.y_h.row(i));
        }
        DataSet::new(columns, data)
    }
}

/// Interpolates both tables onto the union of their state grids.
///
/// The tables must agree on state and response column names and order. The
/// grid is clipped to the per-dimension intersection of the two bounding
/// boxes so neither interpolator extrapolates; an empty intersection is an
/// error. One kriging model is fit per table per response column.
pub fn align_datasets(lf: &DataSet, hf: &DataSet) -> Result<AlignedPair> {
    let state_names = check_schema(lf, hf)?;
    let response_names: Vec<String> = lf
        .response_indices()
        .iter()
        .map(|&c| lf.columns()[c].name.clone())
        .collect();

    let p = state_names.len();
    let m = response_names.len();
    let lf_states = to_mat(&lf.matrix(&lf.state_indices()), lf.n_rows(), p);
    let hf_states = to_mat(&hf.matrix(&hf.state_indices()), hf.n_rows(), p);
    let lf_resp = to_mat(&lf.matrix(&lf.response_indices()), lf.n_rows(), m);
    let hf_resp = to_mat(&hf.matrix(&hf.response_indices()), hf.n_rows(), m);

    let (lf_lo, lf_hi) = bounding_box(&lf_states);
    let (hf_lo, hf_hi) = bounding_box(&hf_states);
    let mut lo = vec![0.0; p];
    let mut hi = vec![0.0; p];
    for k in 0..p {
        lo[k] = lf_lo[k].max(hf_lo[k]);
        hi[k] = lf_hi[k].min(hf_hi[k]);
        if lo[k] > hi[k] {
            return Err(CoreError::Alignment {
                message: format!(
                    "state '{}' has no overlap between the two tables ([{}, {}] vs [{}, {}])",
                    state_names[k], lf_lo[k], lf_hi[k], hf_lo[k], hf_hi[k]
                ),
            });
        }
    }

    let lf_sites = dedup_rows(&lf_states, &lf_resp);
    let hf_sites = dedup_rows(&hf_states, &hf_resp);
    let inside =
        |row: &[f64]| row.iter().enumerate().all(|(k, &v)| v >= lo[k] && v <= hi[k]);

    // Merge the two sorted site lists into the union grid, remembering the
    // observed responses at each grid row.
    let mut grid: Vec<Vec<f64>> = Vec::new();
    let mut obs_l: Vec<Option<Vec<f64>>> = Vec::new();
    let mut obs_h: Vec<Option<Vec<f64>>> = Vec::new();
    let mut li = lf_sites.iter().filter(|(s, _)| inside(s)).peekable();
    let mut hi_it = hf_sites.iter().filter(|(s, _)| inside(s)).peekable();
    loop {
        match (li.peek(), hi_it.peek()) {
            (Some((ls, lv)), Some((hs, hv))) => match lex_cmp(ls, hs) {
                std::cmp::Ordering::Less => {
                    grid.push(ls.clone());
                    obs_l.push(Some(lv.clone()));
                    obs_h.push(None);
                    li.next();
                }
                std::cmp::Ordering::Greater => {
                    grid.push(hs.clone());
                    obs_l.push(None);
                    obs_h.push(Some(hv.clone()));
                    hi_it.next();
                }
                std::cmp::Ordering::Equal => {
                    grid.push(ls.clone());
                    obs_l.push(Some(lv.clone()));
                    obs_h.push(Some(hv.clone()));
                    li.next();
                    hi_it.next();
                }
            },
            (Some((ls, lv)), None) => {
                grid.push(ls.clone());
                obs_l.push(Some(lv.clone()));
                obs_h.push(None);
                li.next();
            }
            (None, Some((hs, hv))) => {
                grid.push(hs.clone());
                obs_l.push(None);
                obs_h.push(Some(hv.clone()));
                hi_it.next();
            }
            (None, None) => break,
        }
    }
    if grid.is_empty() {
        return Err(CoreError::Alignment {
            message: "no grid sites fall inside the shared state box".into(),
        });
    }

    let n_grid = grid.len();
    let mut y_l = Mat::zeros(n_grid, m);
    let mut y_h = Mat::zeros(n_grid, m);
    for c in 0..m {
        let lf_col: Vec<f64> = (0..lf_states.rows()).map(|i| lf_resp[(i, c)]).collect();
        let hf_col: Vec<f64> = (0..hf_states.rows()).map(|i| hf_resp[(i, c)]).collect();
        let lf_model = KrigingModel::fit(&lf_states, &lf_col)?;
        let hf_model = KrigingModel::fit(&hf_states, &hf_col)?;
        for (i, site) in grid.iter().enumerate() {
            y_l[(i, c)] = match &obs_l[i] {
                Some(v) => v[c],
                None => lf_model.predict(site)?,
            };
            y_h[(i, c)] = match &obs_h[i] {
                Some(v) => v[c],
                None => hf_model.predict(site)?,
            };
        }
    }

    let mut delta = Mat::zeros(n_grid, m);
    for i in 0..n_grid {
        for c in 0..m {
            delta[(i, c)] = y_h[(i, c)] - y_l[(i, c)];
        }
    }
    Ok(AlignedPair {
        state_names,
        response_names,
        states: Mat::from_rows(&grid),
        y_l,
        y_h,
        delta,
        observed_l: obs_l.iter().map(Option::is_some).collect(),
        observed_h: obs_h.iter().map(Option::is_some).collect(),
    })
}

/// Sorted distinct state rows with duplicate responses averaged.
fn dedup_rows(states: &Mat, responses: &Mat) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut order: Vec<usize> = (0..states.rows()).collect();
    order.sort_by(|&i, &j| lex_cmp(states.row(i), states.row(j)));
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut idx = 0;
    while idx < order.len() {
        let head = order[idx];
        let mut sums = responses.row(head).to_vec();
        let mut count = 1usize;
        let mut next = idx + 1;
        while next < order.len() && states.row(order[next]) == states.row(head) {
            for (s, v) in sums.iter_mut().zip(responses.row(order[next])) {
                *s += v;
            }
            count += 1;
            next += 1;
        }
        for s in &mut sums {
            *s /= count as f64;
        }
        out.push((states.row(head).to_vec(), sums));
        idx = next;
    }
    out
}

fn check_schema(lf: &DataSet, hf: &DataSet) -> Result<Vec<String>> {
    let names = |d: &DataSet, idx: &[usize]| -> Vec<String> {
        idx.iter().map(|&c| d.columns()[c].name.clone()).collect()
    };
    let lf_states = names(lf, &lf.state_indices());
    let hf_states = names(hf, &hf.state_indices());
    if lf_states != hf_states {
        return Err(CoreError::Alignment {
            message: format!(
                "state columns differ between tables: [{}] vs [{}]",
                lf_states.join(", "),
                hf_states.join(", ")
            ),
        });
    }
    let lf_resp = names(lf, &lf.response_indices());
    let hf_resp = names(hf, &hf.response_indices());
    if lf_resp != hf_resp {
        return Err(CoreError::Alignment {
            message: format!(
                "response columns differ between tables: [{}] vs [{}]",
                lf_resp.join(", "),
                hf_resp.join(", ")
            ),
        });
    }
    if lf_resp.is_empty() {
        return Err(CoreError::Alignment {
            message: "tables have no response columns".into(),
        });
    }
    if lf_states.is_empty() {
        return Err(CoreError::Alignment {
            message: "tables have no state columns".into(),
        });
    }
    // Column names are unique within a table; the set guards against a
    // response reusing a state name across the two tables.
    let mut seen = BTreeSet::new();
    for n in lf_states.iter().chain(lf_resp.iter()) {
        if !seen.insert(n.clone()) {
            return Err(CoreError::Alignment {
                message: format!("column '{n}' appears with both roles"),
            });
        }
    }
    Ok(lf_states)
}
