//! Two-component PCA over sparse rows.
//!
//! The centered data matrix is never materialized. When the vocabulary is
//! larger than the document count the eigenproblem is solved on the
//! document-side Gram matrix `Xc Xcᵀ` and axes are recovered as
//! `Xcᵀ u / sqrt(λ)`. Small problems use a dense symmetric eigensolver;
//! large ones use block subspace iteration with Rayleigh-Ritz.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tfidf::{SparseRow, TfidfMatrix};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Largest operator dimension solved densely.
pub const DENSE_EIGEN_MAX: usize = 400;
const SUBSPACE_BLOCK: usize = 8;
const SUBSPACE_MAX_ITERS: usize = 5000;
const RESIDUAL_TOL: f64 = 1e-11;
/// Eigenvalues below this fraction of the leading one count as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaRoute {
    Covariance,
    Gram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca2d {
    pub coords: Vec<[f64; 2]>,
    /// Descending; covariance eigenvalues (divided by N − 1).
    pub explained_variance: [f64; 2],
    /// Trace of the sample covariance.
    pub total_variance: f64,
    /// Unit axes in column space.
    pub axes: [Vec<f64>; 2],
    pub route: PcaRoute,
}

impl Pca2d {
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("id,x,y\n");
        for (i, [x, y]) in self.coords.iter().enumerate() {
            let id = labels.get(i).map(String::as_str).unwrap_or("");
            out.push_str(&format!("{id},{x:.9},{y:.9}\n"));
        }
        out
    }
}

pub fn pca_2d(m: &TfidfMatrix, exec: Exec) -> Result<Pca2d> {
    pca_2d_sparse(&m.rows, m.n_terms(), exec)
}

pub fn pca_2d_dense(rows: &[Vec<f64>], exec: Exec) -> Result<Pca2d> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Config("rows differ in length".into()));
    }
    let sparse: Vec<SparseRow> = rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .filter(|(_, x)| **x != 0.0)
                .map(|(c, x)| (c as u32, *x))
                .collect()
        })
        .collect();
    pca_2d_sparse(&sparse, dim, exec)
}

struct Centered<'a> {
    rows: &'a [SparseRow],
    mean: Vec<f64>,
    exec: Exec,
}

impl Centered<'_> {
    fn n(&self) -> usize {
        self.rows.len()
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Xc · B` for `B` of shape dim × b.
    fn times(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let k = b.ncols();
        let mu_b: Vec<f64> = (0..k)
            .map(|j| {
                self.mean
                    .iter()
                    .zip(b.column(j).iter())
                    .map(|(m, x)| m * x)
                    .sum()
            })
            .collect();
        let out_rows = self.exec.map(self.rows, |row| {
            (0..k)
                .map(|j| {
                    row.iter()
                        .map(|&(c, x)| x * b[(c as usize, j)])
                        .sum::<f64>()
                        - mu_b[j]
                })
                .collect::<Vec<f64>>()
        });
        DMatrix::from_fn(self.n(), k, |i, j| out_rows[i][j])
    }

    /// `Xcᵀ · C` for `C` of shape n × b.
    fn t_times(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let k = c.ncols();
        let mut out = DMatrix::zeros(self.dim(), k);
        for (i, row) in self.rows.iter().enumerate() {
            for &(col, x) in row {
                for j in 0..k {
                    out[(col as usize, j)] += x * c[(i, j)];
                }
            }
        }
        for j in 0..k {
            let s: f64 = c.column(j).iter().sum();
            for (r, m) in self.mean.iter().enumerate() {
                out[(r, j)] -= m * s;
            }
        }
        out
    }
}

/// Top-2 eigenpairs of a symmetric PSD operator of dimension `n`.
fn top2<F>(n: usize, op: F) -> ([f64; 2], DMatrix<f64>)
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    if n <= DENSE_EIGEN_MAX {
        let a = op(&DMatrix::identity(n, n));
        let a = (&a + a.transpose()) * 0.5;
        let eig = SymmetricEigen::new(a);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let vals = [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]];
        let vecs = DMatrix::from_fn(n, 2, |r, c| eig.eigenvectors[(r, order[c])]);
        return (vals, vecs);
    }
    subspace_iteration(n, op)
}

pub(crate) fn subspace_iteration<F>(n: usize, op: F) -> ([f64; 2], DMatrix<f64>)
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let b = SUBSPACE_BLOCK.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_7ca5);
    let start = DMatrix::from_fn(n, b, |_, _| rng.random_range(-1.0..1.0));
    let mut q = start.qr().q();
    let mut best = ([0.0; 2], q.columns(0, 2).into_owned());
    for iter in 0..SUBSPACE_MAX_ITERS {
        let w = op(&q);
        let t = q.transpose() * &w;
        let t = (&t + t.transpose()) * 0.5;
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let s = DMatrix::from_fn(b, 2, |r, c| eig.eigenvectors[(r, order[c])]);
        let theta = [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]];
        let v = &q * &s;
        let av = &w * &s;
        best = (theta, v.clone());
        if theta[0] <= 0.0 {
            return best;
        }
        let converged = (0..2)
            .all(|k| (av.column(k) - v.column(k) * theta[k]).norm() <= RESIDUAL_TOL * theta[0]);
        if converged {
            log::debug!("subspace iteration converged after {iter} iterations");
            return best;
        }
        q = w.qr().q();
    }
    log::warn!("subspace iteration hit {SUBSPACE_MAX_ITERS} iterations without converging");
    best
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Unit vector orthogonal to `a`, built from the basis vector where `a` is smallest.
fn complement(a: &[f64]) -> Vec<f64> {
    let mut k = 0;
    for (i, x) in a.iter().enumerate() {
        if x.abs() < a[k].abs() {
            k = i;
        }
    }
    let mut e: Vec<f64> = a.iter().map(|x| -a[k] * x).collect();
    e[k] += 1.0;
    normalize(&mut e);
    e
}

pub fn pca_2d_sparse(rows: &[SparseRow], dim: usize, exec: Exec) -> Result<Pca2d> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::TooFewDocuments { needed: 3, got: n });
    }
    if dim < 2 {
        return Err(Error::DegenerateSpectrum(format!(
            "{dim} column(s), need at least 2"
        )));
    }
    let mut mean = vec![0.0; dim];
    for row in rows {
        for &(c, x) in row {
            mean[c as usize] += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let xc = Centered { rows, mean, exec };
    let denom = (n - 1) as f64;

    let mu_sq = dot(&xc.mean, &xc.mean);
    let total_variance = rows
        .iter()
        .map(|r| {
            let sq: f64 = r.iter().map(|(_, x)| x * x).sum();
            let xm: f64 = r.iter().map(|&(c, x)| x * xc.mean[c as usize]).sum();
            (sq - 2.0 * xm + mu_sq).max(0.0)
        })
        .sum::<f64>()
        / denom;

    let route = if dim > n {
        PcaRoute::Gram
    } else {
        PcaRoute::Covariance
    };
    let (lambda, mut axes) = match route {
        PcaRoute::Covariance => {
            let (vals, vecs) = top2(dim, |b| xc.t_times(&xc.times(b)) / denom);
            let axes = [
                vecs.column(0).iter().copied().collect(),
                vecs.column(1).iter().copied().collect(),
            ];
            (vals, axes)
        }
        PcaRoute::Gram => {
            let (vals, u) = top2(n, |b| xc.times(&xc.t_times(b)));
            let back = xc.t_times(&u);
            let axis = |k: usize| -> Vec<f64> {
                let s = vals[k].max(0.0).sqrt();
                back.column(k)
                    .iter()
                    .map(|x| if s > 0.0 { x / s } else { 0.0 })
                    .collect()
            };
            ([vals[0] / denom, vals[1] / denom], [axis(0), axis(1)])
        }
    };

    if !(total_variance > 0.0) || lambda[0] <= RANK_TOL * total_variance {
        return Err(Error::DegenerateSpectrum(
            "all rows coincide after centering".into(),
        ));
    }
    let mut explained = [lambda[0], lambda[1].max(0.0)];
    normalize(&mut axes[0]);
    fix_sign(&mut axes[0]);
    if explained[1] <= RANK_TOL * explained[0] {
        explained[1] = 0.0;
        axes[1] = complement(&axes[0]);
    } else {
        let p = dot(&axes[0], &axes[1]);
        let a0 = axes[0].clone();
        axes[1].iter_mut().zip(&a0).for_each(|(x, a)| *x -= p * a);
        normalize(&mut axes[1]);
    }
    fix_sign(&mut axes[1]);

    let basis = DMatrix::from_fn(dim, 2, |r, c| axes[c][r]);
    let proj = xc.times(&basis);
    let coords = (0..n).map(|i| [proj[(i, 0)], proj[(i, 1)]]).collect();
    Ok(Pca2d {
        coords,
        explained_variance: explained,
        total_variance,
        axes,
        route,
    })
}
