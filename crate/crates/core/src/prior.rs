//! Linear eigenshape prior over logit occupancy.
//!
//! `decode(z) = sigmoid(mean + Bᵀz)` where the rows of `B` are orthonormal
//! principal directions of the training corpus in logit space.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::camera::DepthMap;
use crate::frames::VoxelFrame;
use crate::raycast::traverse;
use crate::refine::{descend, ConstraintSet, DescentParams, LatentObjective, RefineError, Target};
use crate::voxel::{Dims, VoxelGrid};

/// Occupancies are clamped to `[ε, 1-ε]` before the logit.
pub const LOGIT_EPS: f64 = 1e-3;
/// Largest f32 strictly below one.
const TOP: f32 = 1.0 - f32::EPSILON / 2.0;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("latent has {actual} entries, prior expects {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("grid dims {actual:?} do not match prior dims {expected:?}")]
    GridMismatch { expected: Dims, actual: Dims },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("latent dimension must be at least 1")]
    ZeroDim,
    #[error("not a prior file")]
    BadMagic,
    #[error("prior file is truncated")]
    Truncated,
    #[error("no depth returns to fit")]
    NoVisiblePixels,
    #[error("constraint error: {0}")]
    Constraint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn logit(v: f64) -> f64 {
    let v = v.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (v / (1.0 - v)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapePrior {
    dims: Dims,
    latent_dim: usize,
    mean: Vec<f64>,
    /// Basis stored cell-major: entry `(d, i)` lives at `i * D + d`.
    basis_t: Vec<f64>,
    /// Per-direction standard deviation of the training codes.
    scales: Vec<f64>,
    /// Number of rows backed by corpus variance; the rest are zero.
    rank: usize,
    corpus_hash: String,
}

impl ShapePrior {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn cells(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.latent_dim
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn basis(&self, d: usize, cell: usize) -> f64 {
        self.basis_t[cell * self.latent_dim + d]
    }

    /// All `D` basis entries for one cell.
    pub fn basis_column(&self, cell: usize) -> &[f64] {
        &self.basis_t[cell * self.latent_dim..(cell + 1) * self.latent_dim]
    }

    pub fn basis_row(&self, d: usize) -> Vec<f64> {
        (0..self.cells()).map(|i| self.basis(d, i)).collect()
    }

    fn check_latent(&self, z: &[f64]) -> Result<(), PriorError> {
        if z.len() != self.latent_dim {
            return Err(PriorError::DimMismatch {
                expected: self.latent_dim,
                actual: z.len(),
            });
        }
        Ok(())
    }

    /// `mean_i + B[:, i]·z`.
    pub fn logit_at(&self, cell: usize, z: &[f64]) -> f64 {
        self.mean[cell]
            + self
                .basis_column(cell)
                .iter()
                .zip(z)
                .map(|(b, z)| b * z)
                .sum::<f64>()
    }

    /// Unclamped f64 occupancies, the differentiable path.
    pub fn decode_f64(&self, z: &[f64]) -> Result<Vec<f64>, PriorError> {
        self.check_latent(z)?;
        Ok((0..self.cells())
            .into_par_iter()
            .map(|i| sigmoid(self.logit_at(i, z)))
            .collect())
    }

    pub fn decode(&self, z: &[f64], frame: VoxelFrame) -> Result<VoxelGrid, PriorError> {
        let values = self
            .decode_f64(z)?
            .into_iter()
            .map(|v| (v as f32).clamp(f32::MIN_POSITIVE, TOP))
            .collect();
        Ok(VoxelGrid::from_values(self.dims, values, frame).expect("decoded values are in range"))
    }

    /// `z = B (logit(clamp(v)) - mean)`.
    pub fn encode(&self, grid: &VoxelGrid) -> Result<Vec<f64>, PriorError> {
        if grid.dims() != self.dims {
            return Err(PriorError::GridMismatch {
                expected: self.dims,
                actual: grid.dims(),
            });
        }
        let d = self.latent_dim;
        let chunk = 4096;
        let partials: Vec<Vec<f64>> = grid
            .values()
            .par_chunks(chunk)
            .enumerate()
            .map(|(c, vals)| {
                let mut z = vec![0.0; d];
                for (k, &v) in vals.iter().enumerate() {
                    let i = c * chunk + k;
                    let x = logit(f64::from(v)) - self.mean[i];
                    for (zj, b) in z.iter_mut().zip(self.basis_column(i)) {
                        *zj += b * x;
                    }
                }
                z
            })
            .collect();
        let mut z = vec![0.0; d];
        for p in partials {
            for (a, b) in z.iter_mut().zip(p) {
                *a += b;
            }
        }
        Ok(z)
    }

    /// First `d` directions only.
    pub fn truncated(&self, d: usize) -> ShapePrior {
        let d = d.clamp(1, self.latent_dim);
        let basis_t = (0..self.cells())
            .flat_map(|i| self.basis_column(i)[..d].to_vec())
            .collect();
        ShapePrior {
            dims: self.dims,
            latent_dim: d,
            mean: self.mean.clone(),
            basis_t,
            scales: self.scales[..d].to_vec(),
            rank: self.rank.min(d),
            corpus_hash: self.corpus_hash.clone(),
        }
    }

    /// Largest `|B Bᵀ - I|` entry over the nonzero rows.
    pub fn orthonormality_error(&self) -> f64 {
        let d = self.latent_dim;
        let mut gram = vec![0.0; d * d];
        for i in 0..self.cells() {
            let col = self.basis_column(i);
            for a in 0..d {
                if col[a] == 0.0 {
                    continue;
                }
                for b in a..d {
                    gram[a * d + b] += col[a] * col[b];
                }
            }
        }
        let mut worst = 0.0f64;
        for a in 0..self.rank {
            for b in a..self.rank {
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((gram[a * d + b] - want).abs());
            }
        }
        worst
    }
}

pub fn corpus_hash(corpus: &[&VoxelGrid]) -> String {
    let mut h = Sha256::new();
    for g in corpus {
        for d in g.dims() {
            h.update((d as u32).to_le_bytes());
        }
        for v in g.values() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Fits mean and top-`D` principal directions of logit occupancies via the
/// `N×N` Gram matrix. Directions without corpus variance are zero rows.
pub fn fit_prior(corpus: &[&VoxelGrid], latent_dim: usize) -> Result<ShapePrior, PriorError> {
    if corpus.is_empty() {
        return Err(PriorError::EmptyCorpus);
    }
    if latent_dim == 0 {
        return Err(PriorError::ZeroDim);
    }
    let dims = corpus[0].dims();
    for g in corpus {
        if g.dims() != dims {
            return Err(PriorError::GridMismatch {
                expected: dims,
                actual: g.dims(),
            });
        }
    }
    let n = corpus.len();
    let v = corpus[0].len();

    let mut mean = vec![0.0f64; v];
    for g in corpus {
        for (m, &x) in mean.iter_mut().zip(g.values()) {
            *m += logit(f64::from(x));
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    // Deviations, shape-major.
    let dev: Vec<Vec<f32>> = corpus
        .par_iter()
        .map(|g| {
            g.values()
                .iter()
                .zip(&mean)
                .map(|(&x, m)| (logit(f64::from(x)) - m) as f32)
                .collect()
        })
        .collect();

    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect();
    let dots: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            dev[a]
                .iter()
                .zip(&dev[b])
                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                .sum()
        })
        .collect();
    let mut gram = DMatrix::zeros(n, n);
    for (&(a, b), &g) in pairs.iter().zip(&dots) {
        gram[(a, b)] = g;
        gram[(b, a)] = g;
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let tol = 1e-10 * lambda_max.max(f64::MIN_POSITIVE);
    let kept: Vec<usize> = order
        .iter()
        .copied()
        .take(latent_dim)
        .take_while(|&k| eig.eigenvalues[k] > tol)
        .collect();
    let rank = kept.len();
    if rank < latent_dim {
        log::warn!("corpus rank {rank} is below latent dimension {latent_dim}; padding with zero rows");
    }

    // Coefficients W[n][d] = U[n][k_d] / sqrt(λ).
    let weights: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            kept.iter()
                .map(|&k| eig.eigenvectors[(s, k)] / eig.eigenvalues[k].sqrt())
                .collect()
        })
        .collect();
    let d = latent_dim;
    let mut basis_t = vec![0.0f64; v * d];
    basis_t
        .par_chunks_mut(d * 1024)
        .enumerate()
        .for_each(|(c, out)| {
            for (k, col) in out.chunks_mut(d).enumerate() {
                let i = c * 1024 + k;
                for (s, w) in weights.iter().enumerate() {
                    let x = f64::from(dev[s][i]);
                    if x == 0.0 {
                        continue;
                    }
                    for (o, wd) in col[..rank].iter_mut().zip(w) {
                        *o += wd * x;
                    }
                }
            }
        });

    // Sign convention: first nonzero entry of each row is positive.
    for r in 0..rank {
        let first = (0..v).map(|i| basis_t[i * d + r]).find(|&b| b != 0.0);
        if first.is_some_and(|b| b < 0.0) {
            for i in 0..v {
                basis_t[i * d + r] = -basis_t[i * d + r];
            }
        }
    }
    let mut scales = vec![0.0; d];
    for (r, &k) in kept.iter().enumerate() {
        scales[r] = (eig.eigenvalues[k] / n as f64).sqrt();
    }

    Ok(ShapePrior {
        dims,
        latent_dim: d,
        mean,
        basis_t,
        scales,
        rank,
        corpus_hash: corpus_hash(corpus),
    })
}

const MAGIC: &[u8; 4] = b"SPR1";
const TRAILER: &[u8; 4] = b"SCL1";

/// SPR1 body, then an `SCL1` trailer with the code scales, rank and corpus hash.
pub fn encode_prior(prior: &ShapePrior) -> Vec<u8> {
    let d = prior.latent_dim;
    let v = prior.cells();
    let mut out = Vec::with_capacity(24 + 8 * v * (d + 1) + 8 * d + 44);
    out.extend_from_slice(MAGIC);
    for x in prior.dims {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for m in &prior.mean {
        out.extend_from_slice(&m.to_le_bytes());
    }
    for r in 0..d {
        for i in 0..v {
            out.extend_from_slice(&prior.basis(r, i).to_le_bytes());
        }
    }
    out.extend_from_slice(TRAILER);
    for s in &prior.scales {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(prior.rank as u32).to_le_bytes());
    let mut hash = [0u8; 64];
    let h = prior.corpus_hash.as_bytes();
    hash[..h.len().min(64)].copy_from_slice(&h[..h.len().min(64)]);
    out.extend_from_slice(&hash);
    out
}

pub fn decode_prior(bytes: &[u8]) -> Result<ShapePrior, PriorError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], PriorError> {
        let s = bytes.get(pos..pos + n).ok_or(PriorError::Truncated)?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(PriorError::BadMagic);
    }
    let mut u32s = [0usize; 4];
    for x in u32s.iter_mut() {
        *x = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    }
    let dims = [u32s[0], u32s[1], u32s[2]];
    let d = u32s[3];
    if d == 0 {
        return Err(PriorError::ZeroDim);
    }
    let v = dims.iter().product::<usize>();
    let f64s = |s: &[u8]| -> Vec<f64> {
        s.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let mean = f64s(take(8 * v)?);
    let rows = f64s(take(8 * v * d)?);
    let mut basis_t = vec![0.0; v * d];
    for r in 0..d {
        for i in 0..v {
            basis_t[i * d + r] = rows[r * v + i];
        }
    }
    let rank_of = |bt: &[f64]| (0..d).filter(|&r| (0..v).any(|i| bt[i * d + r] != 0.0)).count();
    let (scales, rank, corpus_hash) = match bytes.get(pos..pos + 4) {
        Some(t) if t == TRAILER => {
            pos += 4;
            let scales = f64s(bytes.get(pos..pos + 8 * d).ok_or(PriorError::Truncated)?);
            pos += 8 * d;
            let rank = bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                .ok_or(PriorError::Truncated)?;
            pos += 4;
            let hash = bytes.get(pos..pos + 64).ok_or(PriorError::Truncated)?;
            let hash = String::from_utf8_lossy(hash).trim_end_matches('\0').to_string();
            (scales, rank, hash)
        }
        _ => (vec![1.0; d], rank_of(&basis_t), String::new()),
    };
    Ok(ShapePrior {
        dims,
        latent_dim: d,
        mean,
        basis_t,
        scales,
        rank,
        corpus_hash,
    })
}

pub fn write_prior(prior: &ShapePrior, path: impl AsRef<Path>) -> Result<(), PriorError> {
    fs::File::create(path)?.write_all(&encode_prior(prior))?;
    Ok(())
}

pub fn read_prior(path: impl AsRef<Path>) -> Result<ShapePrior, PriorError> {
    decode_prior(&fs::read(path)?)
}

/// Cells each depth ray crosses before its return become empty targets and
/// the cell where it returns becomes occupied.
pub fn visibility_constraints(depth: &DepthMap, dims: Dims, frame: &VoxelFrame) -> ConstraintSet {
    let cam = &depth.camera;
    let origin = frame.world_to_voxel(&cam.position);
    let mut empty = BTreeSet::new();
    let mut occupied = BTreeSet::new();
    for row in 0..cam.height {
        for col in 0..cam.width {
            let Some(range) = depth.get(row, col) else {
                continue;
            };
            let dir = frame.world_dir_to_voxel(&cam.ray(row, col));
            for step in traverse(dims, &origin, &dir, f64::INFINITY) {
                if step.t_exit <= range {
                    empty.insert(step.cell);
                } else {
                    if step.t_enter <= range {
                        occupied.insert(step.cell);
                    }
                    break;
                }
            }
        }
    }
    let mut cs = ConstraintSet::new(dims);
    for c in empty {
        cs.mark(c, Target::Empty).expect("traversal stays in bounds");
    }
    for c in occupied {
        cs.mark(c, Target::Occupied).expect("traversal stays in bounds");
    }
    cs
}

/// Descent settings used for the single-view fit.
pub fn vision_params() -> DescentParams {
    DescentParams {
        steps: 1500,
        lr: VISION_LR,
        tolerance: 1e-6,
        prior_weight: 1.0,
    }
}

pub const VISION_LR: f64 = 0.001;

/// Fits a latent code to one depth view, starting from the mean shape.
pub fn vision_proxy(
    prior: &ShapePrior,
    depth: &DepthMap,
    frame: &VoxelFrame,
    params: &DescentParams,
) -> Result<Vec<f64>, PriorError> {
    if depth.returns() == 0 {
        return Err(PriorError::NoVisiblePixels);
    }
    let cs = visibility_constraints(depth, prior.dims(), frame);
    let objective = LatentObjective::new(prior, &cs).map_err(|e| match e {
        RefineError::Prior(p) => p,
        other => PriorError::Constraint(other.to_string()),
    })?
    .with_prior_weight(params.prior_weight);
    Ok(descend(&objective, &vec![0.0; prior.latent_dim()], params).z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{generate_corpus, ShapeCorpusSpec};

    fn grid(dims: Dims, f: impl Fn([usize; 3]) -> f32) -> VoxelGrid {
        let mut g = VoxelGrid::new(dims, VoxelFrame::default());
        for i in 0..g.len() {
            g.set_index(i, f(g.cell(i)));
        }
        g
    }

    #[test]
    fn single_shape_mean_reproduces_it() {
        let g = grid([6, 6, 6], |c| if c[0] > 2 { 1.0 } else { 0.0 });
        let p = fit_prior(&[&g], 1).unwrap();
        assert!(p.is_rank_deficient());
        let out = p.decode(&[0.0], VoxelFrame::default()).unwrap();
        for (a, b) in out.values().iter().zip(g.values()) {
            assert!((a - b).abs() <= 1e-3 + 1e-6);
        }
        // Logit clamp: decoded mean sits exactly at ε / 1-ε.
        assert!((p.mean()[0] - logit(0.0)).abs() < 1e-12);
    }

    #[test]
    fn two_shapes_split_along_one_direction() {
        let a = grid([5, 5, 5], |c| if c[2] < 2 { 1.0 } else { 0.0 });
        let b = grid([5, 5, 5], |c| if c[2] < 4 { 1.0 } else { 0.0 });
        let p = fit_prior(&[&a, &b], 1).unwrap();
        let s = p.scales()[0];
        let plus = p.decode(&[s], VoxelFrame::default()).unwrap();
        let minus = p.decode(&[-s], VoxelFrame::default()).unwrap();
        let mse = |x: &VoxelGrid, y: &VoxelGrid| {
            x.values().iter().zip(y.values()).map(|(p, q)| f64::from(p - q).powi(2)).sum::<f64>() / x.len() as f64
        };
        let (m1, m2) = (mse(&plus, &a).min(mse(&plus, &b)), mse(&minus, &a).min(mse(&minus, &b)));
        assert!(m1 <= 1e-3 && m2 <= 1e-3, "{m1} {m2}");
        assert!(mse(&plus, &minus) > 0.1);
    }

    #[test]
    fn basis_is_orthonormal_with_sign_convention() {
        let corpus = generate_corpus(&ShapeCorpusSpec::balanced(16, 4, 1)).unwrap();
        let grids: Vec<&VoxelGrid> = corpus.iter().map(|c| &c.grid).collect();
        let p = fit_prior(&grids, 8).unwrap();
        assert!(p.orthonormality_error() <= 1e-6, "{}", p.orthonormality_error());
        for d in 0..p.rank() {
            let row = p.basis_row(d);
            assert!(row.iter().find(|&&b| b != 0.0).is_some_and(|&b| b > 0.0));
        }
        let again = fit_prior(&grids, 8).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn encode_of_mean_and_half_grid() {
        let corpus = generate_corpus(&ShapeCorpusSpec::balanced(12, 3, 2)).unwrap();
        let grids: Vec<&VoxelGrid> = corpus.iter().map(|c| &c.grid).collect();
        let p = fit_prior(&grids, 5).unwrap();
        let mean = VoxelGrid::from_values(
            p.dims(),
            p.mean().iter().map(|&m| sigmoid(m) as f32).collect(),
            VoxelFrame::default(),
        )
        .unwrap();
        let z = p.encode(&mean).unwrap();
        assert!(z.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-3, "{z:?}");

        let half = VoxelGrid::filled(p.dims(), 0.5, VoxelFrame::default());
        let z = p.encode(&half).unwrap();
        for (d, zd) in z.iter().enumerate() {
            let want: f64 = (0..p.cells()).map(|i| -p.basis(d, i) * p.mean()[i]).sum();
            assert!((zd - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn decode_stays_inside_unit_interval() {
        let corpus = generate_corpus(&ShapeCorpusSpec::balanced(12, 2, 5)).unwrap();
        let grids: Vec<&VoxelGrid> = corpus.iter().map(|c| &c.grid).collect();
        let p = fit_prior(&grids, 3).unwrap();
        let g = p.decode(&[1e6, 0.0, 0.0], VoxelFrame::default()).unwrap();
        assert!(g.values().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(matches!(
            p.decode(&[0.0], VoxelFrame::default()),
            Err(PriorError::DimMismatch { expected: 3, actual: 1 })
        ));
    }

    #[test]
    fn file_round_trip() {
        let corpus = generate_corpus(&ShapeCorpusSpec::balanced(16, 2, 5)).unwrap();
        let grids: Vec<&VoxelGrid> = corpus.iter().map(|c| &c.grid).collect();
        let p = fit_prior(&grids, 4).unwrap();
        let back = decode_prior(&encode_prior(&p)).unwrap();
        assert_eq!(p, back);
        assert!(matches!(decode_prior(b"SPRX"), Err(PriorError::BadMagic)));
        let bytes = encode_prior(&p);
        assert!(matches!(decode_prior(&bytes[..100]), Err(PriorError::Truncated)));
    }
}
