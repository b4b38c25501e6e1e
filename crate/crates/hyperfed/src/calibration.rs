//! Closed-form classifier calibration: clients upload compact sufficient
//! statistics of their normalized features, the server solves one ridge
//! system and replaces the classifier with the least-squares optimum.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{normalized_feature, ClassifierHead, MlpExtractor};
use crate::numerics::{matmul, outer_accumulate, solve_spd, Matrix};

/// Per-client sufficient statistics: v = sum of z z^T (l x l),
/// u = sum of z one_hot(y)^T (l x C), over normalized features z.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibStats {
    pub v: Matrix,
    pub u: Matrix,
    pub count: usize,
}

const STATS_MAGIC: &[u8; 4] = b"HFCS";
const STATS_VERSION: u32 = 1;

impl CalibStats {
    pub fn feature_dim(&self) -> usize {
        self.v.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.u.cols()
    }

    /// Upload size in parameters: l*(l+C).
    pub fn payload_params(&self) -> usize {
        let l = self.feature_dim();
        l * (l + self.num_classes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let l = self.feature_dim();
        let c = self.num_classes();
        let mut out = Vec::with_capacity(24 + 8 * l * (l + c));
        out.extend_from_slice(STATS_MAGIC);
        out.extend_from_slice(&STATS_VERSION.to_le_bytes());
        out.extend_from_slice(&(l as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        out.extend_from_slice(&(self.count as u64).to_le_bytes());
        for i in 0..l {
            for &x in self.v.row(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for i in 0..l {
            for &x in self.u.row(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CalibStats> {
        let mut r = bytes;
        let mut offset = 0usize;
        let mut take = |n: usize, r: &mut &[u8]| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|_| Error::Format {
                offset: offset as u64,
                detail: "truncated calibration payload".into(),
            })?;
            offset += n;
            Ok(buf)
        };
        let magic = take(4, &mut r)?;
        if magic != STATS_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad calibration-stats magic".into(),
            });
        }
        let version = u32::from_le_bytes(take(4, &mut r)?.try_into().unwrap());
        if version != STATS_VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported stats version {version}"),
            });
        }
        let l = u32::from_le_bytes(take(4, &mut r)?.try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(take(4, &mut r)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(8, &mut r)?.try_into().unwrap()) as usize;
        let mut read_mat = |rows: usize, cols: usize, r: &mut &[u8]| -> Result<Matrix> {
            let raw = take(8 * rows * cols, r)?;
            let data = raw
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let v = read_mat(l, l, &mut r)?;
        let u = read_mat(l, c, &mut r)?;
        if !r.is_empty() {
            return Err(Error::Format {
                offset: offset as u64,
                detail: format!("{} trailing bytes", r.len()),
            });
        }
        Ok(CalibStats { v, u, count })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<CalibStats> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        CalibStats::from_bytes(&bytes)
    }
}

/// Accumulate a client's statistics over the given sample indices in
/// ascending order (the order is part of the determinism contract).
pub fn client_stats(model: &MlpExtractor, ds: &Dataset, indices: &[usize]) -> Result<CalibStats> {
    let l = model.feature_dim();
    let c = ds.num_classes;
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    let mut v = Matrix::zeros(l, l);
    let mut u = Matrix::zeros(l, c);
    for &i in &sorted {
        if i >= ds.len() {
            return Err(Error::Consistency(format!("sample index {i} out of range")));
        }
        let z = normalized_feature(model, ds.features.row(i))?;
        outer_accumulate(&mut v, &z, &z)?;
        let mut onehot = vec![0.0; c];
        onehot[ds.labels[i]] = 1.0;
        outer_accumulate(&mut u, &z, &onehot)?;
    }
    Ok(CalibStats {
        v,
        u,
        count: sorted.len(),
    })
}

#[derive(Clone, Debug)]
pub struct CalibratedHead {
    /// C x l replacement classifier.
    pub weights: Matrix,
    pub lambda: f64,
    /// True when the solver needed its internal jitter fallback.
    pub regularized: bool,
}

impl CalibratedHead {
    /// Package the calibrated weights as a fixed classifier head.
    pub fn into_head(self, temperature: f64) -> ClassifierHead {
        ClassifierHead {
            weights: self.weights,
            fixed: true,
            normalize_features: true,
            temperature,
        }
    }
}

/// Solve (sum V + lambda I) X = sum U and return W* = X^T. Summation runs
/// in slice order, so callers must pass clients sorted by id for
/// bit-reproducibility.
pub fn server_solve(stats: &[CalibStats], lambda: f64) -> Result<CalibratedHead> {
    if stats.is_empty() {
        return Err(Error::Parameter("no calibration statistics".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let l = stats[0].feature_dim();
    let c = stats[0].num_classes();
    let mut a = Matrix::zeros(l, l);
    let mut u = Matrix::zeros(l, c);
    for s in stats {
        if s.feature_dim() != l || s.num_classes() != c {
            return Err(Error::Consistency(format!(
                "stats shape {}x{} vs {}x{}",
                s.feature_dim(),
                s.num_classes(),
                l,
                c
            )));
        }
        a.add_assign(&s.v)?;
        u.add_assign(&s.u)?;
    }
    for i in 0..l {
        let d = a.get(i, i) + lambda;
        a.set(i, i, d);
    }
    let sol = solve_spd(&a, &u).map_err(|e| match e {
        Error::Singular { pivot, .. } => Error::Singular {
            pivot,
            advise_ridge: lambda == 0.0,
        },
        other => other,
    })?;
    Ok(CalibratedHead {
        weights: sol.x.transpose(),
        lambda,
        regularized: sol.regularized,
    })
}

/// Single-client shortcut: calibrate on local data only.
pub fn local_calibrate(
    model: &MlpExtractor,
    ds: &Dataset,
    indices: &[usize],
    lambda: f64,
) -> Result<CalibratedHead> {
    server_solve(&[client_stats(model, ds, indices)?], lambda)
}

/// Mean squared-error objective the calibration minimizes (lambda = 0):
/// average over samples of (1/C) ||W z - one_hot(y)||^2.
pub fn head_mse(model: &MlpExtractor, weights: &Matrix, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Parameter("empty dataset".into()));
    }
    let c = weights.rows();
    let mut total = 0.0;
    for i in 0..ds.len() {
        let z = normalized_feature(model, ds.features.row(i))?;
        let zm = Matrix::from_vec(z.len(), 1, z)?;
        let o = matmul(weights, &zm)?;
        let mut acc = 0.0;
        for k in 0..c {
            let t = if k == ds.labels[i] { 1.0 } else { 0.0 };
            let d = o.get(k, 0) - t;
            acc += d * d;
        }
        total += acc / c as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Reference fine-tune: mini-batch SGD on the head alone over pooled data,
/// extractor frozen. Used as an independent check of the closed form.
pub fn oracle_finetune(
    model: &MlpExtractor,
    ds: &Dataset,
    init: &Matrix,
    epochs: usize,
    lr: f64,
    batch: usize,
    rng: &mut crate::numerics::Rng,
) -> Result<Matrix> {
    if batch == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let c = init.rows();
    let l = init.cols();
    if ds.num_classes != c || model.feature_dim() != l {
        return Err(Error::Shape {
            op: "oracle_finetune",
            detail: format!("head {c}x{l} vs data C={} l={}", ds.num_classes, model.feature_dim()),
        });
    }
    // Features never change, so compute them once.
    let mut feats = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        feats.push(normalized_feature(model, ds.features.row(i))?);
    }
    let mut w = init.clone();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for _ in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let mut grad = Matrix::zeros(c, l);
            for &i in chunk {
                let z = &feats[i];
                for k in 0..c {
                    let o = crate::numerics::dot(w.row(k), z);
                    let t = if k == ds.labels[i] { 1.0 } else { 0.0 };
                    let g = 2.0 / c as f64 * (o - t);
                    outer_accumulate(&mut grad, &{
                        let mut e = vec![0.0; c];
                        e[k] = g;
                        e
                    }, z)?;
                }
            }
            grad.scale(1.0 / chunk.len() as f64);
            grad.scale(-lr);
            w.add_assign(&grad)?;
        }
    }
    Ok(w)
}
