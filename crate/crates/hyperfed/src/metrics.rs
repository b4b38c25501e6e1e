//! Classifier-disparity diagnostics, accuracy, the analytic
//! communication/computation cost ledger, and feature dumps.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, predict, ClassifierHead, MlpExtractor};
use crate::numerics::{dot, norm, Matrix};

/// Cross-client classifier weight consistency: mean pairwise cosine and
/// mean absolute norm difference over all classes and unordered client
/// pairs.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AlignmentStats {
    pub mean_cosine: f64,
    pub mean_norm_diff: f64,
    /// Per class: (mean cosine, mean norm difference) over client pairs.
    pub per_class: Vec<(f64, f64)>,
    /// Pairs skipped because one row had zero norm.
    pub skipped: usize,
}

pub fn classifier_alignment(heads: &[&Matrix]) -> Result<AlignmentStats> {
    let k = heads.len();
    if k < 2 {
        return Err(Error::Parameter(
            "alignment needs at least two client heads".into(),
        ));
    }
    let c = heads[0].rows();
    let l = heads[0].cols();
    for h in heads {
        if h.rows() != c || h.cols() != l {
            return Err(Error::Shape {
                op: "classifier_alignment",
                detail: format!("{}x{} vs {}x{}", h.rows(), h.cols(), c, l),
            });
        }
    }
    let mut per_class = Vec::with_capacity(c);
    let mut cos_total = 0.0;
    let mut cos_count = 0usize;
    let mut norm_total = 0.0;
    let mut norm_count = 0usize;
    let mut skipped = 0usize;
    for class in 0..c {
        let mut ccos = 0.0;
        let mut ncos = 0usize;
        let mut cnorm = 0.0;
        let mut nnorm = 0usize;
        for k1 in 0..k {
            for k2 in k1 + 1..k {
                let w1 = heads[k1].row(class);
                let w2 = heads[k2].row(class);
                let n1 = norm(w1);
                let n2 = norm(w2);
                cnorm += (n1 - n2).abs();
                nnorm += 1;
                if n1 == 0.0 || n2 == 0.0 {
                    skipped += 1;
                    continue;
                }
                ccos += dot(w1, w2) / (n1 * n2);
                ncos += 1;
            }
        }
        cos_total += ccos;
        cos_count += ncos;
        norm_total += cnorm;
        norm_count += nnorm;
        per_class.push((
            if ncos > 0 { ccos / ncos as f64 } else { f64::NAN },
            cnorm / nnorm as f64,
        ));
    }
    Ok(AlignmentStats {
        mean_cosine: if cos_count > 0 {
            cos_total / cos_count as f64
        } else {
            f64::NAN
        },
        mean_norm_diff: norm_total / norm_count as f64,
        per_class,
        skipped,
    })
}

/// Fraction of argmax hits on an evaluation set.
pub fn accuracy(model: &MlpExtractor, head: &ClassifierHead, eval: &Dataset) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Parameter("empty evaluation set".into()));
    }
    let mut hits = 0usize;
    for i in 0..eval.len() {
        let trace = forward(model, head, eval.features.row(i))?;
        if predict(&trace.logits) == eval.labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / eval.len() as f64)
}

/// Which classifier-related traffic a training strategy generates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommPath {
    /// Trainable head exchanged both directions every round.
    TrainableHead,
    /// Fixed head: nothing moves during training; the calibration payload
    /// of l*(l+C) parameters is uploaded once.
    FfcPayload,
}

#[derive(Clone, Copy, Debug)]
pub struct CommCost {
    pub per_client_bytes: u64,
    pub total_bytes: u64,
}

/// Analytic classifier communication. Convention: per client, both
/// directions for the trainable head, upload only for the one-shot
/// calibration payload.
pub fn cost_classifier_comm(
    path: CommPath,
    l: usize,
    c: usize,
    k: usize,
    rounds: usize,
    bytes_per_param: u64,
) -> CommCost {
    let per_client = match path {
        CommPath::TrainableHead => (l * c) as u64 * bytes_per_param * 2 * rounds as u64,
        CommPath::FfcPayload => (l * (l + c)) as u64 * bytes_per_param,
    };
    CommCost {
        per_client_bytes: per_client,
        total_bytes: per_client * k as u64,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfcFlops {
    /// Sum over clients of 2*l*|D^k|*(l+C).
    pub client_flops: u64,
    /// Server-side solve: (2/3)*l^3 + 2*l^2*C.
    pub server_flops: u64,
}

pub fn cost_ffc_flops(l: usize, c: usize, client_sizes: &[usize]) -> FfcFlops {
    let client: u64 = client_sizes
        .iter()
        .map(|&n| 2 * l as u64 * n as u64 * (l + c) as u64)
        .sum();
    let server = 2 * (l as u64).pow(3) / 3 + 2 * (l as u64).pow(2) * c as u64;
    FfcFlops {
        client_flops: client,
        server_flops: server,
    }
}

/// Training FLOPs for a trainable classifier under a 2*(multiply+add)
/// convention: forward excluded (all strategies share it), backward
/// counts gradient w.r.t. weights and input, 2*2*l*C per sample step.
pub fn cost_trainable_head_flops(l: usize, c: usize, sample_steps: u64) -> u64 {
    4 * l as u64 * c as u64 * sample_steps
}

/// Monotone per-run accumulator of classifier-related costs.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct CostLedger {
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub client_flops: u64,
    pub server_flops: u64,
}

impl CostLedger {
    pub fn add_upload(&mut self, bytes: u64) {
        self.upload_bytes += bytes;
    }

    pub fn add_download(&mut self, bytes: u64) {
        self.download_bytes += bytes;
    }

    pub fn add_client_flops(&mut self, flops: u64) {
        self.client_flops += flops;
    }

    pub fn add_server_flops(&mut self, flops: u64) {
        self.server_flops += flops;
    }

    pub fn delta_since(&self, earlier: &CostLedger) -> CostLedger {
        CostLedger {
            upload_bytes: self.upload_bytes - earlier.upload_bytes,
            download_bytes: self.download_bytes - earlier.download_bytes,
            client_flops: self.client_flops - earlier.client_flops,
            server_flops: self.server_flops - earlier.server_flops,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDump {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_clients: usize,
    /// (client id, label, normalized feature) per sample.
    pub records: Vec<(usize, usize, Vec<f64>)>,
}

const DUMP_MAGIC: &[u8; 4] = b"HFFD";

/// Write normalized features of a data subset for external plotting.
/// Text mode: a header line "l C K" then one record per line. Binary mode
/// stores the same records as little-endian f64.
pub fn dump_features(
    model: &MlpExtractor,
    ds: &Dataset,
    client_of: &[usize],
    num_clients: usize,
    path: &Path,
    binary: bool,
) -> Result<usize> {
    if ds.is_empty() {
        return Err(Error::Parameter("empty feature-dump subset".into()));
    }
    if client_of.len() != ds.len() {
        return Err(Error::Consistency(format!(
            "{} client ids for {} samples",
            client_of.len(),
            ds.len()
        )));
    }
    let io_err = |e| Error::io(path.display().to_string(), e);
    let l = model.feature_dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let mut write = || -> Result<()> {
        if binary {
            f.write_all(DUMP_MAGIC).map_err(io_err)?;
            for v in [l, ds.num_classes, num_clients, ds.len()] {
                f.write_all(&(v as u64).to_le_bytes()).map_err(io_err)?;
            }
        } else {
            writeln!(f, "{} {} {}", l, ds.num_classes, num_clients).map_err(io_err)?;
        }
        for i in 0..ds.len() {
            let z = crate::model::normalized_feature(model, ds.features.row(i))?;
            if binary {
                f.write_all(&(client_of[i] as u64).to_le_bytes()).map_err(io_err)?;
                f.write_all(&(ds.labels[i] as u64).to_le_bytes()).map_err(io_err)?;
                for v in &z {
                    f.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
            } else {
                write!(f, "{} {}", client_of[i], ds.labels[i]).map_err(io_err)?;
                for v in &z {
                    write!(f, " {v}").map_err(io_err)?;
                }
                writeln!(f).map_err(io_err)?;
            }
        }
        f.flush().map_err(io_err)
    };
    write()?;
    Ok(ds.len())
}

pub fn read_features(path: &Path, binary: bool) -> Result<FeatureDump> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    if binary {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(io_err)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad feature-dump magic".into(),
            });
        }
        let read_u64 = |f: &mut dyn Read| -> Result<u64> {
            let mut b = [0u8; 8];
            f.read_exact(&mut b).map_err(io_err)?;
            Ok(u64::from_le_bytes(b))
        };
        let l = read_u64(&mut f)? as usize;
        let c = read_u64(&mut f)? as usize;
        let k = read_u64(&mut f)? as usize;
        let n = read_u64(&mut f)? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let client = read_u64(&mut f)? as usize;
            let label = read_u64(&mut f)? as usize;
            let mut z = Vec::with_capacity(l);
            for _ in 0..l {
                let mut b = [0u8; 8];
                f.read_exact(&mut b).map_err(io_err)?;
                z.push(f64::from_le_bytes(b));
            }
            records.push((client, label, z));
        }
        Ok(FeatureDump {
            feature_dim: l,
            num_classes: c,
            num_clients: k,
            records,
        })
    } else {
        let f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format {
                offset: 0,
                detail: "missing header".into(),
            })?
            .map_err(io_err)?;
        let parts: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format {
                offset: 0,
                detail: format!("bad header token {t}"),
            }))
            .collect::<Result<_>>()?;
        if parts.len() != 3 {
            return Err(Error::Format {
                offset: 0,
                detail: "header must be 'l C K'".into(),
            });
        }
        let (l, c, k) = (parts[0], parts[1], parts[2]);
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let client: usize = toks.next().unwrap().parse().map_err(|_| Error::Format {
                offset: 0,
                detail: "bad client id".into(),
            })?;
            let label: usize = toks.next().unwrap().parse().map_err(|_| Error::Format {
                offset: 0,
                detail: "bad label".into(),
            })?;
            let z: Vec<f64> = toks
                .map(|t| t.parse().map_err(|_| Error::Format {
                    offset: 0,
                    detail: format!("bad float {t}"),
                }))
                .collect::<Result<_>>()?;
            if z.len() != l {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("{} features, expected {l}", z.len()),
                });
            }
            records.push((client, label, z));
        }
        Ok(FeatureDump {
            feature_dim: l,
            num_classes: c,
            num_clients: k,
            records,
        })
    }
}
