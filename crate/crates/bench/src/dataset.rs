//! Synthetic datasets and their binary container.
//!
//! Layout: magic `ISPP1`, little-endian `u64 n`, `u64 d`, then `f64` values of
//! `A` (row-major), `b`, `x*` and `σ`. Kind, sparsity and seed live in the
//! sidecar manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ispppa::{DataMatrix, Matrix, Vector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 5] = b"ISPP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// `b = sign(Ax* + σξ)` with `sign(0) = +1`.
    LogisticLabels,
    /// `b = Ax* + σξ`.
    LinearResponse,
    /// `b = (Ax*)² + σξ`.
    PhaseRetrieval,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::LogisticLabels => "logistic_labels",
            DatasetKind::LinearResponse => "linear_response",
            DatasetKind::PhaseRetrieval => "phase_retrieval",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "logistic_labels" => DatasetKind::LogisticLabels,
            "linear_response" => DatasetKind::LinearResponse,
            "phase_retrieval" => DatasetKind::PhaseRetrieval,
            other => bail!("unknown dataset kind {other:?}"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub d: usize,
    /// Fraction of nonzeros in `x*`.
    pub sparsity: f64,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub a: Matrix,
    pub b: Vector,
    pub x_star: Vector,
    pub sigma: f64,
    pub sparsity: f64,
    pub seed: u64,
}

pub fn gen_synthetic(spec: &DatasetSpec) -> Result<Dataset> {
    ensure!(spec.n >= 1 && spec.d >= 1, "need n, d ≥ 1");
    ensure!(spec.sparsity > 0.0 && spec.sparsity <= 1.0, "sparsity must lie in (0, 1]");
    ensure!(spec.sigma >= 0.0 && spec.sigma.is_finite(), "sigma must be nonnegative");
    let (n, d) = (spec.n, spec.d);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let mut entries = Vec::with_capacity(n * d);
    entries.extend((0..n * d).map(|_| normal()));
    let a = Matrix::from_row_slice(n, d, &entries);

    let nnz = ((spec.sparsity * d as f64).floor() as usize).max(1).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut x_star = Vector::zeros(d);
    let mut support = index::sample(&mut rng, d, nnz).into_vec();
    support.sort_unstable();
    for j in support {
        x_star[j] = rng.sample(StandardNormal);
    }
    let noise = Vector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let ax = &a * &x_star;
    let b = match spec.kind {
        DatasetKind::LogisticLabels => (&ax + &noise * spec.sigma).map(|t| if t >= 0.0 { 1.0 } else { -1.0 }),
        DatasetKind::LinearResponse => &ax + &noise * spec.sigma,
        DatasetKind::PhaseRetrieval => ax.map(|t| t * t) + &noise * spec.sigma,
    };
    Ok(Dataset {
        kind: spec.kind,
        a,
        b,
        x_star,
        sigma: spec.sigma,
        sparsity: spec.sparsity,
        seed: spec.seed,
    })
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    pub fn data_matrix(&self) -> Result<DataMatrix> {
        Ok(DataMatrix::new(self.a.clone(), self.b.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = (self.n(), self.d());
        let mut out = Vec::with_capacity(5 + 16 + 8 * (n * d + n + d + 1));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        for i in 0..n {
            for j in 0..d {
                out.extend_from_slice(&self.a[(i, j)].to_le_bytes());
            }
        }
        for v in self.b.iter().chain(self.x_star.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.sigma.to_le_bytes());
        out
    }

    /// Decodes the binary container; kind, sparsity and seed come from the
    /// manifest and are passed in.
    pub fn from_bytes(bytes: &[u8], kind: DatasetKind, sparsity: f64, seed: u64) -> Result<Self> {
        ensure!(bytes.len() >= 21 && &bytes[..5] == MAGIC, "not an ISPP1 container");
        let word = |i: usize| -> [u8; 8] { bytes[i..i + 8].try_into().expect("8 bytes") };
        let n = u64::from_le_bytes(word(5)) as usize;
        let d = u64::from_le_bytes(word(13)) as usize;
        let count = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_add(n + d + 1))
            .context("container dimensions overflow")?;
        ensure!(bytes.len() == 21 + 8 * count, "container length does not match n = {n}, d = {d}");
        let mut values = (0..count).map(|k| f64::from_le_bytes(word(21 + 8 * k)));
        let a: Vec<f64> = values.by_ref().take(n * d).collect();
        let b: Vec<f64> = values.by_ref().take(n).collect();
        let x: Vec<f64> = values.by_ref().take(d).collect();
        let sigma = values.next().context("missing sigma")?;
        Ok(Self {
            kind,
            a: Matrix::from_row_slice(n, d, &a),
            b: Vector::from_vec(b),
            x_star: Vector::from_vec(x),
            sigma,
            sparsity,
            seed,
        })
    }

    pub fn manifest(&self) -> String {
        let mut s = String::new();
        writeln!(s, "format = ISPP1").unwrap();
        writeln!(s, "kind = {}", self.kind.name()).unwrap();
        writeln!(s, "n = {}", self.n()).unwrap();
        writeln!(s, "d = {}", self.d()).unwrap();
        writeln!(s, "sparsity = {:?}", self.sparsity).unwrap();
        writeln!(s, "nnz = {}", self.x_star.iter().filter(|v| **v != 0.0).count()).unwrap();
        writeln!(s, "sigma = {:?}", self.sigma).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        s
    }

    /// Writes `<stem>.bin` and `<stem>.manifest` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.bin")), self.to_bytes())?;
        fs::write(dir.join(format!("{stem}.manifest")), self.manifest())?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let manifest_path = dir.join(format!("{stem}.manifest"));
        let manifest = fs::read_to_string(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
        let field = |key: &str| -> Result<&str> {
            manifest
                .lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim())
                .with_context(|| format!("manifest lacks {key}"))
        };
        let kind = DatasetKind::parse(field("kind")?)?;
        let sparsity: f64 = field("sparsity")?.parse()?;
        let seed: u64 = field("seed")?.parse()?;
        let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
        Self::from_bytes(&bytes, kind, sparsity, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind, sigma: f64) -> DatasetSpec {
        DatasetSpec {
            kind,
            n: 50,
            d: 8,
            sparsity: 0.25,
            sigma,
            seed: 3,
        }
    }

    #[test]
    fn noiseless_linear_response_is_exact() {
        let ds = gen_synthetic(&spec(DatasetKind::LinearResponse, 0.0)).unwrap();
        assert_eq!((&ds.b - &ds.a * &ds.x_star).norm(), 0.0);
    }

    #[test]
    fn labels_follow_the_sign_rule() {
        let ds = gen_synthetic(&spec(DatasetKind::LogisticLabels, 0.0)).unwrap();
        let ax = &ds.a * &ds.x_star;
        for (t, b) in ax.iter().zip(ds.b.iter()) {
            assert_eq!(*b, if *t >= 0.0 { 1.0 } else { -1.0 });
        }
        // A zero planted vector puts every margin at 0, labelled +1.
        let mut zero = ds.clone();
        zero.x_star.fill(0.0);
        assert!((&zero.a * &zero.x_star).iter().all(|t| (if *t >= 0.0 { 1.0 } else { -1.0 }) == 1.0));
    }

    #[test]
    fn support_size_is_floor_of_fraction() {
        let s = DatasetSpec {
            kind: DatasetKind::LinearResponse,
            n: 10_000,
            d: 100,
            sparsity: 0.1,
            sigma: 0.01,
            seed: 0,
        };
        let ds = gen_synthetic(&s).unwrap();
        assert_eq!(ds.x_star.iter().filter(|v| **v != 0.0).count(), 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(&spec(DatasetKind::PhaseRetrieval, 0.1)).unwrap();
        assert_eq!(a, gen_synthetic(&spec(DatasetKind::PhaseRetrieval, 0.1)).unwrap());
        let mut other = spec(DatasetKind::PhaseRetrieval, 0.1);
        other.seed = 4;
        assert_ne!(a, gen_synthetic(&other).unwrap());
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let ds = gen_synthetic(&spec(DatasetKind::LogisticLabels, 0.3)).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(&bytes[..5], b"ISPP1");
        assert_eq!(Dataset::from_bytes(&bytes, ds.kind, ds.sparsity, ds.seed).unwrap(), ds);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1], ds.kind, ds.sparsity, ds.seed).is_err());
    }
}
