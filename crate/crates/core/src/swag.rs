//! SWAG: a Gaussian posterior fitted to SGD iterates.
//!
//! The mean is the average of per-epoch parameter snapshots. The covariance is
//! `½ (Σ_diag + D̂ D̂ᵀ / (K − 1))`, where `Σ_diag` is the diagonal of the
//! snapshot second moment minus the squared mean and `D̂` holds the last `K`
//! deviations `θ_t − θ̄_t` from the running mean.
//!
//! Draws use `θ̄ + Σ_diag^{1/2} z₁ / √2 + D̂ z₂ / √(2(K − 1))` with standard
//! normal `z₁ ∈ ℝᵖ`, `z₂ ∈ ℝᴷ`.

use std::collections::VecDeque;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_container, save_container};
use crate::error::{Error, Result};
use crate::params::{Layout, ParameterVector};

/// Default cap on retained deviation columns.
pub const DEFAULT_MAX_RANK: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SwagMoments {
    layout: Layout,
    count: usize,
    max_rank: usize,
    mean: Vec<f64>,
    sq_mean: Vec<f64>,
    /// Oldest first.
    deviations: VecDeque<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentsHeader {
    kind: String,
    count: usize,
    max_rank: usize,
    columns: usize,
    layout: Layout,
}

const MOMENTS_KIND: &str = "swag-moments";

impl SwagMoments {
    pub fn new(layout: Layout, max_rank: usize) -> Result<Self> {
        if max_rank == 0 {
            return Err(Error::invalid("SWAG rank cap must be at least 1"));
        }
        let p = layout.len();
        Ok(SwagMoments {
            layout,
            count: 0,
            max_rank,
            mean: vec![0.0; p],
            sq_mean: vec![0.0; p],
            deviations: VecDeque::new(),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Number of snapshots absorbed, `T`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    /// Retained deviation columns, `K`.
    pub fn rank(&self) -> usize {
        self.deviations.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sq_mean(&self) -> &[f64] {
        &self.sq_mean
    }

    pub fn deviation_columns(&self) -> impl Iterator<Item = &[f64]> {
        self.deviations.iter().map(Vec::as_slice)
    }

    pub fn mean_params(&self) -> Result<ParameterVector> {
        ParameterVector::new(self.layout.clone(), self.mean.clone())
    }

    /// Folds one epoch snapshot into the running moments.
    pub fn absorb(&mut self, theta: &ParameterVector) -> Result<()> {
        if theta.layout() != &self.layout {
            return Err(Error::LayoutMismatch("snapshot layout differs from SWAG layout".into()));
        }
        let t = (self.count + 1) as f64;
        let mut deviation = Vec::with_capacity(self.mean.len());
        for ((m, sq), x) in self.mean.iter_mut().zip(&mut self.sq_mean).zip(theta.values()) {
            // Incremental form keeps a constant stream exactly constant.
            *m += (x - *m) / t;
            *sq += (x * x - *sq) / t;
            deviation.push(x - *m);
        }
        self.count += 1;
        self.deviations.push_back(deviation);
        if self.deviations.len() > self.max_rank {
            self.deviations.pop_front();
        }
        Ok(())
    }

    /// `θ²̄ − θ̄²` before clamping.
    pub fn diag_variance(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.sq_mean)
            .map(|(m, sq)| sq - m * m)
            .collect()
    }

    /// Number of diagonal entries that are negative and get clamped to zero.
    pub fn clamped_entries(&self) -> usize {
        self.diag_variance().iter().filter(|v| **v < 0.0).count()
    }

    /// `θ̄ + Σ_diag^{1/2} ⊙ z₁ / √2 + D̂ z₂ / √(2(K − 1))`.
    pub fn covariance_apply(&self, z1: &[f64], z2: &[f64]) -> Result<ParameterVector> {
        if self.count == 0 {
            return Err(Error::invalid("SWAG moments are empty; absorb a snapshot first"));
        }
        let p = self.mean.len();
        if z1.len() != p {
            return Err(Error::DimensionMismatch {
                tensor: "z1".into(),
                expected: p,
                got: z1.len(),
            });
        }
        let k = self.rank();
        if z2.len() != k {
            return Err(Error::DimensionMismatch {
                tensor: "z2".into(),
                expected: k,
                got: z2.len(),
            });
        }
        let low_rank = z2.iter().any(|z| *z != 0.0);
        if low_rank && k < 2 {
            return Err(Error::invalid(
                "low-rank term needs at least two deviation columns",
            ));
        }

        let diag_scale = std::f64::consts::FRAC_1_SQRT_2;
        let mut out = self.mean.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let var = (self.sq_mean[i] - self.mean[i] * self.mean[i]).max(0.0);
            *o += diag_scale * var.sqrt() * z1[i];
        }
        if low_rank {
            let lr_scale = 1.0 / (2.0 * (k as f64 - 1.0)).sqrt();
            for (col, z) in self.deviations.iter().zip(z2) {
                let c = lr_scale * z;
                for (o, d) in out.iter_mut().zip(col) {
                    *o += c * d;
                }
            }
        }
        ParameterVector::new(self.layout.clone(), out)
    }

    /// Draw number `index` from the stream identified by `seed`.
    ///
    /// Each draw has its own ChaCha stream, so draws can be regenerated or
    /// computed in parallel without changing their values.
    pub fn draw(&self, seed: u64, index: u64) -> Result<ParameterVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let z1: Vec<f64> = (0..self.mean.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let k = self.rank();
        let z2: Vec<f64> = if k >= 2 {
            (0..k).map(|_| StandardNormal.sample(&mut rng)).collect()
        } else {
            vec![0.0; k]
        };
        self.covariance_apply(&z1, &z2)
    }

    pub fn sample_posterior(&self, count: usize, seed: u64) -> Result<Vec<ParameterVector>> {
        if count == 0 {
            return Err(Error::invalid("posterior sample count must be at least 1"));
        }
        (0..count as u64)
            .into_par_iter()
            .map(|s| self.draw(seed, s))
            .collect()
    }

    pub fn write(&self, writer: &mut impl std::io::Write) -> Result<()> {
        crate::checkpoint::write_container(writer, &self.header(), &self.payload())
    }

    pub fn read(reader: &mut impl std::io::Read) -> Result<Self> {
        let (header, payload) = crate::checkpoint::read_container(reader)?;
        Self::from_parts(header, payload)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_container(path, &self.header(), &self.payload())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = load_container(path)?;
        Self::from_parts(header, payload)
    }

    fn header(&self) -> MomentsHeader {
        MomentsHeader {
            kind: MOMENTS_KIND.into(),
            count: self.count,
            max_rank: self.max_rank,
            columns: self.rank(),
            layout: self.layout.clone(),
        }
    }

    fn payload(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.mean.len() * (2 + self.rank()));
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(&self.sq_mean);
        for col in &self.deviations {
            out.extend_from_slice(col);
        }
        out
    }

    fn from_parts(header: MomentsHeader, payload: Vec<f64>) -> Result<Self> {
        if header.kind != MOMENTS_KIND {
            return Err(Error::Format(format!("expected {MOMENTS_KIND}, found {}", header.kind)));
        }
        let layout = Layout::from_tensors(header.layout.tensors().to_vec())?;
        let p = layout.len();
        if payload.len() != p * (2 + header.columns) {
            return Err(Error::Format("SWAG payload has the wrong size".into()));
        }
        if header.columns > header.max_rank || header.columns > header.count {
            return Err(Error::Format("SWAG header is inconsistent".into()));
        }
        let mut chunks = payload.chunks(p.max(1));
        let mean = chunks.next().map_or_else(Vec::new, <[f64]>::to_vec);
        let sq_mean = chunks.next().map_or_else(Vec::new, <[f64]>::to_vec);
        let deviations = chunks.map(<[f64]>::to_vec).collect();
        Ok(SwagMoments {
            layout,
            count: header.count,
            max_rank: header.max_rank,
            mean,
            sq_mean,
            deviations,
        })
    }
}
