//! Brownian-increment ensembles.
//!
//! Every draw is addressed by `(seed, path, step, component)`: path `j` reads
//! the ChaCha8 stream `j` of the seed, and draw `(i, k)` consumes words
//! `4 (i d + k) .. 4 (i d + k) + 4` of that stream. The ensemble therefore
//! does not depend on how paths are scheduled across workers.
//!
//! Storage is step-major (`[i][j][k]`) because both the forward sweep and
//! the backward regressions work one time step at a time; accessors take
//! the path-first `(j, i, k)` indexing.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problem::Partition;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncrementLaw {
    Gaussian,
    /// `+-sqrt(h)` with equal probability.
    Rademacher,
}

impl IncrementLaw {
    fn code(self) -> u64 {
        match self {
            IncrementLaw::Gaussian => 0,
            IncrementLaw::Rademacher => 1,
        }
    }

    fn from_code(code: u64) -> Result<Self> {
        match code {
            0 => Ok(IncrementLaw::Gaussian),
            1 => Ok(IncrementLaw::Rademacher),
            _ => Err(Error::invalid(format!("unknown increment law code {code}"))),
        }
    }
}

impl fmt::Display for IncrementLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IncrementLaw::Gaussian => "gaussian",
            IncrementLaw::Rademacher => "rademacher",
        })
    }
}

impl FromStr for IncrementLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian" => Ok(IncrementLaw::Gaussian),
            "rademacher" => Ok(IncrementLaw::Rademacher),
            other => Err(Error::invalid(format!("unknown increment law `{other}`"))),
        }
    }
}

/// `dW[j][i][k]` for `M` paths on a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementEnsemble {
    partition: Partition,
    num_paths: usize,
    noise_dim: usize,
    law: IncrementLaw,
    seed: u64,
    enumerated: bool,
    data: Vec<f64>,
}

/// Paths generated per parallel batch; bounds the transient row buffers.
const PATH_BLOCK: usize = 1024;

/// Samples `M` independent paths of increments.
pub fn sample_increments(
    partition: Partition,
    num_paths: usize,
    noise_dim: usize,
    law: IncrementLaw,
    seed: u64,
) -> Result<IncrementEnsemble> {
    if num_paths == 0 || noise_dim == 0 {
        return Err(Error::invalid("need M >= 1 paths and d >= 1"));
    }
    let n = partition.steps();
    let d = noise_dim;
    let sqrt_h = partition.h().sqrt();
    let per_path = n * d;

    let draw_path = |j: usize| -> Vec<f64> {
        let mut stream = ChaCha8Rng::seed_from_u64(seed);
        stream.set_stream(j as u64);
        (0..per_path)
            .map(|_| {
                let a = stream.next_u64();
                let b = stream.next_u64();
                match law {
                    IncrementLaw::Gaussian => sqrt_h * box_muller(a, b),
                    IncrementLaw::Rademacher => {
                        if a >> 63 == 0 {
                            sqrt_h
                        } else {
                            -sqrt_h
                        }
                    }
                }
            })
            .collect()
    };

    let mut data = vec![0.0; n * num_paths * d];
    for block in (0..num_paths).step_by(PATH_BLOCK) {
        let end = (block + PATH_BLOCK).min(num_paths);
        let rows: Vec<Vec<f64>> = (block..end).into_par_iter().map(draw_path).collect();
        for (offset, row) in rows.iter().enumerate() {
            let j = block + offset;
            for i in 0..n {
                let dst = (i * num_paths + j) * d;
                data[dst..dst + d].copy_from_slice(&row[i * d..(i + 1) * d]);
            }
        }
    }
    Ok(IncrementEnsemble {
        partition,
        num_paths,
        noise_dim,
        law,
        seed,
        enumerated: false,
        data,
    })
}

/// All `2^(n d)` Rademacher sign patterns, one per path. Path `j` takes sign
/// `-` at draw `(i, k)` when bit `n d - 1 - (i d + k)` of `j` is set, so the
/// first step is the most significant bit and paths sharing a history up to
/// step `i` form contiguous blocks.
pub fn enumerate_tree(partition: Partition, noise_dim: usize, cap: usize) -> Result<IncrementEnsemble> {
    let n = partition.steps();
    let bits = n * noise_dim;
    if noise_dim == 0 {
        return Err(Error::invalid("need d >= 1"));
    }
    if bits > cap || bits >= 63 {
        return Err(Error::invalid(format!(
            "tree enumeration with n*d = {bits} exceeds the cap of {cap}"
        )));
    }
    let num_paths = 1usize << bits;
    let d = noise_dim;
    let sqrt_h = partition.h().sqrt();
    let mut data = vec![0.0; n * num_paths * d];
    for j in 0..num_paths {
        for i in 0..n {
            for k in 0..d {
                let bit = bits - 1 - (i * d + k);
                data[(i * num_paths + j) * d + k] = if (j >> bit) & 1 == 0 { sqrt_h } else { -sqrt_h };
            }
        }
    }
    Ok(IncrementEnsemble {
        partition,
        num_paths,
        noise_dim,
        law: IncrementLaw::Rademacher,
        seed: 0,
        enumerated: true,
        data,
    })
}

/// Standard normal from two 64-bit words (cosine branch of Box-Muller).
fn box_muller(a: u64, b: u64) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    // u1 in (0, 1], u2 in [0, 1)
    let u1 = ((a >> 11) + 1) as f64 * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl IncrementEnsemble {
    /// Builds an ensemble from explicit values given path-major (`[j][i][k]`).
    pub fn from_values(
        partition: Partition,
        num_paths: usize,
        noise_dim: usize,
        values: &[f64],
    ) -> Result<Self> {
        let n = partition.steps();
        if num_paths == 0 || noise_dim == 0 || values.len() != num_paths * n * noise_dim {
            return Err(Error::invalid(format!(
                "expected {} increments for M={num_paths}, n={n}, d={noise_dim}",
                num_paths * n * noise_dim
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("increments must be finite"));
        }
        let d = noise_dim;
        let mut data = vec![0.0; values.len()];
        for j in 0..num_paths {
            for i in 0..n {
                let src = (j * n + i) * d;
                let dst = (i * num_paths + j) * d;
                data[dst..dst + d].copy_from_slice(&values[src..src + d]);
            }
        }
        Ok(Self {
            partition,
            num_paths,
            noise_dim,
            law: IncrementLaw::Gaussian,
            seed: 0,
            enumerated: false,
            data,
        })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn num_paths(&self) -> usize {
        self.num_paths
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn law(&self) -> IncrementLaw {
        self.law
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// True for the full sign-pattern enumeration of [`enumerate_tree`].
    pub fn is_enumerated(&self) -> bool {
        self.enumerated
    }

    pub fn get(&self, path: usize, step: usize, component: usize) -> f64 {
        self.data[(step * self.num_paths + path) * self.noise_dim + component]
    }

    /// Increments of all paths over `[t_i, t_{i+1}]`, `M * d` values.
    pub fn step(&self, i: usize) -> &[f64] {
        let w = self.num_paths * self.noise_dim;
        &self.data[i * w..(i + 1) * w]
    }

    /// Increments of path `j` over step `i`, `d` values.
    pub fn at(&self, path: usize, step: usize) -> &[f64] {
        let start = (step * self.num_paths + path) * self.noise_dim;
        &self.data[start..start + self.noise_dim]
    }

    /// Coupled coarse ensemble: each coarse increment is the sum, in step
    /// order, of the `factor` fine increments it covers.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if self.enumerated || self.law == IncrementLaw::Rademacher {
            return Err(Error::invalid("only gaussian ensembles can be coarsened"));
        }
        let partition = self.partition.coarsen(factor)?;
        let w = self.num_paths * self.noise_dim;
        let mut data = vec![0.0; partition.steps() * w];
        for (ic, out) in data.chunks_mut(w).enumerate() {
            for s in 0..factor {
                for (o, v) in out.iter_mut().zip(self.step(ic * factor + s)) {
                    *o += v;
                }
            }
        }
        Ok(Self {
            partition,
            data,
            ..self.clone()
        })
    }

    /// Brownian values `W_{t_i} - W_{t_0}` of path `j` at every node, `(n+1) * d`.
    pub fn brownian_path(&self, path: usize) -> Vec<f64> {
        let (n, d) = (self.partition.steps(), self.noise_dim);
        let mut out = vec![0.0; (n + 1) * d];
        for i in 0..n {
            for k in 0..d {
                out[(i + 1) * d + k] = out[i * d + k] + self.get(path, i, k);
            }
        }
        out
    }

    /// Binary dump: little-endian `u64` header `seed, M, n, d, law` followed
    /// by the increments as `f64` in row-major `[j][i][k]` order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.partition.steps();
        for v in [
            self.seed,
            self.num_paths as u64,
            n as u64,
            self.noise_dim as u64,
            self.law.code(),
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for j in 0..self.num_paths {
            for i in 0..n {
                for &v in self.at(j, i) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Reads a dump written by [`write_binary`](Self::write_binary); the
    /// time interval is not part of the format and must be supplied.
    pub fn read_binary<R: Read>(mut r: R, start: f64, end: f64) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut header = [0u64; 5];
        for h in header.iter_mut() {
            r.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word);
        }
        let [seed, m, n, d, law] = header;
        let partition = Partition::new(start, end, n as usize)?;
        let count = (m * n * d) as usize;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        let mut out = Self::from_values(partition, m as usize, d as usize, &values)?;
        out.seed = seed;
        out.law = IncrementLaw::from_code(law)?;
        Ok(out)
    }
}
