//! Seeded Brownian increments.
//!
//! Every increment is drawn from a ChaCha8 substream addressed by
//! `(master_seed, bundle_index, domain, lane, stream)`: the first four words
//! form the 256-bit key and `stream` selects the 64-bit stream id. For `W`
//! the stream is the sample index and entries are consumed in
//! `(time, component)` order; `B` uses its own domain. Distinct tuples never
//! share generator state, so bundles do not depend on how work is scheduled.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure_len, Error, Result};
use crate::problem::{make_uniform_grid, TimeGrid};
use crate::scalar::Scalar;

/// Substream families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    BrownianW = 1,
    BrownianB = 2,
    Nested = 3,
    Probe = 4,
}

/// Generator for one substream.
pub fn substream(master_seed: u64, bundle_index: u64, domain: Domain, lane: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&bundle_index.to_le_bytes());
    key[16..24].copy_from_slice(&(domain as u64).to_le_bytes());
    key[24..32].copy_from_slice(&lane.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Identifies one `B`-path realization and the `W`-samples drawn with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub bundle_index: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, bundle_index: u64) -> Self {
        Self {
            master_seed,
            bundle_index,
        }
    }

    pub fn w_stream(&self, sample: usize) -> ChaCha8Rng {
        substream(self.master_seed, self.bundle_index, Domain::BrownianW, 0, sample as u64)
    }

    pub fn b_stream(&self) -> ChaCha8Rng {
        substream(self.master_seed, self.bundle_index, Domain::BrownianB, 0, 0)
    }
}

/// `M` samples of `W`-increments sharing one frozen `B`-path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle<S> {
    pub grid: TimeGrid<S>,
    pub samples: usize,
    pub d: usize,
    pub l: usize,
    /// `[M x N x d]`
    pub dw: Vec<S>,
    /// `[N x l]`
    pub db: Vec<S>,
    pub seed: SeedSpec,
}

/// Draws a bundle of `M` independent `W`-paths and one `B`-path.
pub fn sample_bundle<S: Scalar>(
    seed: SeedSpec,
    grid: &TimeGrid<S>,
    samples: usize,
    d: usize,
    l: usize,
) -> Result<PathBundle<S>> {
    if samples == 0 {
        return Err(Error::Validation("bundle needs at least one sample".into()));
    }
    if d == 0 || l == 0 {
        return Err(Error::Validation("Brownian dimensions must be positive".into()));
    }
    let n = grid.steps();
    let scale = grid.step().sqrt();
    let row = n * d;
    let mut dw = vec![S::zero(); samples * row];
    dw.par_chunks_mut(row).enumerate().for_each(|(m, chunk)| {
        let mut rng = seed.w_stream(m);
        for v in chunk.iter_mut() {
            *v = scale * S::standard_normal(&mut rng);
        }
    });
    let mut rng = seed.b_stream();
    let db = (0..n * l).map(|_| scale * S::standard_normal(&mut rng)).collect();
    Ok(PathBundle {
        grid: grid.clone(),
        samples,
        d,
        l,
        dw,
        db,
        seed,
    })
}

impl<S: Scalar> PathBundle<S> {
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// `Delta W_n` of sample `m`.
    pub fn dw_at(&self, m: usize, n: usize) -> &[S] {
        let base = (m * self.steps() + n) * self.d;
        &self.dw[base..base + self.d]
    }

    /// `Delta B_n`.
    pub fn db_at(&self, n: usize) -> &[S] {
        &self.db[n * self.l..(n + 1) * self.l]
    }

    /// `W_{t_n}` of sample `m` (with `W_0 = 0`).
    pub fn w_at(&self, m: usize, n: usize) -> Vec<S> {
        let mut w = vec![S::zero(); self.d];
        for j in 0..n {
            for (acc, &inc) in w.iter_mut().zip(self.dw_at(m, j)) {
                *acc += inc;
            }
        }
        w
    }

    /// `B_T - B_{t_n}` for every node.
    pub fn b_tail(&self) -> Vec<S> {
        let n = self.steps();
        let mut tail = vec![S::zero(); (n + 1) * self.l];
        for j in (0..n).rev() {
            for c in 0..self.l {
                tail[j * self.l + c] = tail[(j + 1) * self.l + c] + self.db[j * self.l + c];
            }
        }
        tail
    }

    /// Aggregates `factor` consecutive increments, giving the same paths on
    /// a grid with `N / factor` steps.
    pub fn coarsen(&self, factor: usize) -> Result<PathBundle<S>> {
        let n = self.steps();
        if factor == 0 || !n.is_multiple_of(factor) {
            return Err(Error::Validation(format!(
                "cannot coarsen {n} steps by a factor {factor}"
            )));
        }
        let coarse_n = n / factor;
        let grid = make_uniform_grid(self.grid.horizon(), coarse_n)?;
        let d = self.d;
        let mut dw = vec![S::zero(); self.samples * coarse_n * d];
        for m in 0..self.samples {
            for j in 0..coarse_n {
                let out = &mut dw[(m * coarse_n + j) * d..(m * coarse_n + j + 1) * d];
                for sub in 0..factor {
                    for (o, &v) in out.iter_mut().zip(self.dw_at(m, j * factor + sub)) {
                        *o += v;
                    }
                }
            }
        }
        let mut db = vec![S::zero(); coarse_n * self.l];
        for j in 0..coarse_n {
            for sub in 0..factor {
                for c in 0..self.l {
                    db[j * self.l + c] += self.db[(j * factor + sub) * self.l + c];
                }
            }
        }
        Ok(PathBundle {
            grid,
            samples: self.samples,
            d,
            l: self.l,
            dw,
            db,
            seed: self.seed,
        })
    }

    /// Writes the bundle as a flat little-endian file: the magic bytes,
    /// `d, l, N, M, master_seed, bundle_index` as `u64`, the horizon as
    /// `f64`, then `dW` in `[M x N x d]` order and `dB` in `[N x l]` order as
    /// `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BUNDLE_MAGIC)?;
        for v in [
            self.d as u64,
            self.l as u64,
            self.steps() as u64,
            self.samples as u64,
            self.seed.master_seed,
            self.seed.bundle_index,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.grid.horizon().as_f64().to_le_bytes())?;
        for v in self.dw.iter().chain(&self.db) {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<PathBundle<S>> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != BUNDLE_MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let mut word = [0u8; 8];
        let mut header = [0u64; 6];
        for h in header.iter_mut() {
            r.read_exact(&mut word).map_err(truncated)?;
            *h = u64::from_le_bytes(word);
        }
        let [d, l, n, m, master_seed, bundle_index] = header;
        r.read_exact(&mut word).map_err(truncated)?;
        let horizon = f64::from_le_bytes(word);
        let (d, l, n, m) = (d as usize, l as usize, n as usize, m as usize);
        let grid = make_uniform_grid(S::lit(horizon), n)?;
        let mut read_vals = |count: usize| -> Result<Vec<S>> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                r.read_exact(&mut word).map_err(truncated)?;
                out.push(S::lit(f64::from_le_bytes(word)));
            }
            Ok(out)
        };
        let dw = read_vals(m * n * d)?;
        let db = read_vals(n * l)?;
        Ok(PathBundle {
            grid,
            samples: m,
            d,
            l,
            dw,
            db,
            seed: SeedSpec::new(master_seed, bundle_index),
        })
    }
}

const BUNDLE_MAGIC: &[u8; 8] = b"FBDSPB01";

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated bundle file".into())
    } else {
        Error::Io(e)
    }
}

/// Discrete backward integral `sum_n a_n Delta B_n`.
///
/// `integrand` is `[N x k x l]` where entry `n` holds the value at the right
/// endpoint `t_{n+1}` of interval `n`; `db` is `[N x l]`.
pub fn discrete_backward_integral<S: Scalar>(
    integrand: &[S],
    db: &[S],
    steps: usize,
    k: usize,
    l: usize,
) -> Result<Vec<S>> {
    ensure_len("backward integrand", steps * k * l, integrand.len())?;
    ensure_len("backward increments", steps * l, db.len())?;
    let mut out = vec![S::zero(); k];
    for n in 0..steps {
        for i in 0..k {
            for c in 0..l {
                out[i] += integrand[(n * k + i) * l + c] * db[n * l + c];
            }
        }
    }
    Ok(out)
}
