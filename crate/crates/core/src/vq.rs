//! The discrete bottleneck: nearest-entry quantization with straight-through
//! gradients, EMA codebook learning, dead-entry respawning, spatial code
//! resize, and code dropout.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{sample_standard_normal, Elem, Tape, Tensor, Var};

/// Division guard for the entry recomputation `sums / max(counts, EPS_COUNT)`.
pub const EPS_COUNT: f64 = 1e-5;

/// A length-n sequence of dictionary indices, each in `[0, dict_size)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GuidingCode {
    indices: Vec<usize>,
}

impl GuidingCode {
    pub fn new(indices: Vec<usize>, dict_size: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= dict_size) {
            return Err(crate::invalid_arg!(
                "guiding code index {bad} out of range [0, {dict_size})"
            ));
        }
        Ok(Self { indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Per-entry hit counters over the last `window` maintenance steps,
/// kept as a ring so the trailing total updates in O(N) per step.
#[derive(Clone, Debug)]
struct UsageWindow {
    window: usize,
    ring: Vec<u32>, // [window * N], slot-major
    totals: Vec<u64>,
    cursor: usize,
    steps: u64,
}

impl UsageWindow {
    fn new(window: usize, n: usize) -> Self {
        Self {
            window,
            ring: vec![0; window * n],
            totals: vec![0; n],
            cursor: 0,
            steps: 0,
        }
    }

    fn n(&self) -> usize {
        self.totals.len()
    }

    fn credit(&mut self, hits: &[u32]) {
        let n = self.n();
        let slot = &mut self.ring[self.cursor * n..(self.cursor + 1) * n];
        for i in 0..n {
            self.totals[i] -= slot[i] as u64;
            self.totals[i] += hits[i] as u64;
            slot[i] = hits[i];
        }
        self.cursor = (self.cursor + 1) % self.window;
        self.steps += 1;
    }

    fn complete(&self) -> bool {
        self.steps >= self.window as u64
    }

    fn count(&self, entry: usize) -> u64 {
        self.totals[entry]
    }

    /// Copy one entry's full ring column onto another (respawn credit).
    fn copy_credit(&mut self, from: usize, to: usize) {
        let n = self.n();
        for slot in 0..self.window {
            self.ring[slot * n + to] = self.ring[slot * n + from];
        }
        self.totals[to] = self.totals[from];
    }
}

/// The VQ dictionary: N entries of dimension d, with EMA statistics and
/// usage counters.
#[derive(Clone, Debug)]
pub struct Codebook<T> {
    entries: Tensor<T>,   // [N, d]
    ema_counts: Tensor<T>, // [N]
    ema_sums: Tensor<T>,  // [N, d]
    usage: UsageWindow,
    momentum: f64,
}

impl<T: Elem> Codebook<T> {
    /// Fresh codebook with small random entries. EMA state starts consistent
    /// with the entries under unit counts.
    pub fn init<R: Rng>(
        dict_size: usize,
        dim: usize,
        momentum: f64,
        usage_window: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dict_size < 2 {
            return Err(crate::invalid_arg!("codebook needs at least 2 entries"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(crate::invalid_arg!("dict momentum must be in (0, 1), got {momentum}"));
        }
        let entries = Tensor::randn(&[dict_size, dim], 0.02, rng);
        Ok(Self {
            ema_counts: Tensor::full(&[dict_size], T::one()),
            ema_sums: entries.clone(),
            entries,
            usage: UsageWindow::new(usage_window, dict_size),
            momentum,
        })
    }

    /// Rebuild from checkpointed arrays.
    pub fn from_arrays(
        entries: Tensor<T>,
        ema_counts: Tensor<T>,
        ema_sums: Tensor<T>,
        momentum: f64,
        usage_window: usize,
    ) -> Result<Self> {
        if entries.rank() != 2 || ema_sums.shape() != entries.shape() {
            return Err(crate::invalid_arg!("codebook arrays have inconsistent shapes"));
        }
        let n = entries.shape()[0];
        if ema_counts.shape() != [n] {
            return Err(crate::invalid_arg!("codebook counts shape mismatch"));
        }
        Ok(Self {
            entries,
            ema_counts,
            ema_sums,
            usage: UsageWindow::new(usage_window, n),
            momentum,
        })
    }

    pub fn dict_size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn entries(&self) -> &Tensor<T> {
        &self.entries
    }

    pub fn ema_counts(&self) -> &Tensor<T> {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &Tensor<T> {
        &self.ema_sums
    }

    pub fn usage_count(&self, entry: usize) -> u64 {
        self.usage.count(entry)
    }

    /// Entry rows for a code (the z_q lookup).
    pub fn lookup(&self, code: &GuidingCode) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(code.len() * d);
        for &i in code.indices() {
            if i >= self.dict_size() {
                return Err(crate::invalid_arg!(
                    "code index {i} out of range for dictionary of {}",
                    self.dict_size()
                ));
            }
            out.extend_from_slice(&self.entries.data()[i * d..(i + 1) * d]);
        }
        Tensor::from_vec(out, &[code.len(), d])
    }

    /// Map each row of `z_e` to its nearest entry by squared Euclidean
    /// distance (ties to the lowest index). Returns the code and the
    /// quantized rows.
    pub fn quantize(&self, z_e: &Tensor<T>) -> Result<(GuidingCode, Tensor<T>)> {
        let d = self.dim();
        if z_e.rank() != 2 || z_e.shape()[1] != d {
            return Err(crate::error::Error::ShapeMismatch {
                op: "quantize",
                lhs: z_e.shape().to_vec(),
                rhs: self.entries.shape().to_vec(),
            });
        }
        let n_entries = self.dict_size();
        let mut indices = Vec::with_capacity(z_e.shape()[0]);
        let mut z_q = Vec::with_capacity(z_e.numel());
        for row in z_e.data().chunks_exact(d) {
            let mut best = 0usize;
            let mut best_dist = T::infinity();
            for e in 0..n_entries {
                let entry = &self.entries.data()[e * d..(e + 1) * d];
                let mut dist = T::zero();
                for i in 0..d {
                    let diff = row[i] - entry[i];
                    dist = dist + diff * diff;
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = e;
                }
            }
            indices.push(best);
            z_q.extend_from_slice(&self.entries.data()[best * d..(best + 1) * d]);
        }
        Ok((
            GuidingCode::new(indices, n_entries)?,
            Tensor::from_vec(z_q, z_e.shape())?,
        ))
    }

    /// One EMA step: decay counts and sums toward this batch's assignment
    /// statistics, recompute entries, and credit the usage window.
    pub fn ema_update(&mut self, z_e: &Tensor<T>, code: &GuidingCode) -> Result<()> {
        let d = self.dim();
        let n = self.dict_size();
        if z_e.rank() != 2 || z_e.shape() != [code.len(), d] {
            return Err(crate::error::Error::ShapeMismatch {
                op: "ema_update",
                lhs: z_e.shape().to_vec(),
                rhs: vec![code.len(), d],
            });
        }
        let mut hits = vec![0u32; n];
        let mut batch_sums = vec![T::zero(); n * d];
        for (row, &idx) in z_e.data().chunks_exact(d).zip(code.indices()) {
            hits[idx] += 1;
            for i in 0..d {
                batch_sums[idx * d + i] = batch_sums[idx * d + i] + row[i];
            }
        }
        let g = T::of(self.momentum);
        let one_m_g = T::one() - g;
        {
            let counts = self.ema_counts.data_mut();
            for i in 0..n {
                counts[i] = g * counts[i] + one_m_g * T::of(hits[i] as f64);
            }
        }
        {
            let sums = self.ema_sums.data_mut();
            for i in 0..n * d {
                sums[i] = g * sums[i] + one_m_g * batch_sums[i];
            }
        }
        self.recompute_entries();
        self.usage.credit(&hits);
        Ok(())
    }

    /// Codebook invariant: entries[i] = ema_sums[i] / max(ema_counts[i], eps).
    fn recompute_entries(&mut self) {
        let d = self.dim();
        let eps = T::of(EPS_COUNT);
        let counts = self.ema_counts.data().to_vec();
        let sums = self.ema_sums.data().to_vec();
        let entries = self.entries.data_mut();
        for (i, &c) in counts.iter().enumerate() {
            let denom = if c > eps { c } else { eps };
            for j in 0..d {
                entries[i * d + j] = sums[i * d + j] / denom;
            }
        }
    }

    /// Replace every entry unused over the last full usage window with a
    /// noisy copy of the currently most-used entry, splitting the donor's
    /// EMA mass evenly. Returns the respawned indices.
    pub fn respawn_dead_entries<R: Rng>(
        &mut self,
        noise_scale: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if !self.usage.complete() {
            return Ok(vec![]);
        }
        let n = self.dict_size();
        let d = self.dim();
        let dead: Vec<usize> = (0..n).filter(|&i| self.usage.count(i) == 0).collect();
        if dead.len() == n {
            return Err(crate::invalid_arg!(
                "all {n} codebook entries dead; training run is broken"
            ));
        }
        let mut respawned = Vec::with_capacity(dead.len());
        for &i in &dead {
            // Most-used entry right now; ties to the lowest index.
            let donor = (0..n)
                .max_by(|&a, &b| {
                    self.usage
                        .count(a)
                        .cmp(&self.usage.count(b))
                        .then(b.cmp(&a))
                })
                .unwrap();
            let donor_entry: Vec<T> = self.entries.data()[donor * d..(donor + 1) * d].to_vec();
            let new_entry: Vec<T> = donor_entry
                .iter()
                .map(|&v| v + T::of(sample_standard_normal(rng) * noise_scale))
                .collect();

            let half = T::of(0.5);
            let donor_count = self.ema_counts.data()[donor] * half;
            {
                let counts = self.ema_counts.data_mut();
                counts[donor] = donor_count;
                counts[i] = donor_count;
            }
            {
                let sums = self.ema_sums.data_mut();
                for j in 0..d {
                    // Halving the donor's sums keeps its entry value fixed;
                    // the respawned sums are chosen so the entry invariant
                    // reproduces the noised copy exactly.
                    sums[donor * d + j] = sums[donor * d + j] * half;
                    let denom = if donor_count > T::of(EPS_COUNT) {
                        donor_count
                    } else {
                        T::of(EPS_COUNT)
                    };
                    sums[i * d + j] = new_entry[j] * denom;
                }
            }
            {
                let entries = self.entries.data_mut();
                entries[i * d..(i + 1) * d].copy_from_slice(&new_entry);
            }
            self.usage.copy_credit(donor, i);
            respawned.push(i);
        }
        Ok(respawned)
    }
}

/// Commitment term: beta * mean ||z_e - stopgrad(z_q)||^2. `z_q` enters as a
/// constant, so the gradient flows only into `z_e`.
pub fn commitment_loss<T: Elem>(
    tape: &mut Tape<T>,
    z_e: Var,
    z_q: &Tensor<T>,
    beta: f64,
) -> Result<Var> {
    let zq = tape.constant(z_q.clone());
    let mse = tape.mean_squared_error(z_e, zq)?;
    Ok(tape.scale(mse, beta))
}

/// Bilinear resize of a `[B, g, g, d]` code grid to the target length's
/// square grid, flattened to `[B, n, d]` in raster order. Identity when
/// `g*g == n`.
pub fn resize_code_grid<T: Elem>(tape: &mut Tape<T>, grid: Var, target_len: usize) -> Result<Var> {
    let shape = tape.shape(grid).to_vec();
    if shape.len() != 4 || shape[1] != shape[2] {
        return Err(crate::invalid_arg!(
            "resize_code_grid: expected [B, g, g, d], got {shape:?}"
        ));
    }
    let side = integer_sqrt(target_len).ok_or_else(|| {
        crate::invalid_arg!("resize_code_grid: target length {target_len} is not a perfect square")
    })?;
    let (b, d) = (shape[0], shape[3]);
    let resized = tape.bilinear_resize(grid, (side, side))?;
    tape.reshape(resized, &[b, target_len, d])
}

pub fn integer_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Draw the dropout row mask: k uniform on {0..n} inclusive, then a uniform
/// size-k subset of rows to zero.
pub fn sample_dropout_mask<R: Rng>(n: usize, rng: &mut R) -> Vec<bool> {
    let k = rng.random_range(0..=n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let mut mask = vec![false; n];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

/// Zero a random subset of code rows (training-time corruption of the
/// quantized embeddings before they reach the base model).
pub fn code_dropout<T: Elem, R: Rng>(z_q: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    if z_q.rank() != 2 {
        return Err(crate::invalid_arg!(
            "code_dropout: expected [n, d], got {:?}",
            z_q.shape()
        ));
    }
    let (n, d) = (z_q.shape()[0], z_q.shape()[1]);
    let mask = sample_dropout_mask(n, rng);
    let mut out = z_q.clone();
    let data = out.data_mut();
    for (row, &dropped) in mask.iter().enumerate() {
        if dropped {
            for v in &mut data[row * d..(row + 1) * d] {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// Exponential of the entropy of the normalized usage histogram. N means
/// perfectly balanced usage; 1 means a single entry takes everything.
pub fn codebook_perplexity(histogram: &[u64]) -> Result<f64> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(crate::invalid_arg!("codebook_perplexity: empty histogram"));
    }
    let mut entropy = 0.0f64;
    for &h in histogram {
        if h > 0 {
            let p = h as f64 / total as f64;
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}
