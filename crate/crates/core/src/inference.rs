//! Test-time composition of the two stages: sequential code sampling from
//! the language model, decoding through the base model, and the
//! code-masking probes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::models::{BaseModel, LanguageModel};
use crate::tasks::{decode_logits, TaskLabel, TaskSpec};
use crate::tensor::{Elem, Tensor};
use crate::util::seeded_rng;
use crate::vq::{integer_sqrt, Codebook, GuidingCode};

/// Temperature, seed, and sample count for code sampling. `temperature = 0`
/// selects the per-step argmax; positive temperatures sample from
/// `softmax(logits / T)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingParams {
    pub temperature: f64,
    pub seed: u64,
    pub num_samples: usize,
}

impl SamplingParams {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            seed: 0,
            num_samples: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature < 0.0 {
            return Err(crate::invalid_arg!(
                "temperature must be >= 0, got {}",
                self.temperature
            ));
        }
        Ok(())
    }
}

/// Draw one symbol from logits at the given temperature. Argmax ties break
/// to the lowest index.
fn draw_symbol<T: Elem, R: Rng>(logits: &[T], temperature: f64, rng: &mut R) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|&l| l.as_f64() / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Coordinate-wise sequential sampling of a full code, left to right. The
/// begin-of-sequence symbol is masked out of every step's logits.
pub fn sample_code_with_rng<T: Elem, R: Rng>(
    image: &Tensor<T>,
    lm: &LanguageModel<T>,
    temperature: f64,
    rng: &mut R,
) -> Result<GuidingCode> {
    let memory = lm.encode_memory(image)?;
    sample_code_from_memory(&memory, lm, temperature, rng)
}

/// Sampling against precomputed encoder memory (the image encoder runs once
/// per image, not once per symbol).
pub fn sample_code_from_memory<T: Elem, R: Rng>(
    memory: &Tensor<T>,
    lm: &LanguageModel<T>,
    temperature: f64,
    rng: &mut R,
) -> Result<GuidingCode> {
    if temperature < 0.0 {
        return Err(crate::invalid_arg!("temperature must be >= 0"));
    }
    let cfg = *lm.config();
    let mut prefix: Vec<usize> = Vec::with_capacity(cfg.code_len);
    for _ in 0..cfg.code_len {
        let logits = lm.next_logits_from_memory(memory, &prefix)?;
        prefix.push(draw_symbol(&logits, temperature, rng));
    }
    GuidingCode::new(prefix, cfg.dict_size)
}

pub fn sample_code<T: Elem>(
    image: &Tensor<T>,
    lm: &LanguageModel<T>,
    params: &SamplingParams,
) -> Result<GuidingCode> {
    params.validate()?;
    let mut rng = seeded_rng(params.seed);
    sample_code_with_rng(image, lm, params.temperature, &mut rng)
}

/// Decode an image through the base model under a given code; shared by
/// stage-I evaluation (oracle code) and stage-II prediction (sampled code),
/// so the two paths are identical by construction.
pub fn reconstruct_with_code<T: Elem>(
    image: &Tensor<T>,
    code: &GuidingCode,
    base: &BaseModel<T>,
    codebook: &Codebook<T>,
    task: &TaskSpec,
    hide_image: bool,
) -> Result<TaskLabel> {
    let z_q = codebook.lookup(code)?;
    let input = if hide_image {
        Tensor::zeros(image.shape())
    } else {
        image.clone()
    };
    let logits = base.forward(&input, Some(&z_q))?;
    decode_logits(task, &logits)
}

/// Full test-time model: sample the code from the language model, then
/// decode `f(x, code)` with task post-processing.
#[allow(clippy::too_many_arguments)]
pub fn predict<T: Elem>(
    image: &Tensor<T>,
    base: &BaseModel<T>,
    lm: &LanguageModel<T>,
    codebook: &Codebook<T>,
    task: &TaskSpec,
    params: &SamplingParams,
    hide_image: bool,
) -> Result<(TaskLabel, GuidingCode)> {
    let (b, l) = (base.config(), lm.config());
    if (b.code_len, b.dict_size, b.codeword_dim) != (l.code_len, l.dict_size, l.codeword_dim) {
        return Err(crate::invalid_arg!(
            "stage-I and stage-II geometries differ: (n={}, N={}, d={}) vs (n={}, N={}, d={})",
            b.code_len,
            b.dict_size,
            b.codeword_dim,
            l.code_len,
            l.dict_size,
            l.codeword_dim
        ));
    }
    let code = sample_code(image, lm, params)?;
    let label = reconstruct_with_code(image, &code, base, codebook, task, hide_image)?;
    Ok((label, code))
}

/// The three ways of masking codewords inside a probe region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Replace the embeddings by all-zero vectors.
    ZeroEmbedding,
    /// Resample codeword indices uniformly.
    RandomCodeword,
    /// Set every index in the region to one constant codeword.
    ConstantCodeword(usize),
}

/// Rectangular region on the square code grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskProbeSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub mode: MaskMode,
}

impl MaskProbeSpec {
    pub fn validate(&self, code_len: usize) -> Result<usize> {
        let side = integer_sqrt(code_len)
            .ok_or_else(|| crate::invalid_arg!("code length {code_len} is not a perfect square"))?;
        if self.top + self.height > side || self.left + self.width > side {
            return Err(crate::invalid_arg!(
                "probe region {}x{}+{}+{} exceeds the {side}x{side} code grid",
                self.height,
                self.width,
                self.top,
                self.left
            ));
        }
        Ok(side)
    }

    /// Code positions (raster indices) covered by the region.
    pub fn cells(&self, code_len: usize) -> Result<Vec<usize>> {
        let side = self.validate(code_len)?;
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in self.top..self.top + self.height {
            for c in self.left..self.left + self.width {
                out.push(r * side + c);
            }
        }
        Ok(out)
    }

    /// Image-resolution pixel mask of the probed region (true inside).
    pub fn pixel_mask(&self, code_len: usize, image_size: usize) -> Result<Vec<bool>> {
        let side = self.validate(code_len)?;
        let cell = image_size / side;
        let mut mask = vec![false; image_size * image_size];
        for r in self.top * cell..(self.top + self.height) * cell {
            for c in self.left * cell..(self.left + self.width) * cell {
                mask[r * image_size + c] = true;
            }
        }
        Ok(mask)
    }
}

/// Decode through the base model with a region of the code masked by one of
/// the three modes. An empty region reproduces the plain decode.
#[allow(clippy::too_many_arguments)]
pub fn probe_masked_code<T: Elem>(
    image: &Tensor<T>,
    code: &GuidingCode,
    spec: &MaskProbeSpec,
    base: &BaseModel<T>,
    codebook: &Codebook<T>,
    task: &TaskSpec,
    rng: &mut ChaCha8Rng,
) -> Result<TaskLabel> {
    let cells = spec.cells(code.len())?;
    let mut z_q = codebook.lookup(code)?;
    let d = codebook.dim();
    for &cell in &cells {
        match spec.mode {
            MaskMode::ZeroEmbedding => {
                for v in &mut z_q.data_mut()[cell * d..(cell + 1) * d] {
                    *v = T::zero();
                }
            }
            MaskMode::RandomCodeword => {
                let idx = rng.random_range(0..codebook.dict_size());
                let row = codebook.entries().data()[idx * d..(idx + 1) * d].to_vec();
                z_q.data_mut()[cell * d..(cell + 1) * d].copy_from_slice(&row);
            }
            MaskMode::ConstantCodeword(idx) => {
                if idx >= codebook.dict_size() {
                    return Err(crate::invalid_arg!(
                        "constant codeword {idx} out of range [0, {})",
                        codebook.dict_size()
                    ));
                }
                let row = codebook.entries().data()[idx * d..(idx + 1) * d].to_vec();
                z_q.data_mut()[cell * d..(cell + 1) * d].copy_from_slice(&row);
            }
        }
    }
    let logits = base.forward(image, Some(&z_q))?;
    decode_logits(task, &logits)
}
