//! Text-grounded inpainting sampler over abstract latents.
//!
//! The engine owns composition only: noising the input latent to each
//! sampling timestep, re-injecting the known region before every denoiser
//! call, classifier-free guidance mixing, the deterministic DDIM update and
//! accumulation of per-entity cross-attention. All model-specific constants
//! (the noise schedule) come from the backend manifest.
//!
//! Mask convention: `m^resize = 1` marks the *known* region that is copied
//! from the input latent; `0` marks the region the model paints.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::hash::mix;
use crate::backends::{validate_denoise_response, BackendError, Branch, DenoiseRequest, DenoiserBackend};
use crate::geometry::BBox;
use crate::grounding::GroundingCondition;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("backend failed at step {step}: {source}")]
    Backend { step: usize, source: BackendError },
    #[error("non-finite latent produced at step {step}")]
    Numerical { step: usize },
    #[error("step hook failed at step {step}: {message}")]
    Hook { step: usize, message: String },
}

impl From<TensorError> for EngineError {
    fn from(e: TensorError) -> Self {
        EngineError::Dims(e.to_string())
    }
}

/// Pixel mask and its latent-resolution average pool.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintMask {
    /// `[H, W]`, values in `{0, 1}`; 1 = keep.
    pub pixel_mask: Tensor,
    /// `[H/f, W/f]`, values in `[0, 1]`.
    pub latent_mask: Tensor,
    pub factor: usize,
}

impl InpaintMask {
    /// Average-pools a binary pixel mask by `factor`.
    pub fn from_pixel_mask(pixel_mask: Tensor, factor: usize) -> Result<Self, EngineError> {
        let d = pixel_mask.dims().to_vec();
        if d.len() != 2 || factor == 0 || !d[0].is_multiple_of(factor) || !d[1].is_multiple_of(factor) {
            return Err(EngineError::Dims(format!("pixel mask {d:?} is not a 2-D grid divisible by {factor}")));
        }
        if pixel_mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(EngineError::Config("pixel mask must be binary".into()));
        }
        let (lh, lw) = (d[0] / factor, d[1] / factor);
        let norm = (factor * factor) as f32;
        let latent_mask = Tensor::from_fn2(lh, lw, |y, x| {
            let mut count = 0u32;
            for py in y * factor..(y + 1) * factor {
                for px in x * factor..(x + 1) * factor {
                    count += (pixel_mask.at2(py, px) != 0.0) as u32;
                }
            }
            count as f32 / norm
        });
        Ok(InpaintMask { pixel_mask, latent_mask, factor })
    }

    /// Known everywhere except inside the union of `boxes` (pixel-centre rule).
    pub fn from_boxes<'a>(
        boxes: impl IntoIterator<Item = &'a BBox>,
        height: usize,
        width: usize,
        factor: usize,
    ) -> Result<Self, EngineError> {
        let mut m = Tensor::full(&[height, width], 1.0);
        for b in boxes {
            let rows = b.row_span(height);
            let cols = b.col_span(width);
            for y in rows {
                for x in cols.clone() {
                    m.data_mut()[y * width + x] = 0.0;
                }
            }
        }
        Self::from_pixel_mask(m, factor)
    }

    /// Mask given directly at latent resolution; the pixel mask marks a pixel known
    /// only when its cell is fully known.
    pub fn from_latent_mask(latent_mask: Tensor, factor: usize) -> Result<Self, EngineError> {
        let d = latent_mask.dims().to_vec();
        if d.len() != 2 || factor == 0 {
            return Err(EngineError::Dims(format!("latent mask dims {d:?}")));
        }
        if latent_mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(EngineError::Config("latent mask values must lie in [0, 1]".into()));
        }
        let pixel_mask = Tensor::from_fn2(d[0] * factor, d[1] * factor, |y, x| {
            (latent_mask.at2(y / factor, x / factor) == 1.0) as u8 as f32
        });
        Ok(InpaintMask { pixel_mask, latent_mask, factor })
    }

    pub fn latent_dims(&self) -> (usize, usize) {
        (self.latent_mask.dims()[0], self.latent_mask.dims()[1])
    }

    fn check_latent(&self, t: &Tensor, what: &str) -> Result<usize, EngineError> {
        let (h, w, c) = t.hwc()?;
        if (h, w) != self.latent_dims() {
            return Err(EngineError::Dims(format!(
                "{what} is {h}×{w}, mask is {}×{}",
                self.latent_dims().0,
                self.latent_dims().1
            )));
        }
        Ok(c)
    }
}

/// `Concat(z_t, z0_input ⊙ m, m)` along channels: depth `2C + 1`.
pub fn make_inpaint_input(z_t: &Tensor, z0_input: &Tensor, mask: &InpaintMask) -> Result<Tensor, EngineError> {
    let c = mask.check_latent(z_t, "z_t")?;
    if z0_input.dims() != z_t.dims() {
        return Err(EngineError::Dims(format!(
            "z0_input dims {:?} differ from z_t dims {:?}",
            z0_input.dims(),
            z_t.dims()
        )));
    }
    let (h, w) = mask.latent_dims();
    let depth = 2 * c + 1;
    let mut out = Vec::with_capacity(h * w * depth);
    let (zt, z0, m) = (z_t.data(), z0_input.data(), mask.latent_mask.data());
    for p in 0..h * w {
        out.extend_from_slice(&zt[p * c..(p + 1) * c]);
        out.extend(z0[p * c..(p + 1) * c].iter().map(|&v| v * m[p]));
        out.push(m[p]);
    }
    Ok(Tensor::new(vec![h, w, depth], out)?)
}

/// `z_prev · (1 − m) + z_t_input · m`, channel-broadcast.
///
/// Fully known and fully unknown cells copy their source exactly, so the
/// known region is bit-identical to the noised input (no `−0.0` or rounding).
pub fn blend_known_region(z_prev: &Tensor, z_t_input: &Tensor, mask: &InpaintMask) -> Result<Tensor, EngineError> {
    let c = mask.check_latent(z_prev, "z_prev")?;
    if z_t_input.dims() != z_prev.dims() {
        return Err(EngineError::Dims(format!(
            "z_t_input dims {:?} differ from z_prev dims {:?}",
            z_t_input.dims(),
            z_prev.dims()
        )));
    }
    let m = mask.latent_mask.data();
    let (a, b) = (z_prev.data(), z_t_input.data());
    let data = (0..a.len())
        .map(|i| {
            let mi = m[i / c];
            if mi == 1.0 {
                b[i]
            } else if mi == 0.0 {
                a[i]
            } else {
                a[i] * (1.0 - mi) + b[i] * mi
            }
        })
        .collect();
    Ok(Tensor::new(z_prev.dims().to_vec(), data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, guidance_scale: 7.5, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.steps == 0 {
            return Err(EngineError::Config("steps must be at least 1".into()));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(EngineError::Config(format!("guidance scale {} must be ≥ 0", self.guidance_scale)));
        }
        Ok(())
    }
}

/// Finalized cross-attention for one grounding entity.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// `[H, W]` pixel-resolution map in `[0, 1]`.
    pub map: Tensor,
    /// Number of denoiser calls averaged.
    pub samples: usize,
    /// The averaged map was constant; `map` is all zeros.
    pub degenerate: bool,
}

impl AttentionRecord {
    /// Wraps an already normalized map.
    pub fn from_normalized(map: Tensor) -> Self {
        AttentionRecord { map, samples: 1, degenerate: false }
    }

    /// Mean over `samples` calls, min-max normalized, nearest-upsampled by `factor`.
    pub fn finalize_sum(sum: Tensor, samples: usize, factor: usize) -> Result<Self, TensorError> {
        let d = sum.dims().to_vec();
        if d.len() != 2 {
            return Err(TensorError::Shape(format!("attention sum must be 2-D, got {d:?}")));
        }
        let n = samples.max(1) as f32;
        let mean: Vec<f32> = sum.data().iter().map(|v| v / n).collect();
        let lo = mean.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = mean.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = hi - lo;
        let degenerate = !(range > 0.0 && range.is_finite());
        let norm: Vec<f32> = if degenerate {
            vec![0.0; mean.len()]
        } else {
            mean.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
        };
        let f = factor.max(1);
        let map = Tensor::from_fn2(d[0] * f, d[1] * f, |y, x| norm[(y / f) * d[1] + x / f]);
        Ok(AttentionRecord { map, samples, degenerate })
    }
}

/// Observation and mutation points inside the sampling loop.
pub trait StepHook {
    /// Called after the known-region blend and before the denoiser call.
    fn before_denoise(&mut self, _step: usize, _working: &Tensor, _noised_input: &Tensor) {}
    /// Called with the latent produced by `step`. For the last step (0) this is
    /// after the final known-region blend, i.e. on the returned latent.
    fn after_step(&mut self, _step: usize, _latent: &mut Tensor) -> Result<(), String> {
        Ok(())
    }
}

/// Hook that does nothing.
pub struct NoHook;

impl StepHook for NoHook {}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingOutput {
    pub latent: Tensor,
    pub attention: Vec<AttentionRecord>,
}

/// Training timestep visited at sampling step `s` (uniform spacing).
pub fn sampling_timestep(s: usize, steps: usize, train_timesteps: usize) -> usize {
    s * (train_timesteps / steps).max(1)
}

fn gaussian(seed: u64, tag: u64, step: usize, len: usize) -> impl Iterator<Item = f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(mix(&[seed, tag, step as u64]));
    (0..len).map(move |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v as f32
    })
}

const TAG_INIT: u64 = 0x696e_6974;
const TAG_NOISE: u64 = 0x6e6f_6973;

/// `√ᾱ_t · z0 + √(1 − ᾱ_t) · ε` with ε drawn from the `(seed, step)` stream.
pub fn noise_to_step(z0: &Tensor, alpha_bar: f64, seed: u64, step: usize) -> Tensor {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(gaussian(seed, TAG_NOISE, step, z0.len()))
        .map(|(&z, e)| (sa * z as f64 + sb * e as f64) as f32)
        .collect();
    Tensor::new(z0.dims().to_vec(), data).expect("dims unchanged")
}

pub fn run_sampling(
    z0_input: &Tensor,
    mask: &InpaintMask,
    cond: &GroundingCondition,
    cfg: &SamplerConfig,
    backend: &dyn DenoiserBackend,
) -> Result<SamplingOutput, EngineError> {
    run_sampling_with(z0_input, mask, cond, cfg, backend, &mut NoHook)
}

/// DDIM (η = 0) inpainting loop with classifier-free guidance.
pub fn run_sampling_with(
    z0_input: &Tensor,
    mask: &InpaintMask,
    cond: &GroundingCondition,
    cfg: &SamplerConfig,
    backend: &dyn DenoiserBackend,
    hook: &mut dyn StepHook,
) -> Result<SamplingOutput, EngineError> {
    cfg.validate()?;
    let c = mask.check_latent(z0_input, "z0_input")?;
    z0_input.check_finite()?;
    if cond.entities.is_empty() {
        return Err(EngineError::Config("grounding condition has no entities".into()));
    }
    let manifest = backend.manifest().map_err(|source| EngineError::Backend { step: cfg.steps - 1, source })?;
    if manifest.latent_channels != c {
        return Err(EngineError::Dims(format!(
            "latent has {c} channels, backend expects {}",
            manifest.latent_channels
        )));
    }
    let alphas =
        manifest.schedule.alphas_cumprod().map_err(|source| EngineError::Backend { step: cfg.steps - 1, source })?;
    let t_train = alphas.len();
    if cfg.steps > t_train {
        return Err(EngineError::Config(format!("{} steps exceed {t_train} training timesteps", cfg.steps)));
    }

    let (h, w) = mask.latent_dims();
    let mut z = Tensor::new(z0_input.dims().to_vec(), gaussian(cfg.seed, TAG_INIT, 0, z0_input.len()).collect())?;
    let mut sums: Vec<Tensor> = vec![Tensor::zeros(&[h, w]); cond.entities.len()];
    let mut samples = 0usize;
    let g = cfg.guidance_scale;

    for s in (0..cfg.steps).rev() {
        let t = sampling_timestep(s, cfg.steps, t_train);
        let ab = alphas[t];
        let ab_prev = if s == 0 { 1.0 } else { alphas[sampling_timestep(s - 1, cfg.steps, t_train)] };

        let z_in = noise_to_step(z0_input, ab, cfg.seed, s);
        z = blend_known_region(&z, &z_in, mask)?;
        hook.before_denoise(s, &z, &z_in);

        let latent = make_inpaint_input(&z, z0_input, mask)?;
        let call = |branch: Branch| {
            let req = DenoiseRequest {
                latent: latent.clone(),
                step: s,
                timestep: t,
                prompt: match branch {
                    Branch::Conditional => cond.text_prompt.clone(),
                    Branch::Unconditional => String::new(),
                },
                entities: match branch {
                    Branch::Conditional => cond.entities.clone(),
                    Branch::Unconditional => Vec::new(),
                },
                branch,
            };
            let resp = backend.denoise(&req)?;
            validate_denoise_response(&req, &resp, &manifest)?;
            Ok::<_, BackendError>(resp)
        };
        let wrap = |source| EngineError::Backend { step: s, source };
        let rc = call(Branch::Conditional).map_err(wrap)?;
        let ru = call(Branch::Unconditional).map_err(wrap)?;

        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (sa_p, sb_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let (ec, eu) = (rc.noise.data(), ru.noise.data());
        let next: Vec<f32> = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, &zi)| {
                let eps = eu[i] as f64 + g * (ec[i] as f64 - eu[i] as f64);
                let x0 = (zi as f64 - sb * eps) / sa;
                (sa_p * x0 + sb_p * eps) as f32
            })
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::Numerical { step: s });
        }
        z = Tensor::new(z.dims().to_vec(), next)?;

        if rc.attention.len() == sums.len() {
            for (acc, m) in sums.iter_mut().zip(&rc.attention) {
                for (a, v) in acc.data_mut().iter_mut().zip(m.data()) {
                    *a += v;
                }
            }
            samples += 1;
        }

        if s == 0 {
            z = blend_known_region(&z, z0_input, mask)?;
        }
        hook.after_step(s, &mut z).map_err(|message| EngineError::Hook { step: s, message })?;
        if z.check_finite().is_err() {
            return Err(EngineError::Numerical { step: s });
        }
    }

    let attention = sums
        .into_iter()
        .map(|sum| AttentionRecord::finalize_sum(sum, samples, mask.factor))
        .collect::<Result<_, _>>()?;
    Ok(SamplingOutput { latent: z, attention })
}
