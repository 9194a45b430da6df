//! Deterministic stand-ins for the diffusion model and the autoencoder.
//!
//! The scripted denoiser paints a dark item inside every grounding box: for
//! each request it predicts the noise that would take the current latent to a
//! fixed target (`ε = (z − √ᾱ·target) / √(1−ᾱ)`), where the unconditional
//! target is a textured bag fill and the conditional target additionally holds
//! an item rectangle placed at a hashed offset inside each entity box. Under
//! guidance the item contrast is amplified, and the attention maps are smooth
//! bumps centred on the painted item, as a trained model's would be.
//!
//! Generator constants (all arithmetic in `f64`, cast to `f32` at the end):
//!
//! * texture: `FILL + TEX · signed(mix[seed, 1, y, x, k])`
//! * item value: `ITEM + ITEM_TEX · signed(mix[seed, 2, key, y, x, k])`
//! * item key: `mix[seed, 3, fnv1a(text), bits(x1), bits(y1), bits(x2), bits(y2)]`
//! * attention jitter: `1 + 0.1 · signed(mix[seed, 4, step, entity, y, x])`

use crate::backends::hash::{fnv1a, mix, signed, unit};
use crate::backends::{
    AutoencoderBackend, BackendError, BackendManifest, Branch, Capabilities, DenoiseRequest, DenoiseResponse,
    DenoiserBackend, ScheduleSpec, PROTOCOL_VERSION,
};
use crate::geometry::{pixel_span, BBox};
use crate::grounding::GroundingEntity;
use crate::tensor::Tensor;

pub const MOCK_BACKEND_ID: &str = "xsyn-mock";
pub const MOCK_DOWNSCALE: usize = 8;
pub const MOCK_LATENT_CHANNELS: usize = 4;

const FILL: f64 = 0.5;
const TEX: f64 = 0.05;
const ITEM: f64 = -0.6;
const ITEM_TEX: f64 = 0.02;
const OUTSIDE_ATTENTION: f64 = 0.05;
/// Weight of the input's own clean estimate in the predicted `x0`, scaled by `ᾱ_t`.
const MEMORY: f64 = 0.2;

pub fn mock_manifest() -> BackendManifest {
    let schedule = ScheduleSpec::default();
    BackendManifest {
        backend_id: MOCK_BACKEND_ID.into(),
        protocol_version: PROTOCOL_VERSION,
        downscale: MOCK_DOWNSCALE,
        latent_channels: MOCK_LATENT_CHANNELS,
        image_channels: 3,
        schedule_digest: schedule.digest(),
        schedule,
        capabilities: Capabilities { attention: true, prompt_segmentation: true },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseScript {
    /// Predicts zero noise on both branches.
    Zero,
    /// Predicts the noise that steers the latent towards the painted target,
    /// blended inside the hole with the input's own clean estimate.
    Scripted,
}

#[derive(Debug, Clone)]
pub struct MockDenoiser {
    seed: u64,
    script: NoiseScript,
    manifest: BackendManifest,
    alphas_cumprod: Vec<f64>,
}

/// Item rectangle painted for one entity, in latent coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemPlacement {
    pub center: (f64, f64),
    pub half_size: (f64, f64),
    /// The entity's grounding box on the latent grid.
    pub latent_box: BBox,
    pub key: u64,
}

impl ItemPlacement {
    pub fn rect(&self) -> BBox {
        let (cx, cy) = self.center;
        let (hw, hh) = self.half_size;
        BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    /// Pixel-space box of the painted item as it appears after decoding.
    pub fn pixel_rect(&self, downscale: usize, h: usize, w: usize) -> BBox {
        let cells = self.cells(h, w);
        let f = downscale as f64;
        BBox::new(cells.0.start as f64 * f, cells.1.start as f64 * f, cells.0.end as f64 * f, cells.1.end as f64 * f)
    }

    /// Latent cells `(cols, rows)` covered by the item. Never empty.
    pub fn cells(&self, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let r = self.rect();
        let mut cols = pixel_span(r.x1, r.x2, w);
        let mut rows = pixel_span(r.y1, r.y2, h);
        if cols.is_empty() {
            let c = (self.center.0.floor().max(0.0) as usize).min(w - 1);
            cols = c..c + 1;
        }
        if rows.is_empty() {
            let c = (self.center.1.floor().max(0.0) as usize).min(h - 1);
            rows = c..c + 1;
        }
        (cols, rows)
    }
}

pub fn item_placement(seed: u64, entity: &GroundingEntity, downscale: usize) -> ItemPlacement {
    let b = entity.bbox;
    let key =
        mix(&[seed, 3, fnv1a(&entity.entity_text), b.x1.to_bits(), b.y1.to_bits(), b.x2.to_bits(), b.y2.to_bits()]);
    let f = downscale as f64;
    let lb = b.scale(1.0 / f, 1.0 / f);
    let (bw, bh) = (lb.width(), lb.height());
    let sx = 0.6 + 0.3 * unit(mix(&[key, 0])) as f64;
    let sy = 0.6 + 0.3 * unit(mix(&[key, 1])) as f64;
    let ox = 0.2 * signed(mix(&[key, 2])) as f64 * bw;
    let oy = 0.2 * signed(mix(&[key, 3])) as f64 * bh;
    let (cx, cy) = lb.center();
    ItemPlacement { center: (cx + ox, cy + oy), half_size: (0.5 * sx * bw, 0.5 * sy * bh), latent_box: lb, key }
}

impl MockDenoiser {
    pub fn new(seed: u64, script: NoiseScript) -> Self {
        let manifest = mock_manifest();
        let alphas_cumprod = manifest.schedule.alphas_cumprod().expect("default schedule is valid");
        MockDenoiser { seed, script, manifest, alphas_cumprod }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn texture(&self, y: usize, x: usize, k: usize) -> f64 {
        FILL + TEX * signed(mix(&[self.seed, 1, y as u64, x as u64, k as u64])) as f64
    }

    fn attention_map(&self, step: usize, index: usize, item: &ItemPlacement, h: usize, w: usize) -> Tensor {
        let (cx, cy) = item.center;
        let sx = item.half_size.0.max(0.5);
        let sy = item.half_size.1.max(0.5);
        Tensor::from_fn2(h, w, |y, x| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let g = (-0.5 * (((px - cx) / sx).powi(2) + ((py - cy) / sy).powi(2))).exp();
            let v = if item.latent_box.contains_point(px, py) {
                let j = signed(mix(&[self.seed, 4, step as u64, index as u64, y as u64, x as u64]));
                g * (1.0 + 0.1 * j as f64)
            } else {
                g * OUTSIDE_ATTENTION
            };
            v as f32
        })
    }
}

impl DenoiserBackend for MockDenoiser {
    fn manifest(&self) -> Result<BackendManifest, BackendError> {
        Ok(self.manifest.clone())
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse, BackendError> {
        let (h, w, c) = req.latent.hwc()?;
        let lc = self.manifest.latent_channels;
        if c != 2 * lc + 1 {
            return Err(BackendError::DimsMismatch(format!("expected {} input channels, got {c}", 2 * lc + 1)));
        }
        let ab = *self
            .alphas_cumprod
            .get(req.timestep)
            .ok_or_else(|| BackendError::BadRequest(format!("timestep {} outside the schedule", req.timestep)))?;
        let items: Vec<ItemPlacement> =
            req.entities.iter().map(|e| item_placement(self.seed, e, self.manifest.downscale)).collect();

        let noise = match self.script {
            NoiseScript::Zero => Tensor::zeros(&[h, w, lc]),
            NoiseScript::Scripted => {
                // Latest entity wins where items overlap.
                let mut owner: Vec<Option<usize>> = vec![None; h * w];
                if req.branch == Branch::Conditional {
                    for (i, it) in items.iter().enumerate() {
                        let (cols, rows) = it.cells(h, w);
                        for y in rows {
                            for x in cols.clone() {
                                owner[y * w + x] = Some(i);
                            }
                        }
                    }
                }
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let input = req.latent.data();
                let mut out = Vec::with_capacity(h * w * lc);
                for y in 0..h {
                    for x in 0..w {
                        let base = (y * w + x) * c;
                        let m = input[base + 2 * lc] as f64;
                        for k in 0..lc {
                            let z = input[base + k] as f64;
                            let known = input[base + lc + k] as f64;
                            let paint = match owner[y * w + x] {
                                Some(i) => {
                                    ITEM + ITEM_TEX
                                        * signed(mix(&[self.seed, 2, items[i].key, y as u64, x as u64, k as u64]))
                                            as f64
                                }
                                None => self.texture(y, x, k),
                            };
                            let target = known + paint * (1.0 - m);
                            // Inside the hole the prediction partly follows the input, so
                            // edits made to the working latent between steps persist.
                            let rho = MEMORY * ab * (1.0 - m);
                            let x0 = (1.0 - rho) * target + rho * z / sa;
                            out.push(((z - sa * x0) / sb) as f32);
                        }
                    }
                }
                Tensor::new(vec![h, w, lc], out)?
            }
        };

        let attention = if req.branch == Branch::Conditional {
            items.iter().enumerate().map(|(i, it)| self.attention_map(req.step, i, it, h, w)).collect()
        } else {
            Vec::new()
        };
        Ok(DenoiseResponse { noise, attention })
    }
}

/// Block-average encoder and nearest-neighbour decoder.
///
/// Latent channels 0..3 hold `2·mean − 1` of each colour channel over an
/// `f × f` block (summed row-major in `f32`), channel 3 their average.
#[derive(Debug, Clone, Copy)]
pub struct MockAutoencoder {
    factor: usize,
}

impl MockAutoencoder {
    pub fn new(factor: usize) -> Self {
        MockAutoencoder { factor }
    }
}

impl AutoencoderBackend for MockAutoencoder {
    fn encode(&self, image: &Tensor) -> Result<Tensor, BackendError> {
        let f = self.factor;
        let (hh, ww, c) = image.hwc()?;
        if c != 3 || hh % f != 0 || ww % f != 0 {
            return Err(BackendError::DimsMismatch(format!(
                "encoder expects [H, W, 3] with H, W divisible by {f}, got {:?}",
                image.dims()
            )));
        }
        let (h, w) = (hh / f, ww / f);
        let n = (f * f) as f32;
        let mut out = Vec::with_capacity(h * w * MOCK_LATENT_CHANNELS);
        for y in 0..h {
            for x in 0..w {
                let mut lat = [0f32; 3];
                for (k, slot) in lat.iter_mut().enumerate() {
                    let mut s = 0f32;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += image.at3(y * f + dy, x * f + dx, k);
                        }
                    }
                    *slot = 2.0 * (s / n) - 1.0;
                }
                out.extend_from_slice(&lat);
                out.push((lat[0] + lat[1] + lat[2]) / 3.0);
            }
        }
        Ok(Tensor::new(vec![h, w, MOCK_LATENT_CHANNELS], out)?)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor, BackendError> {
        let f = self.factor;
        let (h, w, c) = latent.hwc()?;
        if c < 3 || latent.dims().len() != 3 {
            return Err(BackendError::DimsMismatch(format!("decoder expects [h, w, C>=3], got {:?}", latent.dims())));
        }
        Ok(Tensor::from_fn3(h * f, w * f, 3, |y, x, k| ((latent.at3(y / f, x / f, k) + 1.0) * 0.5).clamp(0.0, 1.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(branch: Branch, entities: Vec<GroundingEntity>) -> DenoiseRequest {
        let latent =
            Tensor::from_fn3(
                8,
                8,
                9,
                |y, x, k| {
                    if k == 8 {
                        0.0
                    } else {
                        ((y * 8 + x) as f32 * 0.01) - 0.3 + k as f32 * 0.001
                    }
                },
            );
        DenoiseRequest { latent, step: 3, timestep: 601, prompt: "Knife".into(), entities, branch }
    }

    fn knife() -> GroundingEntity {
        GroundingEntity { entity_text: "Knife".into(), bbox: BBox::new(16.0, 16.0, 48.0, 48.0) }
    }

    #[test]
    fn deterministic_and_valid() {
        let d = MockDenoiser::new(7, NoiseScript::Scripted);
        let r = request(Branch::Conditional, vec![knife()]);
        let a = d.denoise(&r).unwrap();
        let b = d.denoise(&r).unwrap();
        assert!(a.noise.bit_eq(&b.noise));
        assert_eq!(a.attention.len(), 1);
        crate::backends::validate_denoise_response(&r, &a, &d.manifest().unwrap()).unwrap();
        let u = d.denoise(&request(Branch::Unconditional, vec![knife()])).unwrap();
        assert!(u.attention.is_empty());
    }

    #[test]
    fn attention_peaks_inside_box() {
        let d = MockDenoiser::new(0, NoiseScript::Scripted);
        let r = request(Branch::Conditional, vec![knife()]);
        let map = &d.denoise(&r).unwrap().attention[0];
        let (argmax, _) =
            map.data().iter().enumerate().fold((0, f32::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let (y, x) = (argmax / 8, argmax % 8);
        // Box [16,16,48,48] is latent cells 2..6.
        assert!((2..6).contains(&x) && (2..6).contains(&y), "argmax at ({x},{y})");
        let (mut inside, mut outside) = (0.0, 0.0);
        for y in 0..8 {
            for x in 0..8 {
                if (2..6).contains(&x) && (2..6).contains(&y) {
                    inside += map.at2(y, x);
                } else {
                    outside += map.at2(y, x);
                }
            }
        }
        assert!(inside > outside);
    }

    #[test]
    fn zero_script_predicts_zero() {
        let d = MockDenoiser::new(0, NoiseScript::Zero);
        let r = d.denoise(&request(Branch::Conditional, vec![knife()])).unwrap();
        assert!(r.noise.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn autoencoder_round_trip_on_block_constant_images() {
        let ae = MockAutoencoder::new(8);
        let img = Tensor::from_fn3(16, 24, 3, |y, x, k| ((y / 8 * 3 + x / 8) as f32 * 0.125 + k as f32 * 0.25) % 1.0);
        let z = ae.encode(&img).unwrap();
        assert_eq!(z.dims(), &[2, 3, 4]);
        let back = ae.decode(&z).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(ae.encode(&Tensor::zeros(&[10, 16, 3])).is_err());
    }
}
