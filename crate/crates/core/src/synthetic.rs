//! Class-conditional synthetic feature maps standing in for a backbone.
//!
//! Every class owns a prototype vector. Foreground cells of an example carry
//! the prototype plus Gaussian noise, background cells carry the prototype of
//! another, randomly chosen class plus noise (a fresh random vector when
//! there is only one class). The first `num_shared_dims` channels are
//! pinned high on foreground and background alike, so they look active but
//! carry no information about the class.

use serde::{Deserialize, Serialize};

use crate::episode::LabeledExample;
use crate::error::{FsError, Result};
use crate::mask::BinaryMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Activation level of the shared (non-discriminative) channels.
pub const SHARED_ACTIVATION: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub d: usize,
    /// Feature-map height.
    pub h: usize,
    /// Feature-map width.
    pub w: usize,
    /// Mask pixels per feature cell along each axis.
    pub stride: usize,
    pub num_classes: u32,
    pub noise_sigma: f64,
    pub num_shared_dims: usize,
    /// Inclusive range for the number of foreground discs per example.
    pub blob_count_range: (usize, usize),
    /// Inclusive disc radius range, in mask pixels.
    pub blob_radius_range: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            d: 16,
            h: 12,
            w: 12,
            stride: 4,
            num_classes: 20,
            noise_sigma: 1.0,
            num_shared_dims: 4,
            blob_count_range: (1, 2),
            blob_radius_range: (6, 14),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FsError::Data(m));
        if self.d == 0 || self.h == 0 || self.w == 0 || self.stride == 0 {
            return bad(format!(
                "dimensions must be positive (d={}, h={}, w={}, stride={})",
                self.d, self.h, self.w, self.stride
            ));
        }
        if self.h * self.w < 2 {
            return bad("feature grid needs at least two cells".into());
        }
        if self.num_shared_dims >= self.d {
            return bad(format!(
                "num_shared_dims {} must be below d {}",
                self.num_shared_dims, self.d
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be positive, got {}", self.noise_sigma));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        let (c0, c1) = self.blob_count_range;
        let (r0, r1) = self.blob_radius_range;
        if c0 == 0 || c0 > c1 || r0 == 0 || r0 > r1 {
            return bad(format!(
                "invalid blob ranges count={:?} radius={:?}",
                self.blob_count_range, self.blob_radius_range
            ));
        }
        Ok(())
    }

    fn mask_dims(&self) -> (usize, usize) {
        (self.h * self.stride, self.w * self.stride)
    }
}

/// Union of random discs at mask resolution.
fn draw_blobs(config: &SyntheticConfig, rng: &mut Rng) -> BinaryMask {
    let (mh, mw) = config.mask_dims();
    let count = rng.range_inclusive(config.blob_count_range.0, config.blob_count_range.1);
    let discs: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| {
            let r = rng.range_inclusive(config.blob_radius_range.0, config.blob_radius_range.1) as f64;
            let cy = rng.uniform() * mh as f64;
            let cx = rng.uniform() * mw as f64;
            (cy, cx, r)
        })
        .collect();
    BinaryMask::from_fn(mh, mw, |y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        discs
            .iter()
            .any(|&(cy, cx, r)| (py - cy).powi(2) + (px - cx).powi(2) <= r * r)
    })
}

const MAX_MASK_ATTEMPTS: usize = 10_000;

/// Generates `examples_per_class` examples for every class, class-major.
pub fn generate_synthetic(
    config: &SyntheticConfig,
    examples_per_class: usize,
) -> Result<Vec<LabeledExample>> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let d = config.d;
    let (h, w) = (config.h, config.w);
    let hw = h * w;
    let shared = config.num_shared_dims;

    let prototypes: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect();

    let mut out = Vec::with_capacity(config.num_classes as usize * examples_per_class);
    for (class_id, proto) in prototypes.iter().enumerate() {
        for _ in 0..examples_per_class {
            let mut attempts = 0;
            let (mask, small) = loop {
                let m = draw_blobs(config, &mut rng);
                let s = m.downsample(h, w)?;
                if s.foreground_count() > 0 && s.background_count() > 0 {
                    break (m, s);
                }
                attempts += 1;
                if attempts >= MAX_MASK_ATTEMPTS {
                    return Err(FsError::Data(
                        "blob ranges never produce a mask with both foreground and background"
                            .into(),
                    ));
                }
            };
            let distractor: Vec<f64> = if prototypes.len() > 1 {
                let mut j = rng.below(prototypes.len() - 1);
                if j >= class_id {
                    j += 1;
                }
                prototypes[j].clone()
            } else {
                (0..d).map(|_| rng.normal()).collect()
            };
            let mut data = vec![0.0f32; d * hw];
            for i in 0..hw {
                let base = if small.data()[i] == 1 { proto } else { &distractor };
                for c in 0..d {
                    let mean = if c < shared { SHARED_ACTIVATION } else { base[c] };
                    data[c * hw + i] = (mean + config.noise_sigma * rng.normal()) as f32;
                }
            }
            let features = Tensor::new(vec![d, h, w], data)?;
            out.push(LabeledExample::new(class_id as u32, features, mask)?);
        }
    }
    Ok(out)
}
