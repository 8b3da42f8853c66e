use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassifierError, Result, SliceSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub rotation_max_deg: f64,
    pub hflip_prob: f64,
    /// Side of the random crop as a fraction of the image side.
    pub crop_scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { rotation_max_deg: 10.0, hflip_prob: 0.5, crop_scale_range: (0.9, 1.0), seed: 0 }
    }
}

impl AugmentationConfig {
    /// No rotation, no flip, full-size crop.
    pub fn neutral() -> Self {
        Self { rotation_max_deg: 0.0, hflip_prob: 0.0, crop_scale_range: (1.0, 1.0), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(0.0..=45.0).contains(&self.rotation_max_deg)
            || !(0.0..=1.0).contains(&self.hflip_prob)
            || !(lo > 0.0 && lo <= hi && hi <= 1.0)
        {
            return Err(ClassifierError::InvalidConfig(format!("augmentation {self:?}")));
        }
        Ok(())
    }
}

fn fetch(image: &[f32], size: usize, x: isize, y: isize) -> f32 {
    if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
        0.0
    } else {
        image[y as usize * size + x as usize]
    }
}

/// Random rotation, horizontal flip and crop-and-resize, drawn from
/// `draw_seed`. Out-of-image samples are zero.
pub fn augment(s: &SliceSample, cfg: &AugmentationConfig, draw_seed: u64) -> Result<SliceSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ draw_seed.rotate_left(17));
    let max = cfg.rotation_max_deg;
    let angle = if max > 0.0 { rng.random_range(-max..=max).to_radians() } else { 0.0 };
    let flip = rng.random::<f64>() < cfg.hflip_prob;
    let (lo, hi) = cfg.crop_scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let n = s.size as f64;
    let room = (1.0 - scale) * n;
    let (off_x, off_y) = if room > 0.0 { (rng.random_range(0.0..=room), rng.random_range(0.0..=room)) } else { (0.0, 0.0) };

    let c = (n - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut image = Vec::with_capacity(s.image.len());
    for y in 0..s.size {
        for x in 0..s.size {
            // output pixel -> crop window -> unflipped -> unrotated source
            let mut u = off_x + (x as f64 + 0.5) * scale - 0.5;
            let v = off_y + (y as f64 + 0.5) * scale - 0.5;
            if flip {
                u = n - 1.0 - u;
            }
            let (du, dv) = (u - c, v - c);
            let sx = cos * du + sin * dv + c;
            let sy = -sin * du + cos * dv + c;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut val = fetch(&s.image, s.size, x0, y0) * (1.0 - fx) * (1.0 - fy);
            if fx > 0.0 {
                val += fetch(&s.image, s.size, x0 + 1, y0) * fx * (1.0 - fy);
            }
            if fy > 0.0 {
                val += fetch(&s.image, s.size, x0, y0 + 1) * (1.0 - fx) * fy;
            }
            if fx > 0.0 && fy > 0.0 {
                val += fetch(&s.image, s.size, x0 + 1, y0 + 1) * fx * fy;
            }
            image.push(val.clamp(0.0, 1.0));
        }
    }
    Ok(SliceSample { image, ..s.clone() })
}
