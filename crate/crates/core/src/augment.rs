//! Random brightness, rotation and zoom for training images.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

use crate::tensor::Tensor;

pub const BRIGHTNESS_RANGE: (f32, f32) = (0.8, 1.2);
pub const ROTATION_RANGE_DEG: (f32, f32) = (-20.0, 20.0);
pub const ZOOM_RANGE: (f32, f32) = (0.8, 1.2);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub brightness: f32,
    /// Positive values rotate the content clockwise.
    pub rotation_degrees: f32,
    /// Above 1 zooms in, below 1 zooms out.
    pub zoom: f32,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        brightness: 1.0,
        rotation_degrees: 0.0,
        zoom: 1.0,
    };

    pub fn in_range(&self) -> bool {
        let within = |v: f32, (lo, hi): (f32, f32)| v.is_finite() && v >= lo && v <= hi;
        within(self.brightness, BRIGHTNESS_RANGE)
            && within(self.rotation_degrees, ROTATION_RANGE_DEG)
            && within(self.zoom, ZOOM_RANGE)
    }
}

/// Draws brightness, rotation, zoom (in that order), each uniform over its
/// closed range.
pub fn draw_augment_params<R: Rng + ?Sized>(rng: &mut R) -> AugmentParams {
    let brightness = rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1);
    let rotation_degrees = rng.random_range(ROTATION_RANGE_DEG.0..=ROTATION_RANGE_DEG.1);
    let zoom = rng.random_range(ZOOM_RANGE.0..=ZOOM_RANGE.1);
    AugmentParams {
        brightness,
        rotation_degrees,
        zoom,
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a sequence of words.
pub fn mix_seed(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6a09_e667_f3bc_c909, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Per-image augmentation stream for `(seed, epoch, image_index)`.
pub fn image_rng(seed: u64, epoch: usize, image_index: usize) -> Pcg32 {
    Pcg32::seed_from_u64(mix_seed(&[seed, epoch as u64, image_index as u64]))
}

/// Brightness (multiply and clip), then rotation about the centre, then a
/// centre zoom. Both geometric steps sample nearest-neighbour and clamp
/// out-of-bounds coordinates to the nearest edge pixel.
pub fn apply_augment(image: &Tensor<f32>, params: &AugmentParams) -> Tensor<f32> {
    let mut out = if params.brightness == 1.0 {
        image.clone()
    } else {
        image.map(|v| (v * params.brightness).clamp(0.0, 1.0))
    };
    if params.rotation_degrees != 0.0 {
        let theta = (params.rotation_degrees as f64).to_radians();
        let (sin, cos) = theta.sin_cos();
        out = remap(&out, |dy, dx| (-dx * sin + dy * cos, dx * cos + dy * sin));
    }
    if params.zoom != 1.0 {
        let z = params.zoom as f64;
        out = remap(&out, |dy, dx| (dy / z, dx / z));
    }
    out
}

/// Inverse-maps each output pixel: `src(dy, dx)` gives the source offset
/// from the centre for an output offset from the centre.
fn remap(img: &Tensor<f32>, src: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<f32> {
    let (c, h, w) = match img.shape() {
        &[c, h, w] => (c, h, w),
        other => panic!("expected [C,H,W] image, got {other:?}"),
    };
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut lookup = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y as f64 - cy, x as f64 - cx);
            let yy = (cy + sy).round().clamp(0.0, (h - 1) as f64) as usize;
            let xx = (cx + sx).round().clamp(0.0, (w - 1) as f64) as usize;
            lookup.push(yy * w + xx);
        }
    }
    let d = img.data();
    let mut data = Vec::with_capacity(d.len());
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        data.extend(lookup.iter().map(|&i| plane[i]));
    }
    Tensor::new(img.shape(), data).expect("same shape")
}
