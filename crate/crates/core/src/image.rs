//! Interleaved `H x W x C` image patches with values nominally in `[0, 1]`.

use std::path::Path;

use nt_autodiff::{Element, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels, "patch data length");
        Self { height, width, channels, data }
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f32) -> Self {
        Self::new(height, width, channels, vec![v; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> ImagePatch {
        assert!(top + height <= self.height && left + width <= self.width, "crop outside image");
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        ImagePatch::new(height, width, c, data)
    }

    /// One of the eight flips/rotations: `k % 4` quarter turns counter-clockwise,
    /// preceded by a horizontal flip when `k >= 4`.
    pub fn dihedral(&self, k: u8) -> ImagePatch {
        assert!(k < 8, "dihedral index {k}");
        let mut img = if k >= 4 { self.flip_horizontal() } else { self.clone() };
        for _ in 0..k % 4 {
            img = img.rotate90();
        }
        img
    }

    fn flip_horizontal(&self) -> ImagePatch {
        let (h, w, c) = self.dims();
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..h {
            for x in (0..w).rev() {
                let s = (y * w + x) * c;
                data.extend_from_slice(&self.data[s..s + c]);
            }
        }
        ImagePatch::new(h, w, c, data)
    }

    fn rotate90(&self) -> ImagePatch {
        let (h, w, c) = self.dims();
        let mut data = Vec::with_capacity(self.data.len());
        // new (h', w') = (w, h); new[y][x] = old[x][w - 1 - y]
        for y in 0..w {
            for x in 0..h {
                let s = (x * w + (w - 1 - y)) * c;
                data.extend_from_slice(&self.data[s..s + c]);
            }
        }
        ImagePatch::new(w, h, c, data)
    }

    /// Values clamped to `[0, 1]`, for display and encoding only.
    pub fn clip01(&self) -> ImagePatch {
        ImagePatch::new(self.height, self.width, self.channels, self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Mirror-pads bottom/right so both sides are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> ImagePatch {
        let (h, w, c) = self.dims();
        let (h2, w2) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (h2, w2) == (h, w) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(h2 * w2 * c);
        for y in 0..h2 {
            let sy = nt_autodiff::reflect_index(y as isize, h);
            for x in 0..w2 {
                let sx = nt_autodiff::reflect_index(x as isize, w);
                let s = (sy * w + sx) * c;
                data.extend_from_slice(&self.data[s..s + c]);
            }
        }
        ImagePatch::new(h2, w2, c, data)
    }

    /// Decodes an 8-bit image file as RGB scaled by 1/255.
    pub fn load(path: &Path) -> Result<ImagePatch> {
        let img = image::open(path).map_err(|e| Error::data(path, format!("cannot decode image: {e}")))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Ok(ImagePatch::new(h as usize, w as usize, 3, data))
    }

    /// Writes an 8-bit PNG after clipping to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Usage(format!("cannot encode a {c}-channel image"))),
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::data(path, format!("cannot write image: {e}")))
    }

    /// Smooth procedural test image: low-frequency colour waves plus a few
    /// soft-edged discs, values inside `[0.05, 0.95]`.
    pub fn procedural<R: Rng>(height: usize, width: usize, rng: &mut R) -> ImagePatch {
        let c = 3;
        let waves: Vec<[f32; 5]> = (0..3 * c)
            .map(|_| {
                [
                    rng.gen_range(0.5..3.0),
                    rng.gen_range(0.5..3.0),
                    rng.gen_range(0.0..std::f32::consts::TAU),
                    rng.gen_range(0.05..0.2),
                    if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                ]
            })
            .collect();
        let discs: Vec<[f32; 6]> = (0..4)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.08..0.3),
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                ]
            })
            .collect();
        let base: Vec<f32> = (0..c).map(|_| rng.gen_range(0.3..0.7)).collect();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let fy = y as f32 / height as f32;
            for x in 0..width {
                let fx = x as f32 / width as f32;
                for ch in 0..c {
                    let mut v = base[ch];
                    for wv in &waves[ch * 3..ch * 3 + 3] {
                        v += wv[3] * wv[4] * (std::f32::consts::TAU * (wv[0] * fx + wv[1] * fy) + wv[2]).sin();
                    }
                    for d in &discs {
                        let r = ((fx - d[0]).powi(2) + (fy - d[1]).powi(2)).sqrt();
                        let inside = 1.0 / (1.0 + ((r - d[2]) * 60.0).exp());
                        v += inside * d[3 + ch];
                    }
                    data.push(v.clamp(0.05, 0.95));
                }
            }
        }
        ImagePatch::new(height, width, c, data)
    }
}

/// Stacks equally sized patches into an NCHW tensor.
pub fn to_tensor<T: Element>(patches: &[ImagePatch]) -> Tensor<T> {
    assert!(!patches.is_empty(), "to_tensor of zero patches");
    let (h, w, c) = patches[0].dims();
    let mut data = Vec::with_capacity(patches.len() * h * w * c);
    for p in patches {
        assert_eq!(p.dims(), (h, w, c), "to_tensor: patch size mismatch");
        for ch in 0..c {
            for i in 0..h * w {
                data.push(T::from_f64(p.data[i * c + ch] as f64));
            }
        }
    }
    Tensor::new([patches.len(), c, h, w], data)
}

/// Splits an NCHW tensor back into patches.
pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Vec<ImagePatch> {
    let (n, c, h, w) = t.dims4();
    (0..n)
        .map(|i| {
            let src = &t.data()[i * c * h * w..(i + 1) * c * h * w];
            let mut data = vec![0.0f32; h * w * c];
            for ch in 0..c {
                for p in 0..h * w {
                    data[p * c + ch] = src[ch * h * w + p].as_f64() as f32;
                }
            }
            ImagePatch::new(h, w, c, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(h: usize, w: usize) -> ImagePatch {
        ImagePatch::new(h, w, 1, (0..h * w).map(|i| i as f32).collect())
    }

    #[test]
    fn dihedral_group_has_eight_distinct_elements() {
        let p = ramp(3, 3);
        let all: Vec<_> = (0..8).map(|k| p.dihedral(k)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(all[i], all[j], "transforms {i} and {j} coincide");
            }
        }
        assert_eq!(p.dihedral(1).dihedral(1).dihedral(1).dihedral(1), p);
    }

    #[test]
    fn rotation_is_counter_clockwise() {
        // [0 1 2]      [2 5]
        // [3 4 5]  ->  [1 4]
        //              [0 3]
        let r = ramp(2, 3).dihedral(1);
        assert_eq!(r.dims(), (3, 2, 1));
        assert_eq!(r.data(), &[2.0, 5.0, 1.0, 4.0, 0.0, 3.0]);
    }

    #[test]
    fn tensor_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = ImagePatch::procedural(8, 6, &mut rng);
        let b = ImagePatch::procedural(8, 6, &mut rng);
        let t = to_tensor::<f32>(&[a.clone(), b.clone()]);
        assert_eq!(t.shape(), &[2, 3, 8, 6]);
        assert_eq!(from_tensor(&t), vec![a, b]);
    }

    #[test]
    fn crop_and_pad() {
        let p = ramp(4, 5);
        assert_eq!(p.crop(1, 2, 2, 2).data(), &[7.0, 8.0, 12.0, 13.0]);
        let q = p.pad_to_multiple(4);
        assert_eq!(q.dims(), (4, 8, 1));
        assert_eq!(q.crop(0, 0, 4, 5), p);
        assert_eq!(q.get(0, 5, 0), p.get(0, 3, 0));
    }

    #[test]
    fn procedural_images_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ImagePatch::procedural(32, 32, &mut rng);
        assert!(p.data().iter().all(|v| (0.05..=0.95).contains(v)));
    }
}
