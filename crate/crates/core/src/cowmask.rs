//! Cow-mask occlusion: Gaussian-smoothed noise thresholded at a quantile,
//! giving random blobs that are locally connected rather than salt noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::flow::OcclusionMask;
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct CowmaskParams {
    /// Smoothing sigma in pixels, sampled log-uniformly from this range.
    pub sigma: (f64, f64),
    /// Occluded proportion, sampled uniformly from this range.
    pub proportion: (f64, f64),
}

impl Default for CowmaskParams {
    fn default() -> Self {
        Self {
            sigma: (3.0, 8.0),
            proportion: (0.2, 0.6),
        }
    }
}

impl CowmaskParams {
    pub fn fixed(sigma: f64, proportion: f64) -> Self {
        Self {
            sigma: (sigma, sigma),
            proportion: (proportion, proportion),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.sigma;
        let (p0, p1) = self.proportion;
        if !(s0 > 0.0 && s1 >= s0 && s1.is_finite()) {
            return Err(invalid(format!("cowmask sigma range {s0}..{s1}")));
        }
        if !(p0 > 0.0 && p1 >= p0 && p1 < 1.0) {
            return Err(invalid(format!("cowmask proportion range {p0}..{p1}")));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> (f64, f64) {
        let (s0, s1) = self.sigma;
        let sigma = if s1 > s0 {
            (rng.random_range(s0.ln()..s1.ln())).exp()
        } else {
            s0
        };
        let (p0, p1) = self.proportion;
        let p = if p1 > p0 { rng.random_range(p0..p1) } else { p0 };
        (sigma, p)
    }
}

/// Binary occlusion mask (0 = occluded) with the sampled fraction of
/// pixels occluded.
pub fn generate_mask(
    width: usize,
    height: usize,
    params: &CowmaskParams,
    rng: &mut impl Rng,
) -> Result<OcclusionMask> {
    if width < 8 || height < 8 {
        return Err(invalid(format!(
            "cowmask needs at least 8x8 pixels, got {width}x{height}"
        )));
    }
    params.validate()?;
    let (sigma, p) = params.sample(rng);
    let noise: Vec<f64> = (0..width * height)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let smooth = gaussian_blur(&noise, width, height, sigma);

    let n = width * height;
    let occluded = ((p * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| smooth[a].total_cmp(&smooth[b]).then(a.cmp(&b)));
    let mut values = vec![1.0f32; n];
    for &i in &order[..occluded] {
        values[i] = 0.0;
    }
    OcclusionMask::binary(width, height, values)
}

/// `I_occ(p) = I(p) * mask(p)`, channel by channel.
pub fn apply_occlusion(img: &Image, mask: &OcclusionMask) -> Result<Image> {
    if (img.width(), img.height()) != (mask.width(), mask.height()) {
        return Err(invalid(format!(
            "image {}x{} and mask {}x{} differ",
            img.width(),
            img.height(),
            mask.width(),
            mask.height()
        )));
    }
    let plane = img.width() * img.height();
    let m = mask.values();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * m[i % plane])
        .collect();
    Image::new(img.width(), img.height(), img.channels(), data)
}

/// Mirror index into `0..n` (edge sample not repeated), valid for any offset.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, reflective borders.
pub(crate) fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, d) in kernel.iter().zip(-radius..=radius) {
                acc += k * src[y * w + reflect(x as isize + d, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, d) in kernel.iter().zip(-radius..=radius) {
                acc += k * tmp[reflect(y as isize + d, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Number of 4-connected components of occluded pixels.
pub fn occluded_components(mask: &OcclusionMask) -> usize {
    let (w, h) = (mask.width(), mask.height());
    let occluded: Vec<bool> = mask.values().iter().map(|&v| v < 0.5).collect();
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..w * h {
        if !occluded[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if occluded[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reflect_handles_far_offsets() {
        let idx: Vec<usize> = (-5..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![1, 2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
    }

    #[test]
    fn blur_preserves_constants() {
        let src = vec![2.5; 10 * 9];
        let out = gaussian_blur(&src, 10, 9, 4.0);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn tiny_proportion_occludes_a_single_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = 1.0 / (16.0 * 16.0);
        let m = generate_mask(16, 16, &CowmaskParams::fixed(2.0, p), &mut rng).unwrap();
        let occ = m.values().iter().filter(|&&v| v == 0.0).count();
        assert!(occ <= 2, "{occ}");
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let params = CowmaskParams::default();
        let a = generate_mask(24, 20, &params, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_mask(24, 20, &params, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn undersized_masks_and_bad_params_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_mask(7, 16, &CowmaskParams::default(), &mut rng).is_err());
        assert!(generate_mask(16, 16, &CowmaskParams::fixed(0.0, 0.3), &mut rng).is_err());
        assert!(generate_mask(16, 16, &CowmaskParams::fixed(2.0, 1.0), &mut rng).is_err());
    }

    #[test]
    fn occlusion_application() {
        let img = Image::from_fn(3, 2, 3, |c, x, y| 0.1 * (c + x + y) as f32 + 0.05).unwrap();
        let ones = OcclusionMask::ones(3, 2);
        assert_eq!(apply_occlusion(&img, &ones).unwrap(), img);
        let zeros = OcclusionMask::binary(3, 2, vec![0.0; 6]).unwrap();
        assert!(apply_occlusion(&img, &zeros).unwrap().data().iter().all(|&v| v == 0.0));

        let c = 0.7;
        let flat = Image::from_fn(4, 4, 3, |_, _, _| c).unwrap();
        let checker: Vec<f32> = (0..16).map(|i| ((i % 4 + i / 4) % 2) as f32).collect();
        let m = OcclusionMask::binary(4, 4, checker.clone()).unwrap();
        let out = apply_occlusion(&flat, &m).unwrap();
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(out.get(ch, x, y), c * checker[y * 4 + x]);
                }
            }
        }
    }

    #[test]
    fn components_of_known_pattern() {
        #[rustfmt::skip]
        let v = vec![
            0., 0., 1., 1.,
            1., 0., 1., 0.,
            1., 1., 1., 0.,
            0., 1., 1., 1.,
        ];
        let m = OcclusionMask::binary(4, 4, v).unwrap();
        assert_eq!(occluded_components(&m), 3);
    }
}
