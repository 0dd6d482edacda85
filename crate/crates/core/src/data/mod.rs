//! Synthetic sequences, pair sampling and file formats.

mod flo;
mod manifest;
mod ppm;
mod scene;

pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use manifest::{Manifest, ManifestEntry};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use scene::{
    compose_flow, render_scene, SceneConfig, Sequence, Shape, Sprite, SyntheticScene, Texture, Wave,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cowmask::{apply_occlusion, generate_mask, CowmaskParams};
use crate::error::{invalid, Result};
use crate::flow::{FlowField, OcclusionMask};
use crate::image::Image;

/// A training or evaluation pair `(I_t, I_{t+k})`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub first: Image,
    pub second: Image,
    pub k: usize,
    pub gt_flow: Option<FlowField>,
    pub gt_occlusion: Option<OcclusionMask>,
    /// Ground-truth flow may be used for supervision.
    pub labeled: bool,
    /// Built by [`make_occlusion_pair`]: zero motion, artificial occlusion.
    pub zero_forcing: bool,
}

/// Draws `(t, k)` uniformly from a set of sequences; only `k = 1` pairs
/// carry their ground truth.
#[derive(Clone, Debug)]
pub struct FrameHopSampler {
    sequences: Vec<Sequence>,
    k_set: Vec<usize>,
}

impl FrameHopSampler {
    pub fn new(sequences: Vec<Sequence>, k_set: &[usize]) -> Result<Self> {
        if k_set.is_empty() || k_set.contains(&0) {
            return Err(invalid(format!("k set {k_set:?} must be non-empty and positive")));
        }
        if sequences.is_empty() {
            return Err(invalid("frame-hop sampler needs at least one sequence"));
        }
        let max_k = *k_set.iter().max().unwrap();
        if let Some(s) = sequences.iter().find(|s| s.frames.len() <= max_k) {
            return Err(invalid(format!(
                "gap {max_k} needs more than {} frames",
                s.frames.len()
            )));
        }
        Ok(Self {
            sequences,
            k_set: k_set.to_vec(),
        })
    }

    pub fn k_set(&self) -> &[usize] {
        &self.k_set
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TrainSample {
        let seq = &self.sequences[rng.random_range(0..self.sequences.len())];
        let k = self.k_set[rng.random_range(0..self.k_set.len())];
        let t = rng.random_range(0..seq.frames.len() - k);
        let labeled = k == 1 && t < seq.flows.len();
        TrainSample {
            first: seq.frames[t].clone(),
            second: seq.frames[t + k].clone(),
            k,
            gt_flow: labeled.then(|| seq.flows[t].clone()),
            gt_occlusion: labeled.then(|| seq.occlusions.get(t).cloned()).flatten(),
            labeled,
            zero_forcing: false,
        }
    }

    /// Endless stream of samples.
    pub fn stream<'a, R: Rng>(&'a self, rng: &'a mut R) -> impl Iterator<Item = TrainSample> + 'a {
        std::iter::repeat_with(move || self.sample(rng))
    }
}

/// `(I_t, I_t * mask)` with zero ground-truth flow.
pub fn occlusion_pair_from_mask(img: &Image, mask: OcclusionMask) -> Result<TrainSample> {
    let second = apply_occlusion(img, &mask)?;
    Ok(TrainSample {
        first: img.clone(),
        second,
        k: 1,
        gt_flow: Some(FlowField::zeros(img.width(), img.height())),
        gt_occlusion: Some(mask),
        labeled: false,
        zero_forcing: true,
    })
}

pub fn make_occlusion_pair(img: &Image, params: &CowmaskParams, rng: &mut impl Rng) -> Result<TrainSample> {
    let mask = generate_mask(img.width(), img.height(), params, rng)?;
    occlusion_pair_from_mask(img, mask)
}

/// Renders `count` random scenes. Scene `i` draws from its own ChaCha
/// stream of `seed`, so splits are reproducible and independent of `count`.
pub fn generate_sequences(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<Sequence>> {
    generate_scenes(cfg, count, seed)?
        .iter()
        .map(SyntheticScene::render)
        .collect()
}

pub fn generate_scenes(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<SyntheticScene>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            SyntheticScene::random(cfg, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sequences(n: usize, frames: usize) -> Vec<Sequence> {
        let cfg = SceneConfig {
            width: 16,
            height: 16,
            frames,
            ..SceneConfig::default()
        };
        generate_sequences(&cfg, n, 3).unwrap()
    }

    #[test]
    fn k_one_samples_are_labeled() {
        let s = FrameHopSampler::new(sequences(2, 3), &[1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for sample in s.stream(&mut rng).take(50) {
            assert!(sample.labeled && sample.gt_flow.is_some() && sample.k == 1);
        }
    }

    #[test]
    fn larger_gaps_are_unlabeled() {
        let s = FrameHopSampler::new(sequences(2, 4), &[1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for sample in s.stream(&mut rng).take(200) {
            assert_eq!(sample.labeled, sample.k == 1);
            assert_eq!(sample.gt_flow.is_some(), sample.k == 1);
        }
    }

    #[test]
    fn invalid_k_sets_are_rejected() {
        assert!(FrameHopSampler::new(sequences(1, 3), &[]).is_err());
        assert!(FrameHopSampler::new(sequences(1, 3), &[3]).is_err());
        assert!(FrameHopSampler::new(sequences(1, 3), &[0, 1]).is_err());
    }

    #[test]
    fn occlusion_pair_has_zero_flow_and_the_mask() {
        let img = Image::from_fn(16, 16, 3, |c, x, y| ((c + x * y) % 7) as f32 / 7.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut probe = rng.clone();
        let s = make_occlusion_pair(&img, &CowmaskParams::default(), &mut rng).unwrap();
        let expected = generate_mask(16, 16, &CowmaskParams::default(), &mut probe).unwrap();
        assert!(s.zero_forcing && !s.labeled);
        assert!(s.gt_flow.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(s.gt_occlusion.as_ref().unwrap(), &expected);

        let same = occlusion_pair_from_mask(&img, OcclusionMask::ones(16, 16)).unwrap();
        assert_eq!(same.second, img);
    }

    #[test]
    fn scene_streams_do_not_depend_on_count() {
        let cfg = SceneConfig::default();
        let a = generate_scenes(&cfg, 2, 11).unwrap();
        let b = generate_scenes(&cfg, 5, 11).unwrap();
        assert_eq!(a[..], b[..2]);
        assert_ne!(b[0], b[1]);
    }
}
