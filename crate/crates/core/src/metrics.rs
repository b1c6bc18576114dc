//! Evaluation metrics: PSNR, SSIM and their restriction to a dynamic-region
//! mask built from a frame sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::ssim::ssim_map;

/// Default mask threshold in 8-bit units.
pub const MASK_THRESHOLD: f64 = 50.0;

/// `10·log10(1/MSE)`; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    GlobalMedian,
    TemporalDifference,
    Combined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicMask {
    pub width: usize,
    pub height: usize,
    /// One row-major `H×W` mask per frame.
    pub frames: Vec<Vec<bool>>,
    pub mode: MaskMode,
    pub threshold: f64,
}

impl DynamicMask {
    pub fn count(&self, frame: usize) -> usize {
        self.frames[frame].iter().filter(|&&m| m).count()
    }

    pub fn total(&self) -> usize {
        (0..self.frames.len()).map(|f| self.count(f)).sum()
    }
}

fn max_channel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn global_median(frames: &[Image], threshold: f64) -> Vec<Vec<bool>> {
    let im = &frames[0];
    let mut med = vec![0.0; im.data.len()];
    let mut column = vec![0.0; frames.len()];
    for (i, m) in med.iter_mut().enumerate() {
        for (c, f) in column.iter_mut().zip(frames) {
            *c = f.data[i];
        }
        *m = median(&mut column);
    }
    let ch = im.channels;
    frames
        .iter()
        .map(|f| {
            (0..im.pixel_count())
                .map(|p| max_channel_diff(&f.data[p * ch..(p + 1) * ch], &med[p * ch..(p + 1) * ch]) * 255.0 >= threshold)
                .collect()
        })
        .collect()
}

fn temporal_difference(frames: &[Image], threshold: f64) -> Vec<Vec<bool>> {
    let ch = frames[0].channels;
    (0..frames.len())
        .map(|t| {
            let (a, b) = if t == 0 { (&frames[1], &frames[0]) } else { (&frames[t], &frames[t - 1]) };
            (0..a.pixel_count())
                .map(|p| max_channel_diff(&a.data[p * ch..(p + 1) * ch], &b.data[p * ch..(p + 1) * ch]) * 255.0 >= threshold)
                .collect()
        })
        .collect()
}

/// Per-frame dynamic-region masks. Differences are the maximum over
/// channels, scaled to 8-bit units and compared with `threshold`.
pub fn dynamic_mask(frames: &[Image], mode: MaskMode, threshold: f64) -> Result<DynamicMask> {
    let first = frames.first().ok_or_else(|| Error::invalid("dynamic mask of an empty sequence"))?;
    for f in frames {
        first.same_shape(f)?;
    }
    if frames.len() < 2 && mode != MaskMode::GlobalMedian {
        return Err(Error::invalid("temporal-difference mask needs at least two frames"));
    }
    let masks = match mode {
        MaskMode::GlobalMedian => global_median(frames, threshold),
        MaskMode::TemporalDifference => temporal_difference(frames, threshold),
        MaskMode::Combined => {
            let mut a = global_median(frames, threshold);
            for (fa, fb) in a.iter_mut().zip(temporal_difference(frames, threshold)) {
                fa.iter_mut().zip(fb).for_each(|(x, y)| *x |= y);
            }
            a
        }
    };
    Ok(DynamicMask {
        width: first.width,
        height: first.height,
        frames: masks,
        mode,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskedMetrics {
    /// `None` when the mask is empty.
    pub psnr_dyn: Option<f64>,
    pub ssim_dyn: Option<f64>,
    pub psnr_full: f64,
    pub ssim_full: f64,
}

/// Running sums for metrics pooled over many frames: PSNR from the pooled
/// squared error, SSIM as the mean over pooled samples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    sq_full: f64,
    ssim_full: f64,
    n_full: usize,
    sq_dyn: f64,
    ssim_dyn: f64,
    n_dyn: usize,
}

impl MetricAccumulator {
    /// Adds one frame; `mask` is row-major `H×W`.
    pub fn add(&mut self, render: &Image, gt: &Image, mask: &[bool]) -> Result<()> {
        render.same_shape(gt)?;
        if mask.len() != render.pixel_count() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} mask pixels", render.pixel_count()),
                actual: mask.len().to_string(),
            });
        }
        let smap = ssim_map(render, gt)?;
        let ch = render.channels;
        for (p, &m) in mask.iter().enumerate() {
            for c in 0..ch {
                let i = p * ch + c;
                let d = render.data[i] - gt.data[i];
                self.sq_full += d * d;
                self.ssim_full += smap[i];
                if m {
                    self.sq_dyn += d * d;
                    self.ssim_dyn += smap[i];
                }
            }
        }
        self.n_full += render.data.len();
        self.n_dyn += mask.iter().filter(|&&m| m).count() * ch;
        Ok(())
    }

    pub fn finish(&self) -> MaskedMetrics {
        let dyn_n = (self.n_dyn > 0).then_some(self.n_dyn as f64);
        let n = self.n_full.max(1) as f64;
        MaskedMetrics {
            psnr_dyn: dyn_n.map(|d| psnr_from_mse(self.sq_dyn / d)),
            ssim_dyn: dyn_n.map(|d| self.ssim_dyn / d),
            psnr_full: psnr_from_mse(self.sq_full / n),
            ssim_full: self.ssim_full / n,
        }
    }
}

/// Dynamic metrics over mask-true pixels (SSIM windows centered on them)
/// and full-image metrics.
pub fn masked_metrics(render: &Image, gt: &Image, mask: &[bool]) -> Result<MaskedMetrics> {
    let mut acc = MetricAccumulator::default();
    acc.add(render, gt, mask)?;
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssim::ssim;
    use proptest::prelude::*;

    #[test]
    fn psnr_values() {
        let a = Image::filled(4, 4, &[0.3, 0.3, 0.3]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, &[0.4, 0.4, 0.4]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let checker = |inv: bool| {
            let mut im = Image::new(4, 4, 3);
            for y in 0..4 {
                for x in 0..4 {
                    let v = (((x + y) % 2 == 0) ^ inv) as u8 as f64;
                    im.pixel_mut(x, y).fill(v);
                }
            }
            im
        };
        assert_eq!(psnr(&checker(false), &checker(true)).unwrap(), 0.0);
    }

    #[test]
    fn static_sequence_has_empty_mask() {
        let frames = vec![Image::filled(5, 4, &[0.2, 0.7, 0.1]); 4];
        for mode in [MaskMode::GlobalMedian, MaskMode::TemporalDifference, MaskMode::Combined] {
            assert_eq!(dynamic_mask(&frames, mode, 1.0).unwrap().total(), 0);
        }
    }

    #[test]
    fn jumping_blob_is_masked() {
        let mut frames = vec![Image::new(4, 4, 3); 5];
        frames[2].pixel_mut(1, 2).copy_from_slice(&[0.0, 60.0 / 255.0, 0.0]);
        frames[3].pixel_mut(1, 2).copy_from_slice(&[0.0, 40.0 / 255.0, 0.0]);
        let gm = dynamic_mask(&frames, MaskMode::GlobalMedian, MASK_THRESHOLD).unwrap();
        assert!(gm.frames[2][2 * 4 + 1]);
        assert!(!gm.frames[3][2 * 4 + 1]);
        assert_eq!(gm.total(), 1);
        let td = dynamic_mask(&frames, MaskMode::TemporalDifference, MASK_THRESHOLD).unwrap();
        assert!(td.frames[2][9]);
        assert!(!td.frames[3][9]);
        assert!(td.frames[4][9] == false && td.total() == 1);
        assert!(dynamic_mask(&frames[..1], MaskMode::TemporalDifference, 50.0).is_err());
    }

    #[test]
    fn first_frame_uses_forward_difference() {
        let mut frames = vec![Image::new(2, 2, 3); 3];
        frames[0].pixel_mut(0, 0).fill(1.0);
        let td = dynamic_mask(&frames, MaskMode::TemporalDifference, 50.0).unwrap();
        assert!(td.frames[0][0] && td.frames[1][0] && !td.frames[2][0]);
    }

    #[test]
    fn masked_metric_cases() {
        let gt = Image::filled(12, 12, &[0.5, 0.5, 0.5]);
        let m = masked_metrics(&gt, &gt, &vec![true; 144]).unwrap();
        assert_eq!(m.psnr_full, f64::INFINITY);
        assert_eq!(m.psnr_dyn, Some(f64::INFINITY));

        let mut r = gt.clone();
        for (i, v) in r.data.iter_mut().enumerate() {
            *v += 0.01 * ((i % 7) as f64 - 3.0);
        }
        let all = masked_metrics(&r, &gt, &vec![true; 144]).unwrap();
        assert_eq!(all.psnr_dyn, Some(all.psnr_full));
        assert_eq!(all.ssim_dyn, Some(all.ssim_full));
        assert!((all.ssim_full - ssim(&r, &gt).unwrap()).abs() < 1e-12);

        let mask: Vec<bool> = (0..144).map(|p| p % 12 < 3).collect();
        let mut degraded = gt.clone();
        for (p, &m) in mask.iter().enumerate() {
            if m {
                degraded.data[p * 3..p * 3 + 3].iter_mut().for_each(|v| *v = 0.9);
            }
        }
        let d = masked_metrics(&degraded, &gt, &mask).unwrap();
        assert!(d.psnr_dyn.unwrap() < d.psnr_full);
        assert!(masked_metrics(&degraded, &gt, &vec![false; 144]).unwrap().psnr_dyn.is_none());
    }

    proptest! {
        #[test]
        fn union_contains_each_mode(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<Image> = (0..4)
                .map(|_| Image::from_data(3, 3, 3, (0..27).map(|_| rng.gen()).collect()).unwrap())
                .collect();
            let th = rng.gen_range(1.0..200.0);
            let gm = dynamic_mask(&frames, MaskMode::GlobalMedian, th).unwrap();
            let td = dynamic_mask(&frames, MaskMode::TemporalDifference, th).unwrap();
            let u = dynamic_mask(&frames, MaskMode::Combined, th).unwrap();
            for f in 0..4 {
                for p in 0..9 {
                    prop_assert_eq!(u.frames[f][p], gm.frames[f][p] || td.frames[f][p]);
                }
            }
        }
    }
}
