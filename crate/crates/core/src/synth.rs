//! Seeded synthetic stand-in for a frozen segmentation backbone.
//!
//! Ground truth is the argmax of smooth random class fields. Logits are a
//! blurred one-hot encoding plus spatially modulated noise, so errors cluster
//! at region boundaries and in high-noise patches. Taps are fixed linear
//! views of the latent (blurred one-hot, noise) plus tap noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseField, LabelField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub spatial: Vec<usize>,
    pub num_classes: usize,
    pub tap_channels: Vec<usize>,
    /// Downsampling factor of each tap relative to the label grid.
    pub tap_strides: Vec<usize>,
    pub noise_level: f64,
    /// Gaussian sigma, in voxels, of the one-hot blur.
    pub blur_width: f64,
    pub logit_scale: f64,
    pub tap_noise: f64,
    pub seed: u64,
}

/// Minimum lead of the true class in the noise-free latent.
const LABEL_MARGIN: f64 = 0.02;

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            spatial: vec![32, 32],
            num_classes: 3,
            tap_channels: vec![16, 8],
            tap_strides: vec![1, 2],
            noise_level: 1.6,
            blur_width: 1.5,
            logit_scale: 6.0,
            tap_noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("synthetic data needs at least 2 classes".into()));
        }
        if self.spatial.is_empty() || self.spatial.len() > 3 || self.spatial.iter().any(|&n| n < 4) {
            return Err(Error::InvalidArgument("synthetic extents must be 1 to 3 axes of at least 4".into()));
        }
        if self.tap_channels.is_empty()
            || self.tap_channels.len() != self.tap_strides.len()
            || self.tap_channels.contains(&0)
            || self.tap_strides.contains(&0)
        {
            return Err(Error::InvalidArgument("tap channels and strides must pair up and be positive".into()));
        }
        if self.tap_strides[0] != 1 {
            return Err(Error::InvalidArgument("the first tap must be at full resolution".into()));
        }
        for (name, v) in [
            ("noise_level", self.noise_level),
            ("blur_width", self.blur_width),
            ("logit_scale", self.logit_scale),
            ("tap_noise", self.tap_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    fn latent_channels(&self) -> usize {
        2 * self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub id: String,
    pub taps: Vec<DenseField>,
    pub logits: DenseField,
    pub labels: LabelField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// First case index of the split's stream.
    pub fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 32,
            Split::Test => 2 << 32,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Row-major coordinates of a flat voxel index.
fn coords(mut i: usize, spatial: &[usize]) -> Vec<usize> {
    let mut out = vec![0; spatial.len()];
    for ax in (0..spatial.len()).rev() {
        out[ax] = i % spatial[ax];
        i /= spatial[ax];
    }
    out
}

/// Sum of a few random low-frequency cosines.
fn smooth_field(rng: &mut ChaCha8Rng, spatial: &[usize], modes: usize) -> Vec<f64> {
    let n: usize = spatial.iter().product();
    let waves: Vec<(Vec<f64>, f64, f64)> = (0..modes)
        .map(|_| {
            let freq = spatial
                .iter()
                .map(|&len| {
                    let cycles: f64 = rng.random_range(0.3..2.0);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * cycles * std::f64::consts::TAU / len as f64
                })
                .collect();
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = normal(rng);
            (freq, phase, amp)
        })
        .collect();
    (0..n)
        .map(|i| {
            let c = coords(i, spatial);
            waves
                .iter()
                .map(|(f, phase, amp)| {
                    let arg: f64 = f.iter().zip(&c).map(|(w, &x)| w * x as f64).sum::<f64>() + phase;
                    amp * arg.cos()
                })
                .sum::<f64>()
                / (modes as f64).sqrt()
        })
        .collect()
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(data: &[f64], spatial: &[usize], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let mut cur = data.to_vec();
    for ax in 0..spatial.len() {
        let stride: usize = spatial[ax + 1..].iter().product();
        let len = spatial[ax] as isize;
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % spatial[ax]) as isize;
            let base = i - pos as usize * stride;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let q = (pos + k as isize - radius).clamp(0, len - 1) as usize;
                acc += w * cur[base + q * stride];
            }
            *out = acc / norm;
        }
        cur = next;
    }
    cur
}

/// Block average with stride `s` per axis; trailing partial blocks average what they cover.
fn avg_pool(data: &[f64], spatial: &[usize], s: usize) -> (Vec<f64>, Vec<usize>) {
    let out_sp: Vec<usize> = spatial.iter().map(|&n| n.div_ceil(s)).collect();
    let n_out: usize = out_sp.iter().product();
    let mut sum = vec![0.0; n_out];
    let mut count = vec![0usize; n_out];
    for (i, &v) in data.iter().enumerate() {
        let c = coords(i, spatial);
        let mut o = 0;
        for (ax, &x) in c.iter().enumerate() {
            o = o * out_sp[ax] + x / s;
        }
        sum[o] += v;
        count[o] += 1;
    }
    (sum.iter().zip(&count).map(|(a, &k)| a / k as f64).collect(), out_sp)
}

/// Fixed backbone read-outs: one `(channels x latent)` matrix per tap.
fn backbone_transforms(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let l = cfg.latent_channels();
    let scale = 1.0 / (l as f64).sqrt();
    cfg.tap_channels
        .iter()
        .map(|&c| (0..c * l).map(|_| normal(&mut rng) * scale).collect())
        .collect()
}

/// Builds case `case_index`; identical inputs give identical cases.
pub fn generate_case(cfg: &SynthConfig, case_index: u64) -> Result<SynthCase> {
    generate_case_named(cfg, case_index, format!("case-{case_index}"))
}

fn generate_case_named(cfg: &SynthConfig, case_index: u64, id: String) -> Result<SynthCase> {
    cfg.validate()?;
    let sp = &cfg.spatial;
    let n: usize = sp.iter().product();
    let nc = cfg.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(case_index.wrapping_add(1));

    let fields: Vec<Vec<f64>> = (0..nc).map(|_| smooth_field(&mut rng, sp, 4)).collect();
    let labels: Vec<u32> = (0..n)
        .map(|i| crate::tensor::ops::argmax(fields.iter().map(|f| f[i])) as u32)
        .collect();

    let mut blurred: Vec<Vec<f64>> = (0..nc)
        .map(|c| {
            let one_hot: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l as usize == c))).collect();
            gaussian_blur(&one_hot, sp, cfg.blur_width)
        })
        .collect();
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        let rival = (0..nc).filter(|&c| c != y).map(|c| blurred[c][i]).fold(f64::NEG_INFINITY, f64::max);
        if blurred[y][i] < rival + LABEL_MARGIN {
            blurred[y][i] = rival + LABEL_MARGIN;
        }
    }
    let amp_field = smooth_field(&mut rng, sp, 3);
    let noise: Vec<Vec<f64>> = (0..nc)
        .map(|_| {
            (0..n)
                .map(|i| cfg.noise_level * (0.6 * amp_field[i]).exp() * normal(&mut rng))
                .collect()
        })
        .collect();

    let mut logits = Vec::with_capacity(nc * n);
    for c in 0..nc {
        logits.extend((0..n).map(|i| cfg.logit_scale * blurred[c][i] + noise[c][i]));
    }

    let latent: Vec<&Vec<f64>> = blurred.iter().chain(noise.iter()).collect();
    let transforms = backbone_transforms(cfg);
    let mut taps = Vec::with_capacity(cfg.tap_channels.len());
    for ((&ch, &stride), w) in cfg.tap_channels.iter().zip(&cfg.tap_strides).zip(&transforms) {
        let l = latent.len();
        let mut out_sp = sp.clone();
        let mut data = Vec::new();
        for o in 0..ch {
            let full: Vec<f64> = (0..n)
                .map(|i| (0..l).map(|k| w[o * l + k] * latent[k][i]).sum::<f64>().max(0.0))
                .collect();
            let (pooled, psp) = if stride == 1 { (full, sp.clone()) } else { avg_pool(&full, sp, stride) };
            out_sp = psp;
            data.extend(pooled.into_iter().map(|v| v + cfg.tap_noise * normal(&mut rng)));
        }
        let mut shape = vec![1, ch];
        shape.extend_from_slice(&out_sp);
        taps.push(DenseField::from_f64(shape, &data)?);
    }

    let mut zshape = vec![1, nc];
    zshape.extend_from_slice(sp);
    let mut lshape = vec![1];
    lshape.extend_from_slice(sp);
    Ok(SynthCase {
        id,
        taps,
        logits: DenseField::from_f64(zshape, &logits)?,
        labels: LabelField::new(lshape, labels)?,
    })
}

/// `n_cases` consecutive cases of one split's disjoint index stream.
pub fn generate_split(cfg: &SynthConfig, n_cases: usize, split: Split) -> Result<Vec<SynthCase>> {
    (0..n_cases as u64)
        .map(|k| generate_case_named(cfg, split.offset() + k, format!("{}-{k:04}", split.name())))
        .collect()
}

/// Voxels within Chebyshev distance `radius` of a label change.
pub fn boundary_mask(labels: &LabelField, radius: usize) -> Vec<bool> {
    let sp = labels.spatial();
    let n: usize = sp.iter().product();
    let data = labels.data();
    let mut out = vec![false; data.len()];
    for b in 0..labels.batch() {
        let lab = &data[b * n..(b + 1) * n];
        let edge: Vec<bool> = (0..n)
            .map(|i| {
                let c = coords(i, sp);
                (0..sp.len()).any(|ax| {
                    let stride: usize = sp[ax + 1..].iter().product();
                    (c[ax] > 0 && lab[i - stride] != lab[i]) || (c[ax] + 1 < sp[ax] && lab[i + stride] != lab[i])
                })
            })
            .collect();
        let r = radius as isize;
        let window = (2 * r + 1).pow(sp.len() as u32);
        for j in (0..n).filter(|&j| edge[j]) {
            let c = coords(j, sp);
            for w in 0..window {
                let mut rest = w as isize;
                let mut flat = 0usize;
                let mut inside = true;
                for ax in (0..sp.len()).rev() {
                    let off = rest % (2 * r + 1) - r;
                    rest /= 2 * r + 1;
                    let x = c[ax] as isize + off;
                    if x < 0 || x >= sp[ax] as isize {
                        inside = false;
                        break;
                    }
                    let stride: usize = sp[ax + 1..].iter().product();
                    flat += x as usize * stride;
                }
                if inside {
                    out[b * n + flat] = true;
                }
            }
        }
    }
    out
}

/// Error rate, and error-rate ratio of boundary to interior voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorProfile {
    pub error_rate: f64,
    pub boundary_enrichment: f64,
}

pub fn error_profile(cases: &[SynthCase]) -> Result<ErrorProfile> {
    let (mut err, mut tot, mut be, mut bt, mut ie, mut it) = (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
    for case in cases {
        let pred = crate::metrics::argmax_labels(&case.logits)?;
        let e = crate::metrics::error_flags(&pred, &case.labels)?;
        let near = boundary_mask(&case.labels, 2);
        for (&x, &b) in e.iter().zip(&near) {
            err += usize::from(x);
            tot += 1;
            if b {
                be += usize::from(x);
                bt += 1;
            } else {
                ie += usize::from(x);
                it += 1;
            }
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let interior = rate(ie, it);
    Ok(ErrorProfile {
        error_rate: rate(err, tot),
        boundary_enrichment: if interior == 0.0 { f64::INFINITY } else { rate(be, bt) / interior },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            spatial: vec![16, 12],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn cases_are_reproducible() {
        let cfg = small();
        assert_eq!(generate_case(&cfg, 5).unwrap(), generate_case(&cfg, 5).unwrap());
        assert_ne!(generate_case(&cfg, 5).unwrap().logits, generate_case(&cfg, 6).unwrap().logits);
    }

    #[test]
    fn shapes_follow_config() {
        let c = generate_case(&small(), 0).unwrap();
        assert_eq!(c.logits.shape(), &[1, 3, 16, 12]);
        assert_eq!(c.labels.shape(), &[1, 16, 12]);
        assert_eq!(c.taps[0].shape(), &[1, 16, 16, 12]);
        assert_eq!(c.taps[1].shape(), &[1, 8, 8, 6]);
        c.labels.check_range(3).unwrap();
    }

    #[test]
    fn zero_noise_has_no_errors() {
        let cfg = SynthConfig {
            noise_level: 0.0,
            ..small()
        };
        for k in 0..5 {
            let c = generate_case(&cfg, k).unwrap();
            let pred = crate::metrics::argmax_labels(&c.logits).unwrap();
            assert_eq!(pred.data(), c.labels.data());
        }
    }

    #[test]
    fn splits_are_disjoint_streams() {
        let cfg = small();
        let tr = generate_split(&cfg, 2, Split::Train).unwrap();
        let va = generate_split(&cfg, 2, Split::Val).unwrap();
        assert_ne!(tr[0].logits, va[0].logits);
        assert_eq!(tr[1].id, "train-0001");
        assert!(generate_split(&cfg, 0, Split::Test).unwrap().is_empty());
        assert_eq!(generate_split(&cfg, 2, Split::Train).unwrap(), tr);
    }

    #[test]
    fn transforms_ignore_case_index() {
        let cfg = small();
        assert_eq!(backbone_transforms(&cfg), backbone_transforms(&cfg));
        let other = SynthConfig { seed: 9, ..small() };
        assert_ne!(backbone_transforms(&cfg), backbone_transforms(&other));
    }

    #[test]
    fn blur_preserves_constants_and_pool_averages() {
        let sp = [5, 4];
        let ones = vec![2.0; 20];
        assert!(gaussian_blur(&ones, &sp, 1.3).iter().all(|v| (v - 2.0).abs() < 1e-12));
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let (p, osp) = avg_pool(&data, &[4, 4], 2);
        assert_eq!(osp, vec![2, 2]);
        assert_eq!(p, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn boundary_mask_marks_neighbourhood() {
        let labels = LabelField::new(vec![1, 1, 8], vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let m = boundary_mask(&labels, 2);
        assert_eq!(m, vec![false, true, true, true, true, true, true, false]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SynthConfig { num_classes: 1, ..small() }.validate().is_err());
        assert!(SynthConfig { spatial: vec![3, 8], ..small() }.validate().is_err());
        assert!(SynthConfig { noise_level: -1.0, ..small() }.validate().is_err());
    }
}
