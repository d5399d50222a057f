use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyWorldConfig {
    pub num_train_persons: usize,
    pub num_test_persons: usize,
    pub num_cameras: usize,
    pub samples_per_pair: usize,
    pub latent_dim: usize,
    /// `(C, H, W)` of every rendered image.
    pub image: [usize; 3],
    /// Base magnitude of the per-channel multiplicative gain deviation.
    pub gain: f64,
    /// Base magnitude of the per-channel additive bias.
    pub bias: f64,
    /// Base RMS of the camera's background pattern.
    pub background: f64,
    /// Pixel noise standard deviation, per camera.
    pub noise: Vec<f64>,
    /// Per-camera multiplier on gain, bias and background.
    pub style_strength: Vec<f64>,
    /// Horizontal jitter of the figure in pixels.
    pub max_shift: usize,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        ToyWorldConfig {
            num_train_persons: 96,
            num_test_persons: 64,
            num_cameras: 4,
            samples_per_pair: 2,
            latent_dim: 8,
            image: [3, 16, 16],
            gain: 0.25,
            bias: 0.5,
            background: 0.15,
            noise: vec![0.1; 4],
            style_strength: vec![1.0, 1.0, 1.0, 3.0],
            max_shift: 1,
        }
    }
}

impl ToyWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_cameras < 3 {
            return bad(format!("need at least 3 cameras, got {}", self.num_cameras));
        }
        if self.style_strength.len() != self.num_cameras || self.noise.len() != self.num_cameras {
            return bad(format!(
                "style_strength and noise need one entry per camera ({})",
                self.num_cameras
            ));
        }
        if self.num_train_persons < 2 || self.num_test_persons < 2 {
            return bad("need at least 2 train and 2 test persons".into());
        }
        if self.samples_per_pair < 2 {
            return bad("samples_per_pair must be at least 2 (one query, one gallery)".into());
        }
        if self.latent_dim == 0 || self.image.contains(&0) {
            return bad("latent_dim and image dimensions must be positive".into());
        }
        if 2 * self.max_shift >= self.image[2] {
            return bad(format!("max_shift {} too large for width {}", self.max_shift, self.image[2]));
        }
        let all = self.style_strength.iter().chain(&self.noise);
        if all.clone().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("style strengths and noise must be finite and non-negative".into());
        }
        if self.outlier_camera().is_none() {
            return bad("no camera has style strength at least twice the median".into());
        }
        Ok(())
    }

    pub fn median_strength(&self) -> f64 {
        let mut s = self.style_strength.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
    }

    /// The strongest-styled camera, if it is at least twice the median.
    pub fn outlier_camera(&self) -> Option<usize> {
        let median = self.median_strength();
        let (cam, strength) = self
            .style_strength
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
        (*strength > 0.0 && *strength >= 2.0 * median).then_some(cam)
    }

    pub fn pixels(&self) -> usize {
        self.image.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraStyle {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    /// `(C, H, W)` pattern added outside the figure.
    pub background: Vec<f64>,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub person_id: u32,
    pub camera_id: u32,
    /// `(C, H, W)` pixels.
    pub image: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub config: ToyWorldConfig,
    pub styles: Vec<CameraStyle>,
    /// Train persons have ids `0..num_train_persons`; test persons follow.
    pub train: Vec<ToySample>,
    pub query: Vec<ToySample>,
    pub gallery: Vec<ToySample>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Sum of a few low-frequency cosines per channel, scaled to unit RMS.
fn smooth_pattern(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut p = vec![0.0; c * h * w];
    for ch in 0..c {
        for _ in 0..4 {
            let fy = rng.random_range(0..3) as f64;
            let fx = rng.random_range(0..3) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp: f64 = StandardNormal.sample(rng);
            for y in 0..h {
                for x in 0..w {
                    let arg = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                    p[(ch * h + y) * w + x] += amp * (arg + phase).cos();
                }
            }
        }
    }
    let rms = (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt();
    if rms > 0.0 {
        p.iter_mut().for_each(|v| *v /= rms);
    }
    p
}

/// Figure occupancy: a centered box, rows `[h/16, h - h/16)`, columns `[w/4, 3w/4)`.
pub fn figure_mask(h: usize, w: usize, shift: isize) -> Vec<bool> {
    let (top, bottom) = (h / 16, h - h / 16);
    let (left, right) = ((w / 4) as isize + shift, (3 * w / 4) as isize + shift);
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, (i % w) as isize);
            y >= top && y < bottom && x >= left && x < right
        })
        .collect()
}

struct Renderer {
    shape: [usize; 3],
    /// One pattern per latent dimension.
    basis: Vec<Vec<f64>>,
}

impl Renderer {
    /// Unstyled figure of a person, shifted horizontally.
    fn appearance(&self, latent: &[f64], shift: isize) -> (Vec<f64>, Vec<bool>) {
        let [c, h, w] = self.shape;
        let mask = figure_mask(h, w, shift);
        let scale = 1.0 / (latent.len() as f64).sqrt();
        let mut img = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if !mask[y * w + x] {
                        continue;
                    }
                    // Pattern coordinates move with the figure.
                    let sx = (x as isize - shift) as usize;
                    let src = (ch * h + y) * w + sx;
                    let v: f64 = latent.iter().zip(&self.basis).map(|(z, b)| z * b[src]).sum();
                    img[(ch * h + y) * w + x] = scale * v;
                }
            }
        }
        (img, mask)
    }

    fn render(&self, appearance: &[f64], mask: &[bool], style: &CameraStyle, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let [c, h, w] = self.shape;
        let mut img = vec![0.0; c * h * w];
        for ch in 0..c {
            for (p, &inside) in mask.iter().enumerate().take(h * w) {
                let i = ch * h * w + p;
                let bg = if inside { 0.0 } else { style.background[i] };
                // Drawn unconditionally so the stream stays aligned across noise settings.
                let z: f64 = StandardNormal.sample(rng);
                let noise = style.noise * z;
                img[i] = style.gain[ch] * appearance[i] + style.bias[ch] + bg + noise;
            }
        }
        img
    }
}

fn camera_styles(config: &ToyWorldConfig, rng: &mut ChaCha8Rng) -> Vec<CameraStyle> {
    let c = config.image[0];
    (0..config.num_cameras)
        .map(|cam| {
            let s = config.style_strength[cam];
            let gain_dir = unit_vector(c, rng);
            let bias_dir = unit_vector(c, rng);
            let pattern = smooth_pattern(config.image, rng);
            CameraStyle {
                gain: gain_dir.iter().map(|u| 1.0 + config.gain * s * u).collect(),
                bias: bias_dir.iter().map(|v| config.bias * s * v).collect(),
                background: pattern.iter().map(|p| config.background * s * p).collect(),
                noise: config.noise[cam],
            }
        })
        .collect()
}

/// Renders a world fully determined by `(config, seed)`.
///
/// Styles, person latents and per-image jitter/noise come from separate
/// random streams, so changing one sample count leaves the others intact.
pub fn generate_world(config: &ToyWorldConfig, seed: u64) -> Result<ToyWorld> {
    config.validate()?;
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let (mut style_rng, mut person_rng, mut sample_rng) = (stream(1), stream(2), stream(3));
    let styles = camera_styles(config, &mut style_rng);
    let renderer = Renderer {
        shape: config.image,
        basis: (0..config.latent_dim)
            .map(|_| smooth_pattern(config.image, &mut person_rng))
            .collect(),
    };
    let total = config.num_train_persons + config.num_test_persons;
    let latents: Vec<Vec<f64>> = (0..total)
        .map(|_| (0..config.latent_dim).map(|_| StandardNormal.sample(&mut person_rng)).collect())
        .collect();

    let shift_range = config.max_shift as i64;
    let (mut train, mut query, mut gallery) = (Vec::new(), Vec::new(), Vec::new());
    for (pid, latent) in latents.iter().enumerate() {
        for (cam, style) in styles.iter().enumerate() {
            for k in 0..config.samples_per_pair {
                let shift = sample_rng.random_range(-shift_range..=shift_range) as isize;
                let (appearance, mask) = renderer.appearance(latent, shift);
                let image = renderer.render(&appearance, &mask, style, &mut sample_rng);
                let sample = ToySample {
                    person_id: pid as u32,
                    camera_id: cam as u32,
                    image,
                };
                if pid < config.num_train_persons {
                    train.push(sample);
                } else if k == 0 {
                    query.push(sample);
                } else {
                    gallery.push(sample);
                }
            }
        }
    }
    Ok(ToyWorld {
        config: config.clone(),
        styles,
        train,
        query,
        gallery,
    })
}

/// Euclidean norm of each camera's per-channel mean pixel shift, relative
/// to the same images rendered without style.
pub fn channel_mean_shift(world: &ToyWorld, seed: u64) -> Result<Vec<f64>> {
    let plain = {
        let mut cfg = world.config.clone();
        cfg.gain = 0.0;
        cfg.bias = 0.0;
        cfg.background = 0.0;
        cfg.noise = vec![0.0; cfg.num_cameras];
        // Validation needs an outlier; strengths are irrelevant with zero magnitudes.
        generate_world(&cfg, seed)?
    };
    let [c, h, w] = world.config.image;
    let means = |samples: &[&ToySample], cam: u32| -> Vec<f64> {
        let sel: Vec<_> = samples.iter().filter(|s| s.camera_id == cam).collect();
        (0..c)
            .map(|ch| {
                let total: f64 = sel.iter().map(|s| s.image[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>()).sum();
                total / (sel.len() * h * w) as f64
            })
            .collect()
    };
    let styled: Vec<&ToySample> = world.all_samples().collect();
    let unstyled: Vec<&ToySample> = plain.all_samples().collect();
    Ok((0..world.config.num_cameras as u32)
        .map(|cam| {
            let (a, b) = (means(&styled, cam), means(&unstyled, cam));
            a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .collect())
}

impl ToyWorld {
    pub fn all_samples(&self) -> impl Iterator<Item = &ToySample> {
        self.train.iter().chain(&self.query).chain(&self.gallery)
    }
}
