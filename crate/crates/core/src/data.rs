//! Planted-rule synthetic visual-tactile dataset, tactile preprocessing
//! (Gaussian filtering, background substitution, splicing, noise), and the
//! "VTG1" dataset container.
//!
//! The planted rule makes the multimodal-advantage claims testable without
//! hardware: a grasp succeeds iff the gripping force reaches a latent
//! per-scene threshold AND the latent placement offset stays within a margin.
//! The threshold is only decodable from the VISUAL image (the rendered blob's
//! size determines it), the force only from the TACTILE image (contact-bump
//! intensity), so a perfect decoder needs both modalities. The offset shows
//! up in both (blob displacement, bump asymmetry).

use crate::error::{Error, Result};
use crate::io_util::*;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const DATASET_MAGIC: [u8; 4] = *b"VTG1";
pub const DATASET_VERSION: u32 = 1;

/// One grasp trial.
#[derive(Debug, Clone)]
pub struct Sample {
    /// RGB wrist-camera image, `[3, H_v, W_v]`, values in [0, 1].
    pub visual: Tensor,
    /// Spliced two-sensor tactile image, `[3, H_t, W_t]`, values in [0, 1].
    pub tactile: Tensor,
    /// Gripping force in newtons.
    pub force: f64,
    pub label: u8,
}

/// Latent per-scene parameters behind a sample.
#[derive(Debug, Clone, Copy)]
pub struct SceneParams {
    /// Minimum force (N) that holds the object; decodable only via the
    /// visual object size.
    pub force_threshold: f64,
    /// Grasp placement error in pixels; the grasp fails beyond the margin
    /// regardless of force.
    pub offset: f64,
    /// Rendered blob radius in pixels, a linear proxy for the threshold.
    pub object_size: f64,
}

/// Tactile preprocessing settings: Gaussian filter plus background images
/// for the substitution step.
#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub sigma: f64,
    pub sim_background: Tensor,
    pub real_background: Tensor,
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub visual_hw: (usize, usize),
    /// One tactile sensor; the spliced image stacks two of these vertically.
    pub sensor_hw: (usize, usize),
    pub threshold_range: (f64, f64),
    pub force_range: (f64, f64),
    pub offset_max: f64,
    pub noise_std: f64,
    pub blur_sigma: f64,
    /// Blob radius range encoding the threshold.
    pub radius_range: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            visual_hw: (24, 24),
            sensor_hw: (12, 24),
            threshold_range: (10.0, 22.0),
            force_range: (8.0, 30.0),
            offset_max: 4.0,
            noise_std: 0.01,
            blur_sigma: 2.0,
            radius_range: (3.0, 9.0),
        }
    }
}

impl DataConfig {
    pub fn tactile_hw(&self) -> (usize, usize) {
        (2 * self.sensor_hw.0, self.sensor_hw.1)
    }

    fn radius_for_threshold(&self, t: f64) -> f64 {
        let (t_lo, t_hi) = self.threshold_range;
        let (r_lo, r_hi) = self.radius_range;
        r_lo + (r_hi - r_lo) * (t - t_lo) / (t_hi - t_lo)
    }
}

/// Placement margin of the planted rule, in pixels.
pub const OFFSET_MARGIN: f64 = 3.8;

/// Success iff the force reaches the scene threshold and the placement
/// offset stays within the margin. Equality counts as success.
pub fn label_rule(scene: &SceneParams, force: f64) -> u8 {
    u8::from(force >= scene.force_threshold && scene.offset.abs() <= OFFSET_MARGIN)
}

/// Draw the latent scene parameters.
pub fn sample_scene<R: Rng>(cfg: &DataConfig, rng: &mut R) -> SceneParams {
    let t = rng.gen_range(cfg.threshold_range.0..cfg.threshold_range.1);
    let offset = rng.gen_range(-cfg.offset_max..cfg.offset_max);
    SceneParams {
        force_threshold: t,
        offset,
        object_size: cfg.radius_for_threshold(t),
    }
}

/// Deterministic per-sample RNG stream split from the master seed.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generate `n` samples; a pure function of `(cfg, n, seed)`.
pub fn generate_dataset(cfg: &DataConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    Ok(generate_with_scenes(cfg, n, seed)?.0)
}

/// Like [`generate_dataset`] but also returns the latent scenes, for oracle
/// checks and the policy loop.
pub fn generate_with_scenes(
    cfg: &DataConfig,
    n: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<SceneParams>)> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let mut samples = Vec::with_capacity(n);
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, i as u64);
        let scene = sample_scene(cfg, &mut rng);
        let force = rng.gen_range(cfg.force_range.0..cfg.force_range.1);
        samples.push(render_sample(cfg, &scene, force, &mut rng)?);
        scenes.push(scene);
    }
    Ok((samples, scenes))
}

/// Render one sample for a scene at a given force. The RNG only drives the
/// additive pixel noise.
pub fn render_sample<R: Rng>(
    cfg: &DataConfig,
    scene: &SceneParams,
    force: f64,
    rng: &mut R,
) -> Result<Sample> {
    let visual = render_visual(cfg, scene, rng)?;
    let tactile = render_tactile(cfg, scene, force, rng)?;
    Ok(Sample {
        visual,
        tactile,
        force,
        label: label_rule(scene, force),
    })
}

/// Visual image: a shaded background plus a soft disc whose radius encodes
/// the force threshold and whose horizontal displacement encodes the offset.
/// The force is invisible here.
fn render_visual<R: Rng>(cfg: &DataConfig, scene: &SceneParams, rng: &mut R) -> Result<Tensor> {
    let (h, w) = cfg.visual_hw;
    let mut img = Tensor::zeros(&[3, h, w]);
    let blob = [0.85, 0.70, 0.55];
    let tint = [0.00, 0.02, 0.04];
    let cy = h as f64 / 2.0;
    let cx = w as f64 / 2.0 + scene.offset;
    let r = scene.object_size;
    {
        let data = img.data_mut();
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let bg = 0.12 + 0.06 * y as f64 / h as f64 + 0.04 * x as f64 / w as f64
                        + tint[ch];
                    let dist = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2))
                        .sqrt();
                    let cover = (r - dist + 0.5).clamp(0.0, 1.0);
                    data[(ch * h + y) * w + x] = bg + cover * (blob[ch] - bg);
                }
            }
        }
    }
    Ok(add_gaussian_noise(&img, cfg.noise_std, rng))
}

/// Tactile image: each sensor half carries an elliptical contact bump whose
/// peak is proportional to the force and whose horizontal position shifts
/// with the offset (opposite directions on the two sensors). The rendered
/// "simulated" reading is Gaussian-filtered and background-substituted.
fn render_tactile<R: Rng>(
    cfg: &DataConfig,
    scene: &SceneParams,
    force: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let peak = 0.65 * force / cfg.force_range.1;
    let top = render_sensor(cfg, scene.offset, peak);
    let bottom = render_sensor(cfg, -scene.offset, peak);
    let spliced = splice_tactile(&top, &bottom)?;
    let filtered = gaussian_filter(&spliced, cfg.blur_sigma)?;
    let pre = tactile_preprocess_config(cfg);
    let substituted = background_substitute(&filtered, &pre.sim_background, &pre.real_background)?;
    Ok(add_gaussian_noise(&substituted, cfg.noise_std, rng))
}

/// Backgrounds used by the tactile pipeline: rendering starts from a black
/// simulated background; the real background is a tinted vertical gradient.
pub fn tactile_preprocess_config(cfg: &DataConfig) -> PreprocessConfig {
    let (h, w) = cfg.tactile_hw();
    let sim = Tensor::zeros(&[3, h, w]);
    let mut real = Tensor::zeros(&[3, h, w]);
    let base = [0.22, 0.26, 0.32];
    {
        let data = real.data_mut();
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(ch * h + y) * w + x] = base[ch] + 0.04 * y as f64 / h as f64;
                }
            }
        }
    }
    PreprocessConfig {
        sigma: cfg.blur_sigma,
        sim_background: sim,
        real_background: real,
    }
}

fn render_sensor(cfg: &DataConfig, offset: f64, peak: f64) -> Tensor {
    let (h, w) = cfg.sensor_hw;
    let mut img = Tensor::zeros(&[3, h, w]);
    let chan = [1.0, 0.85, 0.70];
    let cy = h as f64 / 2.0;
    let cx = w as f64 / 2.0 + offset;
    let (sx, sy) = (3.5, 2.2);
    let data = img.data_mut();
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / sy;
                let dx = (x as f64 + 0.5 - cx) / sx;
                data[(ch * h + y) * w + x] =
                    peak * chan[ch] * (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
    }
    img
}

/// Per-channel convolution with a discretely normalized 2-D Gaussian kernel
/// (radius `ceil(3*sigma)`), reflective padding. A constant image is a fixed
/// point.
pub fn gaussian_filter(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")));
    }
    if image.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "gaussian_filter",
            lhs: image.shape().to_vec(),
            rhs: vec![3, 0, 0],
        });
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let size = (2 * radius + 1) as usize;
    let mut kernel = vec![0.0; size * size];
    let mut total = 0.0;
    for ky in -radius..=radius {
        for kx in -radius..=radius {
            let v = (-((ky * ky + kx * kx) as f64) / (2.0 * sigma * sigma)).exp();
            kernel[((ky + radius) * (2 * radius + 1) + (kx + radius)) as usize] = v;
            total += v;
        }
    }
    for v in &mut kernel {
        *v /= total;
    }

    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(image.shape());
    let src = image.data();
    let dst = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in -radius..=radius {
                    let sy = reflect(y as isize + ky, h);
                    for kx in -radius..=radius {
                        let sx = reflect(x as isize + kx, w);
                        acc += kernel[((ky + radius) * (2 * radius + 1) + (kx + radius)) as usize]
                            * plane[sy * w + sx];
                    }
                }
                dst[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// Symmetric reflection of an out-of-range index (`-1 -> 0`, `n -> n-1`).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// `J <- J - J_sim_bg + J_real_bg`, clamped to [0, 1].
pub fn background_substitute(
    image: &Tensor,
    sim_background: &Tensor,
    real_background: &Tensor,
) -> Result<Tensor> {
    if image.shape() != sim_background.shape() || image.shape() != real_background.shape() {
        return Err(Error::ShapeMismatch {
            op: "background_substitute",
            lhs: image.shape().to_vec(),
            rhs: sim_background.shape().to_vec(),
        });
    }
    let data = image
        .data()
        .iter()
        .zip(sim_background.data())
        .zip(real_background.data())
        .map(|((j, s), r)| (j - s + r).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(image.shape().to_vec(), data)
}

/// Vertical concatenation of the two sensor images, `top` sensor on top:
/// `[3,h,w] + [3,h,w] -> [3,2h,w]`.
pub fn splice_tactile(top: &Tensor, bottom: &Tensor) -> Result<Tensor> {
    if top.shape() != bottom.shape() || top.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "splice_tactile",
            lhs: top.shape().to_vec(),
            rhs: bottom.shape().to_vec(),
        });
    }
    let (c, h, w) = (top.shape()[0], top.shape()[1], top.shape()[2]);
    let mut out = Tensor::zeros(&[c, 2 * h, w]);
    let dst = out.data_mut();
    for ch in 0..c {
        dst[ch * 2 * h * w..ch * 2 * h * w + h * w]
            .copy_from_slice(&top.data()[ch * h * w..(ch + 1) * h * w]);
        dst[ch * 2 * h * w + h * w..(ch + 1) * 2 * h * w]
            .copy_from_slice(&bottom.data()[ch * h * w..(ch + 1) * h * w]);
    }
    Ok(out)
}

/// Inverse of [`splice_tactile`].
pub fn unsplice_tactile(spliced: &Tensor) -> Result<(Tensor, Tensor)> {
    if spliced.rank() != 3 || spliced.shape()[1] % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "unsplice_tactile",
            lhs: spliced.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (c, h2, w) = (spliced.shape()[0], spliced.shape()[1], spliced.shape()[2]);
    let h = h2 / 2;
    let mut top = Tensor::zeros(&[c, h, w]);
    let mut bottom = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        top.data_mut()[ch * h * w..(ch + 1) * h * w]
            .copy_from_slice(&spliced.data()[ch * h2 * w..ch * h2 * w + h * w]);
        bottom.data_mut()[ch * h * w..(ch + 1) * h * w]
            .copy_from_slice(&spliced.data()[ch * h2 * w + h * w..(ch + 1) * h2 * w]);
    }
    Ok((top, bottom))
}

/// Add i.i.d. Gaussian pixel noise and clamp to [0, 1].
pub fn add_gaussian_noise<R: Rng>(image: &Tensor, std: f64, rng: &mut R) -> Tensor {
    if std == 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0, std).expect("std must be non-negative");
    let data = image
        .data()
        .iter()
        .map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(image.shape().to_vec(), data).expect("shape unchanged")
}

// ── VTG1 container ──────────────────────────────────────────────────

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("refusing to write an empty dataset".into()));
    }
    let vshape = samples[0].visual.shape();
    let tshape = samples[0].tactile.shape();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    write_u32(&mut w, DATASET_VERSION)?;
    write_u32(&mut w, samples.len() as u32)?;
    for &e in vshape.iter().chain(tshape) {
        write_u32(&mut w, e as u32)?;
    }
    for s in samples {
        if s.visual.shape() != vshape || s.tactile.shape() != tshape {
            return Err(Error::Contract("inconsistent sample shapes".into()));
        }
        write_f32_slice(&mut w, s.visual.data())?;
        write_f32_slice(&mut w, s.tactile.data())?;
        write_f32(&mut w, s.force as f32)?;
        write_u8(&mut w, s.label)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, &DATASET_MAGIC, "dataset")?;
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut vshape = [0usize; 3];
    let mut tshape = [0usize; 3];
    for v in vshape.iter_mut().chain(tshape.iter_mut()) {
        *v = read_u32(&mut r)? as usize;
    }
    let v_len: usize = vshape.iter().product();
    let t_len: usize = tshape.iter().product();
    if v_len == 0 || t_len == 0 || count == 0 {
        return Err(Error::Format("empty dataset or degenerate shapes".into()));
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let visual = Tensor::from_vec(vshape.to_vec(), read_f32_vec(&mut r, v_len)?)?;
        let tactile = Tensor::from_vec(tshape.to_vec(), read_f32_vec(&mut r, t_len)?)?;
        let force = read_f32(&mut r)? as f64;
        let label = read_u8(&mut r)?;
        if label > 1 {
            return Err(Error::Format(format!("label byte {label} is not 0/1")));
        }
        samples.push(Sample {
            visual,
            tactile,
            force,
            label,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_rule_boundaries_and_monotonicity() {
        let scene = SceneParams {
            force_threshold: 17.0,
            offset: 1.0,
            object_size: 6.0,
        };
        assert_eq!(label_rule(&scene, 17.0), 1); // >= convention
        assert_eq!(label_rule(&scene, 16.999), 0);

        let far = SceneParams {
            force_threshold: 10.0,
            offset: OFFSET_MARGIN + 0.01,
            object_size: 3.0,
        };
        for f in [0.0, 15.0, 30.0, 1000.0] {
            assert_eq!(label_rule(&far, f), 0);
        }

        // monotone in force: once positive, stays positive
        let cfg = DataConfig::default();
        let mut rng = sample_rng(5, 0);
        for _ in 0..50 {
            let scene = sample_scene(&cfg, &mut rng);
            let mut seen_positive = false;
            let mut f = cfg.force_range.0;
            while f <= cfg.force_range.1 {
                let l = label_rule(&scene, f) == 1;
                if seen_positive {
                    assert!(l, "label must stay 1 above the threshold");
                }
                seen_positive |= l;
                f += 0.25;
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_labels_rederivable() {
        let cfg = DataConfig::default();
        let (a, scenes) = generate_with_scenes(&cfg, 64, 123).unwrap();
        let (b, _) = generate_with_scenes(&cfg, 64, 123).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.visual.data(), sb.visual.data());
            assert_eq!(sa.tactile.data(), sb.tactile.data());
            assert_eq!(sa.force, sb.force);
            assert_eq!(sa.label, sb.label);
        }
        let mut mismatches = 0;
        for (s, scene) in a.iter().zip(&scenes) {
            if s.label != label_rule(scene, s.force) {
                mismatches += 1;
            }
        }
        assert_eq!(mismatches, 0);

        let (c, _) = generate_with_scenes(&cfg, 64, 124).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.visual.data() != y.visual.data()));
    }

    #[test]
    fn class_ratio_in_band() {
        let cfg = DataConfig::default();
        let samples = generate_dataset(&cfg, 10_000, 7).unwrap();
        let pos = samples.iter().filter(|s| s.label == 1).count() as f64 / samples.len() as f64;
        assert!((0.55..=0.65).contains(&pos), "positive fraction {pos}");
    }

    #[test]
    fn planted_identifiability_bounds() {
        // Brute-force decode over sampled latents: the full rule is exact;
        // each single modality's Bayes-optimal decoder stays under 90%.
        let cfg = DataConfig::default();
        let (f_lo, f_hi) = cfg.force_range;
        let (t_lo, t_hi) = cfg.threshold_range;
        let p_force_geq = |t: f64| ((f_hi - t) / (f_hi - f_lo)).clamp(0.0, 1.0);
        let p_thresh_leq = |f: f64| ((f - t_lo) / (t_hi - t_lo)).clamp(0.0, 1.0);

        let mut rng = sample_rng(99, 0);
        let n = 200_000;
        let (mut full, mut vis, mut tac) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let scene = sample_scene(&cfg, &mut rng);
            let force = rng.gen_range(f_lo..f_hi);
            let label = label_rule(&scene, force) == 1;

            // full decoder: applies the rule itself
            if (label_rule(&scene, force) == 1) == label {
                full += 1.0;
            }
            // visual decoder: knows (threshold, offset); best fixed guess
            let margin_ok = scene.offset.abs() <= OFFSET_MARGIN;
            let p1_vis = if margin_ok { p_force_geq(scene.force_threshold) } else { 0.0 };
            if ((p1_vis > 0.5) == label) {
                vis += 1.0;
            }
            // tactile decoder: knows (force, offset)
            let p1_tac = if margin_ok { p_thresh_leq(force) } else { 0.0 };
            if ((p1_tac > 0.5) == label) {
                tac += 1.0;
            }
        }
        let (full, vis, tac) = (full / n as f64, vis / n as f64, tac / n as f64);
        assert_eq!(full, 1.0);
        assert!(vis < 0.90, "visual-only Bayes accuracy {vis}");
        assert!(tac < 0.90, "tactile-only Bayes accuracy {tac}");
        // the tactile channel must dominate the visual one by a clear gap
        assert!(tac > vis + 0.05, "tactile {tac} vs visual {vis}");
    }

    #[test]
    fn gaussian_filter_constant_fixed_point_and_kernel_mass() {
        let img = Tensor::filled(&[3, 10, 12], 0.42);
        let out = gaussian_filter(&img, 2.0).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(gaussian_filter(&img, 0.0).is_err());
    }

    #[test]
    fn gaussian_filter_impulse_response_is_kernel() {
        let sigma = 1.0;
        let radius = 3i64;
        let mut img = Tensor::zeros(&[1, 15, 15]);
        img.data_mut()[7 * 15 + 7] = 1.0;
        let out = gaussian_filter(&img, sigma).unwrap();

        // independent kernel computation
        let mut total = 0.0;
        for ky in -radius..=radius {
            for kx in -radius..=radius {
                total += (-((ky * ky + kx * kx) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        for ky in -radius..=radius {
            for kx in -radius..=radius {
                let want = (-((ky * ky + kx * kx) as f64) / (2.0 * sigma * sigma)).exp() / total;
                let got = out.data()[((7 + ky) * 15 + 7 + kx) as usize];
                assert!((want - got).abs() < 1e-12);
            }
        }
        // mass preserved for interior-supported images
        let mass_in: f64 = img.data().iter().sum();
        let mass_out: f64 = out.data().iter().sum();
        assert!((mass_in - mass_out).abs() < 1e-9);
    }

    #[test]
    fn gaussian_filter_is_linear() {
        let mut rng = sample_rng(11, 0);
        let x = Tensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);
        let (a, b) = (0.7, -0.3);
        let mixed = Tensor::from_vec(
            vec![1, 8, 8],
            x.data().iter().zip(y.data()).map(|(xv, yv)| a * xv + b * yv).collect(),
        )
        .unwrap();
        let fx = gaussian_filter(&x, 1.5).unwrap();
        let fy = gaussian_filter(&y, 1.5).unwrap();
        let fmixed = gaussian_filter(&mixed, 1.5).unwrap();
        for ((m, xv), yv) in fmixed.data().iter().zip(fx.data()).zip(fy.data()) {
            assert!((m - (a * xv + b * yv)).abs() < 1e-9);
        }
    }

    #[test]
    fn background_substitution_cases() {
        let mut rng = sample_rng(12, 0);
        let sim = Tensor::rand_uniform(&[1, 4, 4], 0.0, 0.5, &mut rng);
        let real = Tensor::rand_uniform(&[1, 4, 4], 0.0, 0.5, &mut rng);
        // image == sim background -> real background
        let out = background_substitute(&sim, &sim, &real).unwrap();
        for (a, b) in out.data().iter().zip(real.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        // sim == real -> identity
        let img = Tensor::rand_uniform(&[1, 4, 4], 0.0, 1.0, &mut rng);
        let out = background_substitute(&img, &sim, &sim).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        // constructed overflow clamps to 1
        let bright = Tensor::filled(&[1, 4, 4], 0.9);
        let zero = Tensor::zeros(&[1, 4, 4]);
        let big = Tensor::filled(&[1, 4, 4], 0.5);
        let out = background_substitute(&bright, &zero, &big).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
        // shape mismatch
        let small = Tensor::zeros(&[1, 2, 2]);
        assert!(background_substitute(&bright, &small, &big).is_err());
    }

    #[test]
    fn splice_shapes_and_round_trip() {
        let mut rng = sample_rng(13, 0);
        let a = Tensor::rand_uniform(&[3, 160, 480], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3, 160, 480], 0.0, 1.0, &mut rng);
        let s = splice_tactile(&a, &b).unwrap();
        assert_eq!(s.shape(), &[3, 320, 480]);
        let (ta, tb) = unsplice_tactile(&s).unwrap();
        assert_eq!(ta.data(), a.data());
        assert_eq!(tb.data(), b.data());

        let same = splice_tactile(&a, &a).unwrap();
        let (top, bottom) = unsplice_tactile(&same).unwrap();
        assert_eq!(top.data(), bottom.data());
    }

    #[test]
    fn noise_statistics_and_range() {
        let img = Tensor::filled(&[3, 200, 200], 0.5);
        let mut rng = sample_rng(14, 0);
        let noisy = add_gaussian_noise(&img, 0.05, &mut rng);
        assert!(noisy.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let n = noisy.data().len() as f64;
        let mean_sq: f64 = noisy
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let emp_std = mean_sq.sqrt();
        assert!((emp_std - 0.05).abs() / 0.05 < 0.05, "empirical std {emp_std}");

        let clean = add_gaussian_noise(&img, 0.0, &mut rng);
        assert_eq!(clean.data(), img.data());
    }

    #[test]
    fn dataset_file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.vtg");
        let cfg = DataConfig::default();
        let samples = generate_dataset(&cfg, 16, 3).unwrap();
        write_dataset(&path, &samples).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.len(), 16);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.force as f32, b.force as f32);
            for (x, y) in a.visual.data().iter().zip(b.visual.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // same write twice -> byte identical
        let path2 = dir.path().join("d2.vtg");
        write_dataset(&path2, &samples).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // corrupt magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn images_stay_in_unit_range() {
        let cfg = DataConfig::default();
        let samples = generate_dataset(&cfg, 32, 77).unwrap();
        for s in &samples {
            assert!(s.visual.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.tactile.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
