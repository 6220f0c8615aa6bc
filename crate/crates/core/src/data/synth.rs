//! Procedural walking silhouettes written in the CASIA-B layout.
//!
//! Each subject is a stick biped (head disc, torso ellipse, two legs, two
//! arms) whose limbs swing sinusoidally at the subject's cadence. Views are
//! horizontal scale/shear factors. Subjects 1 and 2 can be generated as phase
//! twins: identical bodies and cadence, but subject 2 advances its gait phase
//! by `twin_stride` steps per frame. Over whole cadence cycles both show the
//! same set of poses in a different order.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::sequence::write_gray;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub subjects: u32,
    /// Camera angles in degrees, 0..=180.
    pub views: Vec<u32>,
    /// Sequences (runs) per subject and view.
    pub sequences: u32,
    pub frames: usize,
    pub height: u32,
    pub width: u32,
    /// Flip probability for pixels on the silhouette boundary.
    pub noise: f64,
    /// Make subjects 1 and 2 phase twins.
    pub twins: bool,
    pub twin_period: u32,
    pub twin_stride: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 20,
            views: vec![36, 72, 108, 144],
            sequences: 8,
            frames: 32,
            height: 128,
            width: 88,
            noise: 0.1,
            twins: true,
            twin_period: 16,
            twin_stride: 3,
            seed: 0,
        }
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.subjects < 2 {
            return fail(format!(
                "synth.subjects must be at least 2, got {}",
                self.subjects
            ));
        }
        if self.views.is_empty() || self.views.iter().any(|&v| v > 180) {
            return fail(format!(
                "synth.views {:?} must be non-empty angles in 0..=180",
                self.views
            ));
        }
        if self.sequences == 0 || self.frames == 0 {
            return fail("synth.sequences and synth.frames must be positive".into());
        }
        if self.height < 32 || self.width < 16 {
            return fail(format!(
                "synth canvas {}x{} is too small (min 32x16)",
                self.height, self.width
            ));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return fail(format!("synth.noise {} must lie in [0, 0.5]", self.noise));
        }
        if self.twins {
            if self.twin_period < 2 || gcd(self.twin_stride, self.twin_period) != 1 {
                return fail(format!(
                    "synth.twin_stride {} must be coprime to synth.twin_period {}",
                    self.twin_stride, self.twin_period
                ));
            }
            if !self.frames.is_multiple_of(self.twin_period as usize) {
                return fail(format!(
                    "synth.frames {} must be a multiple of synth.twin_period {} for twins",
                    self.frames, self.twin_period
                ));
            }
        }
        Ok(())
    }

    pub fn is_twin(&self, subject: u32) -> bool {
        self.twins && (subject == 1 || subject == 2)
    }
}

/// Body and gait parameters of one subject; lengths are fractions of body height.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitParams {
    pub head_radius: f64,
    pub torso_ratio: f64,
    pub leg_length: f64,
    pub arm_length: f64,
    pub limb_width: f64,
    pub leg_swing: f64,
    pub arm_swing: f64,
    /// Frames per gait cycle.
    pub period: f64,
    pub phase: f64,
}

impl GaitParams {
    fn draw(rng: &mut impl Rng) -> Self {
        GaitParams {
            head_radius: rng.gen_range(0.055..0.095),
            torso_ratio: rng.gen_range(0.22..0.5),
            leg_length: rng.gen_range(0.4..0.52),
            arm_length: rng.gen_range(0.28..0.42),
            limb_width: rng.gen_range(0.035..0.07),
            leg_swing: rng.gen_range(0.2..0.6),
            arm_swing: rng.gen_range(0.1..0.6),
            period: f64::from(rng.gen_range(12u32..=22)),
            phase: rng.gen_range(0.0..1.0),
        }
    }

    /// Leg swing angle (radians from vertical) at gait position `t` frames.
    pub fn leg_angle(&self, t: f64) -> f64 {
        self.leg_swing * (2.0 * PI * (t / self.period + self.phase)).sin()
    }

    pub fn arm_angle(&self, t: f64) -> f64 {
        -self.arm_swing * (2.0 * PI * (t / self.period + self.phase)).sin()
    }
}

/// Parameters of every subject (index 0 is subject 1).
pub fn subject_params(spec: &SynthSpec) -> Vec<GaitParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params: Vec<GaitParams> = (0..spec.subjects)
        .map(|_| GaitParams::draw(&mut rng))
        .collect();
    if spec.twins {
        params[0].period = f64::from(spec.twin_period);
        params[0].phase = 0.0;
        params[1] = params[0].clone();
    }
    params
}

/// Horizontal scale and shear of a camera angle.
pub fn view_transform(view_deg: u32) -> (f64, f64) {
    let th = f64::from(view_deg).to_radians();
    (0.5 + 0.5 * th.sin(), 0.25 * th.cos())
}

fn capsule(px: f64, py: f64, a: (f64, f64), b: (f64, f64), r: f64) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    qx * qx + qy * qy <= r * r
}

struct Pose {
    leg: f64,
    arm: f64,
    swing_scale: f64,
}

/// Renders one frame as a boolean mask, `offset_x` in pixels.
fn render(
    p: &GaitParams,
    pose: &Pose,
    view: (f64, f64),
    spec: &SynthSpec,
    offset_x: f64,
) -> Vec<bool> {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let size = 0.8 * h as f64;
    let top = 0.1 * h as f64;
    let cx = w as f64 / 2.0 + offset_x;
    let (scale, shear) = view;

    let neck = 2.0 * p.head_radius;
    let hip = 1.0 - p.leg_length;
    let torso_b = (hip - neck) / 2.0;
    let torso_a = p.torso_ratio * torso_b;
    let torso_cy = neck + torso_b;
    let shoulder = (0.0, neck + 0.05);
    let r = p.limb_width / 2.0;
    let leg = pose.leg * pose.swing_scale;
    let arm = pose.arm * pose.swing_scale;
    let limb = |origin: (f64, f64), len: f64, angle: f64| {
        (
            origin,
            (origin.0 + len * angle.sin(), origin.1 + len * angle.cos()),
        )
    };
    let limbs = [
        limb((0.0, hip), p.leg_length, leg),
        limb((0.0, hip), p.leg_length, -leg),
        limb(shoulder, p.arm_length, arm),
        limb(shoulder, p.arm_length, -arm),
    ];

    let mut mask = vec![false; w * h];
    for py in 0..h {
        let y = (py as f64 + 0.5 - top) / size;
        if !(-0.1..=1.1).contains(&y) {
            continue;
        }
        for px in 0..w {
            let x = ((px as f64 + 0.5 - cx) / size - shear * (y - 0.5)) / scale;
            let head = x * x + (y - p.head_radius).powi(2) <= p.head_radius * p.head_radius;
            let torso = (x / torso_a).powi(2) + ((y - torso_cy) / torso_b).powi(2) <= 1.0;
            let inside = head || torso || limbs.iter().any(|&(a, b)| capsule(x, y, a, b, r));
            mask[py * w + px] = inside;
        }
    }
    mask
}

fn boundary_noise(mask: &mut [bool], w: usize, h: usize, rate: f64, rng: &mut impl Rng) {
    if rate == 0.0 {
        return;
    }
    let orig = mask.to_vec();
    for y in 0..h {
        for x in 0..w {
            let v = orig[y * w + x];
            let edge = (x > 0 && orig[y * w + x - 1] != v)
                || (x + 1 < w && orig[y * w + x + 1] != v)
                || (y > 0 && orig[(y - 1) * w + x] != v)
                || (y + 1 < h && orig[(y + 1) * w + x] != v);
            if edge && rng.gen_bool(rate) {
                mask[y * w + x] = !v;
            }
        }
    }
}

fn sequence_rng(spec: &SynthSpec, subject: u32, view: u32, run: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + ((u64::from(subject) << 32) | (u64::from(view) << 16) | u64::from(run)));
    rng
}

/// Frames of one sequence as `{0, 255}` images.
pub fn render_sequence(
    spec: &SynthSpec,
    params: &[GaitParams],
    subject: u32,
    view: u32,
    run: u32,
) -> Vec<GrayImage> {
    let p = &params[(subject - 1) as usize];
    let twin = spec.is_twin(subject);
    // Twins share the per-sequence draws of subject 1 so their pose sets match.
    let mut rng = sequence_rng(spec, if twin { 1 } else { subject }, view, run);
    let (start, swing_scale, offset_x) = if twin {
        (f64::from(rng.gen_range(0..spec.twin_period)), 1.0, 0.0)
    } else {
        (
            rng.gen_range(0.0..p.period),
            1.0 + rng.gen_range(-0.05..0.05),
            rng.gen_range(-4.0..4.0),
        )
    };
    let step = if twin && subject == 2 {
        f64::from(spec.twin_stride)
    } else {
        1.0
    };
    let vt = view_transform(view);
    (0..spec.frames)
        .map(|i| {
            // Reducing modulo the period keeps repeated poses bit-identical.
            let t = (start + step * i as f64).rem_euclid(p.period);
            let pose = Pose {
                leg: p.leg_angle(t),
                arm: p.arm_angle(t),
                swing_scale,
            };
            let mut mask = render(p, &pose, vt, spec, offset_x);
            if !twin {
                boundary_noise(
                    &mut mask,
                    spec.width as usize,
                    spec.height as usize,
                    spec.noise,
                    &mut rng,
                );
            }
            GrayImage::from_fn(spec.width, spec.height, |x, y| {
                Luma([if mask[(y * spec.width + x) as usize] {
                    255
                } else {
                    0
                }])
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub sequences: usize,
    pub frames: usize,
}

/// Writes the dataset under `root` as `SSS/nm-RR/VVV/FFF.png`.
pub fn synth_generate(spec: &SynthSpec, root: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let params = subject_params(spec);
    let jobs: Vec<(u32, u32, u32)> = (1..=spec.subjects)
        .flat_map(|s| {
            spec.views
                .iter()
                .flat_map(move |&v| (1..=spec.sequences).map(move |r| (s, v, r)))
        })
        .collect();
    jobs.par_iter().try_for_each(|&(s, v, r)| -> Result<()> {
        let dir = root.join(format!("{s:03}/nm-{r:02}/{v:03}"));
        fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (i, img) in render_sequence(spec, &params, s, v, r).iter().enumerate() {
            write_gray(&dir.join(format!("{:03}.png", i + 1)), img)?;
        }
        Ok(())
    })?;
    Ok(SynthSummary {
        sequences: jobs.len(),
        frames: jobs.len() * spec.frames,
    })
}
