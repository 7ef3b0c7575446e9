//! Saliency-aware augmentation: blur what the trainer marked irrelevant,
//! keep the boxed regions bit-identical, and penalize Q-value drift between
//! a state and its perturbed copies. Also the context-agnostic crop and blur
//! used for comparison.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::BoundingBox;
use crate::state::{Frame, StackedState, FRAME_LEN, FRAME_SIDE};

/// Per-pixel relevance over an 84x84 frame, row-major; `true` = inside a box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyMask {
    bits: Vec<bool>,
}

impl SaliencyMask {
    pub fn empty() -> Self {
        Self {
            bits: vec![false; FRAME_LEN],
        }
    }

    pub fn full() -> Self {
        Self {
            bits: vec![true; FRAME_LEN],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if bits.len() != FRAME_LEN {
            return Err(Error::LengthMismatch {
                expected: FRAME_LEN,
                got: bits.len(),
            });
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// `col` is x, `row` is y.
    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * FRAME_SIDE + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Intersection over union; two empty masks count as identical.
    pub fn iou(&self, other: &SaliencyMask) -> f64 {
        let inter = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count();
        let union = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Union of boxes covering columns `[x, x + w)` and rows `[y, y + h)`,
/// clipped to the frame.
pub fn build_mask(boxes: &[BoundingBox]) -> SaliencyMask {
    let mut mask = SaliencyMask::empty();
    let side = FRAME_SIDE as i64;
    for b in boxes {
        let (x0, y0) = (i64::from(b.x).clamp(0, side), i64::from(b.y).clamp(0, side));
        let x1 = (i64::from(b.x) + i64::from(b.w)).clamp(0, side);
        let y1 = (i64::from(b.y) + i64::from(b.h)).clamp(0, side);
        for row in y0..y1 {
            for col in x0..x1 {
                mask.bits[row as usize * FRAME_SIDE + col as usize] = true;
            }
        }
    }
    mask
}

/// A truncated Gaussian: odd `size` taps per axis, standard deviation `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFilter {
    pub size: usize,
    pub sigma: f64,
}

impl GaussianFilter {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size < 3 || size % 2 == 0 {
            return Err(Error::InvalidConfig(format!("filter size {size} must be odd and >= 3")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("filter sigma {sigma} must be positive")));
        }
        Ok(Self { size, sigma })
    }

    /// Normalized 1-D taps; the 2-D kernel is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let half = (self.size / 2) as f64;
        let raw: Vec<f64> = (0..self.size)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// A named bank of blur filters; one augmented copy per filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPreset {
    pub name: String,
    pub filters: Vec<GaussianFilter>,
}

impl AugmentationPreset {
    pub fn named(name: &str) -> Result<Self> {
        let pairs: &[(usize, f64)] = match name {
            "aug1" => &[(5, 5.0)],
            "aug5" => &[(5, 2.0), (5, 5.0), (5, 10.0), (11, 5.0), (11, 10.0)],
            "aug12" => &[
                (5, 2.0),
                (5, 5.0),
                (5, 10.0),
                (7, 3.0),
                (7, 5.0),
                (7, 10.0),
                (9, 3.0),
                (9, 5.0),
                (9, 10.0),
                (11, 3.0),
                (11, 5.0),
                (11, 10.0),
            ],
            other => return Err(Error::InvalidConfig(format!("unknown augmentation preset `{other}`"))),
        };
        Ok(Self {
            name: name.to_string(),
            filters: pairs
                .iter()
                .map(|&(s, sigma)| GaussianFilter::new(s, sigma))
                .collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }
}

/// Mirror an out-of-range index back into `[0, n)` without repeating the
/// edge sample (`-1 -> 1`, `n -> n - 2`).
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

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(frame: &Frame, filter: GaussianFilter) -> Frame {
    let taps = filter.taps();
    let half = (filter.size / 2) as isize;
    let n = FRAME_SIDE;
    let src = frame.pixels();
    let size = taps.len();
    let idx: Vec<usize> = (0..n)
        .flat_map(|i| (0..size).map(move |k| reflect(i as isize + k as isize - half, n)))
        .collect();
    let h = half as usize;
    let mut padded = vec![0f64; n + 2 * h];
    let mut tmp = vec![0f64; FRAME_LEN];
    for row in 0..n {
        let line = &src[row * n..(row + 1) * n];
        for (j, p) in padded.iter_mut().enumerate() {
            *p = f64::from(line[reflect(j as isize - half, n)]);
        }
        let dst = &mut tmp[row * n..(row + 1) * n];
        for (k, t) in taps.iter().enumerate() {
            for (d, v) in dst.iter_mut().zip(&padded[k..k + n]) {
                *d += t * v;
            }
        }
    }
    let mut out = vec![0f32; FRAME_LEN];
    let mut acc = vec![0f64; n];
    for row in 0..n {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (t, &r) in taps.iter().zip(&idx[row * size..(row + 1) * size]) {
            for (a, v) in acc.iter_mut().zip(&tmp[r * n..(r + 1) * n]) {
                *a += t * v;
            }
        }
        for (o, a) in out[row * n..(row + 1) * n].iter_mut().zip(&acc) {
            *o = a.clamp(0.0, 1.0) as f32;
        }
    }
    Frame::from_pixels(out).expect("blur stays in range")
}

/// `frame` where the mask is set, `blurred` elsewhere.
pub fn perturb_frame(frame: &Frame, blurred: &Frame, mask: &SaliencyMask) -> Frame {
    let pixels = frame
        .pixels()
        .iter()
        .zip(blurred.pixels())
        .zip(mask.bits())
        .map(|((&x, &b), &keep)| if keep { x } else { b })
        .collect();
    Frame::from_pixels(pixels).expect("mixes two valid frames")
}

/// Blur the irrelevant region of every stacked frame with one filter.
pub fn perturb_state(state: &StackedState, mask: &SaliencyMask, filter: GaussianFilter) -> StackedState {
    state.map_frames(|f| perturb_frame(f, &gaussian_blur(f, filter), mask))
}

/// One perturbed copy per preset filter.
pub fn augment_state(state: &StackedState, mask: &SaliencyMask, preset: &AugmentationPreset) -> Vec<StackedState> {
    preset
        .filters
        .iter()
        .map(|&f| perturb_state(state, mask, f))
        .collect()
}

/// Mean over copies of the mean absolute per-action Q difference.
pub fn invariance_loss(q_original: &[f64], q_augmented: &[Vec<f64>]) -> Result<f64> {
    Ok(invariance_loss_grad(q_original, q_augmented)?.0)
}

/// Loss plus gradients with respect to the original and each augmented Q
/// vector. The kink at zero difference takes gradient 0.
pub fn invariance_loss_grad(q_original: &[f64], q_augmented: &[Vec<f64>]) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let actions = q_original.len();
    let g = q_augmented.len();
    let mut d_orig = vec![0.0; actions];
    if g == 0 || actions == 0 {
        return Ok((0.0, d_orig, Vec::new()));
    }
    let scale = 1.0 / (g * actions) as f64;
    let mut loss = 0.0;
    let mut d_aug = Vec::with_capacity(g);
    for q in q_augmented {
        if q.len() != actions {
            return Err(Error::LengthMismatch {
                expected: actions,
                got: q.len(),
            });
        }
        let mut d = vec![0.0; actions];
        for a in 0..actions {
            let diff = q_original[a] - q[a];
            loss += diff.abs() * scale;
            let s = if diff > 0.0 {
                scale
            } else if diff < 0.0 {
                -scale
            } else {
                0.0
            };
            d_orig[a] += s;
            d[a] = -s;
        }
        d_aug.push(d);
    }
    Ok((loss, d_orig, d_aug))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub advantage: f64,
    pub invariance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            advantage: 1.0,
            invariance: 0.1,
        }
    }
}

pub fn combined_feedback_loss(advantage: f64, invariance: f64, weights: LossWeights) -> f64 {
    weights.advantage * advantage + weights.invariance * invariance
}

pub const CROP_PAD: i32 = 4;

/// Translate by `(dx, dy)` with zero fill: output `(x, y)` reads input
/// `(x + dx, y + dy)`. Equivalent to padding by 4 and cropping the window
/// offset by `(4 + dx, 4 + dy)`.
pub fn crop_with_shift(state: &StackedState, dx: i32, dy: i32) -> StackedState {
    let n = FRAME_SIDE as i32;
    state.map_frames(|f| {
        let src = f.pixels();
        let mut out = vec![0f32; FRAME_LEN];
        for y in 0..n {
            let sy = y + dy;
            if !(0..n).contains(&sy) {
                continue;
            }
            for x in 0..n {
                let sx = x + dx;
                if (0..n).contains(&sx) {
                    out[(y * n + x) as usize] = src[(sy * n + sx) as usize];
                }
            }
        }
        Frame::from_pixels(out).expect("subset of a valid frame")
    })
}

/// Pad-4-and-crop with one shift shared by all stacked frames. Returns the shift.
pub fn random_crop<R: Rng + ?Sized>(state: &StackedState, rng: &mut R) -> (StackedState, (i32, i32)) {
    let dx = rng.random_range(-CROP_PAD..=CROP_PAD);
    let dy = rng.random_range(-CROP_PAD..=CROP_PAD);
    (crop_with_shift(state, dx, dy), (dx, dy))
}

pub const RANDOM_BLUR_SIZE: usize = 23;
pub const RANDOM_BLUR_SIGMA: (f64, f64) = (2.0, 10.0);

/// Full-frame 23x23 blur with one sigma drawn from U(2, 10). Returns the sigma.
pub fn random_blur<R: Rng + ?Sized>(state: &StackedState, rng: &mut R) -> (StackedState, f64) {
    let sigma = loop {
        let s = rng.random_range(RANDOM_BLUR_SIGMA.0..RANDOM_BLUR_SIGMA.1);
        if s > RANDOM_BLUR_SIGMA.0 {
            break s;
        }
    };
    let filter = GaussianFilter::new(RANDOM_BLUR_SIZE, sigma).expect("valid filter");
    (state.map_frames(|f| gaussian_blur(f, filter)), sigma)
}
