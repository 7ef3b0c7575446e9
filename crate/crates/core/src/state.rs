//! Raw renders to normalized 84x84 grayscale frames, and the 4-frame stack
//! the networks consume.

use std::sync::Arc;

use crate::error::{Error, Result};

pub const FRAME_SIDE: usize = 84;
pub const FRAME_LEN: usize = FRAME_SIDE * FRAME_SIDE;
pub const STACK: usize = 4;

/// ITU-R 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// An RGB image straight from an environment render, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RawFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::MalformedFrame(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::MalformedFrame(format!(
                "{width}x{height} frame needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    /// Encode as an 8-bit RGB PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            let flat: Vec<u8> = self.pixels.iter().flatten().copied().collect();
            writer
                .write_image_data(&flat)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        Ok(out)
    }
}

/// A preprocessed observation: 84x84 intensities in [0, 1], row-major.
///
/// Cloning is cheap; pixel storage is shared, so replay entries that overlap
/// in time reference the same frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Arc<[f32]>,
}

impl Frame {
    pub fn from_pixels(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != FRAME_LEN {
            return Err(Error::MalformedFrame(format!(
                "frame needs {FRAME_LEN} values, got {}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::MalformedFrame(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels: pixels.into(),
        })
    }

    pub fn zeros() -> Self {
        Self {
            pixels: vec![0.0; FRAME_LEN].into(),
        }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * FRAME_SIDE + x]
    }

    /// Flat row-major little-endian f32 bytes, as stored in checkpoints.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != FRAME_LEN * 4 {
            return Err(Error::MalformedFrame(format!(
                "expected {} bytes, got {}",
                FRAME_LEN * 4,
                bytes.len()
            )));
        }
        let pixels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_pixels(pixels)
    }

    /// Grayscale PNG of the frame, for display.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let pixels = self
            .pixels
            .iter()
            .map(|v| {
                let g = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                [g, g, g]
            })
            .collect();
        RawFrame::new(FRAME_SIDE, FRAME_SIDE, pixels)?.to_png()
    }
}

/// Averaging weights for area resampling of `src` samples onto `dst` bins.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|p| {
                    let overlap = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
                    (overlap > 0.0).then_some((p, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Grayscale via ITU-R 601 luma, area-average resize to 84x84, scale to [0, 1].
pub fn preprocess(raw: &RawFrame) -> Frame {
    let (w, h) = (raw.width, raw.height);
    let luma: Vec<f64> = raw
        .pixels
        .iter()
        .map(|p| LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64)
        .collect();
    let wx = area_weights(w, FRAME_SIDE);
    let wy = area_weights(h, FRAME_SIDE);

    // Horizontal pass then vertical pass.
    let mut rows = vec![0.0f64; h * FRAME_SIDE];
    for y in 0..h {
        for (ox, taps) in wx.iter().enumerate() {
            rows[y * FRAME_SIDE + ox] = taps.iter().map(|&(x, k)| k * luma[y * w + x]).sum();
        }
    }
    let mut pixels = vec![0.0f32; FRAME_LEN];
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..FRAME_SIDE {
            let v: f64 = taps
                .iter()
                .map(|&(y, k)| k * rows[y * FRAME_SIDE + ox])
                .sum();
            pixels[oy * FRAME_SIDE + ox] = (v / 255.0).clamp(0.0, 1.0) as f32;
        }
    }
    Frame {
        pixels: pixels.into(),
    }
}

/// The last four frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    frames: [Frame; STACK],
}

impl StackedState {
    /// Episode-start stack: the first frame repeated in every slot.
    pub fn reset(first: Frame) -> Self {
        Self {
            frames: [first.clone(), first.clone(), first.clone(), first],
        }
    }

    pub fn from_frames(frames: [Frame; STACK]) -> Self {
        Self { frames }
    }

    pub fn frames(&self) -> &[Frame; STACK] {
        &self.frames
    }

    pub fn newest(&self) -> &Frame {
        &self.frames[STACK - 1]
    }

    /// Drop the oldest frame and append `frame` last.
    pub fn push_frame(&self, frame: Frame) -> Self {
        let [_, b, c, d] = self.frames.clone();
        Self {
            frames: [b, c, d, frame],
        }
    }

    /// Copy the stack into a contiguous `[4 * 84 * 84]` buffer.
    pub fn write_into(&self, out: &mut [f32]) {
        for (slot, frame) in out.chunks_exact_mut(FRAME_LEN).zip(self.frames.iter()) {
            slot.copy_from_slice(frame.pixels());
        }
    }

    /// Apply `f` to every frame.
    pub fn map_frames(&self, mut f: impl FnMut(&Frame) -> Frame) -> Self {
        Self {
            frames: [
                f(&self.frames[0]),
                f(&self.frames[1]),
                f(&self.frames[2]),
                f(&self.frames[3]),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(rgb: [u8; 3]) -> RawFrame {
        RawFrame::filled(FRAME_SIDE, FRAME_SIDE, rgb).unwrap()
    }

    fn frame_of(v: f32) -> Frame {
        Frame::from_pixels(vec![v; FRAME_LEN]).unwrap()
    }

    #[test]
    fn black_and_white_map_to_bounds() {
        assert!(preprocess(&solid([0, 0, 0])).pixels().iter().all(|&v| v == 0.0));
        assert!(preprocess(&solid([255, 255, 255]))
            .pixels()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn single_red_pixel_uses_601_luma() {
        let mut raw = solid([0, 0, 0]);
        raw.set(10, 20, [255, 0, 0]);
        let out = preprocess(&raw);
        // scalar reference: 0.299 * 255 / 255
        let reference = (0.299 * 255.0 + 0.587 * 0.0 + 0.114 * 0.0) / 255.0;
        assert!((out.at(10, 20) as f64 - reference).abs() < 1e-6);
        assert_eq!(out.pixels().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn area_resize_averages_blocks() {
        // 168x168 checkerboard of 2x2 blocks of black/white pixels averages to 0.5
        let mut raw = RawFrame::filled(168, 168, [0, 0, 0]).unwrap();
        for y in 0..168 {
            for x in 0..168 {
                if (x + y) % 2 == 0 {
                    raw.set(x, y, [255, 255, 255]);
                }
            }
        }
        let out = preprocess(&raw);
        assert!(out.pixels().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn non_integer_scale_keeps_range() {
        let raw = RawFrame::new(
            100,
            37,
            (0..3700).map(|i| [(i % 256) as u8, 3, 200]).collect(),
        )
        .unwrap();
        let out = preprocess(&raw);
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn malformed_frames_rejected() {
        assert!(RawFrame::new(0, 5, vec![]).is_err());
        assert!(RawFrame::new(2, 2, vec![[0, 0, 0]; 3]).is_err());
        assert!(Frame::from_pixels(vec![0.0; 10]).is_err());
        assert!(Frame::from_pixels(vec![1.5; FRAME_LEN]).is_err());
    }

    #[test]
    fn push_is_fifo() {
        let [a, b, c, d, e] = [0.1, 0.2, 0.3, 0.4, 0.5].map(frame_of);
        let s = StackedState::from_frames([a, b.clone(), c.clone(), d.clone()]);
        let s = s.push_frame(e.clone());
        assert_eq!(s.frames(), &[b, c, d, e]);
    }

    #[test]
    fn reset_repeats_first_frame() {
        let x = frame_of(0.7);
        let s = StackedState::reset(x.clone());
        assert!(s.frames().iter().all(|f| *f == x));
        let y = frame_of(0.2);
        let s = (0..4).fold(s, |s, _| s.push_frame(y.clone()));
        assert!(s.frames().iter().all(|f| *f == y));
    }

    #[test]
    fn distinct_pushes_land_in_order() {
        let fs: Vec<Frame> = (1..=4).map(|i| frame_of(i as f32 / 10.0)).collect();
        let s = fs
            .iter()
            .fold(StackedState::reset(Frame::zeros()), |s, f| s.push_frame(f.clone()));
        for (i, f) in fs.iter().enumerate() {
            assert_eq!(&s.frames()[i], f);
        }
    }

    #[test]
    fn flat_bytes_round_trip() {
        let f = preprocess(&solid([12, 200, 77]));
        assert_eq!(Frame::from_le_bytes(&f.to_le_bytes()).unwrap(), f);
    }

    #[test]
    fn png_has_signature() {
        let png = solid([1, 2, 3]).to_png().unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn preprocess_stays_in_unit_range(
                (w, h, bytes) in (1usize..120, 1usize..120).prop_flat_map(|(w, h)| {
                    (Just(w), Just(h), proptest::collection::vec(any::<[u8; 3]>(), w * h))
                })
            ) {
                let out = preprocess(&RawFrame::new(w, h, bytes).unwrap());
                prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            }

            #[test]
            fn push_keeps_length_four(vals in proptest::collection::vec(0.0f32..=1.0, 1..12)) {
                let s = vals.iter().fold(StackedState::reset(Frame::zeros()), |s, &v| s.push_frame(frame_of(v)));
                prop_assert_eq!(s.frames().len(), STACK);
                prop_assert_eq!(s.newest().at(0, 0), *vals.last().unwrap());
            }
        }
    }
}
