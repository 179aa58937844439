//! Binary region masks: which pixels are dropped before the encoder sees an
//! image.
//!
//! Convention: a set bit (`true`, serialized as 1 / white) marks a missing
//! pixel, a clear bit marks context.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::resample;
use crate::tensor::{Image, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::mismatch(height * width, bits.len()));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn is_missing(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn missing_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Sets every cell of the rectangle `[top, top+h) x [left, left+w)`.
    pub fn fill_rect(&mut self, top: usize, left: usize, h: usize, w: usize) {
        for y in top..(top + h).min(self.height) {
            let row = y * self.width;
            for x in left..(left + w).min(self.width) {
                self.bits[row + x] = true;
            }
        }
    }

    /// Halves the resolution: each 2x2 block is averaged and the result is
    /// marked missing when at least half of the block was missing.
    pub fn downscale(&self) -> Result<Mask> {
        let t = self.to_tensor();
        let small = resample::downscale(&t)?;
        let bits = small.data().iter().map(|&v| v >= 0.5).collect();
        Mask::from_bits(small.height(), small.width(), bits)
    }

    /// Doubles the resolution by pixel replication.
    pub fn upscale(&self) -> Mask {
        let (h, w) = (self.height * 2, self.width * 2);
        let bits = (0..h * w)
            .map(|i| self.is_missing(i / w / 2, (i % w) / 2))
            .collect();
        Mask {
            height: h,
            width: w,
            bits,
        }
    }

    /// Single-channel tensor holding 1.0 at missing cells and 0.0 elsewhere.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(Shape::new(1, self.height, self.width), data).expect("mask tensor shape")
    }

    fn ensure_matches(&self, image: &Image) -> Result<()> {
        if image.height() != self.height || image.width() != self.width {
            return Err(Error::mismatch(
                format!("image {}x{}", self.height, self.width),
                format!("{}x{}", image.height(), image.width()),
            ));
        }
        Ok(())
    }

    /// Writes a 1-bit grayscale PNG: black is context, white is missing.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::One);
        let mut writer = encoder.write_header()?;
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_missing(y, x) {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer.write_image_data(&packed)?;
        writer.finish()?;
        Ok(())
    }

    /// Reads a grayscale PNG of any bit depth; pixels at or above half
    /// intensity are missing.
    pub fn load_png(path: &Path) -> Result<Mask> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(file);
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf)?;
        let samples = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            other => {
                return Err(Error::UnsupportedImage {
                    path: path.to_path_buf(),
                    reason: format!("mask must be grayscale, found {other:?}"),
                })
            }
        };
        let (w, h) = (info.width as usize, info.height as usize);
        // EXPAND widens low bit depths to 8 bits without rescaling values.
        let scale = match reader.info().bit_depth {
            png::BitDepth::One => 255,
            png::BitDepth::Two => 85,
            png::BitDepth::Four => 17,
            _ => 1,
        };
        let bits = (0..h * w)
            .map(|i| {
                let row = i / w;
                let v = buf[row * info.line_size + (i % w) * samples] as u32 * scale;
                v >= 128
            })
            .collect();
        Mask::from_bits(h, w, bits)
    }
}

/// Mask whose missing region is a centered square covering `fraction` of
/// the shorter side's square.
pub fn central_mask(height: usize, width: usize, fraction: f64) -> Result<Mask> {
    if height < 2 || width < 2 {
        return Err(Error::DegenerateSize(format!(
            "mask of {height}x{width} is smaller than 2x2"
        )));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::DegenerateSize(format!(
            "central fraction {fraction} outside (0, 1]"
        )));
    }
    let short = height.min(width);
    let side = (short as f64 * fraction.sqrt()).round() as usize;
    if side == 0 {
        return Err(Error::DegenerateSize(format!(
            "central square for fraction {fraction} on {height}x{width} has zero side"
        )));
    }
    let mut mask = Mask::empty(height, width);
    mask.fill_rect((height - side) / 2, (width - side) / 2, side, side);
    Ok(mask)
}

/// Parameters for the random-blocks strategy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RandomBlocks {
    /// Upper bound on the union coverage of all blocks.
    pub max_coverage: f64,
    /// Inclusive range block sides are drawn from.
    pub min_side: usize,
    pub max_side: usize,
    /// Upper bound on placement attempts.
    pub max_blocks: usize,
}

impl RandomBlocks {
    /// Quarter-coverage blocks with sides between 1/8 and 3/8 of the image.
    pub fn for_size(height: usize, width: usize) -> Self {
        let short = height.min(width);
        Self {
            max_coverage: 0.25,
            min_side: (short / 8).max(1),
            max_side: (3 * short / 8).max(1),
            max_blocks: 16,
        }
    }
}

/// Drops a number of uniformly placed, possibly overlapping rectangles.
///
/// Blocks are placed one at a time. Placement stops at the first block
/// whose addition would push the union coverage above `max_coverage`, or
/// after `max_blocks` blocks. If the very first block alone is over budget
/// it is shrunk to the largest square that fits.
pub fn random_blocks_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    params: &RandomBlocks,
    rng: &mut R,
) -> Mask {
    let mut mask = Mask::empty(height, width);
    if height == 0 || width == 0 {
        return mask;
    }
    let total = (height * width) as f64;
    let budget = (params.max_coverage.clamp(0.0, 1.0) * total).floor() as usize;
    let lo = params.min_side.clamp(1, height.min(width));
    let hi = params.max_side.clamp(lo, height.min(width));
    let mut missing = 0usize;

    for placed in 0..params.max_blocks.max(1) {
        let mut bh = rng.gen_range(lo..=hi);
        let mut bw = rng.gen_range(lo..=hi);
        if placed == 0 && bh * bw > budget {
            let side = (budget as f64).sqrt().floor() as usize;
            if side == 0 {
                break;
            }
            bh = side.min(height);
            bw = side.min(width);
        }
        let top = rng.gen_range(0..=height - bh);
        let left = rng.gen_range(0..=width - bw);

        let mut added = 0usize;
        for y in top..top + bh {
            for x in left..left + bw {
                if !mask.is_missing(y, x) {
                    added += 1;
                }
            }
        }
        if missing + added > budget {
            break;
        }
        mask.fill_rect(top, left, bh, bw);
        missing += added;
    }
    mask
}

/// How training and evaluation masks are drawn.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum MaskStrategy {
    Central { fraction: f64 },
    RandomBlocks(RandomBlocks),
}

impl MaskStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            MaskStrategy::Central { .. } => "central",
            MaskStrategy::RandomBlocks(_) => "random_blocks",
        }
    }

    /// Draws one mask; the central strategy ignores `rng`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Mask> {
        match self {
            MaskStrategy::Central { fraction } => central_mask(height, width, *fraction),
            MaskStrategy::RandomBlocks(p) => Ok(random_blocks_mask(height, width, p, rng)),
        }
    }
}

/// Bitwise negation: the context region of `mask`.
pub fn complement(mask: &Mask) -> Mask {
    Mask {
        height: mask.height,
        width: mask.width,
        bits: mask.bits.iter().map(|b| !b).collect(),
    }
}

/// Fraction of cells marked missing.
pub fn coverage(mask: &Mask) -> f64 {
    if mask.bits.is_empty() {
        return 0.0;
    }
    mask.missing_count() as f64 / mask.bits.len() as f64
}

/// Copies context pixels verbatim and replaces missing pixels with the
/// per-channel `fill` value.
pub fn apply_mask(image: &Image, mask: &Mask, fill: &[f64]) -> Result<Image> {
    mask.ensure_matches(image)?;
    if fill.len() != image.channels() {
        return Err(Error::mismatch(
            format!("{} fill channels", image.channels()),
            fill.len(),
        ));
    }
    let mut out = image.clone();
    let plane = mask.height * mask.width;
    for (c, &value) in fill.iter().enumerate() {
        let dst = &mut out.data_mut()[c * plane..(c + 1) * plane];
        for (px, &missing) in dst.iter_mut().zip(&mask.bits) {
            if missing {
                *px = value;
            }
        }
    }
    Ok(out)
}

/// `context ⊙ base + mask ⊙ patch`: keeps `base` on context pixels and takes
/// `patch` on missing pixels.
pub fn composite(base: &Image, patch: &Image, mask: &Mask) -> Result<Image> {
    mask.ensure_matches(base)?;
    patch.ensure_shape(base.shape())?;
    let mut out = base.clone();
    let plane = mask.height * mask.width;
    for c in 0..base.channels() {
        let src = &patch.data()[c * plane..(c + 1) * plane];
        let dst = &mut out.data_mut()[c * plane..(c + 1) * plane];
        for ((d, &s), &missing) in dst.iter_mut().zip(src).zip(&mask.bits) {
            if missing {
                *d = s;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones(mask: &Mask) -> Vec<(usize, usize)> {
        (0..mask.height())
            .flat_map(|y| (0..mask.width()).map(move |x| (y, x)))
            .filter(|&(y, x)| mask.is_missing(y, x))
            .collect()
    }

    #[test]
    fn central_quarter_of_4x4() {
        let m = central_mask(4, 4, 0.25).unwrap();
        assert_eq!(ones(&m), vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
    }

    #[test]
    fn central_quarter_of_128() {
        let m = central_mask(128, 128, 0.25).unwrap();
        assert_eq!(coverage(&m), 0.25);
        assert!(m.is_missing(32, 32) && m.is_missing(95, 95));
        assert!(!m.is_missing(31, 32) && !m.is_missing(96, 95));
    }

    #[test]
    fn central_full_coverage() {
        assert_eq!(central_mask(5, 5, 1.0).unwrap(), Mask::full(5, 5));
    }

    #[test]
    fn central_rejects_degenerate() {
        assert!(matches!(
            central_mask(4, 4, 0.01),
            Err(Error::DegenerateSize(_))
        ));
        assert!(central_mask(1, 4, 0.5).is_err());
        assert!(central_mask(4, 4, 0.0).is_err());
        assert!(central_mask(4, 4, 1.5).is_err());
    }

    #[test]
    fn random_blocks_respects_budget_and_seed() {
        let p = RandomBlocks {
            max_coverage: 0.25,
            min_side: 4,
            max_side: 8,
            max_blocks: 16,
        };
        let a = random_blocks_mask(32, 32, &p, &mut ChaCha8Rng::seed_from_u64(7));
        let b = random_blocks_mask(32, 32, &p, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert!(coverage(&a) <= 0.25);
        assert!(coverage(&a) > 0.0);
    }

    #[test]
    fn random_blocks_seed_sweep_never_exceeds_budget() {
        let p = RandomBlocks {
            max_coverage: 0.25,
            min_side: 4,
            max_side: 16,
            max_blocks: 16,
        };
        for seed in 0..1000u64 {
            let m = random_blocks_mask(64, 64, &p, &mut ChaCha8Rng::seed_from_u64(seed));
            // direct count, independent of the generator's bookkeeping
            let count = m.bits().iter().filter(|&&b| b).count();
            assert!(count * 4 <= 64 * 64, "seed {seed}: {count} missing");
        }
    }

    #[test]
    fn oversized_first_block_is_shrunk() {
        let p = RandomBlocks {
            max_coverage: 0.05,
            min_side: 16,
            max_side: 16,
            max_blocks: 4,
        };
        let m = random_blocks_mask(32, 32, &p, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(coverage(&m) > 0.0 && coverage(&m) <= 0.05);
    }

    #[test]
    fn complement_cases() {
        assert_eq!(complement(&Mask::empty(3, 3)), Mask::full(3, 3));
        let ring = complement(&central_mask(4, 4, 0.25).unwrap());
        assert_eq!(coverage(&ring), 0.75);
        assert!(ring.is_missing(0, 0) && !ring.is_missing(1, 1));
    }

    #[test]
    fn apply_mask_cases() {
        let img = Tensor::from_fn(Shape::new(3, 4, 4), |c, y, x| {
            0.1 * c as f64 - 0.05 * y as f64 + 0.03 * x as f64
        });
        assert_eq!(
            apply_mask(&img, &Mask::empty(4, 4), &[0.5; 3]).unwrap(),
            img
        );
        let zero = apply_mask(&img, &Mask::full(4, 4), &[0.0; 3]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            apply_mask(&img, &Mask::empty(4, 5), &[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(apply_mask(&img, &Mask::empty(4, 4), &[0.0; 2]).is_err());
    }

    #[test]
    fn mask_downscale_thresholds_at_half() {
        let m = central_mask(32, 32, 0.25).unwrap();
        assert_eq!(m.downscale().unwrap(), central_mask(16, 16, 0.25).unwrap());
        let mut odd = Mask::empty(4, 4);
        odd.fill_rect(0, 0, 1, 2); // half of the top-left block
        odd.fill_rect(2, 2, 1, 1); // a quarter of the bottom-right block
        let small = odd.downscale().unwrap();
        assert!(small.is_missing(0, 0));
        assert!(!small.is_missing(1, 1));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let p = RandomBlocks::for_size(13, 21);
        let m = random_blocks_mask(13, 21, &p, &mut ChaCha8Rng::seed_from_u64(3));
        m.save_png(&path).unwrap();
        assert_eq!(Mask::load_png(&path).unwrap(), m);
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w)
                .prop_map(move |bits| Mask::from_bits(h, w, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn complement_is_involution(m in arb_mask()) {
            prop_assert_eq!(complement(&complement(&m)), m.clone());
            prop_assert!((coverage(&m) + coverage(&complement(&m)) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn even_square_central_quarter_is_exact(half in 1usize..64) {
            let n = 2 * half;
            prop_assert_eq!(coverage(&central_mask(n, n, 0.25).unwrap()), 0.25);
        }

        #[test]
        fn apply_mask_preserves_context(m in arb_mask(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::from_fn(Shape::new(3, m.height(), m.width()), |_, _, _| {
                rng.gen_range(-1.0..1.0)
            });
            let out = apply_mask(&img, &m, &[0.25, -0.5, 0.75]).unwrap();
            for c in 0..3 {
                for y in 0..m.height() {
                    for x in 0..m.width() {
                        if !m.is_missing(y, x) {
                            prop_assert_eq!(out.get(c, y, x).to_bits(), img.get(c, y, x).to_bits());
                        }
                    }
                }
            }
        }
    }
}
