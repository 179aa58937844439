//! RGB image I/O, synthetic data and datasets.
//!
//! Pixels are stored normalized to `[-1, 1]` via `x / 127.5 - 1`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{stream_rng, CompensatedSum};
use crate::tensor::{Image, Shape};

pub const NORMALIZATION: &str = "x/127.5-1";

pub fn normalize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn denormalize(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Reads an 8-bit RGB PNG.
pub fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    let unsupported = |reason: String| Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason,
    };
    if info.color_type != png::ColorType::Rgb {
        return Err(unsupported(format!(
            "expected 8-bit RGB, found color type {:?}",
            info.color_type
        )));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unsupported(format!(
            "expected 8-bit RGB, found bit depth {:?}",
            info.bit_depth
        )));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let bytes = &buf[..frame.buffer_size()];
    Ok(Image::from_fn(Shape::new(3, h, w), |c, y, x| {
        normalize(bytes[(y * w + x) * 3 + c])
    }))
}

/// Writes a 3-channel image as an 8-bit RGB PNG, clamping out-of-range values.
pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::mismatch("3 channels", image.channels()));
    }
    let (h, w) = (image.height(), image.width());
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(denormalize(image.get(c, y, x)));
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

/// Places images side by side, left to right. All must share a shape.
pub fn hstack(images: &[&Image]) -> Result<Image> {
    let first = images.first().ok_or(Error::Empty("image row"))?;
    let s = first.shape();
    for im in images {
        im.ensure_shape(s)?;
    }
    Ok(Image::from_fn(
        Shape::new(s.channels, s.height, s.width * images.len()),
        |c, y, x| images[x / s.width].get(c, y, x % s.width),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

/// A shape drawn by the synthetic generator, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthShape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub half_extent: (f64, f64),
    pub color: [f64; 3],
}

impl SynthShape {
    /// `(top, left, bottom, right)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let ((cy, cx), (hy, hx)) = (self.center, self.half_extent);
        (cy - hy, cx - hx, cy + hy, cx + hx)
    }

    /// Whether the bounding box overlaps the central square of half the
    /// image side, `[size/4, 3·size/4)` in both axes.
    pub fn intersects_central_quarter(&self, size: usize) -> bool {
        let (lo, hi) = (size as f64 / 4.0, 3.0 * size as f64 / 4.0);
        let (t, l, b, r) = self.bounding_box();
        t < hi && b > lo && l < hi && r > lo
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.center.0) / self.half_extent.0;
        let dx = (x - self.center.1) / self.half_extent.1;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// One synthetic image: a linear colour gradient in a random direction,
/// overlaid with 1-4 anti-aliased rectangles or ellipses centred in the
/// central quarter.
pub fn synth_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> (Image, Vec<SynthShape>) {
    let s = size as f64;
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = theta.sin_cos();
    let start: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.9..0.9));
    let end: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.9..0.9));
    let count = rng.gen_range(1..=4);
    let shapes: Vec<SynthShape> = (0..count)
        .map(|_| SynthShape {
            kind: if rng.gen_bool(0.5) {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Ellipse
            },
            center: (
                rng.gen_range(s / 4.0..3.0 * s / 4.0),
                rng.gen_range(s / 4.0..3.0 * s / 4.0),
            ),
            half_extent: (
                rng.gen_range(s / 4.0..s / 2.5),
                rng.gen_range(s / 4.0..s / 2.5),
            ),
            color: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
        })
        .collect();

    let half_diag = s * std::f64::consts::FRAC_1_SQRT_2;
    let mut img = Image::zeros(Shape::new(3, size, size));
    let sub = 1.0 / SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = 0.5 + 0.5 * ((py - s / 2.0) * dy + (px - s / 2.0) * dx) / half_diag;
            let mut rgb: [f64; 3] = std::array::from_fn(|c| start[c] + (end[c] - start[c]) * t);
            for shape in &shapes {
                let mut hits = 0;
                for i in 0..SUPERSAMPLE {
                    for j in 0..SUPERSAMPLE {
                        let sy = y as f64 + (i as f64 + 0.5) * sub;
                        let sx = x as f64 + (j as f64 + 0.5) * sub;
                        hits += shape.contains(sy, sx) as usize;
                    }
                }
                let alpha = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    rgb[c] += alpha * (shape.color[c] - rgb[c]);
                }
            }
            for c in 0..3 {
                img.set(c, y, x, rgb[c]);
            }
        }
    }
    (img, shapes)
}

/// Generator stream for image `index` of a dataset with the given seed.
pub fn synth_rng(seed: u64, index: usize) -> ChaCha8Rng {
    stream_rng(seed, index as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Disjoint train and validation images plus the seed governing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub seed: u64,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Moves the last `count` training samples to the validation split.
    pub fn holdout(mut self, count: usize) -> Result<Self> {
        if count > self.train.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot hold out {count} of {} images",
                self.train.len()
            )));
        }
        let moved = self.train.split_off(self.train.len() - count);
        self.val.splice(0..0, moved);
        Ok(self)
    }

    /// Common image shape, if the dataset is non-empty.
    pub fn shape(&self) -> Option<Shape> {
        self.train
            .iter()
            .chain(&self.val)
            .next()
            .map(|s| s.image.shape())
    }

    /// Sample indices of a split in a pseudo-random order determined by
    /// `(seed, split, epoch)`.
    pub fn order(&self, split: Split, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.split(split).len()).collect();
        let mut rng = stream_rng(self.seed, ((split as u64) << 32) | epoch as u64);
        idx.shuffle(&mut rng);
        idx
    }
}

/// `count` synthetic `size × size` images, all in the training split.
pub fn synth_dataset(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Empty("synthetic dataset"));
    }
    if size < 2 || !size.is_multiple_of(2) {
        return Err(Error::OddDimension {
            height: size,
            width: size,
        });
    }
    let train = (0..count)
        .into_par_iter()
        .map(|i| Sample {
            id: format!("{i:05}"),
            image: synth_image(size, &mut synth_rng(seed, i)).0,
        })
        .collect();
    Ok(Dataset {
        train,
        val: Vec::new(),
        seed,
    })
}

/// Per-channel mean over every training pixel.
pub fn dataset_mean_color(dataset: &Dataset) -> Result<Vec<f64>> {
    let first = dataset
        .train
        .first()
        .ok_or(Error::Empty("training split"))?;
    let channels = first.image.channels();
    let mut sums = vec![CompensatedSum::default(); channels];
    let mut pixels = 0usize;
    for s in &dataset.train {
        if s.image.channels() != channels {
            return Err(Error::mismatch(
                format!("{channels} channels"),
                s.image.channels(),
            ));
        }
        for (c, sum) in sums.iter_mut().enumerate() {
            sum.extend(s.image.channel(c).iter().copied());
        }
        pixels += s.image.height() * s.image.width();
    }
    Ok(sums.iter().map(|s| s.total() / pixels as f64).collect())
}

/// Index written as `manifest.json` next to the `train/` and `val/` folders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub normalization: String,
    pub height: usize,
    pub width: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<DatasetManifest> {
    let shape = dataset.shape().ok_or(Error::Empty("dataset"))?;
    let mut manifest = DatasetManifest {
        seed: dataset.seed,
        normalization: NORMALIZATION.into(),
        height: shape.height,
        width: shape.width,
        train: Vec::new(),
        val: Vec::new(),
    };
    for split in [Split::Train, Split::Val] {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let names: Vec<String> = dataset
            .split(split)
            .iter()
            .map(|s| format!("{}/{}.png", split.name(), s.id))
            .collect();
        dataset
            .split(split)
            .par_iter()
            .zip(&names)
            .try_for_each(|(s, name)| save_png(&s.image, &dir.join(name)))?;
        match split {
            Split::Train => manifest.train = names,
            Split::Val => manifest.val = names,
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.normalization != NORMALIZATION {
        return Err(Error::corrupt(
            "dataset manifest",
            format!("unsupported normalization {:?}", manifest.normalization),
        ));
    }
    let load = |names: &[String]| -> Result<Vec<Sample>> {
        names
            .par_iter()
            .map(|name| {
                let image = load_png(&dir.join(name))?;
                if image.height() != manifest.height || image.width() != manifest.width {
                    return Err(Error::mismatch(
                        format!("{}x{}", manifest.height, manifest.width),
                        format!("{}x{} in {name}", image.height(), image.width()),
                    ));
                }
                let id = PathBuf::from(name)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| name.clone());
                Ok(Sample { id, image })
            })
            .collect()
    };
    Ok(Dataset {
        train: load(&manifest.train)?,
        val: load(&manifest.val)?,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, color: png::ColorType, w: u32, h: u32, data: &[u8]) {
        let mut enc = png::Encoder::new(BufWriter::new(File::create(path).unwrap()), w, h);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(data).unwrap();
    }

    #[test]
    fn black_and_white_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_raw(&p, png::ColorType::Rgb, 2, 1, &[0, 0, 0, 255, 255, 255]);
        let im = load_png(&p).unwrap();
        assert_eq!(im.shape(), Shape::new(3, 1, 2));
        for c in 0..3 {
            assert_eq!(im.get(c, 0, 0), -1.0);
            assert_eq!(im.get(c, 0, 1), 1.0);
        }
    }

    #[test]
    fn non_rgb_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        write_raw(&p, png::ColorType::Grayscale, 2, 2, &[0, 1, 2, 3]);
        let err = load_png(&p).unwrap_err();
        assert!(matches!(err, Error::UnsupportedImage { .. }));
        assert!(err.to_string().contains("RGB"), "{err}");
    }

    #[test]
    fn png_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let im = synth_image(12, &mut synth_rng(3, 0)).0;
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        save_png(&im, &a).unwrap();
        let once = load_png(&a).unwrap();
        save_png(&once, &b).unwrap();
        assert_eq!(load_png(&b).unwrap(), once);
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn every_byte_survives_normalization() {
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v)), v);
        }
        assert_eq!(denormalize(7.0), 255);
        assert_eq!(denormalize(-3.0), 0);
    }

    #[test]
    fn synth_is_deterministic_and_in_range() {
        let a = synth_dataset(20, 16, 9).unwrap();
        assert_eq!(a, synth_dataset(20, 16, 9).unwrap());
        assert_ne!(a, synth_dataset(20, 16, 10).unwrap());
        for s in &a.train {
            let (lo, hi) = s.image.min_max();
            assert!(lo >= -1.0 && hi <= 1.0);
        }
        assert!(synth_dataset(2, 15, 0).is_err());
        assert!(synth_dataset(0, 16, 0).is_err());
    }

    #[test]
    fn synth_moments_and_shape_audit() {
        let size = 32;
        let mut total = CompensatedSum::default();
        for i in 0..1000 {
            let (im, shapes) = synth_image(size, &mut synth_rng(1, i));
            assert!((1..=4).contains(&shapes.len()));
            assert!(shapes.iter().any(|s| s.intersects_central_quarter(size)));
            total.extend(im.data().iter().copied());
        }
        let mean = total.total() / (1000 * 3 * size * size) as f64;
        assert!(mean.abs() <= 0.2, "mean {mean}");
    }

    #[test]
    fn mean_color_cases() {
        let zeros = Dataset {
            train: vec![Sample {
                id: "0".into(),
                image: Image::zeros(Shape::new(3, 2, 2)),
            }],
            val: vec![],
            seed: 0,
        };
        assert_eq!(dataset_mean_color(&zeros).unwrap(), vec![0.0; 3]);
        let mut half = zeros.clone();
        half.train[0].image = Image::from_fn(
            Shape::new(3, 2, 2),
            |_, y, _| if y == 0 { -1.0 } else { 1.0 },
        );
        assert_eq!(dataset_mean_color(&half).unwrap(), vec![0.0; 3]);
        assert!(dataset_mean_color(&Dataset {
            train: vec![],
            val: vec![],
            seed: 0
        })
        .is_err());
    }

    #[test]
    fn mean_color_matches_single_pass_reference() {
        let ds = synth_dataset(1000, 32, 1).unwrap();
        let got = dataset_mean_color(&ds).unwrap();
        for c in 0..3 {
            let mut sum = 0.0;
            let mut n = 0usize;
            for s in &ds.train {
                for y in 0..32 {
                    for x in 0..32 {
                        sum += s.image.get(c, y, x);
                        n += 1;
                    }
                }
            }
            assert!((got[c] - sum / n as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn holdout_and_order() {
        let ds = synth_dataset(10, 8, 4).unwrap().holdout(3).unwrap();
        assert_eq!((ds.train.len(), ds.val.len()), (7, 3));
        assert_eq!(ds.val[0].id, "00007");
        let o = ds.order(Split::Train, 0);
        assert_eq!(o, ds.order(Split::Train, 0));
        assert_ne!(o, ds.order(Split::Train, 1));
        let mut sorted = o.clone();
        sorted.sort();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
        assert!(ds.clone().holdout(8).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(6, 8, 2).unwrap().holdout(2).unwrap();
        let m = write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(m.train.len(), 4);
        assert!(dir.path().join("val/00004.png").exists());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.seed, 2);
        assert_eq!(back.train.len(), 4);
        assert_eq!(back.val[1].id, "00005");
        for (a, b) in back.train.iter().zip(&ds.train) {
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 1.0 / 127.5);
            }
        }
    }

    #[test]
    fn hstack_places_columns() {
        let a = Image::filled(Shape::new(3, 2, 2), 0.5);
        let b = Image::filled(Shape::new(3, 2, 2), -0.5);
        let s = hstack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(3, 2, 4));
        assert_eq!(s.get(1, 1, 1), 0.5);
        assert_eq!(s.get(1, 1, 2), -0.5);
    }
}
