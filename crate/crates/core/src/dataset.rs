//! Folder-per-class datasets of binary PPM images.
//!
//! Layout: `<root>/<label>/<name>.ppm`, one directory per class label.
//! Files are sorted bytewise by name; the last `validation_images` of each
//! class form the validation split.

use std::ffi::OsStr;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ClassMap;
use crate::error::DatasetError;
use crate::forward::ResizePlan;

/// A decoded 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), width * height * 3);
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Centre crop to a square of the shorter side.
    pub fn center_crop_square(&self) -> RgbImage {
        let side = self.width.min(self.height);
        if self.width == self.height {
            return self.clone();
        }
        let x0 = (self.width - side) / 2;
        let y0 = (self.height - side) / 2;
        let mut pixels = Vec::with_capacity(side * side * 3);
        for y in y0..y0 + side {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + side * 3]);
        }
        RgbImage::new(side, side, pixels)
    }
}

/// Decodes a binary PPM (`P6`, maxval 255). `#` comments are allowed in
/// the header.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage, DatasetError> {
    let malformed = |reason: &str| DatasetError::MalformedPpm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(malformed("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(malformed("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed("zero image dimension"));
    }
    if maxval != 255 {
        return Err(DatasetError::UnsupportedMaxval {
            path: path.to_path_buf(),
            maxval,
        });
    }
    let (width, height) = (width as usize, height as usize);
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| malformed("image too large"))?;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: data.len(),
        });
    }
    Ok(RgbImage::new(width, height, data[..expected].to_vec()))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_ppm(img))?;
    f.flush()
}

/// Decodes, centre-crops and resizes an image into the network input.
///
/// A plan is reused when its source side matches the cropped image;
/// otherwise one is built for this image's size.
pub fn load_image(path: &Path, plan: &ResizePlan, out: &mut [f32]) -> Result<(), DatasetError> {
    let img = read_ppm(path)?.center_crop_square();
    if img.width == plan.source_side() {
        plan.resize_normalize(&img.pixels, out)
    } else {
        ResizePlan::new(plan.input_size(), img.width)?.resize_normalize(&img.pixels, out)
    }
}

pub fn load_image_vec(path: &Path, plan: &ResizePlan) -> Result<Vec<f32>, DatasetError> {
    let n = plan.input_size();
    let mut out = vec![0.0; n * n * 3];
    load_image(path, plan, &mut out)?;
    Ok(out)
}

/// One image with its class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassFiles {
    pub label: String,
    pub train: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<ClassFiles>,
    pub validation_images: usize,
}

fn is_ppm(name: &OsStr) -> bool {
    let bytes = name.as_encoded_bytes();
    !bytes.starts_with(b".")
        && Path::new(name)
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Splits a bytewise-sorted file list into (train, validation).
pub fn split_tail<T: Clone>(files: &[T], validation_images: usize) -> (Vec<T>, Vec<T>) {
    let cut = files.len().saturating_sub(validation_images);
    (files[..cut].to_vec(), files[cut..].to_vec())
}

impl DatasetIndex {
    /// Indexes `root` for the classes of `class_map`, in label order.
    pub fn scan(
        root: &Path,
        class_map: &ClassMap,
        validation_images: usize,
    ) -> Result<Self, DatasetError> {
        let mut classes = Vec::with_capacity(class_map.len());
        for label in class_map.labels() {
            let dir = root.join(label);
            if !dir.is_dir() {
                return Err(DatasetError::MissingClass(dir));
            }
            let io_err = |source| DatasetError::Io {
                path: dir.clone(),
                source,
            };
            let mut files = Vec::new();
            for entry in fs::read_dir(&dir).map_err(io_err)? {
                let entry = entry.map_err(io_err)?;
                if entry.file_type().map_err(io_err)?.is_file() && is_ppm(&entry.file_name()) {
                    files.push(entry.path());
                }
            }
            files.sort_by(|a, b| {
                let a = a.file_name().unwrap_or_default().as_encoded_bytes();
                let b = b.file_name().unwrap_or_default().as_encoded_bytes();
                a.cmp(b)
            });
            if files.len() < validation_images + 1 {
                return Err(DatasetError::ClassTooSmall {
                    label: label.clone(),
                    found: files.len(),
                    needed: validation_images + 1,
                    validation: validation_images,
                });
            }
            let (train, validation) = split_tail(&files, validation_images);
            classes.push(ClassFiles {
                label: label.clone(),
                train,
                validation,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            classes,
            validation_images,
        })
    }

    /// Samples of a split in index order: class by class, files in sorted
    /// order.
    pub fn samples(&self, split: Split) -> Vec<Sample> {
        let mut out = Vec::new();
        for (class, files) in self.classes.iter().enumerate() {
            let lists: &[&Vec<PathBuf>] = match split {
                Split::Train => &[&files.train],
                Split::Validation => &[&files.validation],
                Split::All => &[&files.train, &files.validation],
            };
            for list in lists {
                out.extend(list.iter().map(|p| Sample {
                    path: p.clone(),
                    class,
                }));
            }
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Recipe for a synthetic solid-colour dataset: each class is a flat field
/// of one colour with independent per-channel noise of up to
/// `noise * 255` added to every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub side: usize,
    pub per_class: usize,
    pub noise: f32,
    pub colors: Vec<[u8; 3]>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(num_classes: usize) -> Self {
        const PALETTE: [[u8; 3]; 8] = [
            [200, 40, 40],
            [40, 200, 40],
            [40, 40, 200],
            [200, 200, 40],
            [200, 40, 200],
            [40, 200, 200],
            [230, 230, 230],
            [25, 25, 25],
        ];
        Self {
            side: 240,
            per_class: 30,
            noise: 0.1,
            colors: (0..num_classes)
                .map(|i| PALETTE[i % PALETTE.len()])
                .collect(),
            seed: 42,
        }
    }

    pub fn image(&self, class: usize, rng: &mut impl Rng) -> RgbImage {
        let base = self.colors[class];
        let amp = self.noise * 255.0;
        let mut pixels = Vec::with_capacity(self.side * self.side * 3);
        for _ in 0..self.side * self.side {
            for &b in &base {
                let v = b as f32 + rng.gen_range(-amp..=amp);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        RgbImage::new(self.side, self.side, pixels)
    }

    /// Writes `<root>/<label>/img_NNN.ppm` for every class.
    pub fn write(&self, root: &Path, classes: &ClassMap) -> io::Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for (class, label) in classes.labels().iter().enumerate() {
            let dir = root.join(label);
            fs::create_dir_all(&dir)?;
            for i in 0..self.per_class {
                let img = self.image(class, &mut rng);
                write_ppm(&dir.join(format!("img_{i:03}.ppm")), &img)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch_class(root: &Path, label: &str, names: &[&str]) {
        let dir = root.join(label);
        fs::create_dir_all(&dir).unwrap();
        let img = RgbImage::new(2, 2, vec![0; 12]);
        for n in names {
            write_ppm(&dir.join(n), &img).unwrap();
        }
    }

    #[test]
    fn split_examples() {
        let files = ["a", "b", "c", "d", "e"];
        let (t, v) = split_tail(&files, 3);
        assert_eq!((t, v), (vec!["a", "b"], vec!["c", "d", "e"]));
        let (t, v) = split_tail(&files, 0);
        assert_eq!(t.len(), 5);
        assert!(v.is_empty());
    }

    #[test]
    fn scan_sorts_bytewise_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let classes = ClassMap::new(["A", "B"]).unwrap();
        touch_class(
            dir.path(),
            "A",
            &["e.ppm", "b.ppm", "a.ppm", "d.ppm", "c.ppm"],
        );
        touch_class(
            dir.path(),
            "B",
            &["Z.ppm", "a.ppm", "_.ppm", "10.ppm", "9.ppm"],
        );
        fs::write(dir.path().join("A").join("notes.txt"), "x").unwrap();
        let idx = DatasetIndex::scan(dir.path(), &classes, 3).unwrap();
        let names = |v: &[PathBuf]| -> Vec<String> {
            v.iter()
                .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
                .collect()
        };
        assert_eq!(names(&idx.classes[0].train), ["a.ppm", "b.ppm"]);
        assert_eq!(
            names(&idx.classes[0].validation),
            ["c.ppm", "d.ppm", "e.ppm"]
        );
        // bytewise: digits < uppercase < underscore < lowercase
        assert_eq!(names(&idx.classes[1].train), ["10.ppm", "9.ppm"]);
        assert_eq!(
            names(&idx.classes[1].validation),
            ["Z.ppm", "_.ppm", "a.ppm"]
        );
        assert_eq!(idx, DatasetIndex::scan(dir.path(), &classes, 3).unwrap());

        let samples = idx.samples(Split::Train);
        assert_eq!(samples.len(), 4);
        assert_eq!(samples[2].class, 1);
        assert_eq!(idx.samples(Split::All).len(), 10);
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        let classes = ClassMap::new(["A", "B"]).unwrap();
        touch_class(dir.path(), "A", &["1.ppm", "2.ppm", "3.ppm"]);
        assert!(matches!(
            DatasetIndex::scan(dir.path(), &classes, 0),
            Err(DatasetError::MissingClass(_))
        ));
        touch_class(dir.path(), "B", &["1.ppm", "2.ppm", "3.ppm", "4.ppm"]);
        assert!(matches!(
            DatasetIndex::scan(dir.path(), &classes, 3),
            Err(DatasetError::ClassTooSmall { found: 3, .. })
        ));
        assert!(DatasetIndex::scan(dir.path(), &classes, 2).is_ok());
    }

    #[test]
    fn ppm_decode_and_errors() {
        let p = Path::new("x.ppm");
        let img = decode_ppm(b"P6\n# a comment\n2 1\n255\n\x01\x02\x03\x04\x05\x06", p).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, [1, 2, 3, 4, 5, 6]);
        assert_eq!(decode_ppm(&encode_ppm(&img), p).unwrap(), img);

        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n000", p),
            Err(DatasetError::MalformedPpm { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n000000", p),
            Err(DatasetError::UnsupportedMaxval { maxval: 65535, .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n2 2\n255\n\x00\x00", p),
            Err(DatasetError::Truncated {
                expected: 12,
                actual: 2,
                ..
            })
        ));
        assert!(decode_ppm(b"P6 2", p).is_err());
    }

    #[test]
    fn center_crop_columns() {
        let (w, h) = (320, 240);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for _y in 0..h {
            for x in 0..w {
                pixels.extend_from_slice(&[(x % 256) as u8, (x / 256) as u8, 0]);
            }
        }
        let crop = RgbImage::new(w, h, pixels).center_crop_square();
        assert_eq!((crop.width, crop.height), (240, 240));
        let col = |px: &[u8]| px[0] as usize + 256 * px[1] as usize;
        assert_eq!(col(&crop.pixels[0..3]), 40);
        assert_eq!(col(&crop.pixels[239 * 3..240 * 3]), 279);
    }

    #[test]
    fn load_image_black_and_identity() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("black.ppm");
        write_ppm(&black, &RgbImage::new(240, 240, vec![0; 240 * 240 * 3])).unwrap();
        let plan = ResizePlan::new(64, 240).unwrap();
        assert!(load_image_vec(&black, &plan)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let pixels: Vec<u8> = (0..64 * 64 * 3).map(|i| (i % 251) as u8).collect();
        let small = dir.path().join("small.ppm");
        write_ppm(&small, &RgbImage::new(64, 64, pixels.clone())).unwrap();
        let out = load_image_vec(&small, &plan).unwrap();
        for (o, p) in out.iter().zip(&pixels) {
            assert_eq!(*o, *p as f32 * crate::config::PIXEL_SCALE);
        }
    }
}
