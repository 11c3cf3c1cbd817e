//! Images, manifests and the synthetic pose-jittered dataset.
//!
//! Images are binary PPM (`P6`, 8-bit RGB). A manifest is a CSV file with the
//! header `path,class_id,split`; relative paths resolve against the directory
//! holding the manifest.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `1 × 3 × h × w` tensor of `(v/255 − mean_c) / std_c`.
    pub fn to_tensor(&self, mean: [f32; 3], std: [f32; 3]) -> Tensor4 {
        let plane = self.width * self.height;
        let mut data = vec![0f32; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = (px[c] as f32 / 255.0 - mean[c]) / std[c];
            }
        }
        Tensor4::from_vec([1, 3, self.height, self.width], data).expect("non-empty image")
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let mut tokens = Vec::with_capacity(4);
        // Header tokens are separated by whitespace; `#` starts a comment.
        // The single whitespace byte after maxval is consumed with it.
        while tokens.len() < 4 {
            let mut tok = Vec::new();
            loop {
                let mut b = [0u8; 1];
                if reader.read(&mut b)? == 0 {
                    return Err(Error::Decode("truncated PPM header".into()));
                }
                match b[0] {
                    b'#' if tok.is_empty() => {
                        let mut skip = Vec::new();
                        reader.read_until(b'\n', &mut skip)?;
                    }
                    c if c.is_ascii_whitespace() => {
                        if !tok.is_empty() {
                            break;
                        }
                    }
                    c => tok.push(c),
                }
            }
            tokens.push(String::from_utf8_lossy(&tok).into_owned());
        }
        if tokens[0] != "P6" {
            return Err(Error::Decode(format!("expected P6 magic, found {:?}", tokens[0])));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::Decode(format!("bad PPM {what} {s:?}")))
        };
        let (width, height, maxval) = (num(&tokens[1], "width")?, num(&tokens[2], "height")?, num(&tokens[3], "maxval")?);
        if width == 0 || height == 0 {
            return Err(Error::Decode(format!("empty PPM {width}x{height}")));
        }
        if maxval != 255 {
            return Err(Error::Decode(format!("only 8-bit PPM is supported, maxval {maxval}")));
        }
        let len = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| Error::Decode("PPM dimensions overflow".into()))?;
        let mut pixels = vec![0u8; len];
        reader
            .read_exact(&mut pixels)
            .map_err(|_| Error::Decode(format!("PPM payload shorter than {len} bytes")))?;
        Ok(Self { width, height, pixels })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::decode_ppm(&bytes).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode_ppm())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}, expected train or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// As written in the manifest.
    pub path: String,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
}

impl Manifest {
    /// Checks dense class ids and returns the manifest. `num_classes` is one
    /// past the largest id.
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("manifest has no entries".into()));
        }
        let num_classes = entries.iter().map(|e| e.class_id).max().unwrap_or(0) + 1;
        let mut seen = vec![false; num_classes];
        entries.iter().for_each(|e| seen[e.class_id] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!(
                "class ids must be dense in [0, {num_classes}); class {missing} has no images"
            )));
        }
        Ok(Self {
            root,
            entries,
            num_classes,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        if header != ["path", "class_id", "split"] {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header path,class_id,split, found {}", header.join(",")),
            });
        }
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let err = |message: String| Error::Parse { line, message };
            if record.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", record.len())));
            }
            let class_id = record[1]
                .parse::<usize>()
                .map_err(|_| err(format!("bad class id {:?}", &record[1])))?;
            let split = record[2].parse::<Split>().map_err(|e| err(e.to_string()))?;
            if record[0].is_empty() {
                return Err(err("empty path".into()));
            }
            entries.push(ManifestEntry {
                path: record[0].to_owned(),
                class_id,
                split,
            });
        }
        Self::new(root, entries)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "class_id", "split"])?;
        for e in &self.entries {
            w.write_record([e.path.as_str(), &e.class_id.to_string(), &e.split.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Decoded, normalized images of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor4>,
    pub labels: Vec<usize>,
    /// Identifier per image (the manifest path).
    pub names: Vec<String>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor4>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidInput(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {num_classes} classes")));
        }
        let names = (0..images.len()).map(|i| format!("#{i}")).collect();
        Ok(Self {
            images,
            labels,
            names,
            num_classes,
        })
    }

    pub fn load(manifest: &Manifest, split: Split, mean: [f32; 3], std: [f32; 3]) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut names = Vec::new();
        let mut size = None;
        for e in manifest.split(split) {
            let img = RgbImage::read(manifest.resolve(e))?;
            let dims = (img.width, img.height);
            if *size.get_or_insert(dims) != dims {
                return Err(Error::InvalidInput(format!(
                    "{} is {}x{}, other images are {}x{}",
                    e.path,
                    dims.0,
                    dims.1,
                    size.unwrap().0,
                    size.unwrap().1
                )));
            }
            images.push(img.to_tensor(mean, std));
            labels.push(e.class_id);
            names.push(e.path.clone());
        }
        if images.is_empty() {
            return Err(Error::InvalidInput(format!("split {split} is empty")));
        }
        Ok(Self {
            images,
            labels,
            names,
            num_classes: manifest.num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of the images labelled `class`.
    pub fn of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Parameters of the synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Maximum per-part displacement in pixels along each axis.
    pub pose_jitter: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            train_per_class: 20,
            test_per_class: 10,
            image_size: 64,
            pose_jitter: 16,
            seed: 0,
        }
    }
}

const BACKGROUND: [u8; 3] = [24, 24, 24];
/// Part layout relative to the image center, as fractions of the image size.
const TEMPLATE: [(f64, f64); 3] = [(-0.17, -0.17), (-0.17, 0.17), (0.19, 0.0)];
const GLOBAL_SHIFT: f64 = 0.06;

fn hue_rgb(i: usize, n: usize) -> [u8; 3] {
    let h = 6.0 * i as f64 / n as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let q = |v: f64| (40.0 + 215.0 * v).round() as u8;
    [q(r), q(g), q(b)]
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} is too small (minimum 16)", self.image_size)));
        }
        Ok(())
    }

    pub fn blob_radius(&self) -> f64 {
        (self.image_size as f64 * 0.08).max(2.0)
    }

    /// Colors of the three parts of `class`: consecutive classes share one
    /// color, so no single part identifies a class on its own for every pair.
    pub fn class_colors(&self, class: usize) -> [[u8; 3]; 3] {
        let n = (2 * self.num_classes + 1).max(8);
        [0, 1, 2].map(|j| hue_rgb((2 * class + j) % n, n))
    }

    /// Renders one sample. Part centers are the template plus a global
    /// translation plus independent per-part jitter, clamped so every blob
    /// stays fully inside the image.
    pub fn render<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> RgbImage {
        let s = self.image_size as f64;
        let r = self.blob_radius();
        let mut img = RgbImage::filled(self.image_size, self.image_size, BACKGROUND);
        // whole-pixel displacements keep every sample rasterized identically
        let shift = (GLOBAL_SHIFT * s).round() as i64;
        let (gy, gx) = (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift));
        let j = self.pose_jitter as i64;
        let colors = self.class_colors(class);
        for (&(ty, tx), color) in TEMPLATE.iter().zip(colors) {
            let (jy, jx) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
            let cy = ((s / 2.0 + ty * s).round() + (gy + jy) as f64).clamp(r.ceil(), s - 1.0 - r.ceil());
            let cx = ((s / 2.0 + tx * s).round() + (gx + jx) as f64).clamp(r.ceil(), s - 1.0 - r.ceil());
            for row in 0..self.image_size {
                for col in 0..self.image_size {
                    let (dy, dx) = (row as f64 - cy, col as f64 - cx);
                    if dy * dy + dx * dx <= r * r {
                        img.put(row, col, color);
                    }
                }
            }
        }
        img
    }
}

/// Writes the synthetic dataset under `out_dir` (`train/`, `test/`,
/// `manifest.csv`) and returns its manifest.
pub fn gen_data(out_dir: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<Manifest> {
    spec.validate()?;
    let out = out_dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        if per_class == 0 {
            continue;
        }
        fs::create_dir_all(out.join(split.to_string()))?;
        for class in 0..spec.num_classes {
            for i in 0..per_class {
                let rel = format!("{split}/c{class}_{i:03}.ppm");
                spec.render(class, &mut rng).write(out.join(&rel))?;
                entries.push(ManifestEntry {
                    path: rel,
                    class_id: class,
                    split,
                });
            }
        }
    }
    let manifest = Manifest::new(out.to_path_buf(), entries)?;
    fs::write(out.join("manifest.csv"), manifest.to_csv()?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_and_comments() {
        let mut img = RgbImage::filled(3, 2, [1, 2, 3]);
        img.put(1, 2, [250, 0, 9]);
        assert_eq!(RgbImage::decode_ppm(&img.encode_ppm()).unwrap(), img);
        let mut bytes = b"P6 # comment\n3 2\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&img.pixels);
        assert_eq!(RgbImage::decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_decode_errors() {
        assert!(RgbImage::decode_ppm(b"").is_err());
        assert!(RgbImage::decode_ppm(b"P3\n1 1\n255\n000").is_err());
        assert!(RgbImage::decode_ppm(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(RgbImage::decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00").is_err());
    }

    #[test]
    fn tensor_normalization() {
        let img = RgbImage::filled(1, 1, [255, 0, 51]);
        let t = img.to_tensor([0.5, 0.0, 0.0], [0.5, 1.0, 2.0]);
        assert_eq!(t.dims(), [1, 3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.1]);
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let text = "path,class_id,split\na.ppm,0,train\nb.ppm,1,test\n";
        let m = Manifest::parse(text, PathBuf::from("/data")).unwrap();
        assert_eq!(m.num_classes, 2);
        assert_eq!(m.resolve(&m.entries[0]), PathBuf::from("/data/a.ppm"));
        assert_eq!(Manifest::parse(&m.to_csv().unwrap(), PathBuf::from("/data")).unwrap(), m);

        let bad_split = Manifest::parse("path,class_id,split\na.ppm,0,val\n", PathBuf::new()).unwrap_err();
        assert!(matches!(bad_split, Error::Parse { line: 2, .. }), "{bad_split}");
        assert!(Manifest::parse("path,label,split\na.ppm,0,train\n", PathBuf::new()).is_err());
        assert!(Manifest::parse("path,class_id,split\na.ppm,1,train\n", PathBuf::new()).is_err());
    }

    #[test]
    fn zero_jitter_samples_differ_only_by_translation() {
        let spec = SyntheticSpec {
            pose_jitter: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs: Vec<RgbImage> = (0..6).map(|_| spec.render(1, &mut rng)).collect();
        let fg = |img: &RgbImage| -> Vec<(isize, isize, [u8; 3])> {
            let mut v = Vec::new();
            for r in 0..img.height {
                for c in 0..img.width {
                    if img.get(r, c) != BACKGROUND {
                        v.push((r as isize, c as isize, img.get(r, c)));
                    }
                }
            }
            v
        };
        let base = fg(&imgs[0]);
        for img in &imgs[1..] {
            let other = fg(img);
            assert_eq!(other.len(), base.len());
            let (dr, dc) = (other[0].0 - base[0].0, other[0].1 - base[0].1);
            for (a, b) in base.iter().zip(&other) {
                assert_eq!((a.0 + dr, a.1 + dc, a.2), *b);
            }
        }
    }

    #[test]
    fn class_palettes_overlap_only_between_neighbours() {
        let spec = SyntheticSpec::default();
        let c: Vec<[[u8; 3]; 3]> = (0..3).map(|k| spec.class_colors(k)).collect();
        assert_eq!(c[0][2], c[1][0]);
        assert_eq!(c[1][2], c[2][0]);
        assert!(c[0].iter().all(|x| !c[2].contains(x)));
    }
}
