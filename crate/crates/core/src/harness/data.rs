use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::convdet::BBox;
use crate::error::{Error, Result};
use crate::loss::{GroundTruth, Object};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 5] = b"CDKI1";
pub const IMAGE_EXT: &str = "cdki";
pub const LABEL_EXT: &str = "txt";
pub const SYNTHETIC_CLASSES: [&str; 3] = ["red", "green", "blue"];

/// Encodes a `[1, c, h, w]` (or `[c, h, w]`) image.
pub fn image_to_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match image.shape() {
        &[1, c, h, w] | &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("write_image", format!("expected one 3-D image, got {s:?}"))),
    };
    let mut out = Vec::with_capacity(17 + 4 * image.len());
    out.extend_from_slice(IMAGE_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes to a `[1, c, h, w]` tensor.
pub fn image_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 17 || &bytes[..5] != IMAGE_MAGIC {
        return Err(Error::Dataset("missing CDKI1 header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let payload = &bytes[17..];
    if payload.len() != 4 * c * h * w {
        return Err(Error::Dataset(format!(
            "image {c}x{h}x{w} needs {} payload bytes, found {}",
            4 * c * h * w,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(vec![1, c, h, w], data)
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, image_to_bytes(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    image_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// `class_name left top right bottom`, one object per line.
pub fn format_labels(gts: &GroundTruth, class_names: &[String]) -> String {
    let mut out = String::new();
    for o in &gts.objects {
        let [l, t, r, b] = o.bbox.ltrb();
        let _ = writeln!(out, "{} {l} {t} {r} {b}", class_names[o.class]);
    }
    out
}

pub fn parse_labels(text: &str, class_names: &[String]) -> Result<GroundTruth> {
    let mut objects = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = |why: String| Error::Dataset(format!("label line {}: {why}", n + 1));
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", fields.len())));
        }
        let class = class_names
            .iter()
            .position(|c| c == fields[0])
            .ok_or_else(|| bad(format!("unknown class {:?}", fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| bad(format!("bad coordinate {f:?}")))?;
        }
        let bbox = BBox::from_ltrb(v[0], v[1], v[2], v[3]);
        if !bbox.is_valid() {
            return Err(bad("box needs left < right and top < bottom".into()));
        }
        objects.push(Object { bbox, class });
    }
    Ok(GroundTruth::new(objects))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[1, 3, h, w]`, values in [0, 1].
    pub image: Tensor,
    pub gts: GroundTruth,
}

const CLASS_COLORS: [[f64; 3]; 3] = [[0.9, 0.15, 0.1], [0.1, 0.85, 0.2], [0.15, 0.2, 0.95]];

/// A dark noisy background with 1-3 disjoint filled rectangles whose color
/// encodes the class.
pub fn synthetic_scene(rng: &mut impl Rng, h: usize, w: usize) -> SyntheticScene {
    let mut data: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(0.0..0.15)).collect();
    let max_side = |extent: usize| 96.min(extent).max(8);
    let min_side = |extent: usize| 24.min(extent / 2).max(4);
    let wanted = rng.random_range(1..=3);
    let mut placed: Vec<(usize, usize, usize, usize, usize)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < wanted && attempts < 200 {
        attempts += 1;
        let bw = rng.random_range(min_side(w)..=max_side(w).min(w));
        let bh = rng.random_range(min_side(h)..=max_side(h).min(h));
        let l = rng.random_range(0..=w - bw);
        let t = rng.random_range(0..=h - bh);
        let class = rng.random_range(0..3);
        let disjoint = placed
            .iter()
            .all(|&(pl, pt, pw, ph, _)| l >= pl + pw || pl >= l + bw || t >= pt + ph || pt >= t + bh);
        if disjoint {
            placed.push((l, t, bw, bh, class));
        }
    }
    let mut objects = Vec::with_capacity(placed.len());
    for &(l, t, bw, bh, class) in &placed {
        for (c, &base) in CLASS_COLORS[class].iter().enumerate() {
            for y in t..t + bh {
                for x in l..l + bw {
                    data[(c * h + y) * w + x] = (base + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                }
            }
        }
        objects.push(Object {
            bbox: BBox::from_ltrb(l as f64, t as f64, (l + bw) as f64, (t + bh) as f64),
            class,
        });
    }
    SyntheticScene {
        image: Tensor::new(vec![1, 3, h, w], data).expect("sized"),
        gts: GroundTruth::new(objects),
    }
}

pub fn synthetic_scenes(n: usize, h: usize, w: usize, seed: u64) -> Vec<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synthetic_scene(&mut rng, h, w)).collect()
}

/// One loaded image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub gts: GroundTruth,
}

pub fn sample_id(index: usize) -> String {
    format!("img_{index:05}")
}

/// Writes `img_NNNNN.cdki` / `img_NNNNN.txt` pairs.
pub fn gen_dataset(out_dir: impl AsRef<Path>, n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one image".into()));
    }
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument("images must be at least 8x8".into()));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut written = Vec::with_capacity(n);
    for (i, scene) in synthetic_scenes(n, h, w, seed).into_iter().enumerate() {
        let stem = dir.join(sample_id(i));
        let img = stem.with_extension(IMAGE_EXT);
        write_image(&img, &scene.image)?;
        let lbl = stem.with_extension(LABEL_EXT);
        fs::write(&lbl, format_labels(&scene.gts, &names)).map_err(|e| Error::io(&lbl, e))?;
        written.push(img);
    }
    Ok(written)
}

/// Loads every image in `dir` (sorted by name) with its label file.
pub fn load_dataset(dir: impl AsRef<Path>, class_names: &[String]) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut images: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == IMAGE_EXT))
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(Error::Dataset(format!("no .{IMAGE_EXT} images in {}", dir.display())));
    }
    images
        .into_iter()
        .map(|path| {
            let lbl = path.with_extension(LABEL_EXT);
            let text = fs::read_to_string(&lbl).map_err(|e| Error::io(&lbl, e))?;
            Ok(Sample {
                id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                image: read_image(&path)?,
                gts: parse_labels(&text, class_names)?,
            })
        })
        .collect()
}

/// Horizontal mirror of an image batch item and its boxes.
pub fn flip_horizontal(image: &Tensor, gts: &GroundTruth) -> Result<(Tensor, GroundTruth)> {
    let [n, c, h, w] = image.dims4()?;
    let src = image.data();
    let mut data = vec![0.0; src.len()];
    for row in 0..n * c * h {
        let base = row * w;
        for x in 0..w {
            data[base + x] = src[base + w - 1 - x];
        }
    }
    let width = w as f64;
    let objects = gts
        .objects
        .iter()
        .map(|o| Object {
            bbox: BBox::new(width - o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h),
            class: o.class,
        })
        .collect();
    Ok((Tensor::new(image.shape().to_vec(), data)?, GroundTruth::new(objects)))
}
