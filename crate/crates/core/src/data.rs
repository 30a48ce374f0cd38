//! Synthetic multi-scale shape scenes and their on-disk layout.
//!
//! A dataset directory holds `images.bin` (a weight container with one
//! `image.<id>` record of shape 3×H×W per image, values in [0, 1]) and
//! `annotations.txt` (line-oriented, see `docs/formats.md`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mask::BinaryMask;
use crate::tensor::serialize::{self, Record};

pub const IMAGES_FILE: &str = "images.bin";
pub const ANNOTATIONS_FILE: &str = "annotations.txt";
const HEADER: &str = "# fpn synthetic shapes v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapeClass {
    Square,
    Circle,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Square, ShapeClass::Circle, ShapeClass::Triangle];

    /// Detector label; 0 is background.
    pub fn label(self) -> usize {
        match self {
            ShapeClass::Square => 1,
            ShapeClass::Circle => 2,
            ShapeClass::Triangle => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Square => "square",
            ShapeClass::Circle => "circle",
            ShapeClass::Triangle => "triangle",
        }
    }

    fn contains(self, cx: f64, cy: f64, s: f64, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let r = s / 2.0;
        match self {
            ShapeClass::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeClass::Circle => dx * dx + dy * dy <= r * r,
            // apex up, base at the bottom of the s×s square
            ShapeClass::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| Error::Format {
            what: "annotation",
            reason: format!("unknown class `{s}`"),
        })
    }
}

/// Generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub image_size: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub max_objects: usize,
    pub noise_std: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            image_size: 128,
            min_object_size: 8.0,
            max_object_size: 96.0,
            max_objects: 4,
            noise_std: 0.05,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "data.image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if !(self.min_object_size >= 2.0 && self.max_object_size >= self.min_object_size) {
            return Err(Error::Config("data object sizes must satisfy 2 ≤ min ≤ max".into()));
        }
        if self.max_object_size > self.image_size as f64 {
            return Err(Error::Config("data.max_object_size exceeds the image".into()));
        }
        if self.max_objects == 0 {
            return Err(Error::Config("data.max_objects must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Object {
    pub class: ShapeClass,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    /// 3×H×W, channel-major, values in [0, 1].
    pub pixels: Vec<f32>,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn labeled_boxes(&self) -> Vec<(BBox, usize)> {
        self.objects.iter().map(|o| (o.bbox, o.class.label())).collect()
    }
}

/// Draws one scene. Objects never overlap, so each mask is fully visible
/// and its box is the mask's tight pixel bounds.
pub fn generate_scene(id: usize, spec: &DataSpec, rng: &mut impl Rng) -> Scene {
    let n = spec.image_size;
    let count = rng.random_range(1..=spec.max_objects);
    let (lo, hi) = (spec.min_object_size.ln(), spec.max_object_size.ln());
    let background: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let mut occupied = BinaryMask::new(n, n);
    let mut objects = Vec::new();
    let mut colors = Vec::new();
    for _ in 0..count {
        let class = ShapeClass::ALL[rng.random_range(0..3)];
        let size = rng.random_range(lo..=hi).exp();
        let mut placed = None;
        for _ in 0..20 {
            let cx = rng.random_range(size / 2.0..=n as f64 - size / 2.0);
            let cy = rng.random_range(size / 2.0..=n as f64 - size / 2.0);
            let mut mask = BinaryMask::new(n, n);
            let mut clash = false;
            for y in 0..n {
                for x in 0..n {
                    if class.contains(cx, cy, size, x as f64 + 0.5, y as f64 + 0.5) {
                        clash |= occupied.get(x, y);
                        mask.set(x, y, true);
                    }
                }
            }
            // margin keeps neighbouring shapes apart by a pixel
            let bounds = mask.bounds();
            if let (false, Some(b)) = (clash, bounds) {
                let touches = objects
                    .iter()
                    .any(|o: &Object| b.x1 - 1.0 < o.bbox.x2 && o.bbox.x1 < b.x2 + 1.0 && b.y1 - 1.0 < o.bbox.y2 && o.bbox.y1 < b.y2 + 1.0);
                if !touches {
                    placed = Some((mask, b));
                    break;
                }
            }
        }
        let Some((mask, bbox)) = placed else { continue };
        for (o, &m) in occupied.data.iter_mut().zip(&mask.data) {
            *o |= m;
        }
        let color = loop {
            let c: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let dist: f64 = c.iter().zip(&background).map(|(a, b)| (a - b).abs()).sum();
            if dist > 0.6 {
                break c;
            }
        };
        colors.push(color);
        objects.push(Object { class, bbox, mask });
    }
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut pixels = vec![0f32; 3 * n * n];
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let base = objects
                    .iter()
                    .zip(&colors)
                    .find(|(o, _)| o.mask.get(x, y))
                    .map_or(background[c], |(_, col)| col[c]);
                let v = if spec.noise_std > 0.0 { base + noise.sample(rng) } else { base };
                pixels[(c * n + y) * n + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Scene {
        id,
        width: n,
        height: n,
        pixels,
        objects,
    }
}

/// Scene `i` depends only on `(seed, i)`.
pub fn generate_dataset(n_images: usize, seed: u64, spec: &DataSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    Ok((0..n_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_scene(i, spec, &mut rng)
        })
        .collect())
}

/// Run-length encoding over row-major pixels: comma-separated run lengths,
/// alternating unset/set and starting with unset (possibly 0).
pub fn rle_encode(mask: &BinaryMask) -> String {
    let mut out = String::new();
    let mut current = false;
    let mut run = 0usize;
    for &v in &mask.data {
        if (v != 0) == current {
            run += 1;
        } else {
            write!(out, "{run},").expect("write to String");
            current = !current;
            run = 1;
        }
    }
    write!(out, "{run}").expect("write to String");
    out
}

pub fn rle_decode(s: &str, width: usize, height: usize) -> Result<BinaryMask> {
    let bad = |reason: String| Error::Format { what: "mask RLE", reason };
    let mut mask = BinaryMask::new(width, height);
    let mut pos = 0usize;
    for (i, tok) in s.split(',').enumerate() {
        let run: usize = tok.parse().map_err(|_| bad(format!("bad run `{tok}`")))?;
        if pos + run > mask.data.len() {
            return Err(bad("runs exceed the image".into()));
        }
        if i % 2 == 1 {
            mask.data[pos..pos + run].fill(1);
        }
        pos += run;
    }
    if pos != mask.data.len() {
        return Err(bad(format!("runs cover {pos} of {} pixels", mask.data.len())));
    }
    Ok(mask)
}

pub fn format_annotations(scenes: &[Scene]) -> String {
    let mut out = format!("{HEADER}\n");
    for s in scenes {
        writeln!(out, "image {} {} {}", s.id, s.width, s.height).expect("write to String");
        for o in &s.objects {
            let [x1, y1, x2, y2] = o.bbox.to_array();
            writeln!(
                out,
                "object {} {} {x1} {y1} {x2} {y2} {}",
                s.id,
                o.class.name(),
                rle_encode(&o.mask)
            )
            .expect("write to String");
        }
    }
    out
}

pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<Record> = scenes
        .iter()
        .map(|s| Record {
            name: format!("image.{}", s.id),
            shape: vec![3, s.height, s.width],
            values: s.pixels.clone(),
        })
        .collect();
    serialize::save(&dir.join(IMAGES_FILE), &records)?;
    let path = dir.join(ANNOTATIONS_FILE);
    fs::write(&path, format_annotations(scenes)).map_err(|e| Error::io(&path, e))
}

fn parse_num<T: FromStr>(tok: Option<&str>, line: usize) -> Result<T> {
    tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Format {
        what: "annotation",
        reason: format!("line {line}: missing or malformed field"),
    })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let records = serialize::load(&dir.join(IMAGES_FILE))?;
    let path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut scenes: Vec<Scene> = Vec::new();
    for (ln, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split_ascii_whitespace();
        match f.next() {
            Some("image") => {
                let id: usize = parse_num(f.next(), ln)?;
                let width = parse_num(f.next(), ln)?;
                let height = parse_num(f.next(), ln)?;
                if id != scenes.len() {
                    return Err(Error::Format {
                        what: "annotation",
                        reason: format!("line {ln}: image ids must be 0, 1, 2, …"),
                    });
                }
                scenes.push(Scene {
                    id,
                    width,
                    height,
                    pixels: Vec::new(),
                    objects: Vec::new(),
                });
            }
            Some("object") => {
                let id: usize = parse_num(f.next(), ln)?;
                let class: ShapeClass = f.next().unwrap_or("").parse()?;
                let c: [f64; 4] = [
                    parse_num(f.next(), ln)?,
                    parse_num(f.next(), ln)?,
                    parse_num(f.next(), ln)?,
                    parse_num(f.next(), ln)?,
                ];
                let scene = scenes.get_mut(id).ok_or_else(|| Error::Format {
                    what: "annotation",
                    reason: format!("line {ln}: object before its image"),
                })?;
                let mask = rle_decode(f.next().unwrap_or(""), scene.width, scene.height)?;
                scene.objects.push(Object {
                    class,
                    bbox: BBox::new(c[0], c[1], c[2], c[3]),
                    mask,
                });
            }
            other => {
                return Err(Error::Format {
                    what: "annotation",
                    reason: format!("line {ln}: unknown record {other:?}"),
                })
            }
        }
    }
    if records.len() != scenes.len() {
        return Err(Error::Format {
            what: "dataset",
            reason: format!("{} images but {} annotation records", records.len(), scenes.len()),
        });
    }
    for (s, r) in scenes.iter_mut().zip(records) {
        if r.name != format!("image.{}", s.id) || r.shape != [3, s.height, s.width] {
            return Err(Error::Format {
                what: "dataset",
                reason: format!("image record `{}` does not match annotations", r.name),
            });
        }
        s.pixels = r.values;
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_round_trip() {
        let mut m = BinaryMask::new(5, 3);
        m.set(0, 0, true);
        m.set(4, 2, true);
        m.set(2, 1, true);
        let s = rle_encode(&m);
        assert_eq!(s, "0,1,6,1,6,1");
        assert_eq!(rle_decode(&s, 5, 3).unwrap(), m);
        assert!(rle_decode("3,2", 5, 3).is_err());
    }

    #[test]
    fn boxes_are_mask_bounds() {
        let scenes = generate_dataset(10, 3, &DataSpec::default()).unwrap();
        for s in &scenes {
            assert!(!s.objects.is_empty());
            for o in &s.objects {
                assert_eq!(o.mask.bounds().unwrap(), o.bbox);
            }
        }
    }
}
