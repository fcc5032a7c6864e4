//! Captioned image corpora: a procedural shapes generator and a folder
//! ingester, both described by a JSON-lines manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wurstkit_tensor::{Scalar, Tensor};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [f32; 3],
}

fn color(name: &str, rgb: [f32; 3]) -> NamedColor {
    NamedColor { name: name.into(), rgb }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Radius range as a fraction of the image side.
    fn radius_range(self) -> (f64, f64) {
        match self {
            Size::Small => (0.12, 0.18),
            Size::Large => (0.24, 0.32),
        }
    }
}

/// Vocabularies and sizes for the procedural corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub colors: Vec<NamedColor>,
    pub shapes: Vec<Shape>,
    pub sizes: Vec<Size>,
    pub backgrounds: Vec<NamedColor>,
    pub count: usize,
    pub image_size: usize,
    /// Probability that a caption mentions the size, and separately the background.
    pub detail_probability: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            colors: vec![
                color("red", [0.9, 0.1, 0.1]),
                color("green", [0.1, 0.75, 0.2]),
                color("blue", [0.1, 0.2, 0.9]),
                color("yellow", [0.95, 0.85, 0.1]),
            ],
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            sizes: vec![Size::Small, Size::Large],
            backgrounds: vec![
                color("white", [0.95, 0.95, 0.95]),
                color("black", [0.05, 0.05, 0.05]),
                color("gray", [0.5, 0.5, 0.5]),
            ],
            count: 1000,
            image_size: 64,
            detail_probability: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.colors.is_empty() || self.shapes.is_empty() || self.sizes.is_empty() || self.backgrounds.is_empty() {
            return Err(Error::Config("synthetic corpus vocabularies must be non-empty".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("synthetic image size must be >= 8".into()));
        }
        if !(0.0..=1.0).contains(&self.detail_probability) {
            return Err(Error::Config("detail_probability must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Number of (color, shape) classes.
    pub fn num_classes(&self) -> usize {
        self.colors.len() * self.shapes.len()
    }
}

/// Parameters that fully determine one rendered image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeScene {
    pub color: NamedColor,
    pub shape: Shape,
    pub size: Size,
    pub background: NamedColor,
    pub center: [f64; 2],
    pub radius: f64,
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Source {
    Synth(ShapeScene),
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: usize,
    pub caption: String,
    /// Class label for the feature extractor, when known.
    pub class: Option<usize>,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
}

/// Fraction of each sample's pixel covered by the shape, estimated with a
/// 4x4 supersampling grid.
fn coverage(scene: &ShapeScene, px: usize, py: usize) -> f64 {
    const SS: usize = 4;
    let mut hit = 0;
    for sy in 0..SS {
        for sx in 0..SS {
            let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
            let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
            if inside(scene, x, y) {
                hit += 1;
            }
        }
    }
    hit as f64 / (SS * SS) as f64
}

fn inside(scene: &ShapeScene, x: f64, y: f64) -> bool {
    let (cx, cy, r) = (scene.center[0], scene.center[1], scene.radius);
    let (dx, dy) = (x - cx, y - cy);
    match scene.shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => {
            let h = r * 0.85;
            dx.abs() <= h && dy.abs() <= h
        }
        Shape::Triangle => {
            // upward equilateral triangle inscribed in the circle of radius r
            let top = cy - r;
            let bottom = cy + r * 0.5;
            if y < top || y > bottom {
                return false;
            }
            let half_width = (y - top) / (bottom - top) * r * 3f64.sqrt() / 2.0;
            dx.abs() <= half_width
        }
    }
}

/// Renders a scene to a `[3, S, S]` image.
pub fn render<T: Scalar>(scene: &ShapeScene) -> Tensor<T> {
    let n = scene.image_size;
    let plane = n * n;
    let mut data = vec![T::zero(); 3 * plane];
    for py in 0..n {
        for px in 0..n {
            let a = coverage(scene, px, py);
            for c in 0..3 {
                let v = a * scene.color.rgb[c] as f64 + (1.0 - a) * scene.background.rgb[c] as f64;
                data[c * plane + py * n + px] = T::c(v);
            }
        }
    }
    Tensor::new([3, n, n], data)
}

/// Procedurally generates a corpus. Identical `(spec, seed)` pairs give
/// identical manifests.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_size as f64;
    let mut records = Vec::with_capacity(spec.count);
    for id in 0..spec.count {
        let ci = rng.gen_range(0..spec.colors.len());
        let si = rng.gen_range(0..spec.shapes.len());
        let size = *spec.sizes.choose(&mut rng).expect("non-empty");
        let background = spec.backgrounds.choose(&mut rng).expect("non-empty").clone();
        let (lo, hi) = size.radius_range();
        let radius = rng.gen_range(lo..hi) * s;
        let margin = radius + 1.0;
        let center = [rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin)];
        let color = spec.colors[ci].clone();
        let shape = spec.shapes[si];
        let mut words = Vec::new();
        if rng.gen::<f64>() < spec.detail_probability {
            words.push(size.name().to_string());
        }
        words.push(color.name.clone());
        words.push(shape.name().to_string());
        if rng.gen::<f64>() < spec.detail_probability {
            words.push(format!("on {}", background.name));
        }
        let scene = ShapeScene { color, shape, size, background, center, radius, image_size: spec.image_size };
        records.push(Record {
            id,
            caption: words.join(" "),
            class: Some(ci * spec.shapes.len() + si),
            source: Source::Synth(scene),
        });
    }
    Ok(DatasetManifest { records })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record =
                serde_json::from_str(line).map_err(|e| Error::Config(format!("manifest line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::atomic_write(path, self.to_jsonl()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::from_jsonl(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(m.resolve_relative(base))
    }

    fn resolve_relative(mut self, base: &Path) -> Self {
        for r in &mut self.records {
            if let Source::File { path } = &mut r.source {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        self
    }

    /// Builds a manifest from every `*.png` in a directory (sorted by name),
    /// taking each caption from a sibling `.txt` file if present.
    pub fn ingest_folder(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Precondition(format!("no PNG images in {}", dir.display())));
        }
        let records = paths
            .into_iter()
            .enumerate()
            .map(|(id, path)| {
                let caption = std::fs::read_to_string(path.with_extension("txt")).unwrap_or_default().trim().to_string();
                Record { id, caption, class: None, source: Source::File { path } }
            })
            .collect();
        Ok(Self { records })
    }

    pub fn load_image<T: Scalar>(&self, index: usize) -> Result<Tensor<T>> {
        match &self.records[index].source {
            Source::Synth(scene) => Ok(render(scene)),
            Source::File { path } => crate::image::read_png(path),
        }
    }

    /// Loads the given records as a `[N, 3, H, W]` batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let imgs = indices.iter().map(|&i| self.load_image(i)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&imgs)?)
    }

    pub fn captions(&self, indices: &[usize]) -> Vec<String> {
        indices.iter().map(|&i| self.records[i].caption.clone()).collect()
    }

    /// Record counts per class label.
    pub fn class_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for r in &self.records {
            if let Some(c) = r.class {
                *h.entry(c).or_insert(0) += 1;
            }
        }
        h
    }
}

/// Caches a rendered corpus as one `[N, 3, H, W]` tensor.
pub struct ImageCache<T: Scalar> {
    pub images: Tensor<T>,
    pub captions: Vec<String>,
    pub classes: Vec<Option<usize>>,
}

impl<T: Scalar> ImageCache<T> {
    pub fn build(manifest: &DatasetManifest) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Precondition("empty corpus".into()));
        }
        let idx: Vec<usize> = (0..manifest.len()).collect();
        Ok(Self {
            images: manifest.batch(&idx)?,
            captions: manifest.captions(&idx),
            classes: manifest.records.iter().map(|r| r.class).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor<T> {
        self.images.index0(i)
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor<T> {
        let per = self.images.numel() / self.len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let d = self.images.data();
        let mut out = Vec::with_capacity(per * indices.len());
        for &i in indices {
            out.extend_from_slice(&d[i * per..(i + 1) * per]);
        }
        Tensor::new(shape, out)
    }
}
