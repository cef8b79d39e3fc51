//! Synthetic multi-label scenes with a controllable co-occurrence process.
//!
//! A scene is an `S x S` grayscale image split into four quadrants. Each
//! present class draws its glyph at a random offset inside a random
//! quadrant, scaled by the class contrast; Gaussian noise is added and the
//! result clamped to `[0, 1]`. Labels come from a small generative process:
//! independent anchors, directed couplings `A -> B` that switch `B` on with
//! probability `rho` when `A` is present, and a solo probability for coupled
//! partners whose sources are all absent.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::patching::resize_bilinear;
use crate::rng::{indexed_stream, substream};

pub const DATASET_MAGIC: &[u8; 4] = b"PATD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphAtlas {
    /// Sprite side `G`.
    pub glyph: usize,
    /// Row-major `G x G` intensities in `[0, 1]`, one per class.
    pub sprites: Vec<Vec<f64>>,
    pub contrast: Vec<f64>,
}

const COARSE: usize = 4;
const MAX_SPRITE_ATTEMPTS: u64 = 10_000;

fn binarize(s: &[f64]) -> impl Iterator<Item = bool> + '_ {
    s.iter().map(|&v| v > 0.5)
}

fn hamming(a: &[f64], b: &[f64]) -> usize {
    binarize(a).zip(binarize(b)).filter(|(x, y)| x != y).count()
}

impl GlyphAtlas {
    /// Smooth random blobs: a `4 x 4` grid of uniform values upsampled
    /// bilinearly to `G x G` and sharpened. Sprites are rejected until they
    /// cover between a quarter and three quarters of the footprint and
    /// differ from every earlier sprite in at least `G^2 / 8` binarized
    /// pixels.
    pub fn generate(seed: u64, glyph: usize, contrast: Vec<f64>) -> Result<Self> {
        if glyph < 2 {
            return Err(Error::Config("glyph side must be at least 2".into()));
        }
        if contrast.iter().any(|&c| !(c > 0.0 && c <= 1.0)) {
            return Err(Error::Config("glyph contrast must lie in (0, 1]".into()));
        }
        let area = glyph * glyph;
        let mut sprites: Vec<Vec<f64>> = Vec::with_capacity(contrast.len());
        for class in 0..contrast.len() {
            let mut accepted = None;
            for attempt in 0..MAX_SPRITE_ATTEMPTS {
                let mut rng = indexed_stream(seed, &format!("glyph/{class}"), attempt);
                let coarse: Vec<f64> = (0..COARSE * COARSE).map(|_| rng.random::<f64>()).collect();
                let sprite: Vec<f64> = resize_bilinear(&coarse, COARSE, COARSE, glyph, glyph)
                    .into_iter()
                    .map(|v| ((v - 0.5) * 3.0 + 0.5).clamp(0.0, 1.0))
                    .collect();
                let on = binarize(&sprite).filter(|&b| b).count();
                if on * 4 < area || on * 4 > 3 * area {
                    continue;
                }
                if sprites.iter().all(|s| hamming(s, &sprite) * 8 >= area) {
                    accepted = Some(sprite);
                    break;
                }
            }
            sprites.push(accepted.ok_or_else(|| {
                Error::Generation(format!("could not find a distinct sprite for class {class}"))
            })?);
        }
        Ok(Self {
            glyph,
            sprites,
            contrast,
        })
    }

    pub fn classes(&self) -> usize {
        self.sprites.len()
    }

    pub fn min_pairwise_hamming(&self) -> Option<usize> {
        let n = self.sprites.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| hamming(&self.sprites[i], &self.sprites[j]))
            .min()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub from: usize,
    pub to: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceSpec {
    pub anchor_prob: Vec<f64>,
    pub couplings: Vec<Coupling>,
    /// Probability that a coupling target appears when none of its sources
    /// is present. Ignored for classes that are not coupling targets.
    pub solo_prob: Vec<f64>,
    pub max_objects: usize,
}

impl CooccurrenceSpec {
    pub fn classes(&self) -> usize {
        self.anchor_prob.len()
    }

    /// Independent anchors only.
    pub fn independent(anchor_prob: Vec<f64>, max_objects: usize) -> Self {
        let q = anchor_prob.len();
        Self {
            anchor_prob,
            couplings: Vec::new(),
            solo_prob: vec![0.0; q],
            max_objects,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.classes();
        if q == 0 {
            return Err(Error::Config("spec needs at least one class".into()));
        }
        if self.solo_prob.len() != q {
            return Err(Error::Config("solo_prob length differs from class count".into()));
        }
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !self.anchor_prob.iter().chain(&self.solo_prob).all(|&p| unit(p)) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        for c in &self.couplings {
            if c.from >= q || c.to >= q || c.from == c.to || !unit(c.rho) {
                return Err(Error::Config(format!("invalid coupling {c:?}")));
            }
        }
        if self.max_objects == 0 {
            return Err(Error::Config("max_objects must be at least 1".into()));
        }
        self.topological_order().map(|_| ())
    }

    /// Classes ordered so every coupling source precedes its target.
    fn topological_order(&self) -> Result<Vec<usize>> {
        let q = self.classes();
        let mut indegree = vec![0usize; q];
        for c in &self.couplings {
            indegree[c.to] += 1;
        }
        let mut ready: Vec<usize> = (0..q).filter(|&k| indegree[k] == 0).rev().collect();
        let mut order = Vec::with_capacity(q);
        while let Some(k) = ready.pop() {
            order.push(k);
            for c in self.couplings.iter().filter(|c| c.from == k) {
                indegree[c.to] -= 1;
                if indegree[c.to] == 0 {
                    ready.push(c.to);
                }
            }
        }
        if order.len() != q {
            return Err(Error::Config("coupling graph has a cycle".into()));
        }
        Ok(order)
    }

    pub fn is_target(&self, class: usize) -> bool {
        self.couplings.iter().any(|c| c.to == class)
    }

    /// True when some coupling makes `P(B | A) > 0.2` by itself.
    pub fn has_strong_pair(&self) -> bool {
        self.couplings.iter().any(|c| c.rho > 0.2)
    }
}

/// Draws one label vector.
///
/// Anchors are Bernoulli; couplings fire in topological order from any
/// present source; targets with no present source get their solo draw.
/// Vectors with more than `max_objects` classes keep the lowest class
/// indices.
pub fn sample_label_vector<R: Rng + ?Sized>(spec: &CooccurrenceSpec, rng: &mut R) -> Vec<u8> {
    let q = spec.classes();
    let mut present: Vec<bool> = spec
        .anchor_prob
        .iter()
        .map(|&a| a > 0.0 && rng.random::<f64>() < a)
        .collect();
    let order = spec.topological_order().expect("validated spec");
    for &k in &order {
        if !present[k] {
            continue;
        }
        for c in spec.couplings.iter().filter(|c| c.from == k) {
            if !present[c.to] && c.rho > 0.0 && rng.random::<f64>() < c.rho {
                present[c.to] = true;
            }
        }
    }
    for k in 0..q {
        if present[k] || !spec.is_target(k) {
            continue;
        }
        let source_present = spec.couplings.iter().any(|c| c.to == k && present[c.from]);
        let s = spec.solo_prob[k];
        if !source_present && s > 0.0 && rng.random::<f64>() < s {
            present[k] = true;
        }
    }
    let mut kept = 0;
    present
        .into_iter()
        .map(|p| {
            if p && kept < spec.max_objects {
                kept += 1;
                1
            } else {
                0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub class: usize,
    /// 0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right.
    pub quadrant: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneExample {
    /// Row-major `S x S` pixels in `[0, 1]`, rounded to `f32` precision.
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
    /// Empty for examples read back from disk.
    pub placements: Vec<Placement>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub side: usize,
    pub noise_sd: f64,
    /// Allow more than four objects by sharing quadrants.
    pub allow_colocation: bool,
}

pub fn quadrant_origin(side: usize, quadrant: usize) -> (usize, usize) {
    let half = side / 2;
    ((quadrant / 2) * half, (quadrant % 2) * half)
}

pub fn render_scene<R: Rng + ?Sized>(
    labels: &[u8],
    atlas: &GlyphAtlas,
    rng: &mut R,
    cfg: &RenderConfig,
) -> Result<SceneExample> {
    let side = cfg.side;
    let half = side / 2;
    if side % 2 != 0 || atlas.glyph > half {
        return Err(Error::Config(format!(
            "glyph {} does not fit a quadrant of a {side}x{side} scene",
            atlas.glyph
        )));
    }
    if labels.len() != atlas.classes() {
        return Err(Error::Shape("label vector length differs from atlas".into()));
    }
    let present: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] != 0).collect();
    if present.len() > 4 && !cfg.allow_colocation {
        return Err(Error::Generation(format!(
            "{} objects but only 4 quadrants and co-location disabled",
            present.len()
        )));
    }
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(rng);
    let mut image = vec![0.0f64; side * side];
    let mut placements = Vec::with_capacity(present.len());
    let span = half - atlas.glyph;
    for (i, &class) in present.iter().enumerate() {
        let quadrant = if i < 4 { quadrants[i] } else { rng.random_range(0..4) };
        let row = rng.random_range(0..=span);
        let col = rng.random_range(0..=span);
        let (r0, c0) = quadrant_origin(side, quadrant);
        let sprite = &atlas.sprites[class];
        let c = atlas.contrast[class];
        for gr in 0..atlas.glyph {
            let base = (r0 + row + gr) * side + c0 + col;
            for gc in 0..atlas.glyph {
                image[base + gc] += c * sprite[gr * atlas.glyph + gc];
            }
        }
        placements.push(Placement {
            class,
            quadrant,
            row,
            col,
        });
    }
    if cfg.noise_sd > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sd)
            .map_err(|e| Error::Config(format!("noise sd: {e}")))?;
        for px in image.iter_mut() {
            *px += normal.sample(rng);
        }
    }
    for px in image.iter_mut() {
        *px = f64::from(px.clamp(0.0, 1.0) as f32);
    }
    Ok(SceneExample {
        image,
        labels: labels.to_vec(),
        placements,
    })
}

/// Everything needed to regenerate a benchmark from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub spec: CooccurrenceSpec,
    pub render: RenderConfig,
    pub glyph: usize,
    pub contrast: Vec<f64>,
}

/// Low contrast used for the coupled partners of the default benchmark.
pub const HARD_CONTRAST: f64 = 0.15;

impl SynthConfig {
    /// `S = 64`, `G = 16`, ten classes. Classes 0, 2 and 4 each couple to
    /// a low-contrast partner (1, 3, 5) with `rho = 0.9`; classes 6..9 are
    /// independent.
    pub fn default_benchmark() -> Self {
        let q = 10;
        let mut anchor_prob = vec![0.25; q];
        let mut solo_prob = vec![0.0; q];
        let mut contrast = vec![1.0; q];
        let mut couplings = Vec::new();
        for (a, b) in [(0, 1), (2, 3), (4, 5)] {
            anchor_prob[b] = 0.0;
            solo_prob[b] = 0.1;
            contrast[b] = HARD_CONTRAST;
            couplings.push(Coupling { from: a, to: b, rho: 0.9 });
        }
        Self {
            spec: CooccurrenceSpec {
                anchor_prob,
                couplings,
                solo_prob,
                max_objects: 4,
            },
            render: RenderConfig {
                side: 64,
                noise_sd: 0.05,
                allow_colocation: false,
            },
            glyph: 16,
            contrast,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.contrast.len() != self.spec.classes() {
            return Err(Error::Config("contrast length differs from class count".into()));
        }
        if self.render.side % 2 != 0 || self.glyph > self.render.side / 2 || self.glyph < 2 {
            return Err(Error::Config("glyph must fit in a quadrant of an even-sided scene".into()));
        }
        if !(self.render.noise_sd >= 0.0 && self.render.noise_sd.is_finite()) {
            return Err(Error::Config("noise sd must be nonnegative".into()));
        }
        if self.spec.max_objects > 4 && !self.render.allow_colocation {
            return Err(Error::Config("max_objects > 4 needs co-location".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self, map: &mut KvMap) {
        let s = &self.spec;
        map.insert("anchor_prob".into(), kv::join(&s.anchor_prob));
        map.insert("solo_prob".into(), kv::join(&s.solo_prob));
        map.insert(
            "couplings".into(),
            s.couplings
                .iter()
                .map(|c| format!("{}>{}:{}", c.from, c.to, c.rho))
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("max_objects".into(), s.max_objects.to_string());
        map.insert("side".into(), self.render.side.to_string());
        map.insert("noise_sd".into(), self.render.noise_sd.to_string());
        map.insert("colocation".into(), self.render.allow_colocation.to_string());
        map.insert("glyph".into(), self.glyph.to_string());
        map.insert("contrast".into(), kv::join(&self.contrast));
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let couplings = map
            .get("couplings")
            .map(String::as_str)
            .unwrap_or("")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(parse_coupling)
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            spec: CooccurrenceSpec {
                anchor_prob: kv::split(&kv::get::<String>(map, "anchor_prob")?)?,
                couplings,
                solo_prob: kv::split(&kv::get::<String>(map, "solo_prob")?)?,
                max_objects: kv::get(map, "max_objects")?,
            },
            render: RenderConfig {
                side: kv::get(map, "side")?,
                noise_sd: kv::get(map, "noise_sd")?,
                allow_colocation: kv::get(map, "colocation")?,
            },
            glyph: kv::get(map, "glyph")?,
            contrast: kv::split(&kv::get::<String>(map, "contrast")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `from>to:rho`.
pub fn parse_coupling(s: &str) -> Result<Coupling> {
    let bad = || Error::Config(format!("bad coupling '{s}', expected from>to:rho"));
    let (pair, rho) = s.trim().split_once(':').ok_or_else(bad)?;
    let (from, to) = pair.split_once('>').ok_or_else(bad)?;
    Ok(Coupling {
        from: from.trim().parse().map_err(|_| bad())?,
        to: to.trim().parse().map_err(|_| bad())?,
        rho: rho.trim().parse().map_err(|_| bad())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub seed: u64,
    pub side: usize,
    pub classes: usize,
    pub examples: Vec<SceneExample>,
    /// Generator settings; `None` when read without a manifest.
    pub config: Option<SynthConfig>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `(n, S*S)` pixel matrix of the selected examples.
    pub fn pixels(&self, indices: &[usize]) -> Array2<f64> {
        let d = self.side * self.side;
        let mut out = Array2::zeros((indices.len(), d));
        for (row, &i) in indices.iter().enumerate() {
            out.row_mut(row)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&self.examples[i].image);
        }
        out
    }

    /// `(n, q)` label matrix of every example.
    pub fn label_matrix(&self) -> Array2<u8> {
        let mut out = Array2::zeros((self.len(), self.classes));
        for (i, ex) in self.examples.iter().enumerate() {
            for (k, &y) in ex.labels.iter().enumerate() {
                out[[i, k]] = y;
            }
        }
        out
    }

    pub fn positives_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for ex in &self.examples {
            for (k, &y) in ex.labels.iter().enumerate() {
                counts[k] += usize::from(y != 0);
            }
        }
        counts
    }

    /// Empirical `P(b present | a present)`; `None` when `a` never occurs.
    pub fn conditional(&self, a: usize, b: usize) -> Option<f64> {
        let with_a = self.examples.iter().filter(|e| e.labels[a] != 0);
        let (mut n_a, mut n_ab) = (0usize, 0usize);
        for e in with_a {
            n_a += 1;
            n_ab += usize::from(e.labels[b] != 0);
        }
        (n_a > 0).then(|| n_ab as f64 / n_a as f64)
    }

    pub fn manifest(&self) -> KvMap {
        let mut map = KvMap::new();
        map.insert("format".into(), "PATD".into());
        map.insert("version".into(), DATASET_VERSION.to_string());
        map.insert("split".into(), self.split.name().into());
        map.insert("seed".into(), self.seed.to_string());
        map.insert("n".into(), self.len().to_string());
        map.insert("classes".into(), self.classes.to_string());
        if let Some(cfg) = &self.config {
            cfg.to_kv(&mut map);
        } else {
            map.insert("side".into(), self.side.to_string());
        }
        map
    }
}

/// Generates reproducible train and test splits.
///
/// The glyph atlas comes from the `atlas` substream of `seed`; example `i`
/// of a split uses its own counter-indexed stream, so splits never share
/// random draws and the output does not depend on generation order.
pub fn generate_dataset(
    cfg: &SynthConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("both splits need at least one example".into()));
    }
    let atlas_seed = substream(seed, "atlas").random::<u64>();
    let atlas = GlyphAtlas::generate(atlas_seed, cfg.glyph, cfg.contrast.clone())?;
    let make = |split: Split, n: usize| -> Result<Dataset> {
        let label = format!("data/{}", split.name());
        let examples = (0..n)
            .map(|i| {
                let mut rng = indexed_stream(seed, &label, i as u64);
                let labels = sample_label_vector(&cfg.spec, &mut rng);
                render_scene(&labels, &atlas, &mut rng, &cfg.render)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            split,
            seed,
            side: cfg.render.side,
            classes: cfg.spec.classes(),
            examples,
            config: Some(cfg.clone()),
        })
    };
    Ok((make(Split::Train, n_train)?, make(Split::Test, n_test)?))
}

pub fn manifest_path(dsb: &Path) -> PathBuf {
    dsb.with_extension("manifest")
}

/// Writes `path` (binary) and its `.manifest` sidecar.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    for v in [DATASET_VERSION, ds.len() as u32, ds.side as u32, ds.classes as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for ex in &ds.examples {
        w.write_all(&ex.labels)?;
        for &px in &ex.image {
            w.write_all(&(px as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    fs::write(manifest_path(path), kv::format(&ds.manifest()))?;
    Ok(())
}

/// Reads a `.dsb` file; the sidecar manifest is used when present.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format(format!("{} is not a PATD dataset", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let (n, side, classes) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let per = classes + 4 * side * side;
    if bytes.len() != 20 + n * per {
        return Err(Error::Format("dataset size does not match header".into()));
    }
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[20 + i * per..20 + (i + 1) * per];
        let labels = rec[..classes].to_vec();
        let image = rec[classes..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        examples.push(SceneExample {
            image,
            labels,
            placements: Vec::new(),
        });
    }
    let manifest = manifest_path(path);
    let (split, seed, config) = if manifest.exists() {
        let map = kv::parse(&fs::read_to_string(&manifest)?)?;
        let config = if map.contains_key("anchor_prob") {
            Some(SynthConfig::from_kv(&map)?)
        } else {
            None
        };
        (Split::parse(&kv::get::<String>(&map, "split")?)?, kv::get(&map, "seed")?, config)
    } else {
        (Split::Test, 0, None)
    };
    Ok(Dataset {
        split,
        seed,
        side,
        classes,
        examples,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            spec: CooccurrenceSpec {
                anchor_prob: vec![0.5, 0.0, 0.3],
                couplings: vec![Coupling { from: 0, to: 1, rho: 0.9 }],
                solo_prob: vec![0.0, 0.05, 0.0],
                max_objects: 4,
            },
            render: RenderConfig {
                side: 16,
                noise_sd: 0.05,
                allow_colocation: false,
            },
            glyph: 8,
            contrast: vec![1.0, 0.15, 1.0],
        }
    }

    #[test]
    fn atlas_sprites_are_distinct() {
        let atlas = GlyphAtlas::generate(9, 16, vec![1.0; 10]).unwrap();
        assert!(atlas.min_pairwise_hamming().unwrap() >= 16 * 16 / 8);
        assert!(atlas.sprites.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(atlas, GlyphAtlas::generate(9, 16, vec![1.0; 10]).unwrap());
        assert!(GlyphAtlas::generate(9, 16, vec![0.0]).is_err());
    }

    #[test]
    fn degenerate_specs() {
        let mut rng = substream(1, "t");
        let zero = CooccurrenceSpec {
            anchor_prob: vec![0.0; 3],
            couplings: vec![Coupling { from: 0, to: 1, rho: 0.5 }],
            solo_prob: vec![0.0; 3],
            max_objects: 4,
        };
        let both = CooccurrenceSpec {
            anchor_prob: vec![1.0, 0.0],
            couplings: vec![Coupling { from: 0, to: 1, rho: 1.0 }],
            solo_prob: vec![0.0; 2],
            max_objects: 4,
        };
        for _ in 0..200 {
            assert_eq!(sample_label_vector(&zero, &mut rng), vec![0, 0, 0]);
            assert_eq!(sample_label_vector(&both, &mut rng), vec![1, 1]);
        }
    }

    #[test]
    fn truncation_keeps_lowest_indices() {
        let spec = CooccurrenceSpec::independent(vec![1.0; 6], 4);
        let mut rng = substream(2, "t");
        assert_eq!(sample_label_vector(&spec, &mut rng), vec![1, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = tiny_cfg().spec;
        spec.validate().unwrap();
        assert!(spec.has_strong_pair());
        spec.couplings.push(Coupling { from: 1, to: 0, rho: 0.5 });
        assert!(spec.validate().is_err());
        let mut spec = tiny_cfg().spec;
        spec.anchor_prob[0] = 1.5;
        assert!(spec.validate().is_err());
        assert!(!CooccurrenceSpec::independent(vec![0.5; 2], 2).has_strong_pair());
    }

    #[test]
    fn render_edge_cases() {
        let atlas = GlyphAtlas::generate(3, 8, vec![1.0, 0.15, 1.0, 1.0, 1.0]).unwrap();
        let clean = RenderConfig {
            side: 16,
            noise_sd: 0.0,
            allow_colocation: false,
        };
        let mut rng = substream(4, "t");
        let empty = render_scene(&[0; 5], &atlas, &mut rng, &clean).unwrap();
        assert!(empty.image.iter().all(|&v| v == 0.0));

        for _ in 0..50 {
            let ex = render_scene(&[0, 0, 1, 0, 0], &atlas, &mut rng, &clean).unwrap();
            let p = ex.placements[0];
            let (r0, c0) = quadrant_origin(16, p.quadrant);
            for r in 0..16 {
                for c in 0..16 {
                    let inside = (r0 + p.row..r0 + p.row + 8).contains(&r)
                        && (c0 + p.col..c0 + p.col + 8).contains(&c);
                    if !inside {
                        assert_eq!(ex.image[r * 16 + c], 0.0);
                    } else {
                        let v = atlas.sprites[2][(r - r0 - p.row) * 8 + (c - c0 - p.col)];
                        assert_eq!(ex.image[r * 16 + c], f64::from(v as f32));
                    }
                }
            }
        }

        let err = render_scene(&[1; 5], &atlas, &mut rng, &clean).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
        let coloc = RenderConfig {
            allow_colocation: true,
            ..clean
        };
        let ex = render_scene(&[1; 5], &atlas, &mut rng, &coloc).unwrap();
        assert_eq!(ex.placements.len(), 5);
        assert!(ex.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn labels_match_placements_and_pixels_are_clamped() {
        let (train, test) = generate_dataset(&tiny_cfg(), 200, 50, 17).unwrap();
        for ex in train.examples.iter().chain(&test.examples) {
            let mut drawn = vec![0u8; 3];
            for p in &ex.placements {
                drawn[p.class] = 1;
            }
            assert_eq!(drawn, ex.labels);
            assert!(ex.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let quads: Vec<_> = ex.placements.iter().map(|p| p.quadrant).collect();
            let mut dedup = quads.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), quads.len());
        }
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let (a, b) = generate_dataset(&tiny_cfg(), 30, 30, 5).unwrap();
        let (c, _) = generate_dataset(&tiny_cfg(), 30, 30, 5).unwrap();
        assert_eq!(a, c);
        assert_ne!(a.examples, b.examples);
        let (d, _) = generate_dataset(&tiny_cfg(), 30, 30, 6).unwrap();
        assert_ne!(a.examples, d.examples);
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = generate_dataset(&tiny_cfg(), 20, 5, 8).unwrap();
        let p = dir.path().join("train.dsb");
        save_dataset(&train, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.config, train.config);
        assert_eq!(back.seed, 8);
        assert_eq!(back.split, Split::Train);
        for (x, y) in back.examples.iter().zip(&train.examples) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.labels, y.labels);
        }
        let bytes1 = fs::read(&p).unwrap();
        let p2 = dir.path().join("again.dsb");
        save_dataset(&back, &p2).unwrap();
        assert_eq!(bytes1, fs::read(&p2).unwrap());

        let mut corrupt = bytes1.clone();
        corrupt[4] = 9;
        fs::write(&p2, &corrupt).unwrap();
        assert!(matches!(load_dataset(&p2), Err(Error::Format(_))));
    }
}
