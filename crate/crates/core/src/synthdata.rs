//! Procedural fine-grained benchmark. A species fixes the base colour and a
//! faint one-cycle pattern; every image overlays two achromatic gratings of
//! random orientation, frequency and phase. A subcategory adds one small
//! glyph in its own ink at a random position and quarter-turn. Class means
//! separate species; single images are dominated by the gratings, and
//! subcategories differ only in the glyph.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FrptError, Result};
use crate::imageio;
use crate::retrieval::{self, EmbeddingIndex, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    pub n_species: usize,
    pub n_subcats_per_species: usize,
    pub images_per_subcat: usize,
    pub glyph_size: usize,
    pub noise_std: f32,
    /// Amplitude range of each grating.
    pub grating_amplitude: (f32, f32),
    /// Spread of species base colours around mid grey.
    pub colour_spread: f32,
    /// Amplitude of the fixed species pattern.
    pub species_pattern: f32,
    /// Ink offset from the species colour.
    pub glyph_contrast: f32,
    /// Gives every subcategory its own ink colour instead of the species ink.
    pub subcat_ink: bool,
    pub seed: u64,
    /// Species pre-training images per species, and held-out images.
    pub species_train_per_class: usize,
    pub species_heldout_per_class: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_species: 8,
            n_subcats_per_species: 4,
            images_per_subcat: 40,
            glyph_size: 6,
            noise_std: 0.03,
            grating_amplitude: (0.2, 0.3),
            colour_spread: 0.06,
            species_pattern: 0.03,
            glyph_contrast: 0.2,
            subcat_ink: true,
            seed: 7,
            species_train_per_class: 60,
            species_heldout_per_class: 20,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_species, self.n_subcats_per_species, self.images_per_subcat, self.glyph_size];
        if counts.contains(&0) {
            return Err(FrptError::Config("synthetic counts and glyph size must be at least 1".into()));
        }
        if self.glyph_size * 4 >= self.image_size {
            return Err(FrptError::Config(format!(
                "glyph size {} must stay below a quarter of the image size {}",
                self.glyph_size, self.image_size
            )));
        }
        if self.n_species * self.n_subcats_per_species < 2 {
            return Err(FrptError::Config("need at least 2 subcategories to split".into()));
        }
        if !(self.noise_std >= 0.0 && (0.0..0.5).contains(&self.colour_spread)) {
            return Err(FrptError::Config("noise_std must be non-negative and colour_spread in [0, 0.5)".into()));
        }
        let (lo, hi) = self.grating_amplitude;
        if !(0.0 <= lo && lo <= hi) {
            return Err(FrptError::Config(format!("bad grating amplitude range ({lo}, {hi})")));
        }
        Ok(())
    }

    pub fn n_subcats(&self) -> usize {
        self.n_species * self.n_subcats_per_species
    }

    pub fn benchmark_len(&self) -> usize {
        self.n_subcats() * self.images_per_subcat
    }
}

/// Manifest split values.
pub const TRAIN: &str = "train";
pub const TEST: &str = "test";
pub const SPECIES_TRAIN: &str = "species-train";
pub const SPECIES_HELDOUT: &str = "species-heldout";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: String,
    pub species: usize,
    /// Empty for species pre-training images.
    pub subcat: Option<usize>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

pub const MANIFEST: &str = "manifest.csv";

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| FrptError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let entries = r.deserialize().collect::<std::result::Result<Vec<Entry>, _>>().map_err(|e| csv_err(path, e))?;
        Ok(Self { entries })
    }

    pub fn split(&self, split: &str) -> impl Iterator<Item = (usize, &Entry)> + '_ {
        let split = split.to_string();
        self.entries.iter().enumerate().filter(move |(_, e)| e.split == split)
    }

    /// Subcategory ids present anywhere in the benchmark, ascending.
    pub fn subcats(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.entries.iter().filter_map(|e| e.subcat).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Fails if a test subcategory appears in the train split or the two
    /// splits do not follow the canonical first-half rule.
    pub fn check_open_set(&self) -> Result<()> {
        let (train_classes, test_classes) = retrieval::split_dataset(&self.subcats())?;
        for (_, e) in self.split(TRAIN) {
            match e.subcat {
                Some(c) if train_classes.contains(&c) => {}
                other => {
                    return Err(FrptError::Leak(format!("{} in the train split has subcategory {other:?}", e.path)))
                }
            }
        }
        for (_, e) in self.split(TEST) {
            if !e.subcat.is_some_and(|c| test_classes.contains(&c)) {
                return Err(FrptError::Leak(format!("{} in the test split has subcategory {:?}", e.path, e.subcat)));
            }
        }
        Ok(())
    }
}

fn csv_err(path: &Path, e: csv::Error) -> FrptError {
    FrptError::Config(format!("{}: {e}", path.display()))
}

struct Species {
    base: [f32; 3],
    ink: [f32; 3],
    angle: f32,
    phase: f32,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SPECIES_STREAM: u64 = 1 << 40;
const GLYPH_STREAM: u64 = 2 << 40;
const PRETRAIN_STREAM: u64 = 3 << 40;

fn species(spec: &SynthSpec, s: usize) -> Species {
    let mut rng = rng_for(spec.seed, SPECIES_STREAM + s as u64);
    let d = spec.colour_spread;
    // the first eight species sit on the corners of a cube around mid grey
    let base: [f32; 3] = std::array::from_fn(|c| {
        if s < 8 {
            0.5 + if (s >> c) & 1 == 1 { d } else { -d }
        } else if d > 0.0 {
            0.5 + rng.gen_range(-d..d)
        } else {
            0.5
        }
    });
    let lum = base.iter().sum::<f32>() / 3.0;
    let k = spec.glyph_contrast;
    let ink = base.map(|b| if lum > 0.5 { b - k } else { b + k });
    let angle = (s as f32 + rng.gen_range(0.0..0.5)) * PI / spec.n_species as f32;
    Species { base, ink, angle, phase: rng.gen_range(0.0..2.0 * PI) }
}

type Glyph = Vec<Vec<bool>>;

fn rotate(g: &Glyph) -> Glyph {
    let n = g.len();
    (0..n).map(|r| (0..n).map(|c| g[n - 1 - c][r]).collect()).collect()
}

fn rotations(g: &Glyph) -> [Glyph; 4] {
    let r1 = rotate(g);
    let r2 = rotate(&r1);
    let r3 = rotate(&r2);
    [g.clone(), r1, r2, r3]
}

/// One glyph per subcategory, distinct under quarter turns, each filling
/// between a third and two thirds of its cells.
fn glyphs(spec: &SynthSpec) -> Vec<Glyph> {
    let n = spec.glyph_size;
    let mut rng = rng_for(spec.seed, GLYPH_STREAM);
    let mut out: Vec<Glyph> = Vec::new();
    while out.len() < spec.n_subcats() {
        let g: Glyph = (0..n).map(|_| (0..n).map(|_| rng.gen_bool(0.5)).collect()).collect();
        let filled = g.iter().flatten().filter(|&&b| b).count();
        if filled * 3 < n * n || filled * 3 > 2 * n * n {
            continue;
        }
        if out.iter().any(|o| rotations(o).contains(&g)) {
            continue;
        }
        out.push(g);
    }
    out
}

const INK_STREAM: u64 = 4 << 40;

/// The species colour moved by `glyph_contrast` in a random direction,
/// kept apart from the inks in `taken`.
fn random_ink(spec: &SynthSpec, sp: &Species, taken: &[[f32; 3]], rng: &mut ChaCha8Rng) -> [f32; 3] {
    let k = spec.glyph_contrast;
    let dist = |a: &[f32; 3], b: &[f32; 3]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut best = sp.ink;
    for _ in 0..1000 {
        let d: [f32; 3] = std::array::from_fn(|_| normal.sample(rng));
        let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
        let c: [f32; 3] = std::array::from_fn(|i| (sp.base[i] + k * d[i] / norm).clamp(0.0, 1.0));
        best = c;
        if taken.iter().all(|t| dist(&c, t) >= k) {
            break;
        }
    }
    best
}

fn subcat_inks(spec: &SynthSpec, species: &[Species]) -> Vec<[f32; 3]> {
    let mut rng = rng_for(spec.seed, INK_STREAM);
    let mut inks = Vec::with_capacity(spec.n_subcats());
    for sp in species {
        let mut own: Vec<[f32; 3]> = Vec::new();
        for _ in 0..spec.n_subcats_per_species {
            let ink = if spec.subcat_ink { random_ink(spec, sp, &own, &mut rng) } else { sp.ink };
            own.push(ink);
        }
        inks.extend(own);
    }
    inks
}

fn background(spec: &SynthSpec, sp: &Species, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = spec.image_size;
    let (lo, hi) = spec.grating_amplitude;
    let waves: Vec<(f32, f32, f32, f32)> = (0..2)
        .map(|_| {
            let amp = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let angle = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(2.0..5.0) / n as f32;
            (amp, angle, freq, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let (ca, sa) = (sp.angle.cos(), sp.angle.sin());
    let mut img = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let t = (x as f32 * ca + y as f32 * sa) / n as f32;
            let own = spec.species_pattern * (2.0 * PI * t + sp.phase).sin();
            let shade: f32 = waves
                .iter()
                .map(|&(amp, angle, freq, phase)| {
                    amp * (2.0 * PI * freq * (x as f32 * angle.cos() + y as f32 * angle.sin()) + phase).sin()
                })
                .sum::<f32>()
                + own;
            for c in 0..3 {
                img[(c * n + y) * n + x] = sp.base[c] + shade;
            }
        }
    }
    img
}

fn stamp(spec: &SynthSpec, img: &mut [f32], glyph: &Glyph, ink: &[f32; 3], rng: &mut ChaCha8Rng) {
    let n = spec.image_size;
    let g = spec.glyph_size;
    let margin = 2.min((n - g) / 2);
    let turned = &rotations(glyph)[rng.gen_range(0..4)];
    let x0 = rng.gen_range(margin..=n - g - margin);
    let y0 = rng.gen_range(margin..=n - g - margin);
    for (r, row) in turned.iter().enumerate() {
        for (c, &on) in row.iter().enumerate() {
            if !on {
                continue;
            }
            for (ch, &v) in ink.iter().enumerate() {
                img[(ch * n + y0 + r) * n + x0 + c] = v;
            }
        }
    }
}

fn finish(spec: &SynthSpec, mut img: Vec<f32>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("valid std");
        img.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    // stored images are 8-bit; quantize here so memory and disk agree
    img.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    let n = spec.image_size;
    Tensor::new(&[3, n, n], img).expect("image shape")
}

/// Every image of the dataset with its manifest entry, in manifest order:
/// the benchmark grouped by subcategory, then the species set.
pub fn generate(spec: &SynthSpec) -> Result<Vec<(Entry, Tensor<f32>)>> {
    spec.validate()?;
    let all_species: Vec<Species> = (0..spec.n_species).map(|s| species(spec, s)).collect();
    let glyph_set = glyphs(spec);
    let inks = subcat_inks(spec, &all_species);
    let (train_classes, _) = retrieval::split_dataset(&(0..spec.n_subcats()).collect::<Vec<_>>())?;

    let bench = (0..spec.benchmark_len()).into_par_iter().map(|i| {
        let subcat = i / spec.images_per_subcat;
        let s = subcat / spec.n_subcats_per_species;
        let mut rng = rng_for(spec.seed, i as u64);
        let sp = &all_species[s];
        let mut img = background(spec, sp, &mut rng);
        stamp(spec, &mut img, &glyph_set[subcat], &inks[subcat], &mut rng);
        let split = if train_classes.contains(&subcat) { TRAIN } else { TEST };
        let entry = Entry {
            path: format!("images/c{subcat:03}_{:03}.ppm", i % spec.images_per_subcat),
            species: s,
            subcat: Some(subcat),
            split: split.into(),
        };
        (entry, finish(spec, img, &mut rng))
    });
    let per_species = spec.species_train_per_class + spec.species_heldout_per_class;
    let pretrain = (0..spec.n_species * per_species).into_par_iter().map(|i| {
        let s = i / per_species;
        let k = i % per_species;
        let mut rng = rng_for(spec.seed, PRETRAIN_STREAM + i as u64);
        let sp = &all_species[s];
        let mut img = background(spec, sp, &mut rng);
        // an unlabeled random glyph, so glyph-like structure is familiar
        let n = spec.glyph_size;
        let distractor: Glyph = (0..n).map(|_| (0..n).map(|_| rng.gen_bool(0.5)).collect()).collect();
        let ink = if spec.subcat_ink { random_ink(spec, sp, &[], &mut rng) } else { sp.ink };
        stamp(spec, &mut img, &distractor, &ink, &mut rng);
        let split = if k < spec.species_train_per_class { SPECIES_TRAIN } else { SPECIES_HELDOUT };
        let entry = Entry { path: format!("species/s{s:02}_{k:03}.ppm"), species: s, subcat: None, split: split.into() };
        (entry, finish(spec, img, &mut rng))
    });
    let mut out: Vec<(Entry, Tensor<f32>)> = bench.collect();
    out.extend(pretrain.collect::<Vec<_>>());
    Ok(out)
}

/// Writes the images and `manifest.csv` under `out`.
pub fn gen_synthetic(spec: &SynthSpec, out: &Path) -> Result<Manifest> {
    let data = generate(spec)?;
    for sub in ["images", "species"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| FrptError::io(&d, e))?;
    }
    data.par_iter().try_for_each(|(e, img)| imageio::write_ppm(&out.join(&e.path), img))?;
    let manifest = Manifest { entries: data.into_iter().map(|(e, _)| e).collect() };
    manifest.save(&out.join(MANIFEST))?;
    Ok(manifest)
}

/// A dataset directory: its manifest plus lazily read images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = Manifest::load(&root.join(MANIFEST))?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    /// Images of one split labelled by `label`, ids being manifest rows.
    pub fn samples(&self, split: &str, label: impl Fn(&Entry) -> Option<usize> + Sync) -> Result<Vec<Sample>> {
        let rows: Vec<(usize, &Entry)> = self.manifest.split(split).collect();
        rows.par_iter()
            .map(|(id, e)| {
                let label = label(e).ok_or_else(|| FrptError::Structure(format!("{} has no label", e.path)))?;
                Ok(Sample { id: *id, label, image: imageio::read_rgb(&self.root.join(&e.path))? })
            })
            .collect()
    }

    pub fn subcat_samples(&self, split: &str) -> Result<Vec<Sample>> {
        self.samples(split, |e| e.subcat)
    }

    pub fn species_samples(&self, split: &str) -> Result<Vec<Sample>> {
        self.samples(split, |e| Some(e.species))
    }
}

fn flat(samples: &[Sample]) -> Vec<Vec<f32>> {
    samples.iter().map(|s| s.image.data().to_vec()).collect()
}

/// Raw-pixel baselines of a benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawBaselines {
    /// Nearest-neighbour Recall@1 over test subcategories, and its chance level.
    pub subcat_recall1: f64,
    pub subcat_chance: f64,
    /// Nearest-centroid species accuracy over the benchmark, and chance.
    pub species_accuracy: f64,
    pub species_chance: f64,
}

/// Subcategory retrieval on raw pixels over the test split, and species
/// classification by nearest class centroid: centroids from even-indexed
/// images, evaluated on odd-indexed ones.
pub fn raw_baselines(test: &[Sample], all: &[(Sample, usize)], n_species: usize) -> Result<RawBaselines> {
    let index = EmbeddingIndex::new(flat(test), test.iter().map(|s| s.label).collect(), test.iter().map(|s| s.id).collect())?;
    let r = retrieval::recall_at_k(&index, 1)?;
    let mut classes = test.iter().map(|s| s.label).collect::<Vec<_>>();
    classes.sort_unstable();
    classes.dedup();
    let subcat_chance = 1.0 / classes.len() as f64;

    let dim = all.first().map_or(0, |(s, _)| s.image.len());
    let mut sums = vec![vec![0.0f64; dim]; n_species];
    let mut counts = vec![0usize; n_species];
    for (i, (s, sp)) in all.iter().enumerate() {
        if i % 2 == 0 {
            sums[*sp].iter_mut().zip(s.image.data()).for_each(|(a, &v)| *a += v as f64);
            counts[*sp] += 1;
        }
    }
    let centroids: Vec<Vec<f64>> =
        sums.into_iter().zip(&counts).map(|(v, &c)| v.into_iter().map(|x| x / c.max(1) as f64).collect()).collect();
    let (mut right, mut total) = (0usize, 0usize);
    for (s, sp) in all.iter().skip(1).step_by(2) {
        let best = (0..n_species)
            .filter(|&c| counts[c] > 0)
            .map(|c| {
                let d: f64 = centroids[c].iter().zip(s.image.data()).map(|(a, &v)| (a - v as f64).powi(2)).sum();
                (d, c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, c)| c);
        right += usize::from(best == Some(*sp));
        total += 1;
    }
    Ok(RawBaselines {
        subcat_recall1: r.recall,
        subcat_chance,
        species_accuracy: right as f64 / total.max(1) as f64,
        species_chance: 1.0 / n_species as f64,
    })
}

/// Baselines computed straight from generated data.
pub fn raw_baselines_of(spec: &SynthSpec, data: &[(Entry, Tensor<f32>)]) -> Result<RawBaselines> {
    let test: Vec<Sample> = data
        .iter()
        .enumerate()
        .filter(|(_, (e, _))| e.split == TEST)
        .map(|(id, (e, img))| Sample { id, label: e.subcat.unwrap_or(0), image: img.clone() })
        .collect();
    let all: Vec<(Sample, usize)> = data
        .iter()
        .enumerate()
        .filter(|(_, (e, _))| e.subcat.is_some())
        .map(|(id, (e, img))| (Sample { id, label: e.species, image: img.clone() }, e.species))
        .collect();
    raw_baselines(&test, &all, spec.n_species)
}
